from .numerics import (
    Tensor, DenseMatrix, SparseMatrix, GradientTape, AdamState, Adam,
    parameter, dense_matmul, sparse_dense_matmul, relu, sigmoid, softplus,
    adam_step, check_gradient,
)
from .graph import FieldSchema, NodeIndexer, NPartiteGraph, build_graph, normalize
from .embeddings import EmbeddingTable, GceLayer, NodeFeatureMatrix, build_provider, compose_features, dropout_mask
from .heads import MfHead, FmHead, NcfHead, ScoreRequest, build_model

__all__ = [
    "Tensor", "DenseMatrix", "SparseMatrix", "GradientTape", "AdamState", "Adam",
    "parameter", "dense_matmul", "sparse_dense_matmul", "relu", "sigmoid", "softplus",
    "adam_step", "check_gradient",
    "FieldSchema", "NodeIndexer", "NPartiteGraph", "build_graph", "normalize",
    "EmbeddingTable", "GceLayer", "NodeFeatureMatrix", "build_provider", "compose_features", "dropout_mask",
    "MfHead", "FmHead", "NcfHead", "ScoreRequest", "build_model",
]
