"""
嵌入提供者
普通查表 (EmbeddingTable) 与图卷积嵌入 (GceLayer) 可互相替换；
GceLayer 可选地以侧信息多热特征作为输入
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from gcerec.core.graph import FieldSchema, NPartiteGraph
from gcerec.core.numerics import (
    ACTIVATIONS, SparseMatrix, Tensor, add, dense_matmul, gather_rows, mul, parameter,
    sparse_dense_matmul,
)
from gcerec.exceptions import ConfigError, ShapeError
from gcerec.models.records import SideInfoMatrix

logger = logging.getLogger(__name__)

PROVIDER_KINDS = ("table", "gce", "gce-si")


def xavier_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def dropout_mask(rate: float, shape, rng: np.random.Generator) -> np.ndarray:
    """反向 dropout 掩码: 保留的位置取 1/(1−rate)"""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout 比例必须在 [0, 1) 内，实际为 {rate}")
    if rate == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


def apply_dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("训练模式下使用 dropout 需要随机数发生器")
    return mul(x, dropout_mask(rate, x.shape, rng))


@dataclass(frozen=True)
class NodeFeatureMatrix:
    """节点输入特征 Z = [I | 侧信息多热块]"""
    z: SparseMatrix
    num_nodes: int

    @property
    def input_dim(self) -> int:
        return int(self.z.shape[1])

    @property
    def num_side_features(self) -> int:
        return self.input_dim - self.num_nodes


def compose_features(schema: FieldSchema, side_info: Sequence[SideInfoMatrix] = ()) -> NodeFeatureMatrix:
    """自身 one-hot ⊕ 侧信息 multi-hot；无侧信息时 Z = I"""
    n = schema.num_nodes
    offsets = schema.indexer().offsets
    blocks = [sp.identity(n, format="csr", dtype=np.float64)]
    for info in side_info:
        if not 0 <= info.field < schema.num_fields:
            raise ShapeError(f"侧信息字段下标 {info.field} 不在 schema 内")
        size = schema.cardinalities[info.field]
        if info.features.shape[0] != size:
            raise ShapeError(
                f"字段 {schema.names[info.field]} 的侧信息行数 {info.features.shape[0]} 与基数 {size} 不一致")
        block = sp.vstack([
            sp.csr_matrix((offsets[info.field], info.num_features)),
            info.features.astype(np.float64),
            sp.csr_matrix((n - offsets[info.field + 1], info.num_features)),
        ])
        blocks.append(block)
    z = sp.hstack(blocks, format="csr")
    z.sort_indices()
    return NodeFeatureMatrix(z, n)


class EmbeddingProvider(ABC):
    """嵌入提供者基类: 先得到全部 |V| 行节点表示，再按编号取行"""

    kind = ""

    def __init__(self, num_nodes: int, dim: int):
        self.num_nodes = num_nodes
        self.dim = dim

    @abstractmethod
    def named_parameters(self) -> Dict[str, Tensor]:
        ...

    @abstractmethod
    def propagate(self, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        ...

    def lookup(self, ids, training: bool = False, rng: Optional[np.random.Generator] = None,
               node_embeddings: Optional[Tensor] = None) -> Tensor:
        if node_embeddings is None:
            node_embeddings = self.propagate(training, rng)
        return gather_rows(node_embeddings, ids)

    def num_parameters(self) -> int:
        return int(sum(p.value.size for p in self.named_parameters().values()))


class EmbeddingTable(EmbeddingProvider):
    """普通嵌入查表 H⁰ (|V| × d)"""

    kind = "table"

    def __init__(self, num_nodes: int, dim: int, rng: Optional[np.random.Generator] = None,
                 initial: Optional[np.ndarray] = None):
        super().__init__(num_nodes, dim)
        if initial is None:
            initial = xavier_uniform(rng or np.random.default_rng(), num_nodes, dim)
        if initial.shape != (num_nodes, dim):
            raise ShapeError(f"嵌入表初始值形状 {initial.shape} 应为 {(num_nodes, dim)}")
        self.table = parameter(initial, name="embedding.H")

    def named_parameters(self) -> Dict[str, Tensor]:
        return {"embedding.H": self.table}

    def propagate(self, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        return self.table

    def forward_table(self, ids) -> Tensor:
        return self.lookup(ids)


class GceLayer(EmbeddingProvider):
    """
    图卷积嵌入: H¹ = σ(dropout(Ŝ·H)·W)
    Ŝ 为预计算的归一化邻接矩阵 (常量)；W 默认在所有字段间共享
    """

    kind = "gce"

    def __init__(self, graph: NPartiteGraph, dim: int, rng: Optional[np.random.Generator] = None,
                 activation: str = "relu", dropout: float = 0.0, num_layers: int = 1,
                 per_field_weights: bool = False, features: Optional[NodeFeatureMatrix] = None):
        super().__init__(graph.num_nodes, dim)
        if activation not in ACTIVATIONS:
            raise ConfigError(f"未知激活函数: {activation}")
        if num_layers < 1:
            raise ConfigError(f"GCE 层数必须 ≥ 1，实际为 {num_layers}")
        if not 0.0 <= dropout < 1.0:
            raise ConfigError(f"dropout 比例必须在 [0, 1) 内，实际为 {dropout}")
        rng = rng or np.random.default_rng()
        self.graph = graph
        self.schema = graph.schema
        self.normalized = graph.normalized
        self.activation = activation
        self.dropout = dropout
        self.num_layers = num_layers
        self.per_field_weights = per_field_weights
        self.features = features if features is not None and features.num_side_features > 0 else None

        self._params: Dict[str, Tensor] = {}
        if self.features is None:
            self.inputs = parameter(xavier_uniform(rng, self.num_nodes, dim), name="gce.H")
            self._params["gce.H"] = self.inputs
        else:
            self.kind = "gce-si"
            self.inputs = parameter(xavier_uniform(rng, self.features.input_dim, dim), name="gce.E")
            self._params["gce.E"] = self.inputs

        self.weights: List[List[Tensor]] = []
        for layer in range(num_layers):
            if per_field_weights:
                layer_weights = [parameter(xavier_uniform(rng, dim, dim), name=f"gce.W{layer}.{name}")
                                 for name in self.schema.names]
            else:
                layer_weights = [parameter(xavier_uniform(rng, dim, dim), name=f"gce.W{layer}")]
            for w in layer_weights:
                self._params[w.name] = w
            self.weights.append(layer_weights)

        offsets = self.schema.indexer().offsets
        self._field_columns: List[SparseMatrix] = []
        if per_field_weights:
            self._field_columns = [sp.csr_matrix(self.normalized[:, offsets[f]:offsets[f + 1]])
                                   for f in range(self.schema.num_fields)]

    def named_parameters(self) -> Dict[str, Tensor]:
        return dict(self._params)

    def input_matrix(self) -> Tensor:
        if self.features is None:
            return self.inputs
        return sparse_dense_matmul(self.features.z, self.inputs)

    def _aggregate_by_field(self, h: Tensor, layer_weights: List[Tensor], training: bool,
                            rng: Optional[np.random.Generator]) -> Tensor:
        # Σ_f dropout(Ŝ[:, V_f]·H_f)·W_f，W_f 作用于来自字段 f 的消息
        offsets = self.schema.indexer().offsets
        total = None
        for f, (block, w) in enumerate(zip(self._field_columns, layer_weights)):
            rows = gather_rows(h, np.arange(offsets[f], offsets[f + 1]))
            messages = apply_dropout(sparse_dense_matmul(block, rows), self.dropout, training, rng)
            part = dense_matmul(messages, w)
            total = part if total is None else add(total, part)
        return total

    def propagate(self, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        act = ACTIVATIONS[self.activation]
        h = self.input_matrix()
        for layer_weights in self.weights:
            if self.per_field_weights:
                h = act(self._aggregate_by_field(h, layer_weights, training, rng))
            else:
                messages = apply_dropout(sparse_dense_matmul(self.normalized, h), self.dropout, training, rng)
                h = act(dense_matmul(messages, layer_weights[0]))
        return h

    def forward_gce(self, ids, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        return self.lookup(ids, training, rng)


def build_provider(kind: str, graph: NPartiteGraph, dim: int, rng: Optional[np.random.Generator] = None,
                   activation: str = "relu", dropout: float = 0.0, num_layers: int = 1,
                   per_field_weights: bool = False,
                   side_info: Sequence[SideInfoMatrix] = ()) -> EmbeddingProvider:
    """按名称构造嵌入提供者: table / gce / gce-si"""
    if kind == "table":
        return EmbeddingTable(graph.num_nodes, dim, rng)
    if kind == "gce":
        return GceLayer(graph, dim, rng, activation, dropout, num_layers, per_field_weights)
    if kind == "gce-si":
        if not side_info:
            raise ConfigError("gce-si 需要至少一个侧信息矩阵")
        features = compose_features(graph.schema, side_info)
        logger.info("侧信息特征维度: %d (节点 %d + 特征 %d)",
                    features.input_dim, features.num_nodes, features.num_side_features)
        return GceLayer(graph, dim, rng, activation, dropout, num_layers, per_field_weights, features)
    raise ConfigError(f"未知嵌入类型: {kind}，可选 {PROVIDER_KINDS}")
