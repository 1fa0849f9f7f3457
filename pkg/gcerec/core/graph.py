"""
N部图构建
字段局部编号重排为全局节点编号，由训练交互构建二值对称邻接矩阵，
并预计算对称归一化邻接矩阵 D̂^{-1/2}(A+I)D̂^{-1/2}
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from gcerec.core.numerics import SparseMatrix
from gcerec.exceptions import DataError, NodeIndexError
from gcerec.models.records import InteractionRecord

logger = logging.getLogger(__name__)

Records = Union[Sequence[InteractionRecord], np.ndarray]


@dataclass(frozen=True)
class FieldSchema:
    """字段列表 (user, item, context_1 …) 及各字段基数"""
    names: Tuple[str, ...]
    cardinalities: Tuple[int, ...]

    def __post_init__(self):
        if len(self.names) != len(self.cardinalities):
            raise DataError(f"字段名数量 {len(self.names)} 与基数数量 {len(self.cardinalities)} 不一致")
        if len(self.names) < 2:
            raise DataError("至少需要 user 和 item 两个字段")
        for name, size in zip(self.names, self.cardinalities):
            if size < 1:
                raise DataError(f"字段 {name} 的基数必须 ≥ 1，实际为 {size}")

    @classmethod
    def from_cardinalities(cls, cardinalities: Sequence[int], names: Optional[Sequence[str]] = None) -> "FieldSchema":
        cardinalities = tuple(int(c) for c in cardinalities)
        if names is None:
            names = ["user", "item"] + [f"context_{i + 1}" for i in range(len(cardinalities) - 2)]
        return cls(tuple(names), cardinalities)

    @property
    def num_fields(self) -> int:
        return len(self.names)

    @property
    def num_nodes(self) -> int:
        return int(sum(self.cardinalities))

    def indexer(self) -> "NodeIndexer":
        return NodeIndexer(tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.cardinalities)])))


@dataclass(frozen=True)
class NodeIndexer:
    """全局编号 = offset(field) + local"""
    offsets: Tuple[int, ...]

    @property
    def num_nodes(self) -> int:
        return self.offsets[-1]

    def global_id(self, field: int, local: int) -> int:
        if not 0 <= field < len(self.offsets) - 1:
            raise NodeIndexError(f"字段下标越界: {field}")
        size = self.offsets[field + 1] - self.offsets[field]
        if not 0 <= local < size:
            raise NodeIndexError(f"字段 {field} 的局部编号 {local} 超出范围 [0, {size})")
        return self.offsets[field] + int(local)

    def local_of(self, global_id: int) -> Tuple[int, int]:
        if not 0 <= global_id < self.num_nodes:
            raise NodeIndexError(f"全局编号 {global_id} 超出范围 [0, {self.num_nodes})")
        field = int(self.field_of(global_id))
        return field, int(global_id) - self.offsets[field]

    def field_of(self, global_ids) -> np.ndarray:
        return np.searchsorted(self.offsets, np.asarray(global_ids), side="right") - 1

    def to_global(self, local_matrix: np.ndarray) -> np.ndarray:
        """(R, F) 局部编号矩阵 → 全局编号矩阵"""
        return np.asarray(local_matrix, dtype=np.int64) + np.asarray(self.offsets[:-1], dtype=np.int64)


@dataclass(frozen=True)
class NPartiteGraph:
    schema: FieldSchema
    adjacency: SparseMatrix
    degrees: np.ndarray
    normalized: SparseMatrix
    context_edges: bool = True

    @property
    def indexer(self) -> NodeIndexer:
        return self.schema.indexer()

    @property
    def num_nodes(self) -> int:
        return self.schema.num_nodes

    @property
    def num_edges(self) -> int:
        """无向边数"""
        return int(self.adjacency.nnz // 2)


def local_matrix(records: Records, schema: FieldSchema) -> np.ndarray:
    """记录 → (R, F) 局部编号矩阵，并校验编号范围"""
    if isinstance(records, np.ndarray):
        matrix = np.asarray(records, dtype=np.int64)
        if matrix.size == 0:
            matrix = matrix.reshape(0, schema.num_fields)
        if matrix.ndim != 2 or matrix.shape[1] != schema.num_fields:
            raise DataError(f"记录矩阵形状 {matrix.shape} 与 schema 字段数 {schema.num_fields} 不符")
    else:
        rows = [r.fields for r in records]
        for idx, row in enumerate(rows):
            if len(row) != schema.num_fields:
                raise DataError(f"记录 {idx} 含 {len(row)} 个字段，schema 要求 {schema.num_fields} 个")
        matrix = np.array(rows, dtype=np.int64).reshape(-1, schema.num_fields)
    for f, (name, size) in enumerate(zip(schema.names, schema.cardinalities)):
        bad = np.flatnonzero((matrix[:, f] < 0) | (matrix[:, f] >= size))
        if bad.size:
            idx = int(bad[0])
            raise DataError(f"记录 {idx} 的字段 {name} 编号 {matrix[idx, f]} 超出范围 [0, {size})")
    return matrix


def field_pairs(num_fields: int, context_edges: bool = True):
    for a in range(num_fields):
        for b in range(a + 1, num_fields):
            if not context_edges and a >= 2 and b >= 2:
                continue
            yield a, b


def build_graph(records: Records, schema: FieldSchema, context_edges: bool = True) -> NPartiteGraph:
    """
    仅用训练集构建邻接矩阵: 每条记录的 F 个节点两两连双向边，
    重复出现的边折叠为 1
    """
    matrix = schema.indexer().to_global(local_matrix(records, schema))
    n = schema.num_nodes
    rows, cols = [], []
    for a, b in field_pairs(schema.num_fields, context_edges):
        rows += [matrix[:, a], matrix[:, b]]
        cols += [matrix[:, b], matrix[:, a]]
    rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    adjacency = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    adjacency.sum_duplicates()
    adjacency.data[:] = 1.0
    adjacency.sort_indices()
    degrees = np.diff(adjacency.indptr).astype(np.int64)
    graph = NPartiteGraph(schema, adjacency, degrees, normalize(adjacency, degrees), context_edges)
    logger.info("N部图构建完成: %d 个节点, %d 条无向边, %d 条训练记录", n, graph.num_edges, matrix.shape[0])
    return graph


def normalize(adjacency: SparseMatrix, degrees: Optional[np.ndarray] = None) -> SparseMatrix:
    """D̂^{-1/2}(A+I)D̂^{-1/2}，D̂ = D + I"""
    n = adjacency.shape[0]
    if degrees is None:
        degrees = np.asarray(adjacency.sum(axis=1)).reshape(-1)
    inv_sqrt = sp.diags(1.0 / np.sqrt(np.asarray(degrees, dtype=np.float64) + 1.0))
    a_hat = adjacency + sp.identity(n, format="csr", dtype=np.float64)
    result = (inv_sqrt @ a_hat @ inv_sqrt).tocsr()
    result.sort_indices()
    return result


def dump_edge_list(graph: NPartiteGraph, path: Union[str, Path]) -> int:
    """调试输出: 每行 "p q"，无向边只列一次且 p < q"""
    upper = sp.triu(graph.adjacency, k=1).tocoo()
    order = np.lexsort((upper.col, upper.row))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for p, q in zip(upper.row[order], upper.col[order]):
            f.write(f"{p} {q}\n")
    return int(order.size)
