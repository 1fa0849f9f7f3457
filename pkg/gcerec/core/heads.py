"""
打分模型
对 F 个字段的嵌入打分: 张量 MF、FM、NCF，均可搭配任意嵌入提供者
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from gcerec.core.embeddings import EmbeddingProvider, xavier_uniform
from gcerec.core.numerics import (
    Tensor, add, concat, dense_matmul, gather_rows, mul, parameter, reduce_sum, relu, reshape, scale, sub,
)
from gcerec.exceptions import ConfigError, ShapeError

logger = logging.getLogger(__name__)

MODEL_KINDS = ("mf", "fm", "ncf")


@dataclass(frozen=True)
class ScoreRequest:
    """一个候选交互: 每个字段一个全局节点编号"""
    ids: Tuple[int, ...]


RequestBatch = Union[np.ndarray, Sequence[ScoreRequest], Sequence[Sequence[int]]]


def as_id_matrix(requests: RequestBatch, num_fields: int) -> np.ndarray:
    """请求批 → (B, F) 全局编号矩阵；字段数不一致时报形状错误"""
    if isinstance(requests, np.ndarray):
        ids = requests.astype(np.int64, copy=False)
        if ids.size == 0:
            ids = ids.reshape(0, num_fields)
    else:
        rows = [r.ids if isinstance(r, ScoreRequest) else tuple(r) for r in requests]
        lengths = {len(r) for r in rows}
        if len(lengths) > 1:
            raise ShapeError(f"批内请求字段数不一致: {sorted(lengths)}")
        ids = np.array(rows, dtype=np.int64).reshape(len(rows), num_fields if not rows else len(rows[0]))
    if ids.ndim != 2 or ids.shape[1] != num_fields:
        raise ShapeError(f"请求矩阵形状 {ids.shape} 与字段数 {num_fields} 不符")
    return ids


def pair_term_identity(fields: Sequence[Tensor]) -> Tensor:
    """Σ_{p<q}⟨g_p,g_q⟩ = ½(‖Σg_p‖² − Σ‖g_p‖²)，O(F·d)"""
    total = fields[0]
    for f in fields[1:]:
        total = add(total, f)
    square_of_sum = reduce_sum(mul(total, total), axis=1)
    sum_of_squares = reduce_sum(mul(fields[0], fields[0]), axis=1)
    for f in fields[1:]:
        sum_of_squares = add(sum_of_squares, reduce_sum(mul(f, f), axis=1))
    return scale(sub(square_of_sum, sum_of_squares), 0.5)


def pair_term_literal(fields: Sequence[Tensor]) -> Tensor:
    """逐对内积求和"""
    result = None
    for p in range(len(fields)):
        for q in range(p + 1, len(fields)):
            term = reduce_sum(mul(fields[p], fields[q]), axis=1)
            result = term if result is None else add(result, term)
    return result


PAIR_TERMS = {"identity": pair_term_identity, "literal": pair_term_literal}


class ScoringHead(ABC):
    """打分头基类"""

    kind = ""

    def __init__(self, provider: EmbeddingProvider, num_fields: int):
        if num_fields < 2:
            raise ConfigError(f"至少需要 2 个字段，实际为 {num_fields}")
        self.provider = provider
        self.num_fields = num_fields
        self._params: Dict[str, Tensor] = {}

    @property
    def tag(self) -> str:
        return f"{self.kind}-{self.provider.kind}"

    def _add_param(self, name: str, value: np.ndarray) -> Tensor:
        tensor = parameter(value, name=name)
        self._params[name] = tensor
        return tensor

    def named_parameters(self) -> Dict[str, Tensor]:
        params = self.provider.named_parameters()
        params.update(self._params)
        return params

    def num_parameters(self) -> int:
        return int(sum(p.value.size for p in self.named_parameters().values()))

    def propagate(self, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        return self.provider.propagate(training, rng)

    def score_batch(self, requests: RequestBatch, node_embeddings: Optional[Tensor] = None,
                    training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        """批量打分，返回长度 B 的向量"""
        ids = as_id_matrix(requests, self.num_fields)
        if node_embeddings is None:
            node_embeddings = self.propagate(training, rng)
        fields = [gather_rows(node_embeddings, ids[:, f]) for f in range(self.num_fields)]
        return self._combine(fields, ids)

    def score(self, request: Union[ScoreRequest, Sequence[int]]) -> float:
        return float(self.score_batch([request]).value[0])

    @abstractmethod
    def _combine(self, fields: List[Tensor], ids: np.ndarray) -> Tensor:
        ...


class MfHead(ScoringHead):
    """张量 MF: Σ_dim Π_field e_field[dim]"""

    kind = "mf"

    def __init__(self, provider: EmbeddingProvider, num_fields: int, use_bias: bool = False):
        super().__init__(provider, num_fields)
        self.use_bias = use_bias
        if use_bias:
            self.global_bias = self._add_param("head.w0", np.zeros((1, 1)))

    def _combine(self, fields: List[Tensor], ids: np.ndarray) -> Tensor:
        product = fields[0]
        for f in fields[1:]:
            product = mul(product, f)
        score = reduce_sum(product, axis=1)
        if self.use_bias:
            score = add(score, reshape(self.global_bias, (1,)))
        return score


class FmHead(ScoringHead):
    """FM: w₀ + Σ w_p + Σ_{p<q}⟨g(x_p), g(x_q)⟩"""

    kind = "fm"

    def __init__(self, provider: EmbeddingProvider, num_fields: int, pairwise: str = "identity"):
        super().__init__(provider, num_fields)
        if pairwise not in PAIR_TERMS:
            raise ConfigError(f"未知二阶项形式: {pairwise}")
        self.pairwise = pairwise
        self.global_bias = self._add_param("head.w0", np.zeros((1, 1)))
        self.node_bias = self._add_param("head.w", np.zeros((provider.num_nodes, 1)))

    def fm_score(self, fields: List[Tensor], ids: np.ndarray) -> Tensor:
        batch = ids.shape[0]
        score = PAIR_TERMS[self.pairwise](fields)
        for f in range(self.num_fields):
            score = add(score, reshape(gather_rows(self.node_bias, ids[:, f]), (batch,)))
        return add(score, reshape(self.global_bias, (1,)))

    def _combine(self, fields: List[Tensor], ids: np.ndarray) -> Tensor:
        return self.fm_score(fields, ids)


class NcfHead(FmHead):
    """NCF: FM 分数 + MLP(拼接的 F 个嵌入)"""

    kind = "ncf"

    def __init__(self, provider: EmbeddingProvider, num_fields: int, hidden_sizes: Sequence[int] = (128, 64),
                 rng: Optional[np.random.Generator] = None, pairwise: str = "identity"):
        super().__init__(provider, num_fields, pairwise)
        rng = rng or np.random.default_rng()
        sizes = [num_fields * provider.dim, *hidden_sizes, 1]
        self.layers: List[Tuple[Tensor, Tensor]] = []
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            weight = self._add_param(f"head.mlp{k}.W", xavier_uniform(rng, fan_in, fan_out))
            bias = self._add_param(f"head.mlp{k}.b", np.zeros((1, fan_out)))
            self.layers.append((weight, bias))

    def mlp(self, x: Tensor) -> Tensor:
        for k, (weight, bias) in enumerate(self.layers):
            x = add(dense_matmul(x, weight), bias)
            if k < len(self.layers) - 1:
                x = relu(x)
        return reshape(x, (x.shape[0],))

    def _combine(self, fields: List[Tensor], ids: np.ndarray) -> Tensor:
        return add(self.fm_score(fields, ids), self.mlp(concat(fields, axis=1)))


def build_model(kind: str, provider: EmbeddingProvider, num_fields: int,
                rng: Optional[np.random.Generator] = None, hidden_sizes: Sequence[int] = (128, 64),
                pairwise: str = "identity", mf_bias: bool = False) -> ScoringHead:
    """按名称构造打分头: mf / fm / ncf"""
    if kind == "mf":
        return MfHead(provider, num_fields, use_bias=mf_bias)
    if kind == "fm":
        return FmHead(provider, num_fields, pairwise=pairwise)
    if kind == "ncf":
        return NcfHead(provider, num_fields, hidden_sizes, rng, pairwise=pairwise)
    raise ConfigError(f"未知模型: {kind}，可选 {MODEL_KINDS}")
