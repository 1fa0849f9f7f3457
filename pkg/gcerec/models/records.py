from dataclasses import dataclass, field
from typing import Optional, Tuple

import scipy.sparse as sp


@dataclass(frozen=True)
class InteractionRecord:
    """一条交互记录: 各字段的局部编号 + 可选时间戳"""
    user: int
    item: int
    contexts: Tuple[int, ...] = field(default_factory=tuple)
    timestamp: Optional[int] = None

    @property
    def fields(self) -> Tuple[int, ...]:
        return (self.user, self.item, *self.contexts)


@dataclass(frozen=True)
class SideInfoMatrix:
    """某字段的多热侧信息矩阵 (字段基数 × 特征词表)"""
    field: int
    features: sp.csr_matrix
    vocabulary: Tuple[str, ...] = ()

    @property
    def num_features(self) -> int:
        return int(self.features.shape[1])
