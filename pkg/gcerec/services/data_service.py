"""
数据服务
读取交互日志、推导上下文、过滤、留一法划分、读取侧信息
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd
import scipy.sparse as sp

from gcerec.core.graph import FieldSchema
from gcerec.exceptions import DataError
from gcerec.models.records import InteractionRecord, SideInfoMatrix
from gcerec.models.schemas import DatasetStats, FormatSpec

logger = logging.getLogger(__name__)

TIMESTAMP = "timestamp"
ORDER = "order"


@dataclass
class Dataset:
    """
    交互数据集
    frame 每行一条交互，字段列存放稠密局部编号，order 为文件中的原始位置
    """
    frame: pd.DataFrame
    field_names: List[str]
    id_maps: List[List[str]]
    has_timestamps: bool = False

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def num_fields(self) -> int:
        return len(self.field_names)

    @property
    def context_names(self) -> List[str]:
        return self.field_names[2:]

    @property
    def cardinalities(self) -> List[int]:
        return [len(m) for m in self.id_maps]

    @property
    def schema(self) -> FieldSchema:
        return FieldSchema(tuple(self.field_names), tuple(self.cardinalities))

    def id_matrix(self, frame: Optional[pd.DataFrame] = None) -> np.ndarray:
        frame = self.frame if frame is None else frame
        return frame[self.field_names].to_numpy(dtype=np.int64).reshape(-1, self.num_fields)

    def records(self, frame: Optional[pd.DataFrame] = None) -> List[InteractionRecord]:
        frame = self.frame if frame is None else frame
        ids = self.id_matrix(frame)
        stamps = frame[TIMESTAMP].tolist() if self.has_timestamps else [None] * len(frame)
        return [InteractionRecord(int(r[0]), int(r[1]), tuple(int(c) for c in r[2:]),
                                  None if t is None else int(t))
                for r, t in zip(ids, stamps)]

    def raw_key(self, field_index: int, local_id: int) -> str:
        return self.id_maps[field_index][local_id]

    def local_id(self, field_index: int, raw_key: str) -> int:
        lookup = {k: i for i, k in enumerate(self.id_maps[field_index])}
        if raw_key not in lookup:
            raise DataError(f"字段 {self.field_names[field_index]} 中不存在实体 {raw_key}")
        return lookup[raw_key]

    def field_index(self, name: Union[str, int]) -> int:
        if isinstance(name, int):
            if not 0 <= name < self.num_fields:
                raise DataError(f"字段下标越界: {name}")
            return name
        if name not in self.field_names:
            raise DataError(f"未知字段: {name}，可选 {self.field_names}")
        return self.field_names.index(name)

    def sorted_frame(self) -> pd.DataFrame:
        keys = ["user", TIMESTAMP, ORDER] if self.has_timestamps else ["user", ORDER]
        return self.frame.sort_values(keys, kind="mergesort").reset_index(drop=True)


@dataclass
class Split:
    """训练/验证/测试三部分，共享同一数据集的编号空间"""
    dataset: Dataset
    train: pd.DataFrame
    validation: pd.DataFrame
    test: pd.DataFrame
    meta: Dict[str, int] = field(default_factory=dict)

    def part(self, name: str) -> pd.DataFrame:
        if name not in ("train", "validation", "test"):
            raise DataError(f"未知划分: {name}")
        return getattr(self, name)

    def matrix(self, name: str) -> np.ndarray:
        return self.dataset.id_matrix(self.part(name))

    def records(self, name: str) -> List[InteractionRecord]:
        return self.dataset.records(self.part(name))


def _empty_dataset(fmt: FormatSpec) -> Dataset:
    names = ["user", "item"] + [f"context_{i + 1}" for i in range(len(fmt.context_cols))]
    has_timestamps = fmt.timestamp_col is not None
    columns = names + ([TIMESTAMP] if has_timestamps else []) + [ORDER]
    frame = pd.DataFrame({name: pd.Series(dtype=np.int64) for name in columns})
    return Dataset(frame, names, [[] for _ in names], has_timestamps)


def load_tabular(path: Union[str, Path], fmt: FormatSpec) -> Dataset:
    """
    读取分隔文本交互日志
    评分列仅用于二值化后丢弃: 每一行都是一条正样本交互
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"文件不存在: {path}")
    try:
        raw = pd.read_csv(path, sep=fmt.delimiter, header=0 if fmt.header else None, dtype=str,
                          keep_default_na=False, skip_blank_lines=True, engine="python")
    except pd.errors.EmptyDataError:
        logger.warning("文件为空: %s", path)
        return _empty_dataset(fmt)
    except pd.errors.ParserError as exc:
        raise DataError(f"解析 {path} 失败: {exc}") from exc
    if raw.empty:
        return _empty_dataset(fmt)

    first_line = 2 if fmt.header else 1
    if raw.shape[1] <= fmt.max_col:
        raise DataError(f"{path} 第 {first_line} 行列数 {raw.shape[1]} 不足，列映射需要 {fmt.max_col + 1} 列")

    names = ["user", "item"] + [f"context_{i + 1}" for i in range(len(fmt.context_cols))]
    columns = [fmt.user_col, fmt.item_col, *fmt.context_cols]
    frame = pd.DataFrame(index=raw.index)
    id_maps: List[List[str]] = []
    for name, col in zip(names, columns):
        values = raw.iloc[:, col].astype(str).str.strip()
        missing = np.flatnonzero((values == "") | raw.iloc[:, col].isna().to_numpy())
        if missing.size:
            raise DataError(f"{path} 第 {first_line + int(missing[0])} 行缺少 {name} 列")
        codes, uniques = pd.factorize(values, sort=False)
        frame[name] = codes.astype(np.int64)
        id_maps.append([str(u) for u in uniques])

    has_timestamps = fmt.timestamp_col is not None
    if has_timestamps:
        stamps = pd.to_numeric(raw.iloc[:, fmt.timestamp_col].astype(str).str.strip(), errors="coerce")
        bad = np.flatnonzero(stamps.isna().to_numpy())
        if bad.size:
            raise DataError(f"{path} 第 {first_line + int(bad[0])} 行时间戳无法解析")
        frame[TIMESTAMP] = stamps.astype(np.int64)
    frame[ORDER] = np.arange(len(frame), dtype=np.int64)

    dataset = Dataset(frame.reset_index(drop=True), names, id_maps, has_timestamps)
    dataset.frame = dataset.sorted_frame()
    logger.info("读取 %s: %d 条交互, %d 个用户, %d 个物品", path, len(dataset), *dataset.cardinalities[:2])
    return dataset


def derive_last_clicked_context(ds: Dataset, window: int = 1) -> Dataset:
    """
    以用户上一个(或前 window 个)交互物品作为上下文
    每个用户的前 window 条交互没有前驱，被丢弃
    """
    if not ds.has_timestamps:
        raise DataError("推导上一次点击上下文需要时间戳列")
    if window < 1:
        raise DataError(f"上下文窗口必须 ≥ 1，实际为 {window}")
    names = ["last_item"] if window == 1 else [f"last_item_{k}" for k in range(1, window + 1)]
    if len(ds) == 0:
        frame = pd.DataFrame({c: pd.Series(dtype=np.int64) for c in ["user", "item", *names, TIMESTAMP, ORDER]})
        return Dataset(frame, ["user", "item", *names], [list(ds.id_maps[0]), list(ds.id_maps[1])]
                       + [list(ds.id_maps[1]) for _ in names], True)
    frame = ds.sorted_frame()
    by_user = frame.groupby("user", sort=False)["item"]
    derived = frame[["user", "item", TIMESTAMP, ORDER]].copy()
    for k, name in enumerate(names, start=1):
        derived[name] = by_user.shift(k)

    counts = frame.groupby("user").size()
    short_users = int((counts <= window).sum())
    if short_users:
        logger.info("%d 个用户交互数不超过 %d，无法构造上下文，已丢弃", short_users, window)
    derived = derived.dropna(subset=names)
    for name in names:
        derived[name] = derived[name].astype(np.int64)
    derived = derived[["user", "item", *names, TIMESTAMP, ORDER]].reset_index(drop=True)

    item_map = list(ds.id_maps[1])
    result = Dataset(derived, ["user", "item", *names], [list(ds.id_maps[0]), item_map]
                     + [list(item_map) for _ in names], True)
    logger.info("上下文推导完成: %d → %d 条交互", len(ds), len(result))
    return result


def drop_contexts(ds: Dataset) -> Dataset:
    """只保留用户、物品两个字段 (二部图)"""
    keep = ["user", "item"] + [c for c in (TIMESTAMP, ORDER) if c in ds.frame.columns]
    return Dataset(ds.frame[keep].copy(), ["user", "item"], [list(m) for m in ds.id_maps[:2]], ds.has_timestamps)


def _redensify(ds: Dataset, frame: pd.DataFrame) -> Dataset:
    # 各字段保序重排为稠密编号
    frame = frame.copy()
    id_maps = []
    for f, name in enumerate(ds.field_names):
        uniques, inverse = np.unique(frame[name].to_numpy(dtype=np.int64), return_inverse=True)
        frame[name] = inverse.astype(np.int64)
        id_maps.append([ds.id_maps[f][u] for u in uniques])
    return Dataset(frame.reset_index(drop=True), list(ds.field_names), id_maps, ds.has_timestamps)


def filter_dataset(ds: Dataset, min_interactions_per_user: int = 3, top_items: Optional[int] = None,
                   min_timestamp: Optional[int] = None, max_timestamp: Optional[int] = None) -> Dataset:
    """先按时间窗口、再保留最频繁的 top_items 个物品、再剔除交互数不足的用户，最后重排编号"""
    frame = ds.frame
    if min_timestamp is not None or max_timestamp is not None:
        if not ds.has_timestamps:
            raise DataError("按时间窗口过滤需要时间戳列")
        if min_timestamp is not None:
            frame = frame[frame[TIMESTAMP] >= min_timestamp]
        if max_timestamp is not None:
            frame = frame[frame[TIMESTAMP] <= max_timestamp]

    if top_items is not None:
        counts = frame["item"].value_counts()
        ranking = pd.DataFrame({"item": counts.index.to_numpy(), "count": counts.to_numpy()})
        ranking = ranking.sort_values(["count", "item"], ascending=[False, True], kind="mergesort")
        keep = set(ranking["item"].head(top_items).tolist())
        frame = frame[frame["item"].isin(keep)]

    user_counts = frame.groupby("user")["item"].transform("size")
    dropped = frame.loc[user_counts < min_interactions_per_user, "user"].nunique()
    frame = frame[user_counts >= min_interactions_per_user]
    if dropped:
        logger.info("剔除 %d 个交互数少于 %d 的用户", dropped, min_interactions_per_user)
    if frame.empty:
        raise DataError("过滤后数据为空")
    result = _redensify(ds, frame)
    logger.info("过滤完成: %d 条交互, 基数 %s", len(result), result.cardinalities)
    return result


def leave_one_out_split(ds: Dataset) -> Split:
    """每个用户: 最后一条 → 测试, 倒数第二条 → 验证, 其余 → 训练"""
    if len(ds) == 0:
        raise DataError("数据集为空，无法划分")
    if not ds.has_timestamps:
        logger.warning("缺少时间戳，按文件顺序取每个用户的最后两条交互")
    frame = ds.sorted_frame()
    counts = frame.groupby("user")["item"].size()
    short = counts[counts < 3]
    if not short.empty:
        user = int(short.index[0])
        raise DataError(f"用户 {ds.raw_key(0, user)} 只有 {int(short.iloc[0])} 条交互，留一法至少需要 3 条")
    from_end = frame.groupby("user", sort=False).cumcount(ascending=False).to_numpy()
    split = Split(
        dataset=ds,
        train=frame[from_end >= 2].reset_index(drop=True),
        validation=frame[from_end == 1].reset_index(drop=True),
        test=frame[from_end == 0].reset_index(drop=True),
    )
    split.meta = {"train": len(split.train), "validation": len(split.validation), "test": len(split.test)}
    logger.info("留一法划分: 训练 %d, 验证 %d, 测试 %d", *split.meta.values())
    return split


def load_side_info(path: Union[str, Path], field_name: Union[str, int], ds: Dataset,
                   delimiter: Optional[str] = None, strict: bool = True) -> SideInfoMatrix:
    """
    读取 "entity_key feature_token" 对，构造多热矩阵
    strict=False 时跳过不在编号表中的实体 (例如被过滤掉的物品)
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"侧信息文件不存在: {path}")
    f = ds.field_index(field_name)
    lookup = {key: i for i, key in enumerate(ds.id_maps[f])}
    try:
        raw = pd.read_csv(path, sep=delimiter or r"\s+", header=None, dtype=str,
                          keep_default_na=False, engine="python")
    except pd.errors.EmptyDataError:
        raw = pd.DataFrame(columns=[0, 1])
    except pd.errors.ParserError as exc:
        raise DataError(f"解析侧信息 {path} 失败: {exc}") from exc
    if not raw.empty and raw.shape[1] < 2:
        raise DataError(f"{path} 第 1 行应包含实体与特征两列")

    rows, tokens, skipped = [], [], 0
    for line, (entity, token) in enumerate(zip(raw.iloc[:, 0], raw.iloc[:, 1]), start=1):
        entity, token = str(entity).strip(), str(token).strip()
        if not token:
            raise DataError(f"{path} 第 {line} 行缺少特征")
        if entity not in lookup:
            if strict:
                raise DataError(f"{path} 第 {line} 行引用了字段 {ds.field_names[f]} 中不存在的实体 {entity}")
            skipped += 1
            continue
        rows.append(lookup[entity])
        tokens.append(token)
    if skipped:
        logger.info("侧信息 %s: 跳过 %d 行未知实体", path, skipped)

    codes, vocabulary = pd.factorize(pd.Series(tokens, dtype=str), sort=False)
    features = sp.csr_matrix((np.ones(len(rows)), (np.asarray(rows, dtype=np.int64), codes.astype(np.int64))),
                             shape=(ds.cardinalities[f], len(vocabulary)))
    features.sum_duplicates()
    features.data[:] = 1.0
    features.sort_indices()
    return SideInfoMatrix(f, features, tuple(str(v) for v in vocabulary))


def dataset_stats(ds: Dataset) -> DatasetStats:
    """用户数、物品数、交互数"""
    cards = ds.cardinalities
    return DatasetStats(users=cards[0], items=cards[1], interactions=len(ds),
                        fields=list(ds.field_names), cardinalities=cards)
