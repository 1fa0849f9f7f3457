"""
评估服务
全量物品排序、HR@K / NDCG@K、多随机种子汇总、长尾分析
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from gcerec.core.graph import FieldSchema
from gcerec.core.heads import ScoringHead
from gcerec.core.numerics import Tensor
from gcerec.exceptions import EvalError
from gcerec.models.schemas import EvalReport, LongTailMode, MetricSummary
from gcerec.services.data_service import Split
from gcerec.utils.helpers import read_json, write_json

logger = logging.getLogger(__name__)

# 每次前向打分的最大行数 (任务数 × 候选数)
SCORE_CHUNK_ROWS = 262_144


@dataclass(frozen=True)
class RankTask:
    """一次排序任务: 固定 (用户, 上下文)，对候选物品排序"""
    user: int
    contexts: Tuple[int, ...]
    truth: int
    candidates: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.candidates is not None:
            if not self.candidates:
                raise EvalError(f"用户 {self.user} 的候选集为空")
            if self.truth not in self.candidates:
                raise EvalError(f"用户 {self.user} 的真实物品 {self.truth} 不在候选集中")


@dataclass(frozen=True)
class LongTailFilter:
    mode: LongTailMode
    k: int

    def __post_init__(self):
        if self.k < 0:
            raise EvalError(f"长尾过滤 k 必须 ≥ 0，实际为 {self.k}")


def build_tasks(split: Split, part: str = "test", exclude_train_positives: bool = False) -> List[RankTask]:
    """验证集/测试集每条记录生成一个任务"""
    matrix = split.matrix(part)
    positives: Dict[int, set] = {}
    if exclude_train_positives:
        for user, item in split.matrix("train")[:, :2]:
            positives.setdefault(int(user), set()).add(int(item))
    num_items = split.dataset.cardinalities[1]
    tasks = []
    for row in matrix:
        user, truth = int(row[0]), int(row[1])
        candidates = None
        if exclude_train_positives:
            blocked = positives.get(user, set()) - {truth}
            candidates = tuple(i for i in range(num_items) if i not in blocked)
        tasks.append(RankTask(user, tuple(int(c) for c in row[2:]), truth, candidates))
    return tasks


def order_items(scores: np.ndarray, items: np.ndarray) -> np.ndarray:
    """分数降序，分数相同按物品编号升序"""
    return items[np.lexsort((items, -scores))]


def hr_at_k(ranked: Sequence[int], truth: int, k: int) -> float:
    return 1.0 if truth in list(ranked)[:k] else 0.0


def ndcg_at_k(ranked: Sequence[int], truth: int, k: int) -> float:
    top = list(ranked)[:k]
    if truth not in top:
        return 0.0
    return 1.0 / np.log2(top.index(truth) + 2)


def hit_from_rank(ranks: np.ndarray, k: int) -> np.ndarray:
    return (np.asarray(ranks) <= k).astype(np.float64)


def ndcg_from_rank(ranks: np.ndarray, k: int) -> np.ndarray:
    ranks = np.asarray(ranks, dtype=np.float64)
    return np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)


def relative_improvement(baseline: float, value: float) -> float:
    """相对提升 (百分比)"""
    if baseline == 0:
        return float("inf") if value > 0 else 0.0
    return (value - baseline) / baseline * 100.0


class Evaluator:
    """对冻结的模型快照做全量排序评估"""

    def __init__(self, schema: FieldSchema, chunk_rows: int = SCORE_CHUNK_ROWS):
        self.schema = schema
        self.indexer = schema.indexer()
        self.num_items = schema.cardinalities[1]
        self.chunk_rows = chunk_rows
        if self.num_items < 1:
            raise EvalError("物品集合为空，无法排序")

    def _requests(self, tasks: Sequence[RankTask]) -> np.ndarray:
        # 每个任务展开成 num_items 行，第 1 列为候选物品
        t = len(tasks)
        local = np.empty((t * self.num_items, self.schema.num_fields), dtype=np.int64)
        local[:, 0] = np.repeat([task.user for task in tasks], self.num_items)
        local[:, 1] = np.tile(np.arange(self.num_items), t)
        for f in range(2, self.schema.num_fields):
            local[:, f] = np.repeat([task.contexts[f - 2] for task in tasks], self.num_items)
        return self.indexer.to_global(local)

    def score_tasks(self, model: ScoringHead, tasks: Sequence[RankTask],
                    node_embeddings: Optional[Tensor] = None) -> np.ndarray:
        """返回 (任务数, 物品数) 分数矩阵；不在候选集中的物品记为 -inf"""
        if node_embeddings is None:
            node_embeddings = model.propagate(training=False)
        scores = np.empty((len(tasks), self.num_items))
        per_chunk = max(1, self.chunk_rows // self.num_items)
        for start in range(0, len(tasks), per_chunk):
            chunk = tasks[start:start + per_chunk]
            values = model.score_batch(self._requests(chunk), node_embeddings=node_embeddings).value
            scores[start:start + len(chunk)] = values.reshape(len(chunk), self.num_items)
        for row, task in enumerate(tasks):
            if task.candidates is not None:
                mask = np.ones(self.num_items, dtype=bool)
                mask[list(task.candidates)] = False
                scores[row, mask] = -np.inf
        return scores

    def rank(self, model: ScoringHead, task: RankTask, k: int,
             node_embeddings: Optional[Tensor] = None) -> List[int]:
        """前 K 个物品 (分数降序，同分按编号升序)"""
        scores = self.score_tasks(model, [task], node_embeddings)[0]
        items = np.arange(self.num_items) if task.candidates is None else np.array(sorted(task.candidates))
        return order_items(scores[items], items)[:k].tolist()

    def truth_ranks(self, model: ScoringHead, tasks: Sequence[RankTask],
                    node_embeddings: Optional[Tensor] = None) -> np.ndarray:
        """每个任务中真实物品的排名 (从 1 开始)，与 order_items 的排序一致"""
        if not tasks:
            raise EvalError("评估任务为空")
        scores = self.score_tasks(model, tasks, node_embeddings)
        truths = np.array([task.truth for task in tasks])
        truth_scores = scores[np.arange(len(tasks)), truths][:, None]
        if not np.all(np.isfinite(truth_scores)):
            raise EvalError("真实物品的分数非有限")
        items = np.arange(self.num_items)[None, :]
        ahead = (scores > truth_scores) | ((scores == truth_scores) & (items < truths[:, None]))
        return ahead.sum(axis=1) + 1

    def metrics(self, model: ScoringHead, tasks: Sequence[RankTask], ks: Sequence[int] = (10, 20),
                node_embeddings: Optional[Tensor] = None) -> Dict[Tuple[str, int], float]:
        """单个模型在一组任务上的平均指标"""
        ranks = self.truth_ranks(model, tasks, node_embeddings)
        result = {}
        for k in ks:
            result[("HR", k)] = float(hit_from_rank(ranks, k).mean())
            result[("NDCG", k)] = float(ndcg_from_rank(ranks, k).mean())
        return result

    def evaluate(self, models: Mapping[int, ScoringHead], tasks: Sequence[RankTask],
                 ks: Sequence[int] = (10, 20)) -> EvalReport:
        """每个种子一个模型: 先对任务取均值，再跨种子求均值与标准差"""
        if not tasks:
            raise EvalError("评估任务为空")
        if not models:
            raise EvalError("没有可评估的模型")
        seeds = sorted(models)
        per_seed = {seed: self.metrics(models[seed], tasks, ks) for seed in seeds}
        cells = []
        for k in sorted(ks):
            for metric in ("HR", "NDCG"):
                values = [per_seed[seed][(metric, k)] for seed in seeds]
                cells.append(MetricSummary(metric=metric, K=k, mean=float(np.mean(values)),
                                           std=float(np.std(values)), seeds=values, tasks=len(tasks)))
        tag = models[seeds[0]].tag
        logger.info("%s 评估完成: %d 个任务, %d 个种子", tag, len(tasks), len(seeds))
        return EvalReport(model=tag, seeds=seeds, tasks=len(tasks), cells=cells)

    def long_tail_evaluate(self, models: Mapping[int, ScoringHead], tasks: Sequence[RankTask],
                           lt_filter: LongTailFilter, train: pd.DataFrame,
                           ks: Sequence[int] = (10,)) -> EvalReport:
        """去掉真实物品属于训练集前 k 热门物品 (或用户属于前 k 活跃用户) 的任务后再评估"""
        kept = filter_long_tail(tasks, lt_filter, train)
        if not kept:
            raise EvalError(f"长尾过滤 ({lt_filter.mode.value}, k={lt_filter.k}) 后没有剩余任务")
        report = self.evaluate(models, kept, ks)
        report.long_tail = {"mode": lt_filter.mode.value, "k": lt_filter.k, "removed": len(tasks) - len(kept)}
        return report


def popular_entities(train: pd.DataFrame, column: str, k: int) -> List[int]:
    """训练集中出现次数最多的 k 个实体，次数相同按编号升序"""
    if k == 0 or train.empty:
        return []
    counts = train[column].value_counts()
    ranking = pd.DataFrame({"id": counts.index.to_numpy(), "count": counts.to_numpy()})
    ranking = ranking.sort_values(["count", "id"], ascending=[False, True], kind="mergesort")
    return [int(i) for i in ranking["id"].head(k)]


def filter_long_tail(tasks: Sequence[RankTask], lt_filter: LongTailFilter, train: pd.DataFrame) -> List[RankTask]:
    if lt_filter.k == 0:
        return list(tasks)
    if lt_filter.mode == LongTailMode.ITEMS:
        removed = set(popular_entities(train, "item", lt_filter.k))
        return [t for t in tasks if t.truth not in removed]
    removed = set(popular_entities(train, "user", lt_filter.k))
    return [t for t in tasks if t.user not in removed]


def report_rows(report: EvalReport) -> List[Dict]:
    return [cell.model_dump() for cell in report.cells]


def write_report_json(report: EvalReport, path: Union[str, Path]) -> Path:
    """每个 (指标, K) 一个对象的列表"""
    return write_json(path, report_rows(report))


def read_report_cells(path: Union[str, Path]) -> Dict[Tuple[str, int], float]:
    path = Path(path)
    if not path.exists():
        raise EvalError(f"基线报告不存在: {path}")
    return {(c["metric"], int(c["K"])): float(c["mean"]) for c in read_json(path)}


def report_table(reports: Sequence[EvalReport],
                 baseline: Optional[Mapping[Tuple[str, int], float]] = None) -> pd.DataFrame:
    """一行一个模型，列为 HR@K / NDCG@K 的均值与标准差；给定基线时附加相对提升 (%)"""
    rows = []
    for report in reports:
        row = {"model": report.model, "tasks": report.tasks, "seeds": len(report.seeds)}
        for cell in report.cells:
            name = f"{cell.metric}@{cell.K}"
            row[name] = round(cell.mean, 6)
            row[f"{name}_std"] = round(cell.std, 6)
            if baseline is not None and (cell.metric, cell.K) in baseline:
                row[f"{name}_improv"] = round(relative_improvement(baseline[(cell.metric, cell.K)], cell.mean), 2)
        if report.long_tail is not None:
            row.update({f"long_tail_{key}": value for key, value in report.long_tail.items()})
        rows.append(row)
    return pd.DataFrame(rows)


def write_report_csv(reports: Sequence[EvalReport], path: Union[str, Path],
                     baseline: Optional[Mapping[Tuple[str, int], float]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    report_table(reports, baseline).to_csv(path, index=False)
    return path
