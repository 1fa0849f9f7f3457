"""
训练服务
BPR 成对损失 + 负采样 + 小批量 Adam + 基于验证集 NDCG@10 的早停
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Dict, Optional, Sequence, Set, Tuple, Union

import numpy as np

from gcerec.core.embeddings import build_provider
from gcerec.core.graph import NPartiteGraph
from gcerec.core.heads import ScoringHead, build_model
from gcerec.core.numerics import Adam, GradientTape, Tensor, as_tensor, reduce_mean, softplus, sub
from gcerec.exceptions import ConfigError, DataError, NumericError, SamplingError, ShapeError
from gcerec.models.records import SideInfoMatrix
from gcerec.models.schemas import EpochLog, NegativeKeyEnum, RunConfig, TrainConfig, TrainReport
from gcerec.services.data_service import Split
from gcerec.services.evaluation_service import Evaluator, build_tasks
from gcerec.utils.helpers import seed_streams

logger = logging.getLogger(__name__)

MAX_REJECTIONS = 100
EARLY_STOP_K = 10


class PositiveIndex:
    """训练集正样本索引: (用户, 上下文) → 物品集合，用户 → 物品集合"""

    def __init__(self, train_local: np.ndarray, num_items: int,
                 key: NegativeKeyEnum = NegativeKeyEnum.USER_CONTEXT):
        self.num_items = num_items
        self.key = NegativeKeyEnum(key)
        self.by_context: Dict[Tuple[int, ...], Set[int]] = {}
        self.by_user: Dict[int, Set[int]] = {}
        for row in np.asarray(train_local, dtype=np.int64):
            user, item = int(row[0]), int(row[1])
            self.by_context.setdefault((user, *map(int, row[2:])), set()).add(item)
            self.by_user.setdefault(user, set()).add(item)

    @classmethod
    def from_split(cls, split: Split, key: NegativeKeyEnum = NegativeKeyEnum.USER_CONTEXT) -> "PositiveIndex":
        return cls(split.matrix("train"), split.dataset.cardinalities[1], key)

    def positives(self, user: int, contexts: Sequence[int] = ()) -> Set[int]:
        if self.key == NegativeKeyEnum.USER:
            return self.by_user.get(user, set())
        return self.by_context.get((user, *contexts), set())


def sample_negative(index: PositiveIndex, user: int, contexts: Sequence[int], rng: np.random.Generator) -> int:
    """在 (u, c) 未交互过的物品中均匀抽取一个；拒绝采样 100 次后改为穷举"""
    positives = index.positives(user, tuple(contexts))
    if len(positives) >= index.num_items:
        raise SamplingError(f"用户 {user} 在上下文 {tuple(contexts)} 下与全部 {index.num_items} 个物品都有交互")
    for _ in range(MAX_REJECTIONS):
        j = int(rng.integers(index.num_items))
        if j not in positives:
            return j
    candidates = np.setdiff1d(np.arange(index.num_items), np.fromiter(positives, dtype=np.int64))
    return int(rng.choice(candidates))


def sample_negatives(index: PositiveIndex, batch_local: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.array([sample_negative(index, int(row[0]), row[2:], rng) for row in batch_local], dtype=np.int64)


def bpr_loss(pos_scores, neg_scores) -> Tensor:
    """mean softplus(−(s⁺ − s⁻)) = mean −ln σ(s⁺ − s⁻)"""
    pos_scores, neg_scores = as_tensor(pos_scores), as_tensor(neg_scores)
    if pos_scores.shape != neg_scores.shape:
        raise ShapeError(f"正负样本分数长度不一致: {pos_scores.shape} vs {neg_scores.shape}")
    if not (np.all(np.isfinite(pos_scores.value)) and np.all(np.isfinite(neg_scores.value))):
        raise NumericError("打分出现非有限值，训练中止")
    return reduce_mean(softplus(sub(neg_scores, pos_scores)))


def build_recommender(config: RunConfig, graph: NPartiteGraph, side_info: Sequence[SideInfoMatrix] = (),
                      seed: int = 0) -> ScoringHead:
    """按配置构造 嵌入提供者 + 打分头，初始化使用种子的 init 子流"""
    t = config.train
    rng = seed_streams(seed)["init"]
    provider = build_provider(config.provider.value, graph, t.embedding_size, rng, t.activation.value,
                              t.dropout, t.gce_layers, t.per_field_weights, side_info)
    return build_model(config.model.value, provider, graph.schema.num_fields, rng,
                       t.ncf_hidden, t.pairwise, t.mf_bias)


class EarlyStopping:
    """连续 patience 个 epoch 没有超过最好值即停止"""

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError(f"patience 必须 ≥ 1，实际为 {patience}")
        self.patience = patience
        self.best_value = -np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        if value > self.best_value:
            self.best_value = value
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


class Trainer:
    """单线程 BPR 训练器；随机性来自种子的 shuffle / negatives / dropout 子流"""

    def __init__(self, model: ScoringHead, split: Split, graph: NPartiteGraph, config: TrainConfig, seed: int = 0):
        if list(graph.schema.cardinalities) != split.dataset.cardinalities:
            raise ShapeError(f"图的字段基数 {graph.schema.cardinalities} 与数据集 {split.dataset.cardinalities} 不一致")
        self.model = model
        self.split = split
        self.graph = graph
        self.config = config
        self.seed = seed
        self.streams = seed_streams(seed)
        self.indexer = graph.indexer
        self.train_local = split.matrix("train")
        if self.train_local.shape[0] == 0:
            raise DataError("训练集为空")
        self.index = PositiveIndex.from_split(split, config.negative_key)
        self.params = model.named_parameters()
        self.optimizer = Adam(self.params, lr=config.learning_rate, beta1=config.adam_beta1,
                              beta2=config.adam_beta2, eps=config.adam_eps, weight_decay=config.weight_decay)
        self.evaluator = Evaluator(graph.schema)

    def train_step(self, batch_local: np.ndarray) -> float:
        """一个小批量: 采负样本、前向、反向、Adam 更新，返回批内平均损失"""
        positives = np.repeat(batch_local, self.config.num_negatives, axis=0)
        negatives = positives.copy()
        negatives[:, 1] = sample_negatives(self.index, positives, self.streams["negatives"])
        names = list(self.params)
        with GradientTape() as tape:
            node_embeddings = self.model.propagate(training=True, rng=self.streams["dropout"])
            pos = self.model.score_batch(self.indexer.to_global(positives), node_embeddings=node_embeddings)
            neg = self.model.score_batch(self.indexer.to_global(negatives), node_embeddings=node_embeddings)
            loss = bpr_loss(pos, neg)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"损失非有限: {value}")
        grads = tape.gradient(loss, [self.params[n] for n in names])
        self.optimizer.step(dict(zip(names, grads)))
        return value

    def run_epoch(self, max_batches: Optional[int] = None) -> float:
        order = self.streams["shuffle"].permutation(self.train_local.shape[0])
        total, count = 0.0, 0
        for b, start in enumerate(range(0, order.size, self.config.batch_size)):
            if max_batches is not None and b >= max_batches:
                break
            batch = self.train_local[order[start:start + self.config.batch_size]]
            total += self.train_step(batch) * batch.shape[0]
            count += batch.shape[0]
        return total / count

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.params.items()}

    def restore(self, snapshot: Dict[str, np.ndarray]) -> None:
        for name, value in snapshot.items():
            self.params[name].value[...] = value

    def fit(self, log_path: Optional[Union[str, Path]] = None, deterministic: bool = False) -> TrainReport:
        """训练到 max_epochs 或早停，结束时恢复验证集最佳参数"""
        val_tasks = build_tasks(self.split, "validation")
        stopper = EarlyStopping(self.config.patience)
        report = TrainReport(seed=self.seed)
        best = self.snapshot()
        log_file = None
        if log_path is not None:
            Path(log_path).parent.mkdir(parents=True, exist_ok=True)
            log_file = open(log_path, "w", encoding="utf-8")
        try:
            for epoch in range(1, self.config.max_epochs + 1):
                started = time.perf_counter()
                loss = self.run_epoch()
                metrics = self.evaluator.metrics(self.model, val_tasks, (EARLY_STOP_K,))
                elapsed = 0.0 if deterministic else round(time.perf_counter() - started, 6)
                entry = EpochLog(epoch=epoch, loss=loss, val_hr10=metrics[("HR", EARLY_STOP_K)],
                                 val_ndcg10=metrics[("NDCG", EARLY_STOP_K)], elapsed_s=elapsed)
                report.epochs.append(entry)
                if log_file is not None:
                    log_file.write(json.dumps(entry.model_dump()) + "\n")
                    log_file.flush()
                logger.info("seed %d epoch %d: loss=%.6f val HR@10=%.4f NDCG@10=%.4f",
                            self.seed, epoch, loss, entry.val_hr10, entry.val_ndcg10)
                if stopper.update(epoch, entry.val_ndcg10):
                    best = self.snapshot()
                if stopper.should_stop:
                    report.stop_reason = "patience"
                    break
            else:
                report.stop_reason = "max_epochs"
        finally:
            if log_file is not None:
                log_file.close()
        self.restore(best)
        report.best_epoch = stopper.best_epoch
        report.best_val_ndcg10 = float(stopper.best_value)
        logger.info("seed %d 训练结束 (%s): 最佳 epoch %d, 验证 NDCG@10=%.4f",
                    self.seed, report.stop_reason, report.best_epoch, report.best_val_ndcg10)
        return report


def train(model: ScoringHead, split: Split, graph: NPartiteGraph, config: TrainConfig, seed: int = 0,
          log_path: Optional[Union[str, Path]] = None, deterministic: bool = False) -> TrainReport:
    return Trainer(model, split, graph, config, seed).fit(log_path, deterministic)


def first_step_probe(model: ScoringHead, split: Split, graph: NPartiteGraph, config: TrainConfig, seed: int = 0,
                     full_epoch: bool = False, ks: Sequence[int] = (10,)) -> Dict[str, float]:
    """
    只做一个随机小批量的更新 (full_epoch=True 时做完整一个 epoch)，
    然后在测试集上评估
    """
    trainer = Trainer(model, split, graph, config, seed)
    loss = trainer.run_epoch(max_batches=None if full_epoch else 1)
    metrics = trainer.evaluator.metrics(model, build_tasks(split, "test"), ks)
    result = {"seed": seed, "loss": loss}
    for (metric, k), value in sorted(metrics.items()):
        result[f"{metric.lower()}{k}"] = value
    logger.info("seed %d 首步探测: %s", seed, result)
    return result
