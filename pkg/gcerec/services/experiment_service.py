"""
实验服务
命令行各子命令的主体: ingest / train / eval / gridsearch
"""

from __future__ import annotations

import glob
import itertools
import logging
import os
import pickle
import re
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import pandas as pd

from gcerec.core.checkpoint import load_checkpoint, save_checkpoint
from gcerec.core.graph import NPartiteGraph, build_graph, dump_edge_list
from gcerec.core.heads import ScoringHead
from gcerec.exceptions import CheckpointError, DataError, NumericError
from gcerec.models.database import GridCell, get_engine, ranked_cells, session_scope
from gcerec.models.records import SideInfoMatrix
from gcerec.models.schemas import (
    ContextMode, DatasetStats, EvalReport, GridCellResult, LongTailMode, RunConfig, RunManifest, TrainReport,
)
from gcerec.services.data_service import (
    Dataset, Split, dataset_stats, derive_last_clicked_context, drop_contexts, filter_dataset,
    leave_one_out_split, load_side_info, load_tabular,
)
from gcerec.services.evaluation_service import (
    Evaluator, LongTailFilter, build_tasks, read_report_cells, write_report_csv, write_report_json,
)
from gcerec.services.training_service import build_recommender, first_step_probe, train
from gcerec.utils.helpers import fingerprint, read_json, render_config, version_string, write_json

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"GCED"
CACHE_VERSION = 1
CACHE_FILE = "dataset.gced"
STATS_FILE = "stats.json"


@dataclass
class PreparedData:
    """过滤、划分后的数据集及侧信息"""
    dataset: Dataset
    split: Split
    raw_stats: DatasetStats
    stats: DatasetStats
    side_info: List[SideInfoMatrix] = field(default_factory=list)
    fingerprint: str = ""
    cache_hit: bool = False


def ingest_payload(config: RunConfig) -> Dict[str, Any]:
    return config.model_dump(mode="json", include={"data", "context", "filter"})


def ingest_fingerprint(config: RunConfig) -> str:
    paths = [config.data.path] + [s.path for s in config.data.side_info]
    for path in paths:
        if not Path(path).exists():
            raise DataError(f"文件不存在: {path}")
    return fingerprint(ingest_payload(config), paths)


def prepare_dataset(config: RunConfig) -> PreparedData:
    """读取 → 推导上下文 → 过滤 → 留一法划分 → 侧信息"""
    raw = load_tabular(config.data.path, config.data.format)
    raw_stats = dataset_stats(raw)
    if config.context.mode == ContextMode.LAST_CLICKED:
        ds = derive_last_clicked_context(raw, config.context.window)
    elif config.context.mode == ContextMode.NONE:
        ds = drop_contexts(raw)
    else:
        ds = raw
    f = config.filter
    ds = filter_dataset(ds, f.min_interactions_per_user, f.top_items, f.min_timestamp, f.max_timestamp)
    split = leave_one_out_split(ds)
    side_info = [load_side_info(s.path, s.field, ds, s.delimiter, strict=False) for s in config.data.side_info]
    return PreparedData(ds, split, raw_stats, dataset_stats(ds), side_info)


def encode_cache(prepared: PreparedData) -> bytes:
    return CACHE_MAGIC + struct.pack("<B", CACHE_VERSION) + pickle.dumps(prepared, protocol=pickle.HIGHEST_PROTOCOL)


def decode_cache(blob: bytes) -> PreparedData:
    if blob[:4] != CACHE_MAGIC:
        raise CheckpointError("不是 GCED 数据缓存文件")
    (version,) = struct.unpack_from("<B", blob, 4)
    if version != CACHE_VERSION:
        raise CheckpointError(f"数据缓存版本 {version} 与当前版本 {CACHE_VERSION} 不一致")
    prepared = pickle.loads(blob[5:])
    if not isinstance(prepared, PreparedData):
        raise CheckpointError("数据缓存内容损坏")
    return prepared


def cmd_ingest(config: RunConfig, force: bool = False) -> PreparedData:
    """
    写出数据缓存与 stats.json；
    输入 (配置的数据段 + 原始文件字节) 未变时直接命中缓存，不重写文件
    """
    out = Path(config.output_dir)
    cache_path, stats_path = out / CACHE_FILE, out / STATS_FILE
    digest = ingest_fingerprint(config)
    if not force and cache_path.exists() and stats_path.exists():
        if read_json(stats_path).get("fingerprint") == digest:
            prepared = decode_cache(cache_path.read_bytes())
            prepared.cache_hit = True
            logger.info("数据缓存命中: %s", cache_path)
            return prepared

    prepared = prepare_dataset(config)
    prepared.fingerprint = digest
    out.mkdir(parents=True, exist_ok=True)
    cache_path.write_bytes(encode_cache(prepared))
    write_json(stats_path, {
        "fingerprint": digest,
        "raw": prepared.raw_stats.model_dump(),
        "filtered": prepared.stats.model_dump(),
        "split": prepared.split.meta,
        "side_info": [{"field": prepared.dataset.field_names[s.field], "features": s.num_features}
                      for s in prepared.side_info],
    })
    logger.info("数据缓存写入: %s", cache_path)
    return prepared


def training_graph(config: RunConfig, prepared: PreparedData) -> NPartiteGraph:
    """只用训练集交互建图"""
    graph = build_graph(prepared.split.matrix("train"), prepared.dataset.schema, config.graph.context_edges)
    if config.graph.dump_edges:
        count = dump_edge_list(graph, config.graph.dump_edges)
        logger.info("边表写入 %s: %d 条", config.graph.dump_edges, count)
    return graph


def artifact_path(config: RunConfig, suffix: str) -> Path:
    return Path(config.output_dir) / f"{config.run_tag}{suffix}"


def checkpoint_path(config: RunConfig, seed: int) -> Path:
    return artifact_path(config, f"-seed{seed}.ckpt")


def cmd_train(config: RunConfig) -> List[TrainReport]:
    """每个种子训练一个模型，写检查点、训练日志与运行清单"""
    started = time.perf_counter()
    prepared = cmd_ingest(config)
    graph = training_graph(config, prepared)
    ingest_s = time.perf_counter() - started

    reports = []
    for seed in config.seeds:
        model = build_recommender(config, graph, prepared.side_info, seed)
        logger.info("%s seed %d: %d 个参数", model.tag, seed, model.num_parameters())
        report = train(model, prepared.split, graph, config.train, seed,
                       log_path=artifact_path(config, f"-seed{seed}.log.jsonl"),
                       deterministic=config.deterministic)
        save_checkpoint(checkpoint_path(config, seed), model)
        reports.append(report)

    timings = {"ingest_s": 0.0, "train_s": 0.0}
    if not config.deterministic:
        timings = {"ingest_s": round(ingest_s, 3), "train_s": round(time.perf_counter() - started - ingest_s, 3)}
    manifest = RunManifest(
        config=config.model_dump(mode="json"),
        raw_stats=prepared.raw_stats,
        stats=prepared.stats,
        version=version_string(),
        split=prepared.split.meta,
        timings=timings,
        train_reports=[r.model_dump(exclude={"epochs"}) | {"epochs_run": len(r.epochs)} for r in reports],
    )
    write_json(artifact_path(config, "-manifest.json"), manifest.model_dump(mode="json"))
    return reports


def _seed_of(path: Path, fallback: int) -> int:
    match = re.search(r"seed(\d+)\.ckpt$", path.name)
    return int(match.group(1)) if match else fallback


def load_models(config: RunConfig, prepared: PreparedData, graph: NPartiteGraph,
                checkpoints: Optional[str] = None) -> Dict[int, ScoringHead]:
    """按 glob (缺省为各种子的默认检查点) 读取模型"""
    if checkpoints:
        paths = [Path(p) for p in sorted(glob.glob(checkpoints))]
    else:
        paths = [p for p in (checkpoint_path(config, s) for s in config.seeds) if p.exists()]
    if not paths:
        raise CheckpointError(f"没有找到检查点: {checkpoints or artifact_path(config, '-seed*.ckpt')}")
    models = {}
    for i, path in enumerate(paths):
        seed = _seed_of(path, i)
        if seed in models:
            raise CheckpointError(f"种子 {seed} 对应多个检查点: {path}")
        model = build_recommender(config, graph, prepared.side_info, seed)
        models[seed] = load_checkpoint(path, model)
    return models


def cmd_eval(config: RunConfig, checkpoints: Optional[str] = None, long_tail: Optional[str] = None,
             k: int = 0, probe: bool = False, full_epoch: bool = False,
             baseline: Optional[str] = None) -> Union[EvalReport, List[Dict[str, float]]]:
    """测试集评估；可选长尾过滤或首步探测"""
    prepared = cmd_ingest(config)
    graph = training_graph(config, prepared)

    if probe:
        results = []
        for seed in config.seeds:
            model = build_recommender(config, graph, prepared.side_info, seed)
            results.append(first_step_probe(model, prepared.split, graph, config.train, seed,
                                            full_epoch=full_epoch or config.train.probe_full_epoch))
        write_json(artifact_path(config, "-probe.json"), results)
        return results

    models = load_models(config, prepared, graph, checkpoints)
    tasks = build_tasks(prepared.split, "test", config.eval.exclude_train_positives)
    evaluator = Evaluator(prepared.dataset.schema)
    if long_tail:
        lt_filter = LongTailFilter(LongTailMode(long_tail), k)
        report = evaluator.long_tail_evaluate(models, tasks, lt_filter, prepared.split.train, config.eval.ks)
        stem = f"-longtail-{lt_filter.mode.value}-k{k}-report"
    else:
        report = evaluator.evaluate(models, tasks, config.eval.ks)
        stem = "-report"
    baseline_cells = read_report_cells(baseline) if baseline else None
    write_report_json(report, artifact_path(config, f"{stem}.json"))
    write_report_csv([report], artifact_path(config, f"{stem}.csv"), baseline_cells)
    return report


def grid_cells(config: RunConfig) -> List[Tuple[float, int, float]]:
    g = config.grid
    return list(itertools.product(g.learning_rates, g.batch_sizes, g.dropouts))


def cell_config(config: RunConfig, learning_rate: float, batch_size: int, dropout: float) -> RunConfig:
    train_config = config.train.model_copy(update={
        "learning_rate": learning_rate, "batch_size": batch_size, "dropout": dropout,
    })
    return config.model_copy(update={"train": train_config})


def database_url(config: RunConfig) -> str:
    return os.getenv("GCE_DATABASE_URL") or f"sqlite:///{Path(config.output_dir).resolve() / 'gridsearch.db'}"


def cmd_gridsearch(config: RunConfig) -> Tuple[RunConfig, List[GridCellResult]]:
    """
    学习率 × 批大小 × dropout 全网格，以首个种子训练，按验证集 NDCG@10 选最优；
    失败的单元记为 failed，搜索继续
    """
    prepared = cmd_ingest(config)
    graph = training_graph(config, prepared)
    seed = config.seeds[0]
    cells = grid_cells(config)
    engine = get_engine(database_url(config))
    logger.info("%s 网格搜索: %d 个单元", config.run_tag, len(cells))

    with session_scope(engine) as db:
        db.query(GridCell).filter(GridCell.run_name == config.name,
                                  GridCell.model_tag == config.run_tag).delete()

    for index, (lr, batch, dropout) in enumerate(cells):
        candidate = cell_config(config, lr, batch, dropout)
        row = GridCell(run_name=config.name, model_tag=config.run_tag, cell_index=index,
                       learning_rate=lr, batch_size=batch, dropout=dropout)
        try:
            model = build_recommender(candidate, graph, prepared.side_info, seed)
            report = train(model, prepared.split, graph, candidate.train, seed, deterministic=True)
            best = report.epochs[report.best_epoch - 1]
            row.status, row.val_ndcg10, row.val_hr10, row.best_epoch = "ok", best.val_ndcg10, best.val_hr10, report.best_epoch
            logger.info("单元 %d (lr=%g, batch=%d, dropout=%g): 验证 NDCG@10=%.4f",
                        index, lr, batch, dropout, best.val_ndcg10)
        except Exception as exc:
            logger.warning("单元 %d (lr=%g, batch=%d, dropout=%g) 失败: %s", index, lr, batch, dropout, exc)
            row.status, row.error = "failed", f"{type(exc).__name__}: {exc}"
        with session_scope(engine) as db:
            db.add(row)

    with session_scope(engine) as db:
        ranked = [GridCellResult.model_validate(c) for c in ranked_cells(db, config.name, config.run_tag)]
    engine.dispose()

    results_path = Path(config.output_dir) / "gridsearch-results.csv"
    pd.DataFrame([r.model_dump() for r in ranked]).to_csv(results_path, index=False)
    if not ranked or ranked[0].status != "ok":
        raise NumericError(f"网格中 {len(cells)} 个单元全部失败，详见 {results_path}")

    winner = ranked[0]
    best_config = cell_config(config, winner.learning_rate, winner.batch_size, winner.dropout)
    best_path = Path(config.output_dir) / "gridsearch-best.conf"
    best_path.write_text(render_config(best_config), encoding="utf-8")
    logger.info("最优单元 %d: lr=%g batch=%d dropout=%g 验证 NDCG@10=%.4f",
                winner.cell_index, winner.learning_rate, winner.batch_size, winner.dropout, winner.val_ndcg10)
    return best_config, ranked
