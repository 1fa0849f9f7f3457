"""
命令行入口
gce ingest|train|eval|gridsearch|check-grad|validate --config <path>
退出码: 0 成功, 1 配置错误, 2 数据错误, 3 数值错误
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from gcerec.exceptions import ConfigError, GceError
from gcerec.models.schemas import EvalReport, RunConfig
from gcerec.services import diagnostics_service, experiment_service
from gcerec.utils.helpers import format_mean_std, format_metric, load_run_config, write_json

logger = logging.getLogger("gcerec")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gce", description="图卷积嵌入上下文感知推荐: 数据处理、训练、评估")
    parser.add_argument("--log-level", default=None, help="日志级别 (缺省读取 GCE_LOG_LEVEL，默认 INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (("ingest", "读取、过滤、划分数据并写缓存"),
                            ("train", "按种子训练并写检查点"),
                            ("gridsearch", "学习率 × 批大小 × dropout 网格搜索")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="配置文件路径")
        p.add_argument("--deterministic", action="store_true", help="日志不写耗时，保证逐字节可复现")
        if name == "ingest":
            p.add_argument("--force", action="store_true", help="忽略缓存重新处理")

    p = sub.add_parser("eval", help="测试集评估")
    p.add_argument("--config", required=True, help="配置文件路径")
    p.add_argument("--checkpoints", default=None, help="检查点 glob，缺省为各种子的默认检查点")
    p.add_argument("--long-tail", choices=["items", "users"], default=None, help="长尾分析模式")
    p.add_argument("--k", type=int, default=0, help="长尾分析去掉的热门实体数")
    p.add_argument("--first-step-probe", action="store_true", help="只做一步更新后评估")
    p.add_argument("--full-epoch", action="store_true", help="首步探测改为完整一个 epoch")
    p.add_argument("--baseline", default=None, help="基线报告 JSON，用于计算相对提升")

    for name, help_text in (("check-grad", "梯度检查套件"), ("validate", "系统验证 (预言机检查)")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="配置文件路径 (仅用于确定输出目录)")
        if name == "validate":
            p.add_argument("--skip-timing", action="store_true", help="跳过耗时的复杂度测量")
            p.add_argument("--seed", type=int, default=0)
    return parser


def configure_logging(level: Optional[str]) -> None:
    level = (level or os.getenv("GCE_LOG_LEVEL") or "INFO").upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigError(f"未知日志级别: {level}")
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _load_config(args) -> RunConfig:
    overrides = {"deterministic": True} if getattr(args, "deterministic", False) else None
    return load_run_config(args.config, overrides)


def _print_report(report: EvalReport) -> None:
    print(f"📊 {report.model}: {report.tasks} 个任务, 种子 {report.seeds}")
    for cell in report.cells:
        print(f"  {cell.metric}@{cell.K}: {format_mean_std(cell.mean, cell.std)}")
    if report.long_tail:
        print(f"  长尾过滤: {report.long_tail}")


def run_ingest(args) -> int:
    config = _load_config(args)
    prepared = experiment_service.cmd_ingest(config, force=args.force)
    state = "缓存命中" if prepared.cache_hit else "已写入缓存"
    print(f"✅ 数据处理完成 ({state}): 原始 {prepared.raw_stats.model_dump(exclude={'fields', 'cardinalities'})}, "
          f"过滤后 {prepared.stats.model_dump(exclude={'fields', 'cardinalities'})}")
    return 0


def run_train(args) -> int:
    config = _load_config(args)
    reports = experiment_service.cmd_train(config)
    for report in reports:
        print(f"✅ seed {report.seed}: {len(report.epochs)} 个 epoch, 最佳 epoch {report.best_epoch}, "
              f"验证 NDCG@10 {format_metric(report.best_val_ndcg10)} ({report.stop_reason})")
    return 0


def run_eval(args) -> int:
    config = _load_config(args)
    result = experiment_service.cmd_eval(config, checkpoints=args.checkpoints, long_tail=args.long_tail,
                                         k=args.k, probe=args.first_step_probe, full_epoch=args.full_epoch,
                                         baseline=args.baseline)
    if isinstance(result, EvalReport):
        _print_report(result)
    else:
        for row in result:
            print(f"✅ seed {row['seed']}: 首步探测 NDCG@10 {format_metric(row['ndcg10'])}")
    return 0


def run_gridsearch(args) -> int:
    config = _load_config(args)
    best, ranked = experiment_service.cmd_gridsearch(config)
    failed = sum(1 for r in ranked if r.status == "failed")
    if failed:
        print(f"⚠️ {failed} 个网格单元失败，详见 gridsearch-results.csv")
    t = best.train
    print(f"✅ 最优配置: lr={t.learning_rate}, batch_size={t.batch_size}, dropout={t.dropout}, "
          f"验证 NDCG@10 {format_metric(ranked[0].val_ndcg10)}")
    return 0


def _output_dir(args) -> Path:
    if args.config:
        return Path(load_run_config(args.config).output_dir)
    return Path(os.getenv("GCE_OUTPUT_DIR") or ".")


def run_check_grad(args) -> int:
    results = diagnostics_service.run_gradient_suite()
    for r in results:
        status = "✅ PASS" if r.passed else "❌ FAIL"
        print(f"{status} {r.name}: 最大相对误差 {r.max_error:.2e} ({r.seconds:.2f}s)")
    write_json(_output_dir(args) / "check-grad.json", diagnostics_service.gradient_report(results))
    if not all(r.passed for r in results):
        print("❌ 梯度检查未通过")
        return 3
    return 0


def run_validate(args) -> int:
    validator = diagnostics_service.SystemValidator(seed=args.seed, output_dir=_output_dir(args))
    return 0 if validator.run_full_validation(include_timing=not args.skip_timing) else 3


HANDLERS = {
    "ingest": run_ingest,
    "train": run_train,
    "eval": run_eval,
    "gridsearch": run_gridsearch,
    "check-grad": run_check_grad,
    "validate": run_validate,
}


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        configure_logging(args.log_level)
        return HANDLERS[args.command](args)
    except GceError as exc:
        print(f"❌ {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception:
        logger.exception("未预期的错误")
        return 3


if __name__ == "__main__":
    sys.exit(main())
