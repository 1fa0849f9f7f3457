"""
诊断服务
梯度检查套件 (check-grad) 与系统验证器 (validate)
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
import scipy.sparse as sp

from gcerec.core.embeddings import EmbeddingTable, GceLayer, build_provider
from gcerec.core.graph import FieldSchema, build_graph
from gcerec.core.heads import FmHead, build_model, pair_term_identity, pair_term_literal
from gcerec.core.numerics import check_gradient, gather_rows
from gcerec.models.records import SideInfoMatrix
from gcerec.services.evaluation_service import Evaluator, RankTask, hr_at_k, ndcg_at_k, ndcg_from_rank
from gcerec.services.training_service import bpr_loss

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-4
GRADIENT_STEP = 1e-5

# 10 条交互、3 个字段 (用户 3, 物品 4, 上下文 4) 的玩具数据: (正样本, 负样本物品)
TOY_CARDINALITIES = (3, 4, 4)
TOY_POSITIVES = np.array([
    [0, 0, 1], [0, 1, 0], [0, 2, 1], [1, 1, 2], [1, 3, 1],
    [1, 0, 3], [2, 2, 0], [2, 3, 2], [2, 1, 3], [0, 3, 2],
], dtype=np.int64)
TOY_NEGATIVE_ITEMS = np.array([3, 2, 0, 0, 2, 1, 1, 0, 2, 1], dtype=np.int64)


@dataclass
class GradientCheckResult:
    name: str
    max_error: float
    passed: bool
    seconds: float


def toy_side_info() -> SideInfoMatrix:
    features = sp.csr_matrix(np.array([[1, 0, 1], [0, 1, 0], [1, 1, 0], [0, 0, 0]], dtype=np.float64))
    return SideInfoMatrix(1, features, ("a", "b", "c"))


def gradient_case(kind: str, provider_kind: str, seed: int = 0):
    """构造一个 打分头 × 嵌入提供者 组合及其 BPR 目标函数"""
    rng = np.random.default_rng(seed)
    schema = FieldSchema.from_cardinalities(TOY_CARDINALITIES)
    graph = build_graph(TOY_POSITIVES, schema)
    side_info = [toy_side_info()] if provider_kind == "gce-si" else []
    provider = build_provider(provider_kind, graph, 4, rng, side_info=side_info)
    model = build_model(kind, provider, schema.num_fields, rng, hidden_sizes=(6, 3))
    # FM / NCF 的偏置初始为 0，随机化以覆盖对应梯度
    for name, param in model.named_parameters().items():
        if name.startswith("head.w"):
            param.value[...] = rng.normal(scale=0.1, size=param.shape)
    negatives = TOY_POSITIVES.copy()
    negatives[:, 1] = TOY_NEGATIVE_ITEMS
    pos_ids = graph.indexer.to_global(TOY_POSITIVES)
    neg_ids = graph.indexer.to_global(negatives)

    def objective():
        h = model.propagate(training=False)
        return bpr_loss(model.score_batch(pos_ids, node_embeddings=h), model.score_batch(neg_ids, node_embeddings=h))

    return model, objective


def run_gradient_suite(tolerance: float = GRADIENT_TOLERANCE, h: float = GRADIENT_STEP,
                       providers: Tuple[str, ...] = ("table", "gce", "gce-si")) -> List[GradientCheckResult]:
    """对全部 打分头 × 嵌入提供者 组合做中心差分梯度检查"""
    results = []
    for kind in ("mf", "fm", "ncf"):
        for provider_kind in providers:
            started = time.perf_counter()
            model, objective = gradient_case(kind, provider_kind)
            error = check_gradient(objective, list(model.named_parameters().values()), h=h)
            result = GradientCheckResult(model.tag, float(error), bool(error < tolerance),
                                         time.perf_counter() - started)
            logger.info("梯度检查 %s: 最大相对误差 %.3e", result.name, result.max_error)
            results.append(result)
    return results


def random_schema(rng: np.random.Generator, max_nodes: int) -> FieldSchema:
    num_fields = int(rng.integers(2, 5))
    while True:
        cards = rng.integers(1, max(2, max_nodes // num_fields) + 1, size=num_fields)
        if cards.sum() <= max_nodes:
            return FieldSchema.from_cardinalities([int(c) for c in cards])


def random_records(rng: np.random.Generator, schema: FieldSchema, count: int) -> np.ndarray:
    return np.stack([rng.integers(0, c, size=count) for c in schema.cardinalities], axis=1).astype(np.int64)


def dense_normalized(adjacency: np.ndarray) -> np.ndarray:
    a_hat = adjacency + np.eye(adjacency.shape[0])
    d = np.diag(1.0 / np.sqrt(a_hat.sum(axis=1)))
    return d @ a_hat @ d


def fm_literal_oracle(model: FmHead, table: np.ndarray, ids: np.ndarray) -> float:
    """在 |V| 维稀疏 x 上逐对累加: w0 + Σ w_i x_i + Σ_{i<j} ⟨v_i, v_j⟩ x_i x_j"""
    n = table.shape[0]
    x = np.zeros(n)
    x[ids] = 1.0
    w0 = float(model.global_bias.value[0, 0])
    w = model.node_bias.value[:, 0]
    total = w0 + float(sum(w[i] * x[i] for i in range(n)))
    for i in range(n):
        for j in range(i + 1, n):
            total += float(table[i] @ table[j]) * x[i] * x[j]
    return total


class SystemValidator:
    """系统验证器: 逐项运行数值与指标的预言机检查并生成报告"""

    def __init__(self, seed: int = 0, output_dir: Union[str, Path] = "."):
        self.rng = np.random.default_rng(seed)
        self.output_dir = Path(output_dir)
        self.test_results: List[Dict] = []

    def log_test(self, test_name: str, success: bool, message: str = ""):
        """记录测试结果"""
        status = "✅ PASS" if success else "❌ FAIL"
        print(f"{status} {test_name}: {message}")
        self.test_results.append({
            "test": test_name,
            "success": bool(success),
            "message": message,
            "timestamp": datetime.now().isoformat(),
        })

    def test_gradient_suite(self):
        """梯度检查: 每个组合的最大相对误差 < 1e-4"""
        started = time.perf_counter()
        results = run_gradient_suite()
        worst = max(r.max_error for r in results)
        failed = [r.name for r in results if not r.passed]
        self.log_test("梯度检查", not failed,
                      f"{len(results)} 个组合, 最大误差 {worst:.2e}, 耗时 {time.perf_counter() - started:.1f}s"
                      + (f", 失败: {failed}" if failed else ""))

    def test_graph_oracles(self, instances: int = 200, max_nodes: int = 20):
        """邻接对称、同字段块为零、度一致、归一化与稠密公式一致"""
        problems = []
        for trial in range(instances):
            schema = random_schema(self.rng, max_nodes)
            records = random_records(self.rng, schema, int(self.rng.integers(1, 30)))
            graph = build_graph(records, schema)
            a = graph.adjacency.toarray()
            offsets = schema.indexer().offsets
            if not np.array_equal(a, a.T):
                problems.append(f"{trial}: 不对称")
            for f in range(schema.num_fields):
                if a[offsets[f]:offsets[f + 1], offsets[f]:offsets[f + 1]].any():
                    problems.append(f"{trial}: 字段 {f} 块非零")
            if not np.array_equal(graph.degrees, a.sum(axis=1)):
                problems.append(f"{trial}: 度不一致")
            if np.abs(graph.normalized.toarray() - dense_normalized(a)).max() > 1e-12:
                problems.append(f"{trial}: 归一化误差过大")
        self.log_test("图结构预言机", not problems, f"{instances} 个实例" + (f", 问题: {problems[:5]}" if problems else ""))

    def test_permutation_equivariance(self, instances: int = 50, max_nodes: int = 12):
        """字段内重新编号 ⇒ 邻接矩阵按相同置换变换"""
        problems = 0
        for _ in range(instances):
            schema = random_schema(self.rng, max_nodes)
            records = random_records(self.rng, schema, int(self.rng.integers(1, 20)))
            offsets = schema.indexer().offsets
            perms = [self.rng.permutation(c) for c in schema.cardinalities]
            relabeled = np.stack([perms[f][records[:, f]] for f in range(schema.num_fields)], axis=1)
            p = np.concatenate([perms[f] + offsets[f] for f in range(schema.num_fields)])
            a = build_graph(records, schema).adjacency.toarray()
            b = build_graph(relabeled, schema).adjacency.toarray()
            expected = np.zeros_like(a)
            expected[np.ix_(p, p)] = a
            if not np.array_equal(b, expected):
                problems += 1
        self.log_test("置换等变性", problems == 0, f"{instances} 个实例, {problems} 个不一致")

    def test_metric_oracles(self, tasks: int = 1000, max_items: int = 20):
        """排序与 HR/NDCG 与逐个打分后全排序的结果一致"""
        mismatches = 0
        per_model = 20
        for start in range(0, tasks, per_model):
            schema = FieldSchema.from_cardinalities([int(self.rng.integers(1, 6)), int(self.rng.integers(1, max_items + 1)),
                                                     int(self.rng.integers(1, 4))])
            table = EmbeddingTable(schema.num_nodes, 3, self.rng)
            model = FmHead(table, schema.num_fields)
            model.node_bias.value[...] = self.rng.normal(size=model.node_bias.shape)
            evaluator = Evaluator(schema)
            offsets = schema.indexer().offsets
            batch = [RankTask(int(self.rng.integers(schema.cardinalities[0])), (int(self.rng.integers(schema.cardinalities[2])),),
                              int(self.rng.integers(schema.cardinalities[1]))) for _ in range(per_model)]
            ranks = evaluator.truth_ranks(model, batch)
            for task, rank in zip(batch, ranks):
                scored = [(-model.score((task.user + offsets[0], item + offsets[1], task.contexts[0] + offsets[2])), item)
                          for item in range(schema.cardinalities[1])]
                oracle = [item for _, item in sorted(scored)]
                k = int(self.rng.integers(1, max_items + 1))
                ranked = evaluator.rank(model, task, k)
                if ranked != oracle[:k] or oracle.index(task.truth) + 1 != rank:
                    mismatches += 1
                elif hr_at_k(ranked, task.truth, k) != float(rank <= k) or \
                        abs(ndcg_at_k(ranked, task.truth, k) - ndcg_from_rank(np.array([rank]), k)[0]) > 0:
                    mismatches += 1
        closed_form = ndcg_at_k([7, 1, 2], 7, 10) == 1.0 and ndcg_at_k([1, 2, 7], 7, 10) == 0.5
        self.log_test("指标预言机", mismatches == 0 and closed_form,
                      f"{tasks} 个任务, {mismatches} 个不一致, 闭式检查 {'通过' if closed_form else '失败'}")

    def test_fm_fidelity(self, instances: int = 20, max_nodes: int = 30):
        """表嵌入 FM 与逐对双重循环的原始公式一致，平方和恒等式成立"""
        worst_score, worst_pair = 0.0, 0.0
        for _ in range(instances):
            schema = random_schema(self.rng, max_nodes)
            table = EmbeddingTable(schema.num_nodes, 5, self.rng)
            model = FmHead(table, schema.num_fields)
            model.global_bias.value[...] = self.rng.normal()
            model.node_bias.value[...] = self.rng.normal(size=model.node_bias.shape)
            ids = schema.indexer().to_global(random_records(self.rng, schema, 5))
            scores = model.score_batch(ids).value
            for row, score in zip(ids, scores):
                worst_score = max(worst_score, abs(score - fm_literal_oracle(model, table.table.value, row)))
            fields = [gather_rows(table.table, ids[:, f]) for f in range(schema.num_fields)]
            gap = np.abs(pair_term_identity(fields).value - pair_term_literal(fields).value).max()
            worst_pair = max(worst_pair, float(gap))
        ok = worst_score < 1e-10 and worst_pair < 1e-10
        self.log_test("FM 公式一致性", ok, f"打分误差 {worst_score:.2e}, 恒等式误差 {worst_pair:.2e}")

    def test_complexity_scaling(self, edge_counts=(1_000, 10_000, 100_000), nodes_per_field: int = 1000,
                                dim: int = 64, repeats: int = 5):
        """GCE 前向耗时随非零元数近似线性增长 (线性拟合残差 ≤ 20%)"""
        schema = FieldSchema.from_cardinalities([nodes_per_field, nodes_per_field])
        nnz, seconds = [], []
        for count in edge_counts:
            records = random_records(self.rng, schema, count)
            graph = build_graph(records, schema)
            layer = GceLayer(graph, dim, self.rng)
            timings = []
            for _ in range(repeats):
                started = time.perf_counter()
                layer.propagate(training=False)
                timings.append(time.perf_counter() - started)
            nnz.append(graph.normalized.nnz)
            seconds.append(float(np.median(timings)))
        slope, intercept = np.polyfit(nnz, seconds, 1)
        fitted = np.polyval([slope, intercept], nnz)
        residual = float(np.max(np.abs(np.array(seconds) - fitted) / np.array(seconds)))
        self.log_test("复杂度线性", residual <= 0.2,
                      f"nnz={nnz}, 耗时={[round(s, 5) for s in seconds]}, 最大相对残差 {residual:.2f}")

    def run_full_validation(self, include_timing: bool = True) -> bool:
        """运行完整的系统验证"""
        print("🔬 开始系统验证...")
        print("=" * 60)
        self.test_gradient_suite()
        self.test_graph_oracles()
        self.test_permutation_equivariance()
        self.test_metric_oracles()
        self.test_fm_fidelity()
        if include_timing:
            self.test_complexity_scaling()
        self.generate_report()
        return self.get_overall_result()

    def generate_report(self) -> Path:
        """生成验证报告"""
        print("\n" + "=" * 60)
        print("📊 系统验证报告")
        print("=" * 60)
        total_tests = len(self.test_results)
        passed_tests = sum(1 for r in self.test_results if r["success"])
        failed_tests = total_tests - passed_tests
        print(f"总测试数: {total_tests}")
        print(f"通过: {passed_tests}")
        print(f"失败: {failed_tests}")
        if failed_tests:
            print("\n❌ 失败的测试:")
            for r in self.test_results:
                if not r["success"]:
                    print(f"  - {r['test']}: {r['message']}")

        self.output_dir.mkdir(parents=True, exist_ok=True)
        report_file = self.output_dir / f"validation_report_{datetime.now().strftime('%Y%m%d_%H%M%S')}.json"
        with open(report_file, "w", encoding="utf-8") as f:
            json.dump({
                "validation_time": datetime.now().isoformat(),
                "summary": {
                    "total_tests": total_tests,
                    "passed": passed_tests,
                    "failed": failed_tests,
                    "success_rate": (passed_tests / total_tests) * 100 if total_tests else 0.0,
                },
                "test_results": self.test_results,
            }, f, ensure_ascii=False, indent=2)
        print(f"\n📄 详细报告已保存至: {report_file}")
        return report_file

    def get_overall_result(self) -> bool:
        """全部通过才算验证成功"""
        ok = bool(self.test_results) and all(r["success"] for r in self.test_results)
        print("\n🎉 系统验证通过！" if ok else "\n❌ 系统验证失败，存在需要修复的问题。")
        return ok


def gradient_report(results: List[GradientCheckResult]) -> List[Dict]:
    return [asdict(r) for r in results]
