"""
评估服务测试
"""

import math
import os
import sys

import numpy as np
import pandas as pd
import pytest

# 添加项目根目录到路径
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from gcerec.core.embeddings import EmbeddingTable
from gcerec.core.graph import FieldSchema
from gcerec.core.heads import FmHead, MfHead
from gcerec.exceptions import EvalError
from gcerec.models.schemas import LongTailMode
from gcerec.services.evaluation_service import (
    Evaluator, LongTailFilter, RankTask, filter_long_tail, hr_at_k, ndcg_at_k, order_items, popular_entities,
    read_report_cells, relative_improvement, report_table, write_report_csv, write_report_json,
)


def biased_model(schema, item_scores):
    """嵌入全零的 FM: 分数只由物品偏置决定"""
    model = FmHead(EmbeddingTable(schema.num_nodes, 2, initial=np.zeros((schema.num_nodes, 2))), schema.num_fields)
    offset = schema.indexer().offsets[1]
    model.node_bias.value[offset:offset + len(item_scores), 0] = item_scores
    return model


@pytest.fixture
def schema():
    """2 个用户, 3 个物品"""
    return FieldSchema.from_cardinalities([2, 3])


class TestRanking:
    """测试排序"""

    def test_descending_scores(self, schema):
        """测试分数 (0.1, 0.9, 0.5) → [1, 2, 0]"""
        model = biased_model(schema, [0.1, 0.9, 0.5])
        assert Evaluator(schema).rank(model, RankTask(0, (), 0), 3) == [1, 2, 0]

    def test_ties_by_item_id(self):
        schema = FieldSchema.from_cardinalities([1, 6])
        model = biased_model(schema, np.zeros(6))
        assert Evaluator(schema).rank(model, RankTask(0, (), 3), 4) == [0, 1, 2, 3]

    def test_order_items(self):
        scores = np.array([0.5, 0.7, 0.5, 0.7])
        assert order_items(scores, np.arange(4)).tolist() == [1, 3, 0, 2]

    def test_brute_force_oracle(self):
        """测试随机 FM 上 20 个物品与逐个打分后全排序一致"""
        rng = np.random.default_rng(0)
        schema = FieldSchema.from_cardinalities([3, 20, 2])
        model = FmHead(EmbeddingTable(schema.num_nodes, 4, rng), 3)
        evaluator = Evaluator(schema)
        offsets = schema.indexer().offsets
        task = RankTask(1, (1,), 5)
        scored = sorted((-model.score((1, item + offsets[1], 1 + offsets[2])), item) for item in range(20))
        assert evaluator.rank(model, task, 20) == [item for _, item in scored]
        assert evaluator.truth_ranks(model, [task])[0] == [item for _, item in scored].index(5) + 1

    def test_candidate_set(self, schema):
        """测试限定候选集时其余物品不参与排序"""
        model = biased_model(schema, [0.1, 0.9, 0.5])
        task = RankTask(0, (), 0, candidates=(0, 2))
        evaluator = Evaluator(schema)
        assert evaluator.rank(model, task, 3) == [2, 0]
        assert evaluator.truth_ranks(model, [task]).tolist() == [2]

    def test_invalid_candidates(self):
        with pytest.raises(EvalError):
            RankTask(0, (), 0, candidates=())
        with pytest.raises(EvalError):
            RankTask(0, (), 0, candidates=(1, 2))

    def test_chunked_scoring(self, schema):
        """测试分块打分结果与一次性打分一致"""
        rng = np.random.default_rng(1)
        model = FmHead(EmbeddingTable(schema.num_nodes, 3, rng), 2)
        tasks = [RankTask(u, (), i) for u in range(2) for i in range(3)]
        whole = Evaluator(schema).score_tasks(model, tasks)
        chunked = Evaluator(schema, chunk_rows=3).score_tasks(model, tasks)
        assert np.allclose(whole, chunked, rtol=0, atol=1e-12)


class TestMetrics:
    """测试 HR@K / NDCG@K"""

    def test_rank_one(self):
        assert hr_at_k([4, 1, 2], 4, 10) == 1.0
        assert ndcg_at_k([4, 1, 2], 4, 10) == 1.0

    def test_rank_three(self):
        ranked = [7, 8, 9, 1]
        assert ndcg_at_k(ranked, 9, 10) == 0.5
        assert hr_at_k(ranked, 9, 10) == 1.0

    def test_rank_eleven(self):
        ranked = list(range(20))
        assert hr_at_k(ranked, 10, 10) == 0.0
        assert ndcg_at_k(ranked, 10, 10) == 0.0

    def test_monotone_in_k(self):
        ranked = list(range(30))
        for truth in (0, 4, 15, 29):
            hr = [hr_at_k(ranked, truth, k) for k in range(1, 31)]
            ndcg = [ndcg_at_k(ranked, truth, k) for k in range(1, 31)]
            assert hr == sorted(hr) and ndcg == sorted(ndcg)
            assert all(n <= h for n, h in zip(ndcg, hr))

    def test_metrics_from_ranks(self, schema):
        """测试真实物品排名 1 和 3 的均值"""
        model = biased_model(schema, [0.9, 0.5, 0.1])
        tasks = [RankTask(0, (), 0), RankTask(1, (), 2)]
        metrics = Evaluator(schema).metrics(model, tasks, (1, 10))
        assert metrics[("HR", 10)] == 1.0
        assert metrics[("NDCG", 10)] == pytest.approx(0.75)
        assert metrics[("HR", 1)] == 0.5

    def test_constant_scores_follow_tie_rule(self):
        """测试全零模型: 真实物品排名等于其编号 + 1"""
        schema = FieldSchema.from_cardinalities([3, 12, 12])
        model = MfHead(EmbeddingTable(schema.num_nodes, 4, initial=np.zeros((schema.num_nodes, 4))), 3)
        tasks = [RankTask(u, (c,), truth) for u, c, truth in [(0, 1, 0), (1, 2, 2), (2, 0, 11)]]
        metrics = Evaluator(schema).metrics(model, tasks, (10,))
        expected = (1.0 + 1.0 / math.log2(4.0) + 0.0) / 3.0
        assert metrics[("NDCG", 10)] == pytest.approx(expected)

    def test_no_tasks(self, schema):
        with pytest.raises(EvalError):
            Evaluator(schema).metrics(biased_model(schema, [0, 0, 0]), [], (10,))

    def test_relative_improvement(self):
        assert relative_improvement(0.186, 0.220) == pytest.approx(18.28, abs=0.01)
        assert relative_improvement(0.0, 0.0) == 0.0


class TestEvaluate:
    """测试多种子汇总"""

    def test_single_task_perfect(self, schema):
        model = biased_model(schema, [0.9, 0.5, 0.1])
        report = Evaluator(schema).evaluate({0: model}, [RankTask(0, (), 0)], (10,))
        assert report.cell("HR", 10).mean == 1.0
        assert report.cell("NDCG", 10).mean == 1.0

    def test_two_tasks_average(self, schema):
        """测试 NDCG 分别为 1 和 0 → 均值 0.5"""
        model = biased_model(schema, [0.9, 0.5, 0.1])
        report = Evaluator(schema).evaluate({0: model}, [RankTask(0, (), 0), RankTask(1, (), 2)], (1,))
        assert report.cell("NDCG", 1).mean == 0.5

    def test_mean_and_std_over_seeds(self, schema):
        models = {0: biased_model(schema, [0.9, 0.5, 0.1]), 1: biased_model(schema, [0.1, 0.5, 0.9])}
        report = Evaluator(schema).evaluate(models, [RankTask(0, (), 0)], (1, 10))
        cell = report.cell("HR", 1)
        assert cell.seeds == [1.0, 0.0]
        assert cell.mean == 0.5
        assert cell.std == 0.5
        assert [(c.metric, c.K) for c in report.cells] == [("HR", 1), ("NDCG", 1), ("HR", 10), ("NDCG", 10)]
        assert report.seeds == [0, 1]
        assert report.model == "fm-table"

    def test_task_order_invariant(self):
        rng = np.random.default_rng(2)
        schema = FieldSchema.from_cardinalities([4, 9])
        model = FmHead(EmbeddingTable(schema.num_nodes, 3, rng), 2)
        tasks = [RankTask(int(u), (), int(i)) for u, i in zip(rng.integers(0, 4, 12), rng.integers(0, 9, 12))]
        a = Evaluator(schema).evaluate({0: model}, tasks)
        b = Evaluator(schema).evaluate({0: model}, tasks[::-1])
        for x, y in zip(a.cells, b.cells):
            assert (x.metric, x.K) == (y.metric, y.K)
            assert x.mean == pytest.approx(y.mean, abs=1e-12)

    def test_no_models(self, schema):
        with pytest.raises(EvalError):
            Evaluator(schema).evaluate({}, [RankTask(0, (), 0)])


class TestLongTail:
    """测试长尾分析"""

    @pytest.fixture
    def train(self):
        # 物品 1 最热门 (3 次)，用户 0 最活跃
        return pd.DataFrame({"user": [0, 0, 1, 0, 1], "item": [1, 1, 1, 0, 2]})

    def test_popular_entities(self, train):
        assert popular_entities(train, "item", 2) == [1, 0]
        assert popular_entities(train, "user", 1) == [0]
        assert popular_entities(train, "item", 0) == []

    def test_toy_items(self, schema, train):
        """测试两个任务中一个的真实物品最热门，k=1 后剩 1 个"""
        tasks = [RankTask(0, (), 1), RankTask(1, (), 2)]
        kept = filter_long_tail(tasks, LongTailFilter(LongTailMode.ITEMS, 1), train)
        assert kept == [RankTask(1, (), 2)]

    def test_users_mode(self, schema, train):
        tasks = [RankTask(0, (), 1), RankTask(1, (), 2)]
        kept = filter_long_tail(tasks, LongTailFilter(LongTailMode.USERS, 1), train)
        assert [t.user for t in kept] == [1]

    def test_k_zero_equals_plain(self, schema, train, tmp_path):
        """测试 k=0 与普通评估输出完全一致"""
        model = biased_model(schema, [0.2, 0.9, 0.5])
        tasks = [RankTask(0, (), 1), RankTask(1, (), 2)]
        evaluator = Evaluator(schema)
        plain = write_report_json(evaluator.evaluate({0: model}, tasks), tmp_path / "plain.json")
        tail = evaluator.long_tail_evaluate({0: model}, tasks, LongTailFilter(LongTailMode.ITEMS, 0), train, (10, 20))
        assert tail.long_tail == {"mode": "items", "k": 0, "removed": 0}
        filtered = write_report_json(tail, tmp_path / "tail.json")
        assert plain.read_bytes() == filtered.read_bytes()

    def test_everything_filtered(self, schema, train):
        model = biased_model(schema, [0.2, 0.9, 0.5])
        with pytest.raises(EvalError):
            Evaluator(schema).long_tail_evaluate({0: model}, [RankTask(0, (), 1)],
                                                 LongTailFilter(LongTailMode.ITEMS, 1), train)

    def test_negative_k(self):
        with pytest.raises(EvalError):
            LongTailFilter(LongTailMode.ITEMS, -1)


class TestReportFiles:
    """测试报告输出"""

    @pytest.fixture
    def report(self, schema):
        models = {0: biased_model(schema, [0.9, 0.5, 0.1]), 1: biased_model(schema, [0.1, 0.5, 0.9])}
        return Evaluator(schema).evaluate(models, [RankTask(0, (), 0), RankTask(1, (), 1)], (1, 2))

    def test_json_cells(self, report, tmp_path):
        path = write_report_json(report, tmp_path / "report.json")
        cells = read_report_cells(path)
        assert set(cells) == {("HR", 1), ("NDCG", 1), ("HR", 2), ("NDCG", 2)}
        assert cells[("HR", 2)] == report.cell("HR", 2).mean

    def test_csv_with_baseline(self, report, tmp_path):
        baseline = {("HR", 2): report.cell("HR", 2).mean / 2}
        path = write_report_csv([report], tmp_path / "report.csv", baseline)
        table = pd.read_csv(path)
        assert table.loc[0, "model"] == "fm-table"
        assert table.loc[0, "HR@2_improv"] == pytest.approx(100.0)
        assert "NDCG@2_improv" not in table.columns

    def test_table_columns(self, report):
        table = report_table([report])
        assert list(table.columns[:3]) == ["model", "tasks", "seeds"]
        assert "NDCG@1_std" in table.columns

    def test_missing_baseline(self, tmp_path):
        with pytest.raises(EvalError):
            read_report_cells(tmp_path / "none.json")
