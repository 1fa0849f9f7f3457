"""
训练服务测试
"""

import math
import os
import sys

import numpy as np
import pytest
from scipy.stats import chisquare

# 添加项目根目录到路径
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from gcerec.core.graph import build_graph
from gcerec.exceptions import ConfigError, NumericError, SamplingError, ShapeError
from gcerec.models.schemas import DataConfig, FormatSpec, NegativeKeyEnum, RunConfig, TrainConfig
from gcerec.services.data_service import derive_last_clicked_context, leave_one_out_split, load_tabular
from gcerec.services.training_service import (
    EarlyStopping, PositiveIndex, Trainer, bpr_loss, build_recommender, first_step_probe, sample_negative,
    sample_negatives, train,
)


def small_train_config(**overrides):
    values = dict(allow_off_grid=True, embedding_size=4, max_epochs=3, batch_size=4, learning_rate=0.01,
                  patience=2, ncf_hidden=[4])
    values.update(overrides)
    return TrainConfig(**values)


def run_config(train_config, model="fm", provider="gce"):
    return RunConfig(data=DataConfig(path="unused.data"), model=model, provider=provider,
                     train=train_config, seeds=[0])


@pytest.fixture
def context_split(tmp_path):
    """6 个用户 × 6 条交互，上一次点击物品作为上下文"""
    lines = [f"u{u}\ti{(u + 3 * k) % 8}\t1\t{1000 * u + 10 * k}" for u in range(6) for k in range(6)]
    path = tmp_path / "u.data"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    ds = derive_last_clicked_context(load_tabular(path, FormatSpec(preset="ml100k")))
    return leave_one_out_split(ds)


@pytest.fixture
def separable_split(tmp_path):
    """2 个用户 × 2 个物品: a 只看 x，b 只看 y"""
    lines = [f"a\tx\t1\t{t}" for t in range(3)] + [f"b\ty\t1\t{t}" for t in range(3)]
    path = tmp_path / "u.data"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return leave_one_out_split(load_tabular(path, FormatSpec(preset="ml100k")))


def graph_of(split):
    return build_graph(split.matrix("train"), split.dataset.schema)


class TestNegativeSampling:
    """测试负采样"""

    def test_forced_choice(self):
        """测试物品 {0,1,2} 中 {0,1} 为正样本时只能采到 2"""
        index = PositiveIndex(np.array([[0, 0, 5], [0, 1, 5]]), num_items=3)
        rng = np.random.default_rng(0)
        assert {sample_negative(index, 0, (5,), rng) for _ in range(200)} == {2}

    def test_uniform_without_positives(self):
        """测试无正样本时均匀分布 (卡方检验 p > 0.01)"""
        index = PositiveIndex(np.array([[1, 0]]), num_items=5)
        rng = np.random.default_rng(0)
        draws = np.array([sample_negative(index, 0, (), rng) for _ in range(100_000)])
        counts = np.bincount(draws, minlength=5)
        assert chisquare(counts).pvalue > 0.01

    def test_degenerate_user(self):
        index = PositiveIndex(np.array([[0, 0]]), num_items=1)
        with pytest.raises(SamplingError):
            sample_negative(index, 0, (), np.random.default_rng(0))

    def test_exhaustive_fallback(self):
        """测试拒绝采样失败后仍能找到唯一的负样本"""
        rows = np.array([[0, i] for i in range(1000) if i != 417])
        index = PositiveIndex(rows, num_items=1000)
        assert sample_negative(index, 0, (), np.random.default_rng(1)) == 417

    def test_never_collides(self):
        """测试负样本与 (u, c) 正样本从不冲突"""
        rng = np.random.default_rng(2)
        rows = np.stack([rng.integers(0, 3, 40), rng.integers(0, 6, 40), rng.integers(0, 2, 40)], axis=1)
        index = PositiveIndex(rows, num_items=6)
        negatives = sample_negatives(index, rows, rng)
        for row, j in zip(rows, negatives):
            assert j not in index.positives(int(row[0]), (int(row[2]),))

    def test_user_key(self):
        """测试按用户键控时跨上下文的正样本也被排除"""
        rows = np.array([[0, 0, 0], [0, 1, 1]])
        by_context = PositiveIndex(rows, num_items=3)
        by_user = PositiveIndex(rows, num_items=3, key=NegativeKeyEnum.USER)
        assert by_context.positives(0, (0,)) == {0}
        assert by_user.positives(0, (0,)) == {0, 1}
        rng = np.random.default_rng(3)
        assert {sample_negative(by_user, 0, (0,), rng) for _ in range(100)} == {2}

    def test_index_from_split(self, context_split):
        index = PositiveIndex.from_split(context_split)
        direct = PositiveIndex(context_split.matrix("train"), context_split.dataset.cardinalities[1])
        assert index.num_items == direct.num_items
        assert index.by_context == direct.by_context
        assert index.by_user == direct.by_user


class TestBprLoss:
    """测试 BPR 损失"""

    def test_zero_margin(self):
        assert bpr_loss(np.array([1.5, -2.0]), np.array([1.5, -2.0])).item() == pytest.approx(math.log(2.0))

    def test_log_three_margin(self):
        loss = bpr_loss(np.array([math.log(3.0)]), np.array([0.0])).item()
        assert loss == pytest.approx(math.log(4.0 / 3.0), abs=1e-12)

    def test_monotone_in_margin(self):
        margins = [0.0, 1.0, 5.0, 50.0, 500.0]
        losses = [bpr_loss(np.array([m]), np.array([0.0])).item() for m in margins]
        assert all(a > b for a, b in zip(losses, losses[1:]))
        assert all(loss >= 0 for loss in losses)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            bpr_loss(np.zeros(2), np.zeros(3))

    def test_non_finite(self):
        with pytest.raises(NumericError):
            bpr_loss(np.array([np.inf]), np.array([0.0]))


class TestEarlyStopping:
    """测试早停"""

    def test_patience_window(self):
        """测试第 1 个 epoch 取得 0.3 后连续 5 个 0.2 → 第 6 个 epoch 后停止"""
        stopper = EarlyStopping(5)
        sequence = [0.3, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2]
        stopped_at = None
        for epoch, value in enumerate(sequence, start=1):
            stopper.update(epoch, value)
            if stopper.should_stop:
                stopped_at = epoch
                break
        assert stopped_at == 6
        assert stopper.best_epoch == 1

    def test_equal_value_is_not_improvement(self):
        stopper = EarlyStopping(1)
        assert stopper.update(1, 0.0)
        assert not stopper.update(2, 0.0)
        assert stopper.should_stop

    def test_invalid_patience(self):
        with pytest.raises(ConfigError):
            EarlyStopping(0)


class TestTrainer:
    """测试训练循环"""

    def test_loss_decreases_on_separable_data(self, separable_split):
        """测试线性可分数据上前 5 个 epoch 损失严格下降"""
        config = small_train_config(negative_key="user", max_epochs=5, batch_size=8, learning_rate=0.01)
        graph = graph_of(separable_split)
        model = build_recommender(run_config(config, "fm", "table"), graph, seed=0)
        trainer = Trainer(model, separable_split, graph, config, seed=0)
        losses = [trainer.run_epoch() for _ in range(5)]
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_restores_best_epoch(self, context_split, monkeypatch):
        """测试早停后恢复第 1 个 epoch 的参数"""
        config = small_train_config(max_epochs=10, patience=5)
        graph = graph_of(context_split)
        model = build_recommender(run_config(config), graph, seed=0)
        trainer = Trainer(model, context_split, graph, config, seed=0)
        sequence = iter([0.3, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2])
        saved = {}

        def fake_metrics(model, tasks, ks):
            value = next(sequence)
            if not saved:
                saved.update(trainer.snapshot())
            return {("HR", 10): value, ("NDCG", 10): value}

        monkeypatch.setattr(trainer.evaluator, "metrics", fake_metrics)
        report = trainer.fit()
        assert len(report.epochs) == 6
        assert report.stop_reason == "patience"
        assert report.best_epoch == 1
        assert report.best_val_ndcg10 == pytest.approx(0.3)
        for name, value in saved.items():
            assert np.array_equal(trainer.params[name].value, value)

    def test_max_epochs(self, context_split, tmp_path):
        config = small_train_config(max_epochs=2, patience=5)
        graph = graph_of(context_split)
        model = build_recommender(run_config(config), graph, seed=0)
        report = train(model, context_split, graph, config, seed=0, log_path=tmp_path / "log.jsonl",
                       deterministic=True)
        assert report.stop_reason == "max_epochs"
        assert [e.epoch for e in report.epochs] == [1, 2]
        lines = (tmp_path / "log.jsonl").read_text().splitlines()
        assert len(lines) == 2
        assert '"elapsed_s": 0.0' in lines[0]

    @pytest.mark.parametrize("model_kind,provider", [("fm", "gce"), ("ncf", "table"), ("mf", "gce")])
    def test_deterministic(self, context_split, model_kind, provider):
        """测试相同种子两次训练参数逐位一致"""
        config = small_train_config(dropout=0.15)
        graph = graph_of(context_split)
        runs = []
        for _ in range(2):
            model = build_recommender(run_config(config, model_kind, provider), graph, seed=7)
            report = train(model, context_split, graph, config, seed=7, deterministic=True)
            runs.append((report.model_dump(), {n: p.value.tobytes() for n, p in model.named_parameters().items()}))
        assert runs[0] == runs[1]

    def test_different_seeds_differ(self, context_split):
        config = small_train_config()
        graph = graph_of(context_split)
        a = build_recommender(run_config(config), graph, seed=0)
        b = build_recommender(run_config(config), graph, seed=1)
        assert not np.array_equal(a.provider.inputs.value, b.provider.inputs.value)

    def test_schema_mismatch(self, context_split, separable_split):
        config = small_train_config()
        graph = graph_of(separable_split)
        model = build_recommender(run_config(config), graph, seed=0)
        with pytest.raises(ShapeError):
            Trainer(model, context_split, graph, config)


class TestFirstStepProbe:
    """测试首步探测"""

    def test_single_batch(self, context_split):
        config = small_train_config(batch_size=2)
        graph = graph_of(context_split)
        model = build_recommender(run_config(config), graph, seed=3)
        before = model.provider.inputs.value.copy()
        result = first_step_probe(model, context_split, graph, config, seed=3)
        assert set(result) == {"seed", "loss", "hr10", "ndcg10"}
        assert result["seed"] == 3
        assert 0.0 <= result["ndcg10"] <= result["hr10"] <= 1.0
        assert not np.array_equal(model.provider.inputs.value, before)

    def test_full_epoch_flag(self, context_split):
        config = small_train_config(batch_size=2)
        graph = graph_of(context_split)
        one = first_step_probe(build_recommender(run_config(config), graph, seed=3), context_split, graph, config, seed=3)
        full = first_step_probe(build_recommender(run_config(config), graph, seed=3), context_split, graph, config,
                                seed=3, full_epoch=True)
        assert one["loss"] != full["loss"]

    def test_zero_parameters_fall_back_to_id_order(self, context_split):
        """测试 H=0、W=0 时首步梯度为零，所有分数相同，排名退化为按物品编号"""
        config = small_train_config(batch_size=2)
        graph = graph_of(context_split)
        model = build_recommender(run_config(config, "mf", "gce"), graph, seed=0)
        for param in model.named_parameters().values():
            param.value[...] = 0.0
        result = first_step_probe(model, context_split, graph, config, seed=0)
        assert all(not p.value.any() for p in model.named_parameters().values())
        ranks = context_split.matrix("test")[:, 1] + 1
        expected = np.mean([1.0 / math.log2(r + 1) if r <= 10 else 0.0 for r in ranks])
        assert result["ndcg10"] == pytest.approx(expected, abs=1e-12)
        assert result["loss"] == pytest.approx(math.log(2.0))
