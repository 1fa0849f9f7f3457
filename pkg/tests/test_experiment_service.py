"""
实验服务与命令行测试
"""

import os
import shutil
import sys
from pathlib import Path

import pytest

# 添加项目根目录到路径
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from gcerec.exceptions import DataError
from gcerec.main import main
from gcerec.models.schemas import RunConfig, DataConfig
from gcerec.services import experiment_service
from gcerec.utils.helpers import load_run_config, read_json

SAMPLES = Path(__file__).resolve().parent.parent / "data" / "samples"

CONFIG_TEXT = """# 测试用小配置
name = toy
model = {model}
provider = {provider}
seeds = [0, 1]
output_dir = {output_dir}
data.path = toy_interactions.tsv
data.format.preset = ml100k
data.side_info = [{{"path": "toy_genres.txt", "field": "item"}}]
train.allow_off_grid = true
train.embedding_size = 4
train.max_epochs = 2
train.patience = 2
train.batch_size = 8
train.learning_rate = 0.01
train.ncf_hidden = [4]
grid.learning_rates = [0.01]
grid.batch_sizes = [8]
grid.dropouts = [0.0]
"""


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("GCE_OUTPUT_DIR", "GCE_DATABASE_URL", "GCE_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def workspace(tmp_path):
    for name in ("toy_interactions.tsv", "toy_genres.txt"):
        shutil.copy(SAMPLES / name, tmp_path / name)
    return tmp_path


def write_config(workspace, model="fm", provider="gce", extra=""):
    path = workspace / f"{model}-{provider}.conf"
    text = CONFIG_TEXT.format(model=model, provider=provider, output_dir=workspace / "runs")
    path.write_text(text + extra, encoding="utf-8")
    return path


class TestIngest:
    """测试数据处理与缓存"""

    def test_writes_stats(self, workspace):
        config = load_run_config(write_config(workspace))
        prepared = experiment_service.cmd_ingest(config)
        assert not prepared.cache_hit
        stats = read_json(workspace / "runs" / "stats.json")
        assert (stats["raw"]["users"], stats["raw"]["items"], stats["raw"]["interactions"]) == (8, 8, 48)
        # 每个用户的第一条交互没有上一次点击，被丢弃
        assert stats["filtered"]["interactions"] == 40
        assert stats["side_info"] == [{"field": "item", "features": 5}]
        assert len(prepared.split.test) == 8

    def test_cache_hit(self, workspace):
        """测试输入未变时第二次 ingest 命中缓存且不重写文件"""
        config = load_run_config(write_config(workspace))
        experiment_service.cmd_ingest(config)
        cache = workspace / "runs" / experiment_service.CACHE_FILE
        before = cache.stat().st_mtime_ns
        again = experiment_service.cmd_ingest(config)
        assert again.cache_hit
        assert cache.stat().st_mtime_ns == before

    def test_changed_input_invalidates_cache(self, workspace):
        config = load_run_config(write_config(workspace))
        experiment_service.cmd_ingest(config)
        with open(workspace / "toy_interactions.tsv", "a", encoding="utf-8") as f:
            f.write("9\t101\t5\t880009000\n")
        assert not experiment_service.cmd_ingest(config).cache_hit

    def test_missing_file(self, tmp_path):
        config = RunConfig(data=DataConfig(path=str(tmp_path / "absent.data")), output_dir=str(tmp_path))
        with pytest.raises(DataError):
            experiment_service.cmd_ingest(config)

    def test_empty_file(self, tmp_path):
        """测试空交互文件在默认流水线中报 DataError 而不是 KeyError"""
        path = tmp_path / "empty.data"
        path.write_text("", encoding="utf-8")
        config = RunConfig(data=DataConfig(path=str(path), format={"preset": "ml100k"}), output_dir=str(tmp_path))
        with pytest.raises(DataError):
            experiment_service.prepare_dataset(config)


class TestCommandLine:
    """测试命令行退出码"""

    def test_ingest_ok(self, workspace, capsys):
        assert main(["ingest", "--config", str(write_config(workspace))]) == 0
        assert "✅" in capsys.readouterr().out

    def test_missing_data_exit_code(self, workspace, capsys):
        """测试数据文件缺失时退出码为 2 且错误信息包含路径"""
        path = write_config(workspace)
        (workspace / "toy_interactions.tsv").unlink()
        assert main(["ingest", "--config", str(path)]) == 2
        assert "toy_interactions.tsv" in capsys.readouterr().err

    def test_empty_data_exit_code(self, workspace):
        (workspace / "toy_interactions.tsv").write_text("", encoding="utf-8")
        assert main(["ingest", "--config", str(write_config(workspace))]) == 2

    def test_bad_model_exit_code(self, workspace):
        assert main(["train", "--config", str(write_config(workspace, model="deepfm"))]) == 1

    def test_missing_config_exit_code(self, tmp_path):
        assert main(["ingest", "--config", str(tmp_path / "absent.conf")]) == 1

    def test_eval_without_checkpoints(self, workspace):
        assert main(["eval", "--config", str(write_config(workspace))]) == 2

    def test_check_grad(self, tmp_path, monkeypatch):
        """测试梯度检查全部通过并写出报告"""
        monkeypatch.setenv("GCE_OUTPUT_DIR", str(tmp_path))
        assert main(["check-grad"]) == 0
        results = read_json(tmp_path / "check-grad.json")
        assert len(results) == 9
        assert all(r["passed"] for r in results)


class TestTrainAndEval:
    """测试训练、评估流水线"""

    def test_deterministic_runs_identical(self, workspace):
        """测试两次 --deterministic 训练的检查点与日志逐字节一致"""
        path = str(write_config(workspace, "ncf", "gce-si"))
        runs = workspace / "runs"
        artifacts = ["ncf-gce-si-seed0.ckpt", "ncf-gce-si-seed1.ckpt",
                     "ncf-gce-si-seed0.log.jsonl", "ncf-gce-si-seed1.log.jsonl", "ncf-gce-si-manifest.json"]
        assert main(["train", "--config", path, "--deterministic"]) == 0
        first = {name: (runs / name).read_bytes() for name in artifacts}
        assert main(["train", "--config", path, "--deterministic"]) == 0
        second = {name: (runs / name).read_bytes() for name in artifacts}
        assert first == second
        assert first["ncf-gce-si-seed0.ckpt"] != first["ncf-gce-si-seed1.ckpt"]

    def test_manifest(self, workspace):
        config = load_run_config(write_config(workspace), {"deterministic": True})
        reports = experiment_service.cmd_train(config)
        assert [r.seed for r in reports] == [0, 1]
        manifest = read_json(workspace / "runs" / "fm-gce-manifest.json")
        assert manifest["timings"] == {"ingest_s": 0.0, "train_s": 0.0}
        assert manifest["stats"]["interactions"] == 40
        assert len(manifest["train_reports"]) == 2

    def test_eval_report(self, workspace):
        """测试 8 个物品的数据上 HR@10 恒为 1，报告含 2 个指标 × 2 个 K"""
        config = load_run_config(write_config(workspace))
        experiment_service.cmd_train(config)
        report = experiment_service.cmd_eval(config)
        assert report.seeds == [0, 1]
        assert report.tasks == 8
        assert {(c.metric, c.K) for c in report.cells} == {("HR", 10), ("HR", 20), ("NDCG", 10), ("NDCG", 20)}
        assert report.cell("HR", 10).mean == 1.0
        assert report.cell("HR", 10).std == 0.0
        assert 0.0 < report.cell("NDCG", 10).mean <= 1.0
        rows = read_json(workspace / "runs" / "fm-gce-report.json")
        assert len(rows) == 4
        assert (workspace / "runs" / "fm-gce-report.csv").exists()

    def test_long_tail_zero_matches_plain(self, workspace):
        """测试长尾 k=0 的报告与普通评估逐字节一致"""
        path = str(write_config(workspace))
        assert main(["train", "--config", path]) == 0
        assert main(["eval", "--config", path]) == 0
        assert main(["eval", "--config", path, "--long-tail", "items", "--k", "0"]) == 0
        runs = workspace / "runs"
        plain = (runs / "fm-gce-report.json").read_bytes()
        assert (runs / "fm-gce-longtail-items-k0-report.json").read_bytes() == plain

    def test_checkpoint_glob(self, workspace):
        config = load_run_config(write_config(workspace))
        experiment_service.cmd_train(config)
        pattern = str(workspace / "runs" / "fm-gce-seed0.ckpt")
        report = experiment_service.cmd_eval(config, checkpoints=pattern)
        assert report.seeds == [0]
        assert report.cell("NDCG", 10).std == 0.0

    def test_first_step_probe(self, workspace):
        config = load_run_config(write_config(workspace))
        results = experiment_service.cmd_eval(config, probe=True)
        assert [r["seed"] for r in results] == [0, 1]
        assert read_json(workspace / "runs" / "fm-gce-probe.json") == results

    def test_baseline_improvement(self, workspace):
        path = str(write_config(workspace))
        assert main(["train", "--config", path]) == 0
        assert main(["eval", "--config", path]) == 0
        runs = workspace / "runs"
        baseline = runs / "baseline.json"
        shutil.copy(runs / "fm-gce-report.json", baseline)
        assert main(["eval", "--config", path, "--baseline", str(baseline)]) == 0
        header = (runs / "fm-gce-report.csv").read_text(encoding="utf-8").splitlines()[0]
        assert "_improv" in header


class TestGridSearch:
    """测试网格搜索"""

    def test_default_grid_size(self):
        config = RunConfig(data=DataConfig(path="unused.data"))
        cells = experiment_service.grid_cells(config)
        assert len(cells) == 60
        assert len(set(cells)) == 60

    def test_single_cell(self, workspace):
        """测试 1×1×1 网格返回该单元的配置"""
        config = load_run_config(write_config(workspace))
        best, ranked = experiment_service.cmd_gridsearch(config)
        assert len(ranked) == 1
        assert ranked[0].status == "ok"
        assert (best.train.learning_rate, best.train.batch_size, best.train.dropout) == (0.01, 8, 0.0)
        assert (workspace / "runs" / "gridsearch-best.conf").exists()
        assert load_run_config(workspace / "runs" / "gridsearch-best.conf").train == best.train

    def test_ranked_by_validation_ndcg(self, workspace):
        path = write_config(workspace)
        text = path.read_text(encoding="utf-8").replace("grid.learning_rates = [0.01]", "grid.learning_rates = [0.01, 0.001]")
        text = text.replace("grid.dropouts = [0.0]", "grid.dropouts = [0.0, 0.5]")
        path.write_text(text, encoding="utf-8")
        best, ranked = experiment_service.cmd_gridsearch(load_run_config(path))
        assert len(ranked) == 4
        values = [r.val_ndcg10 for r in ranked]
        assert values == sorted(values, reverse=True)
        assert best.train.learning_rate == ranked[0].learning_rate
        assert best.train.dropout == ranked[0].dropout
        rows = (workspace / "runs" / "gridsearch-results.csv").read_text(encoding="utf-8").splitlines()
        assert len(rows) == 5

    def test_rerun_replaces_ledger(self, workspace):
        config = load_run_config(write_config(workspace))
        experiment_service.cmd_gridsearch(config)
        _, ranked = experiment_service.cmd_gridsearch(config)
        assert len(ranked) == 1
