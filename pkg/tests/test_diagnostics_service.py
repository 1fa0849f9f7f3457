"""
诊断服务测试
"""

import json
import os
import sys

import pytest

# 添加项目根目录到路径
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from gcerec.services.diagnostics_service import SystemValidator, gradient_report, run_gradient_suite


@pytest.fixture
def validator(tmp_path):
    return SystemValidator(seed=0, output_dir=tmp_path)


class TestSystemValidator:
    """测试系统验证器"""

    def test_graph_oracles(self, validator):
        validator.test_graph_oracles(instances=20, max_nodes=10)
        assert validator.test_results[-1]["success"]

    def test_permutation_equivariance(self, validator):
        """测试字段内重新编号后邻接矩阵按相同置换变换"""
        validator.test_permutation_equivariance(instances=10, max_nodes=8)
        assert validator.test_results[-1]["success"]

    def test_metric_oracles(self, validator):
        validator.test_metric_oracles(tasks=60, max_items=8)
        assert validator.test_results[-1]["success"]

    def test_fm_fidelity(self, validator):
        validator.test_fm_fidelity(instances=5, max_nodes=12)
        assert validator.test_results[-1]["success"]

    def test_report_file(self, validator, tmp_path):
        """测试报告写入 validation_report_*.json 并统计通过率"""
        validator.log_test("通过项", True)
        validator.log_test("失败项", False, "示例")
        path = validator.generate_report()
        assert path.parent == tmp_path
        assert path.name.startswith("validation_report_")
        report = json.loads(path.read_text(encoding="utf-8"))
        assert report["summary"] == {"total_tests": 2, "passed": 1, "failed": 1, "success_rate": 50.0}
        assert not validator.get_overall_result()

    def test_empty_is_not_success(self, validator):
        assert not validator.get_overall_result()


class TestGradientReport:
    """测试梯度检查报告"""

    def test_rows(self):
        results = run_gradient_suite()
        rows = gradient_report(results)
        assert [r["name"] for r in rows] == [r.name for r in results]
        assert all(set(r) >= {"name", "max_error", "passed"} for r in rows)
