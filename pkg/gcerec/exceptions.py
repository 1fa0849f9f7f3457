"""
异常定义
每类错误携带命令行退出码: 1 配置错误, 2 数据错误, 3 数值错误
"""


class GceError(Exception):
    """项目内所有错误的基类"""
    exit_code = 3


class ConfigError(GceError, ValueError):
    """配置错误"""
    exit_code = 1


class DataError(GceError, ValueError):
    """数据读取、过滤、划分错误"""
    exit_code = 2


class CheckpointError(GceError, ValueError):
    """检查点或缓存格式/版本不匹配"""
    exit_code = 2


class ShapeError(GceError, ValueError):
    """矩阵维度不匹配"""
    exit_code = 3


class NumericError(GceError, ArithmeticError):
    """非有限数值、梯度检查失败"""
    exit_code = 3


class SamplingError(GceError, RuntimeError):
    """负采样无可用物品"""
    exit_code = 3


class EvalError(GceError, ValueError):
    """评估任务为空等"""
    exit_code = 3


class NodeIndexError(GceError, IndexError):
    """节点编号越界"""
    exit_code = 3
