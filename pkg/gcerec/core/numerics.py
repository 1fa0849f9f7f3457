"""
数值计算核心
稠密/稀疏矩阵运算、记录带式反向求导、Adam优化器、有限差分梯度检查

所有数值均为 float64。运算只有在某个 GradientTape 处于激活状态、
且至少一个输入被追踪时才会被记录。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from gcerec.exceptions import NodeIndexError, NumericError, ShapeError

logger = logging.getLogger(__name__)

SparseMatrix = sp.csr_matrix
Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_TAPE_STACK: List["GradientTape"] = []


class Tensor:
    """稠密矩阵，按行优先存储的 float64 数组"""

    __slots__ = ("value", "tracked", "name")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None):
        self.value = np.array(value, dtype=np.float64, copy=True, order="C")
        self.tracked = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"非标量张量无法转为数值: shape={self.shape}")
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return dense_matmul(self, other)


DenseMatrix = Tensor


def parameter(value, name: Optional[str] = None) -> Tensor:
    """创建可训练参数"""
    tensor = Tensor(value, requires_grad=True, name=name)
    if not np.all(np.isfinite(tensor.value)):
        raise NumericError(f"参数 {name} 含有非有限值")
    return tensor


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class _Op:
    name: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Backward


class GradientTape:
    """
    反向模式求导记录带
    前向运算按顺序记录，反向时严格逆序遍历
    """

    def __init__(self):
        self._ops: List[_Op] = []
        self.visited: List[str] = []

    def __enter__(self) -> "GradientTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.remove(self)

    def __len__(self) -> int:
        return len(self._ops)

    @property
    def op_names(self) -> List[str]:
        return [op.name for op in self._ops]

    def record(self, name: str, output: Tensor, inputs: Sequence[Tensor], backward: Backward) -> None:
        self._ops.append(_Op(name, output, tuple(inputs), backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> List[np.ndarray]:
        """计算标量 target 对 sources 的梯度，未参与计算的参数梯度为零"""
        if target.value.size != 1:
            raise ShapeError(f"反向传播目标必须是标量: shape={target.shape}")
        grads: Dict[int, np.ndarray] = {id(target): np.ones_like(target.value)}
        self.visited = []
        for op in reversed(self._ops):
            upstream = grads.get(id(op.output))
            if upstream is None:
                continue
            self.visited.append(op.name)
            for tensor, grad in zip(op.inputs, op.backward(upstream)):
                if grad is None or not tensor.tracked:
                    continue
                key = id(tensor)
                grads[key] = grad if key not in grads else grads[key] + grad
        return [np.array(grads[id(s)]) if id(s) in grads else np.zeros_like(s.value) for s in sources]


def _active_tape() -> Optional[GradientTape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(name: str, value: np.ndarray, inputs: Sequence[Tensor], backward: Backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = np.asarray(value, dtype=np.float64)
    out.tracked = False
    out.name = None
    tape = _active_tape()
    if tape is not None and any(t.tracked for t in inputs):
        out.tracked = True
        tape.record(name, out, inputs, backward)
    return out


def _sum_to_shape(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    # 广播的逆操作
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast(op: Callable[[np.ndarray, np.ndarray], np.ndarray], a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return op(a.value, b.value)
    except ValueError as exc:
        raise ShapeError(f"形状不兼容: {a.shape} 与 {b.shape}") from exc


# ---------------------------------------------------------------- 逐元素运算

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    value = _broadcast(np.add, a, b)
    return _record("add", value, (a, b),
                   lambda g: (_sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    value = _broadcast(np.subtract, a, b)
    return _record("sub", value, (a, b),
                   lambda g: (_sum_to_shape(g, a.shape), _sum_to_shape(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    value = _broadcast(np.multiply, a, b)
    return _record("mul", value, (a, b),
                   lambda g: (_sum_to_shape(g * b.value, a.shape), _sum_to_shape(g * a.value, b.shape)))


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    return _record("scale", a.value * factor, (a,), lambda g: (g * factor,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return _record("relu", np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def identity(x) -> Tensor:
    return as_tensor(x)


def sigmoid(x):
    """σ(x)=1/(1+e^{-x})；标量输入返回 float"""
    if not isinstance(x, Tensor):
        return float(expit(x)) if np.ndim(x) == 0 else expit(np.asarray(x, dtype=np.float64))
    s = expit(x.value)
    return _record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def softplus(x):
    """ln(1+e^x)，对大 |x| 数值稳定；标量输入返回 float"""
    if not isinstance(x, Tensor):
        value = np.logaddexp(0.0, np.asarray(x, dtype=np.float64))
        return float(value) if np.ndim(x) == 0 else value
    value = np.logaddexp(0.0, x.value)
    return _record("softplus", value, (x,), lambda g: (g * expit(x.value),))


ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "identity": identity,
}


# ---------------------------------------------------------------- 形状与归约

def reduce_sum(a, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    value = a.value.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.full(a.shape, float(np.asarray(g).reshape(-1)[0])),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record("sum", value, (a,), backward)


def reduce_mean(a) -> Tensor:
    a = as_tensor(a)
    if a.value.size == 0:
        raise ShapeError("空张量无法求均值")
    return scale(reduce_sum(a), 1.0 / a.value.size)


def reshape(a, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        value = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"无法将 {a.shape} 变形为 {shape}") from exc
    return _record("reshape", value, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"拼接维度不一致: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", value, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def gather_rows(a, ids) -> Tensor:
    """按行号取行，反向时梯度累加回被取的行"""
    a = as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= a.rows):
        raise NodeIndexError(f"行号越界: 范围 [0, {a.rows})，实际 [{ids.min()}, {ids.max()}]")

    def backward(g):
        grad = np.zeros_like(a.value)
        np.add.at(grad, ids, g)
        return (grad,)

    return _record("gather", a.value[ids], (a,), backward)


# ---------------------------------------------------------------- 矩阵乘法

def dense_matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"矩阵乘法维度不匹配: {a.shape} × {b.shape}")
    return _record("matmul", a.value @ b.value, (a, b),
                   lambda g: (g @ b.value.T, a.value.T @ g))


def sparse_dense_matmul(s: sp.spmatrix, d) -> Tensor:
    """稀疏×稠密，只遍历非零元；稀疏矩阵为常量，不接收梯度"""
    d = as_tensor(d)
    if d.value.ndim != 2 or s.shape[1] != d.shape[0]:
        raise ShapeError(f"稀疏矩阵乘法维度不匹配: {s.shape} × {d.shape}")
    s = s.tocsr()
    s_t = s.T.tocsr()
    return _record("spmm", np.asarray(s @ d.value), (d,), lambda g: (np.asarray(s_t @ g),))


def sparse_matrix(rows, cols, values, shape: Tuple[int, int]) -> SparseMatrix:
    """由三元组构造压缩行格式矩阵，重复坐标合并，列号有序"""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    if rows.size and (rows.min() < 0 or rows.max() >= shape[0] or cols.min() < 0 or cols.max() >= shape[1]):
        raise NodeIndexError(f"稀疏矩阵下标越界: shape={shape}")
    if not np.all(np.isfinite(values)):
        raise NumericError("稀疏矩阵含有非有限值")
    matrix = sp.csr_matrix((values, (rows, cols)), shape=shape)
    matrix.sum_duplicates()
    matrix.sort_indices()
    return matrix


def densify(s: sp.spmatrix) -> np.ndarray:
    return np.asarray(s.toarray(), dtype=np.float64)


# ---------------------------------------------------------------- 优化器

@dataclass
class AdamState:
    """单个参数的 Adam 状态"""
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_param(cls, param: Tensor, **hyper) -> "AdamState":
        return cls(m=np.zeros_like(param.value), v=np.zeros_like(param.value), **hyper)


def adam_step(state: AdamState, param: Tensor, grad: np.ndarray) -> Tensor:
    """带偏差修正的 Adam 更新，原地修改参数"""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ShapeError(f"Adam 形状不匹配: 参数 {param.shape}, 梯度 {grad.shape}, 状态 {state.m.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"参数 {param.name or '?'} 的梯度出现非有限值，训练中止 (step={state.step})")
    if state.weight_decay:
        grad = grad + state.weight_decay * param.value
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    param.value -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param


class Adam:
    """按名称管理一组参数的 Adam 优化器"""

    def __init__(self, params: Dict[str, Tensor], lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.states = {
            name: AdamState.for_param(p, lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
            for name, p in params.items()
        }

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        for name, param in self.params.items():
            adam_step(self.states[name], param, grads[name])


# ---------------------------------------------------------------- 梯度检查

def _probe(f: Callable[[], Tensor]) -> float:
    value = as_tensor(f())
    if value.value.size != 1:
        raise ShapeError(f"梯度检查要求标量函数: shape={value.shape}")
    result = value.item()
    if not np.isfinite(result):
        raise NumericError("梯度检查: 探测点函数值非有限")
    return result


def check_gradient(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                   max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """
    中心差分逐坐标对比解析梯度
    返回 max |analytic − numeric| / max(1, |analytic|)
    """
    if h <= 0:
        raise NumericError(f"差分步长必须为正: h={h}")
    with GradientTape() as tape:
        out = as_tensor(f())
    if out.value.size != 1:
        raise ShapeError(f"梯度检查要求标量函数: shape={out.shape}")
    if not np.isfinite(out.item()):
        raise NumericError("梯度检查: 探测点函数值非有限")
    analytic = tape.gradient(out, params)

    worst = 0.0
    for param, grad in zip(params, analytic):
        coords = list(np.ndindex(*param.shape))
        if max_coords is not None and len(coords) > max_coords:
            rng = rng or np.random.default_rng(0)
            picked = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(picked)]
        for idx in coords:
            original = param.value[idx]
            param.value[idx] = original + h
            upper = _probe(f)
            param.value[idx] = original - h
            lower = _probe(f)
            param.value[idx] = original
            numeric = (upper - lower) / (2.0 * h)
            worst = max(worst, abs(grad[idx] - numeric) / max(1.0, abs(grad[idx])))
    logger.debug("梯度检查完成: 最大相对误差 %.3e", worst)
    return worst
