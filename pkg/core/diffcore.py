"""
最小反向模式自动微分引擎
只提供编码器与 InfoNCE 损失所需的算子；无通用广播，形状不符直接报错
"""

import itertools
import logging
import threading
from collections.abc import Iterator, Sequence
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils.error_handling import ShapeError


logger = logging.getLogger(__name__)

# 每个线程独立的状态：推理线程关闭梯度不影响训练线程
_state = threading.local()


def current_dtype():
    return getattr(_state, "dtype", np.float32)


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """临时切换新建张量的浮点类型（梯度检验使用 float64）"""
    previous = current_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = previous


@contextmanager
def no_grad() -> Iterator[None]:
    """关闭计算图记录（推理时使用）"""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """
    张量：行主序数值 + 可选梯度

    叶子张量（参数）的 grad 在 backward 时累加；中间结果不保留梯度。
    """

    def __init__(self, values, requires_grad: bool = False, _parents: tuple = (), _backward=None, op: str = ""):
        self.values = np.ascontiguousarray(np.asarray(values, dtype=current_dtype()))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def _make(values: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """创建算子输出；只有在需要梯度时才记录父节点"""
    tracked = tuple(p for p in parents if p.requires_grad)
    if grad_enabled() and tracked:
        return Tensor(values, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(values, op=op)


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ========================================
# 计算图与反向传播
# ========================================
class Graph:
    """按拓扑序记录的计算图"""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        """从根节点出发做迭代式 DFS，得到拓扑序（父节点在前）"""
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]

        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        return cls(order)

    def backward(self, root: Tensor) -> None:
        """逆拓扑序访问每个节点恰好一次，叶子节点累加梯度"""
        grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=root.values.dtype)}

        for node in reversed(self.nodes):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node._backward is None:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue

            parent_grads = node._backward(grad)
            for parent, parent_grad in zip(node._parents, parent_grads, strict=True):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


def backward(loss: Tensor) -> None:
    """对标量损失做反向传播，梯度累加到所有参与计算的参数上"""
    if loss.values.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        logger.debug("backward 调用于不需要梯度的张量，忽略")
        return
    Graph.from_root(loss).backward(loss)


# ========================================
# 逐元素算子
# ========================================
def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return _make(a.values + b.values, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return _make(a.values - b.values, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    av, bv = a.values, b.values
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _make(x.values * factor, (x,), lambda g: (g * factor,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _make(np.where(mask, x.values, 0), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xv = x.values
    return _make(np.log(xv), (x,), lambda g: (g / xv,), "log")


# ========================================
# 形状与归约算子
# ========================================
def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    """求和（float64 累加后转回当前精度）"""
    out = np.sum(x.values, axis=axis, dtype=np.float64)
    shape = x.shape

    def _backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(out, (x,), _backward, "sum")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = x.shape
    return _make(x.values.reshape(shape), (x,), lambda g: (g.reshape(original),), "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected 2D tensor, got {x.shape}")
    return _make(x.values.T, (x,), lambda g: (g.T,), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """沿指定轴拼接"""
    if not tensors:
        raise ShapeError("concat: empty input")
    values = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(values, tuple(tensors), _backward, "concat")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channels: spatial mismatch {a.shape} vs {b.shape}")
    return concat([a, b], axis=0)


def flatten_cells(x: Tensor) -> Tensor:
    """(c, *spatial) -> (格子数, c)"""
    c = x.shape[0]
    spatial = x.shape[1:]
    out = x.values.reshape(c, -1).T

    def _backward(g):
        return (g.T.reshape((c, *spatial)),)

    return _make(out, (x,), _backward, "flatten_cells")


def index_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """按行索引取子矩阵，x: (M, c)，rows: 任意形状整数数组 -> rows.shape + (c,)"""
    rows = np.asarray(rows, dtype=np.int64)
    shape = x.shape

    def _backward(g):
        grad = np.zeros(shape, dtype=g.dtype)
        np.add.at(grad, rows.reshape(-1), g.reshape(-1, shape[1]))
        return (grad,)

    return _make(x.values[rows], (x,), _backward, "index_rows")


def gather_columns(x: Tensor, columns: np.ndarray) -> Tensor:
    """逐行取列，x: (n, M)，columns: (n, K) -> (n, K)"""
    columns = np.asarray(columns, dtype=np.int64)
    if columns.ndim != 2 or columns.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_columns: index shape {columns.shape} incompatible with {x.shape}")
    shape = x.shape
    rows = np.broadcast_to(np.arange(shape[0])[:, None], columns.shape)

    def _backward(g):
        grad = np.zeros(shape, dtype=g.dtype)
        np.add.at(grad, (rows, columns), g)
        return (grad,)

    return _make(np.take_along_axis(x.values, columns, axis=1), (x,), _backward, "gather_columns")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """逐行内积 (n, c), (n, c) -> (n,)"""
    _require_same_shape("rowdot", a, b)
    return sum(mul(a, b), axis=a.ndim - 1)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """向量内积 -> 标量"""
    if a.ndim != 1:
        raise ShapeError(f"dot: expected vectors, got {a.shape}")
    return rowdot(a, b)


def logsumexp(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """
    数值稳定的 log-sum-exp（减去最大值，float64 计算）

    Args:
        x: 输入张量
        axis: 归约轴
        mask: 与 x 同形的布尔数组，False 的元素不参与
    """
    xv = x.values.astype(np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"logsumexp: mask shape {mask.shape} vs {x.shape}")
        if not np.all(np.any(mask, axis=axis)):
            raise ShapeError("logsumexp: a reduction slice is fully masked")
        xv = np.where(mask, xv, -np.inf)

    peak = np.max(xv, axis=axis, keepdims=True)
    shifted = np.exp(xv - peak)
    total = np.sum(shifted, axis=axis, keepdims=True)
    out = np.squeeze(peak + np.log(total), axis=axis)
    softmax = shifted / total

    def _backward(g):
        return ((np.expand_dims(g, axis) * softmax).astype(x.values.dtype),)

    return _make(out, (x,), _backward, "logsumexp")


# ========================================
# 卷积与上采样
# ========================================
def _per_axis(value, dim: int, name: str) -> tuple[int, ...]:
    if isinstance(value, int | np.integer):
        return (int(value),) * dim
    value = tuple(int(v) for v in value)
    if len(value) != dim:
        raise ShapeError(f"{name}: expected {dim} values, got {value}")
    return value


def conv_output_shape(in_shape, kernel, stride, padding) -> tuple[int, ...]:
    """out = floor((in + 2*pad - k) / stride) + 1"""
    return tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(in_shape, kernel, stride, padding, strict=True))


def conv(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """
    D 维卷积（D ∈ {2, 3}），x: (Cin, *spatial)，kernel: (Cout, Cin, *k)

    Args:
        x: 输入
        kernel: 卷积核
        bias: 可选偏置 (Cout,)
        stride: 步长（整数或逐轴）
        padding: 零填充（整数或逐轴）
    """
    dim = x.ndim - 1
    if dim not in (2, 3) or kernel.ndim != dim + 2 or kernel.shape[1] != x.shape[0]:
        raise ShapeError(f"conv: incompatible input {x.shape} and kernel {kernel.shape}")

    ksize = kernel.shape[2:]
    stride = _per_axis(stride, dim, "stride")
    padding = _per_axis(padding, dim, "padding")
    out_shape = conv_output_shape(x.shape[1:], ksize, stride, padding)
    if any(o < 1 for o in out_shape):
        raise ShapeError(f"conv: empty output for input {x.shape}, kernel {ksize}, stride {stride}")

    spatial_axes = tuple(range(1, dim + 1))
    xp = np.pad(x.values, ((0, 0), *((p, p) for p in padding)))
    windows = sliding_window_view(xp, ksize, axis=spatial_axes)
    windows = windows[(slice(None), *(slice(0, (o - 1) * s + 1, s) for o, s in zip(out_shape, stride, strict=True)))]

    kv = kernel.values
    out = np.tensordot(kv, windows, axes=([1, *range(2, 2 + dim)], [0, *range(1 + dim, 1 + 2 * dim)]))
    if bias is not None:
        if bias.shape != (kv.shape[0],):
            raise ShapeError(f"conv: bias shape {bias.shape} vs {kv.shape[0]} output channels")
        out = out + bias.values.reshape((-1,) + (1,) * dim)

    def _backward(g):
        grad_kernel = np.tensordot(g, windows, axes=(list(spatial_axes), list(spatial_axes)))
        grad_windows = np.tensordot(kv, g, axes=([0], [0]))  # (Cin, *k, *out)
        grad_xp = np.zeros(xp.shape, dtype=g.dtype)
        for offset in itertools.product(*(range(k) for k in ksize)):
            region = (
                slice(None),
                *(slice(o, o + (n - 1) * s + 1, s) for o, n, s in zip(offset, out_shape, stride, strict=True)),
            )
            grad_xp[region] += grad_windows[(slice(None), *offset)]
        interior = (slice(None), *(slice(p, p + n) for p, n in zip(padding, x.shape[1:], strict=True)))
        grads = [grad_xp[interior], grad_kernel]
        if bias is not None:
            grads.append(g.sum(axis=spatial_axes))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, _backward, "conv")


def upsample_nearest(x: Tensor, factor) -> Tensor:
    """最近邻上采样（逐轴整数倍）"""
    dim = x.ndim - 1
    factor = _per_axis(factor, dim, "factor")
    out = x.values
    for axis, f in enumerate(factor, start=1):
        out = np.repeat(out, f, axis=axis)

    def _backward(g):
        split_shape = [x.shape[0]]
        for n, f in zip(x.shape[1:], factor, strict=True):
            split_shape.extend([n, f])
        return (g.reshape(split_shape).sum(axis=tuple(range(2, 2 * dim + 1, 2))),)

    return _make(out, (x,), _backward, "upsample_nearest")


def linear_interp_matrix(n_in: int, factor: int, n_out: int | None = None) -> np.ndarray:
    """
    一维线性插值矩阵 (n_out, n_in)

    格子 i 位于像素 factor*i（角点对齐），超出最后一个格子的位置复制边缘值。
    """
    n_out = n_in * factor if n_out is None else n_out
    source = np.arange(n_out, dtype=np.float64) / factor
    lower = np.minimum(np.floor(source).astype(np.int64), n_in - 1)
    upper = np.minimum(lower + 1, n_in - 1)
    weight = np.where(lower == n_in - 1, 0.0, source - lower)

    matrix = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(matrix, (rows, lower), 1.0 - weight)
    np.add.at(matrix, (rows, upper), weight)
    return matrix


def apply_along_axis(values: np.ndarray, matrix: np.ndarray, axis: int) -> np.ndarray:
    """沿某轴左乘矩阵"""
    return np.moveaxis(np.tensordot(matrix, values, axes=([1], [axis])), 0, axis)


def upsample_linear(x: Tensor, factor) -> Tensor:
    """可分离线性上采样（逐轴整数倍）"""
    dim = x.ndim - 1
    factor = _per_axis(factor, dim, "factor")
    matrices = [
        linear_interp_matrix(n, f).astype(x.values.dtype) for n, f in zip(x.shape[1:], factor, strict=True)
    ]

    out = x.values
    for axis, matrix in enumerate(matrices, start=1):
        out = apply_along_axis(out, matrix, axis)

    def _backward(g):
        grad = g
        for axis, matrix in enumerate(matrices, start=1):
            grad = apply_along_axis(grad, matrix.T, axis)
        return (grad,)

    return _make(out, (x,), _backward, "upsample_linear")


def l2_normalize_channels(x: Tensor, eps: float = 1e-12) -> Tensor:
    """每个空间位置的通道向量 L2 归一化"""
    norm = np.sqrt(np.sum(x.values.astype(np.float64) ** 2, axis=0, keepdims=True))
    safe = np.maximum(norm, eps)
    out = (x.values / safe).astype(x.values.dtype)
    active = norm > eps

    def _backward(g):
        projection = np.sum(g * out, axis=0, keepdims=True)
        grad = np.where(active, g - out * projection, g) / safe
        return (grad.astype(g.dtype),)

    return _make(out, (x,), _backward, "l2_normalize")
