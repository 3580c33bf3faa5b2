"""自动微分引擎：数值梯度检验、卷积形状、计算图"""

import threading

import numpy as np
import pytest

from core import augment, contrast, net
from core import diffcore as dc
from core.rng import make_rng
from utils.error_handling import ShapeError


def numeric_grad(fn, value: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """中心差分"""
    grad = np.zeros_like(value)
    it = np.nditer(value, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        plus = value.copy()
        minus = value.copy()
        plus[idx] += eps
        minus[idx] -= eps
        grad[idx] = (fn(plus) - fn(minus)) / (2 * eps)
    return grad


def check_grad(build, *arrays, atol: float = 1e-6):
    """build(*tensors) -> 标量张量；逐个输入比较解析梯度与数值梯度"""
    with dc.default_dtype(np.float64):
        leaves = [dc.Tensor(a, requires_grad=True) for a in arrays]
        loss = build(*leaves)
        dc.backward(loss)

        for k, leaf in enumerate(leaves):

            def fn(v, k=k):
                inputs = [dc.Tensor(a) for a in arrays]
                inputs[k] = dc.Tensor(v)
                return build(*inputs).item()

            expected = numeric_grad(fn, np.asarray(arrays[k], dtype=np.float64))
            np.testing.assert_allclose(leaf.grad, expected, atol=atol, rtol=1e-5)


@pytest.fixture
def gen():
    return np.random.default_rng(0)


def test_elementwise_grads(gen):
    a = gen.normal(size=(3, 4))
    b = gen.uniform(0.5, 2.0, size=(3, 4))
    check_grad(lambda x, y: dc.sum(dc.mul(dc.relu(x), dc.log(y)) + dc.exp(dc.scale(x, 0.3))), a, b)


def test_conv_grads_with_stride_and_padding(gen):
    x = gen.normal(size=(2, 7, 6))
    k = gen.normal(size=(3, 2, 3, 3))
    bias = gen.normal(size=(3,))
    weights = gen.normal(size=(3, 4, 3))

    def build(xt, kt, bt):
        out = dc.conv(xt, kt, bt, stride=2, padding=1)
        return dc.sum(dc.mul(out, dc.Tensor(weights)))

    check_grad(build, x, k, bias)


def test_conv3d_grads(gen):
    x = gen.normal(size=(1, 4, 4, 4))
    k = gen.normal(size=(2, 1, 3, 3, 3))
    check_grad(lambda xt, kt: dc.sum(dc.relu(dc.conv(xt, kt, padding=1))), x, k)


def test_upsample_and_normalize_grads(gen):
    x = gen.normal(size=(3, 3, 2))
    weights = gen.normal(size=(3, 6, 4))

    def build(xt):
        up = dc.upsample_linear(xt, 2)
        near = dc.upsample_nearest(xt, 2)
        return dc.sum(dc.mul(dc.l2_normalize_channels(up + near), dc.Tensor(weights)))

    check_grad(build, x)


def test_logsumexp_and_gather_grads(gen):
    x = gen.normal(size=(4, 6))
    columns = np.array([[0, 2, 2], [1, 1, 5], [3, 4, 0], [5, 5, 5]])
    mask = np.array([[True, True, False], [True, False, True], [True, True, True], [False, False, True]])

    def build(xt):
        gathered = dc.gather_columns(xt, columns)
        return dc.sum(dc.logsumexp(gathered, axis=1, mask=mask))

    check_grad(build, x)


def test_matmul_and_index_rows_grads(gen):
    a = gen.normal(size=(5, 3))
    b = gen.normal(size=(3, 4))
    rows = np.array([0, 4, 4, 2])

    def build(at, bt):
        picked = dc.index_rows(at, rows)
        return dc.sum(dc.rowdot(dc.matmul(picked, bt), dc.matmul(picked, bt)))

    check_grad(build, a, b)


def test_flatten_concat_transpose_grads(gen):
    a = gen.normal(size=(2, 3, 3))
    b = gen.normal(size=(1, 3, 3))
    weights = gen.normal(size=(3, 9))

    def build(at, bt):
        cells = dc.flatten_cells(dc.concat_channels(at, bt))
        return dc.sum(dc.mul(dc.transpose(cells), dc.Tensor(weights)))

    check_grad(build, a, b)


@pytest.mark.parametrize(
    ("size", "kernel", "stride", "padding"),
    [((9, 9), (3, 3), (1, 1), (1, 1)), ((9, 8), (3, 3), (2, 2), (1, 1)), ((16, 16, 16), (3, 3, 3), (2, 2, 2), (0, 0, 0))],
)
def test_conv_output_shape_law(size, kernel, stride, padding):
    x = dc.Tensor(np.zeros((1, *size)))
    k = dc.Tensor(np.zeros((2, 1, *kernel)))
    out = dc.conv(x, k, stride=stride, padding=padding)
    expected = tuple((n + 2 * p - kk) // s + 1 for n, kk, s, p in zip(size, kernel, stride, padding))
    assert out.shape == (2, *expected)
    assert dc.conv_output_shape(size, kernel, stride, padding) == expected


def test_identity_kernel_returns_input(gen):
    x = gen.normal(size=(1, 5, 6)).astype(np.float32)
    kernel = np.zeros((1, 1, 3, 3), dtype=np.float32)
    kernel[0, 0, 1, 1] = 1.0
    out = dc.conv(dc.Tensor(x), dc.Tensor(kernel), padding=1)
    np.testing.assert_allclose(out.numpy(), x, atol=1e-6)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        dc.conv(dc.Tensor(np.zeros((2, 4, 4))), dc.Tensor(np.zeros((1, 3, 3, 3))))


def test_diamond_graph_accumulates_once():
    with dc.default_dtype(np.float64):
        x = dc.Tensor(np.array([2.0, 3.0]), requires_grad=True)
        y = dc.mul(x, x)
        loss = dc.sum(y + y)
        dc.backward(loss)
    np.testing.assert_allclose(x.grad, 4.0 * np.array([2.0, 3.0]))


def test_backward_requires_scalar():
    x = dc.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        dc.backward(dc.scale(x, 2.0))


def test_elementwise_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        dc.add(dc.Tensor(np.ones(3)), dc.Tensor(np.ones(4)))


def test_logsumexp_fully_masked_slice_raises():
    x = dc.Tensor(np.zeros((2, 3)))
    mask = np.array([[True, False, False], [False, False, False]])
    with pytest.raises(ShapeError):
        dc.logsumexp(x, axis=1, mask=mask)


def test_logsumexp_is_stable_for_large_inputs():
    x = dc.Tensor(np.array([[1000.0, 1000.0]]))
    out = dc.logsumexp(x, axis=1).numpy()
    np.testing.assert_allclose(out, [1000.0 + np.log(2.0)], rtol=1e-6)


def test_linear_interp_matrix_clamps_edges():
    matrix = dc.linear_interp_matrix(3, 2)
    assert matrix.shape == (6, 3)
    np.testing.assert_allclose(matrix.sum(axis=1), 1.0)
    values = matrix @ np.array([0.0, 2.0, 4.0])
    np.testing.assert_allclose(values, [0.0, 1.0, 2.0, 3.0, 4.0, 4.0])


def test_no_grad_skips_graph_recording():
    x = dc.Tensor(np.ones(3), requires_grad=True)
    with dc.no_grad():
        y = dc.scale(x, 2.0)
    assert not y.requires_grad
    assert dc.grad_enabled()


def test_no_grad_is_thread_local():
    seen = {}
    entered = threading.Event()
    release = threading.Event()

    def worker():
        with dc.no_grad():
            entered.set()
            release.wait(timeout=5)

    thread = threading.Thread(target=worker)
    thread.start()
    entered.wait(timeout=5)
    seen["main"] = dc.grad_enabled()
    release.set()
    thread.join()
    assert seen["main"] is True


def test_default_dtype_restores():
    with dc.default_dtype(np.float64):
        assert dc.Tensor([1.0]).values.dtype == np.float64
    assert dc.Tensor([1.0]).values.dtype == np.float32


# ========================================
# 随机实例的方向导数检验
# ========================================
def directional_check(build, arrays, gen, eps: float = 1e-6) -> tuple[float, float]:
    """
    随机加权输出、随机方向扰动全部输入：返回 (Σ<grad, dir>, 中心差分)
    """
    with dc.default_dtype(np.float64):
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        leaves = [dc.Tensor(a, requires_grad=True) for a in arrays]
        out = build(*leaves)
        weights = gen.normal(size=out.shape)
        dc.backward(dc.sum(dc.mul(out, dc.Tensor(weights))))

        directions = [gen.normal(size=a.shape) for a in arrays]
        analytic = 0.0
        for leaf, direction in zip(leaves, directions, strict=True):
            if leaf.grad is not None:
                analytic += float(np.sum(leaf.grad * direction))

        def value(t: float) -> float:
            inputs = [dc.Tensor(a + t * d) for a, d in zip(arrays, directions, strict=True)]
            return float(np.sum(build(*inputs).values * weights))

        numeric = (value(eps) - value(-eps)) / (2 * eps)
    return analytic, numeric


def _shape(gen, ndim: int, low: int = 1, high: int = 5) -> tuple[int, ...]:
    return tuple(int(v) for v in gen.integers(low, high + 1, size=ndim))


def _away_from_zero(gen, shape):
    return gen.uniform(0.1, 2.0, size=shape) * gen.choice([-1.0, 1.0], size=shape)


def _case_add(gen):
    shape = _shape(gen, 2)
    return [gen.normal(size=shape), gen.normal(size=shape)], dc.add


def _case_sub(gen):
    shape = _shape(gen, 3)
    return [gen.normal(size=shape), gen.normal(size=shape)], dc.sub


def _case_mul(gen):
    shape = _shape(gen, 2)
    return [gen.normal(size=shape), gen.normal(size=shape)], dc.mul


def _case_scale(gen):
    factor = float(gen.normal())
    return [gen.normal(size=_shape(gen, 2))], lambda x: dc.scale(x, factor)


def _case_relu(gen):
    return [_away_from_zero(gen, _shape(gen, 3))], dc.relu


def _case_exp(gen):
    return [gen.normal(size=_shape(gen, 2))], dc.exp


def _case_log(gen):
    return [gen.uniform(0.5, 3.0, size=_shape(gen, 2))], dc.log


def _case_sum(gen):
    axis = [None, 0, 1][int(gen.integers(3))]
    return [gen.normal(size=_shape(gen, 2))], lambda x: dc.sum(x, axis=axis)


def _case_reshape(gen):
    a, b, c = _shape(gen, 3)
    target = [(a * b, c), (a, b * c), (a * b * c,)][int(gen.integers(3))]
    return [gen.normal(size=(a, b, c))], lambda x: dc.reshape(x, target)


def _case_transpose(gen):
    return [gen.normal(size=_shape(gen, 2))], dc.transpose


def _case_concat(gen):
    axis = int(gen.integers(2))
    count = int(gen.integers(1, 4))
    other = int(gen.integers(1, 5))
    shapes = []
    for _ in range(count):
        along = int(gen.integers(1, 5))
        shapes.append((along, other) if axis == 0 else (other, along))
    return [gen.normal(size=s) for s in shapes], lambda *xs: dc.concat(list(xs), axis=axis)


def _case_concat_channels(gen):
    spatial = _shape(gen, 2)
    return [gen.normal(size=(int(gen.integers(1, 4)), *spatial)), gen.normal(size=(int(gen.integers(1, 4)), *spatial))], dc.concat_channels


def _case_flatten_cells(gen):
    ndim = int(gen.integers(2, 4))
    return [gen.normal(size=(int(gen.integers(1, 5)), *_shape(gen, ndim, high=4)))], dc.flatten_cells


def _case_index_rows(gen):
    m, c = _shape(gen, 2)
    rows = gen.integers(m, size=_shape(gen, int(gen.integers(1, 3))))
    return [gen.normal(size=(m, c))], lambda x: dc.index_rows(x, rows)


def _case_gather_columns(gen):
    n, m, k = _shape(gen, 3)
    columns = gen.integers(m, size=(n, k))
    return [gen.normal(size=(n, m))], lambda x: dc.gather_columns(x, columns)


def _case_matmul(gen):
    n, k, m = _shape(gen, 3)
    return [gen.normal(size=(n, k)), gen.normal(size=(k, m))], dc.matmul


def _case_rowdot(gen):
    shape = _shape(gen, 2)
    return [gen.normal(size=shape), gen.normal(size=shape)], dc.rowdot


def _case_dot(gen):
    c = int(gen.integers(1, 9))
    return [gen.normal(size=c), gen.normal(size=c)], dc.dot


def _case_logsumexp(gen):
    shape = _shape(gen, 2)
    axis = int(gen.integers(2))
    if gen.random() < 0.3:
        return [3.0 * gen.normal(size=shape)], lambda x: dc.logsumexp(x, axis=axis)
    mask = gen.random(shape) < 0.6
    # 每个归约切片至少保留一个元素
    if axis == 1:
        mask[np.arange(shape[0]), gen.integers(shape[1], size=shape[0])] = True
    else:
        mask[gen.integers(shape[0], size=shape[1]), np.arange(shape[1])] = True
    return [3.0 * gen.normal(size=shape)], lambda x: dc.logsumexp(x, axis=axis, mask=mask)


def _conv_case(gen, dim: int, low: int, high: int):
    c_in, c_out = (int(v) for v in gen.integers(1, 4, size=2))
    k = int(gen.choice([1, 3]))
    stride = int(gen.integers(1, 3))
    padding = int(gen.integers(0, 2))
    spatial = _shape(gen, dim, low=low, high=high)
    arrays = [gen.normal(size=(c_in, *spatial)), gen.normal(size=(c_out, c_in, *(k,) * dim))]
    if gen.random() < 0.5:
        arrays.append(gen.normal(size=c_out))
        return arrays, lambda x, w, b: dc.conv(x, w, b, stride=stride, padding=padding)
    return arrays, lambda x, w: dc.conv(x, w, stride=stride, padding=padding)


def _case_conv2d(gen):
    return _conv_case(gen, 2, 4, 7)


def _case_conv3d(gen):
    return _conv_case(gen, 3, 3, 4)


def _upsample_case(gen, op):
    dim = int(gen.integers(2, 4))
    factor = tuple(int(v) for v in gen.integers(1, 4, size=dim))
    return [gen.normal(size=(int(gen.integers(1, 4)), *_shape(gen, dim, high=3)))], lambda x: op(x, factor)


def _case_upsample_nearest(gen):
    return _upsample_case(gen, dc.upsample_nearest)


def _case_upsample_linear(gen):
    return _upsample_case(gen, dc.upsample_linear)


def _case_l2_normalize(gen):
    c = int(gen.integers(2, 6))
    spatial = _shape(gen, 2, high=4)
    direction = gen.normal(size=(c, *spatial))
    direction /= np.linalg.norm(direction, axis=0, keepdims=True)
    return [direction * gen.uniform(0.5, 3.0, size=spatial)], dc.l2_normalize_channels


OP_CASES = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "scale": _case_scale,
    "relu": _case_relu,
    "exp": _case_exp,
    "log": _case_log,
    "sum": _case_sum,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "concat": _case_concat,
    "concat_channels": _case_concat_channels,
    "flatten_cells": _case_flatten_cells,
    "index_rows": _case_index_rows,
    "gather_columns": _case_gather_columns,
    "matmul": _case_matmul,
    "rowdot": _case_rowdot,
    "dot": _case_dot,
    "logsumexp": _case_logsumexp,
    "conv2d": _case_conv2d,
    "conv3d": _case_conv3d,
    "upsample_nearest": _case_upsample_nearest,
    "upsample_linear": _case_upsample_linear,
    "l2_normalize_channels": _case_l2_normalize,
}


@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_random_instances_match_finite_differences(op):
    gen = np.random.default_rng(sorted(OP_CASES).index(op))
    for instance in range(100):
        arrays, build = OP_CASES[op](gen)
        analytic, numeric = directional_check(build, arrays, gen)
        assert abs(analytic - numeric) <= 1e-6 * (1 + abs(analytic)), f"{op} instance {instance}: {analytic} vs {numeric}"


def test_l2_normalize_grads_across_norm_range():
    gen = np.random.default_rng(42)
    for instance in range(100):
        c = int(gen.integers(2, 9))
        spatial = _shape(gen, 2, high=4)
        direction = gen.normal(size=(c, *spatial))
        direction /= np.linalg.norm(direction, axis=0, keepdims=True)
        norms = 10.0 ** gen.uniform(-1.0, 1.0, size=spatial)
        x = direction * norms
        np.testing.assert_allclose(np.linalg.norm(x, axis=0), norms)

        analytic, numeric = directional_check(dc.l2_normalize_channels, [x], gen, eps=1e-7)
        assert abs(analytic - numeric) <= 1e-6 * (1 + abs(analytic)), f"instance {instance}: {analytic} vs {numeric}"


def test_dot_value_and_shape_checks():
    with dc.default_dtype(np.float64):
        a = dc.Tensor(np.array([1.0, 2.0, -3.0]), requires_grad=True)
        b = dc.Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
        out = dc.dot(a, b)
        assert out.shape == ()
        assert out.item() == pytest.approx(-7.5)
        dc.backward(out)
    np.testing.assert_allclose(a.grad, [0.5, -1.0, 2.0])
    np.testing.assert_allclose(b.grad, [1.0, 2.0, -3.0])

    with pytest.raises(ShapeError):
        dc.dot(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        dc.dot(dc.Tensor(np.ones(3)), dc.Tensor(np.ones(4)))


# ========================================
# 编码器 + 对比损失的端到端梯度
# ========================================
def test_encoder_loss_gradient_matches_finite_differences(small_phantom, tiny_run_config):
    cfg = tiny_run_config
    gen = np.random.default_rng(9)
    with dc.default_dtype(np.float64):
        params = net.init_params(cfg.encoder, seed=3)
        # 非零偏置：背景区域的预激活不落在 relu 的折点上
        for name, tensor in params.items():
            if name.endswith(".bias"):
                tensor.values[...] = gen.uniform(-0.1, 0.1, size=tensor.shape)
        pairs = [augment.sample_pair(small_phantom, cfg.augment, make_rng(5, "pair", k)) for k in range(2)]

        def loss_value() -> dc.Tensor:
            fields = []
            for pair in pairs:
                g_a, l_a = net.forward(pair.patch_a, params, cfg.encoder)
                g_b, l_b = net.forward(pair.patch_b, params, cfg.encoder)
                fields.append(contrast.PairFields(g_a, l_a, g_b, l_b))
            return contrast.batch_loss(pairs, fields, cfg.train, [make_rng(5, "contrast", k) for k in range(2)]).total

        dc.backward(loss_value())

        names = sorted(params)
        eps = 1e-6
        for _ in range(20):
            tensor = params[names[int(gen.integers(len(names)))]]
            idx = tuple(int(gen.integers(n)) for n in tensor.shape)
            analytic = 0.0 if tensor.grad is None else float(tensor.grad[idx])
            original = float(tensor.values[idx])
            with dc.no_grad():
                tensor.values[idx] = original + eps
                plus = loss_value().item()
                tensor.values[idx] = original - eps
                minus = loss_value().item()
            tensor.values[idx] = original
            numeric = (plus - minus) / (2 * eps)
            assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-6)
