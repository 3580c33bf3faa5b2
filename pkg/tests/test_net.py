"""编码器：输出形状、单位范数、平移协变、切断结构与检查点"""

import numpy as np
import pytest

from core import diffcore as dc
from core import net
from core.phantom import generate
from utils.error_handling import CheckpointError, ShapeError


@pytest.fixture(scope="module")
def wide_image() -> np.ndarray:
    return np.asarray(generate(0, 2, 80, 0.3).image)


def test_output_shapes_and_strides(tiny_encoder, tiny_params):
    f_g, f_l = net.forward(np.zeros((32, 48), dtype=np.float32), tiny_params, tiny_encoder)
    assert f_g.array.shape == (8, 8, 12)
    assert f_l.array.shape == (8, 16, 24)
    assert f_g.stride == (4, 4)
    assert f_l.stride == (2, 2)
    assert f_g.origin == (0, 0)


def test_embeddings_are_unit_length(tiny_encoder, tiny_params, small_phantom):
    f_g, f_l = net.forward(small_phantom.image, tiny_params, tiny_encoder)
    for field in (f_g, f_l):
        np.testing.assert_allclose(np.linalg.norm(field.array, axis=0), 1.0, atol=1e-4)


def test_heads_can_be_requested_separately(tiny_encoder, tiny_params):
    f_g, f_l = net.forward(np.zeros((32, 32)), tiny_params, tiny_encoder, heads=("local",))
    assert f_g is None
    assert f_l is not None


@pytest.mark.parametrize("shape", [(30, 32), (32, 34)])
def test_indivisible_input_raises(tiny_encoder, tiny_params, shape):
    with pytest.raises(ShapeError):
        net.forward(np.zeros(shape), tiny_params, tiny_encoder)


def test_shift_covariance(tiny_encoder, tiny_params, wide_image):
    a = wide_image[:64, :64]
    b = wide_image[8:72, 8:72]
    ga, la = net.forward(a, tiny_params, tiny_encoder)
    gb, lb = net.forward(b, tiny_params, tiny_encoder)
    # 远离零填充边界的格子：平移 8 像素 = 全局 2 格 = 局部 4 格
    np.testing.assert_allclose(gb.array[:, 5:9, 5:9], ga.array[:, 7:11, 7:11], atol=1e-5)
    np.testing.assert_allclose(lb.array[:, 6:22, 6:22], la.array[:, 10:26, 10:26], atol=1e-5)


def test_global_head_ignores_finer_laterals(tiny_encoder, tiny_params, small_phantom):
    g_before, l_before = net.forward(small_phantom.image, tiny_params, tiny_encoder)
    perturbed = dict(tiny_params)
    perturbed["lateral1.weight"] = dc.Tensor(tiny_params["lateral1.weight"].values * 3.0 + 0.1)
    g_after, l_after = net.forward(small_phantom.image, perturbed, tiny_encoder)
    np.testing.assert_array_equal(g_after.array, g_before.array)
    assert not np.allclose(l_after.array, l_before.array)


def test_local_head_cut_from_coarsest_stage(tiny_encoder, tiny_params, small_phantom):
    _, l_before = net.forward(small_phantom.image, tiny_params, tiny_encoder)
    perturbed = dict(tiny_params)
    perturbed["lateral2.weight"] = dc.Tensor(tiny_params["lateral2.weight"].values * -2.0)
    _, l_after = net.forward(small_phantom.image, perturbed, tiny_encoder)
    np.testing.assert_array_equal(l_after.array, l_before.array)


def test_gradients_reach_all_used_params(tiny_encoder, tiny_params, small_phantom):
    f_g, f_l = net.forward(small_phantom.image[:32, :32], tiny_params, tiny_encoder)
    loss = dc.sum(dc.flatten_cells(f_g.values)) + dc.sum(dc.flatten_cells(f_l.values))
    dc.backward(loss)
    for name, param in tiny_params.items():
        assert param.grad is not None, name
        assert param.grad.shape == param.shape


def test_init_is_deterministic(tiny_encoder):
    a = net.init_params(tiny_encoder, seed=3)
    b = net.init_params(tiny_encoder, seed=3)
    assert list(a) == list(b)
    for name in a:
        np.testing.assert_array_equal(a[name].values, b[name].values)
    assert net.count_params(a) == sum(int(np.prod(s)) for s in net.param_shapes(tiny_encoder).values())


def test_receptive_radius_tiny(tiny_encoder):
    radius = net.receptive_radius(tiny_encoder)
    assert radius["global"] == (15, 15)
    assert radius["local"] == (7, 7)


def test_checkpoint_round_trip(tmp_path, tiny_run_config):
    params = net.init_params(tiny_run_config.encoder, seed=1)
    state = {
        "step": 4,
        "m": {n: np.full(p.shape, 0.5, dtype=np.float32) for n, p in params.items()},
        "v": {n: np.full(p.shape, 0.25, dtype=np.float32) for n, p in params.items()},
    }
    net.save_checkpoint(tmp_path / "ckpt", params, tiny_run_config, iteration=7, optimizer_state=state)
    loaded = net.load_checkpoint(tmp_path / "ckpt")

    assert loaded.iteration == 7
    assert loaded.variant == "full"
    assert loaded.run_config == tiny_run_config
    assert loaded.optimizer_state["step"] == 4
    for name, tensor in params.items():
        np.testing.assert_array_equal(loaded.params[name].values, tensor.values.astype(np.float32))
        np.testing.assert_array_equal(loaded.optimizer_state["m"][name], state["m"][name])


def test_missing_checkpoint_raises(tmp_path):
    with pytest.raises(CheckpointError):
        net.load_checkpoint(tmp_path / "nowhere")
