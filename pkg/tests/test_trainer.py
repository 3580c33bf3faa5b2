"""训练：优化器、确定性、断点恢复与非有限损失"""

from dataclasses import replace

import numpy as np
import pytest

from core import diffcore as dc
from core import trainer as trainer_module
from core.contrast import LossValue
from core.net import load_checkpoint
from core.trainer import AdamOptimizer, Trainer, step_optimizer, train
from utils.error_handling import CheckpointError, NonFiniteLossError
from utils.log_manager import read_loss_log


def float64_params(values):
    with dc.default_dtype(np.float64):
        return {"w": dc.Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)}


def test_adam_first_step_moves_by_lr_times_sign():
    params = float64_params([1.0, -2.0, 0.5])
    optimizer = AdamOptimizer(params, lr=0.01)
    optimizer.step({"w": np.array([0.3, -4.0, 1e-3])})
    np.testing.assert_allclose(params["w"].values, [0.99, -1.99, 0.49], atol=1e-6)
    assert optimizer.state["step"] == 1


def test_radam_first_step_is_momentum_sgd():
    params = float64_params([1.0, 1.0])
    _, state = step_optimizer(params, {"w": np.array([2.0, -1.0])}, None, lr=0.1, rectify=True)
    np.testing.assert_allclose(params["w"].values, [0.8, 1.1])
    assert state["step"] == 1


def test_adam_skips_missing_gradients():
    params = float64_params([1.0])
    optimizer = AdamOptimizer(params, lr=0.1)
    optimizer.step({"w": None})
    np.testing.assert_array_equal(params["w"].values, [1.0])
    np.testing.assert_array_equal(optimizer.state["m"]["w"], [0.0])


def test_select_images_is_deterministic(tiny_run_config, small_phantoms, tmp_path):
    a = Trainer(tiny_run_config, small_phantoms, tmp_path / "a")
    b = Trainer(tiny_run_config, small_phantoms, tmp_path / "b")
    assert a.select_images(5) == b.select_images(5)
    assert len(a.select_images(1)) == tiny_run_config.train.batch_size


def test_training_is_deterministic(tiny_run_config, small_phantoms, tmp_path):
    first = train(tiny_run_config, small_phantoms, tmp_path / "first")
    second = train(tiny_run_config, small_phantoms, tmp_path / "second")
    assert first.history == second.history
    a = load_checkpoint(first.checkpoint_dir)
    b = load_checkpoint(second.checkpoint_dir)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].values, b.params[name].values)


def test_training_writes_outputs(tiny_run_config, small_phantoms, tmp_path):
    result = train(tiny_run_config, small_phantoms, tmp_path)
    assert result.iteration == 3
    assert (tmp_path / "checkpoint" / "manifest.json").is_file()
    assert (tmp_path / "checkpoints" / "iter_000002" / "manifest.json").is_file()
    rows = read_loss_log(tmp_path / "loss_log.csv")
    assert [row["iteration"] for row in rows] == [1, 2, 3]
    assert all(np.isfinite(row["L_g"]) and np.isfinite(row["L_l"]) for row in rows)


def test_resume_matches_uninterrupted_run(tiny_run_config, small_phantoms, tmp_path):
    full = train(tiny_run_config, small_phantoms, tmp_path / "full")
    resumed = train(
        tiny_run_config,
        small_phantoms,
        tmp_path / "resumed",
        resume=tmp_path / "full" / "checkpoints" / "iter_000002",
    )
    assert resumed.history == full.history[2:]
    a = load_checkpoint(full.checkpoint_dir)
    b = load_checkpoint(resumed.checkpoint_dir)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].values, b.params[name].values)
    assert a.optimizer_state["step"] == b.optimizer_state["step"] == 3


def test_resume_rejects_other_variant(tiny_run_config, small_phantoms, tmp_path):
    train(tiny_run_config, small_phantoms, tmp_path / "full")
    ablated = replace(tiny_run_config, train=replace(tiny_run_config.train, no_global_hard=True))
    with pytest.raises(CheckpointError):
        Trainer(ablated, small_phantoms, tmp_path / "other", resume=tmp_path / "full" / "checkpoint")


def test_no_coarse_to_fine_leaves_global_head_untouched(tiny_run_config, small_phantoms, tmp_path):
    config = replace(tiny_run_config, train=replace(tiny_run_config.train, no_coarse_to_fine=True, iterations=2))
    trainer = Trainer(config, small_phantoms, tmp_path)
    before = trainer.params["global_head.weight"].values.copy()
    trainer.train()
    np.testing.assert_array_equal(trainer.params["global_head.weight"].values, before)


def test_nonfinite_loss_dumps_batch(tiny_run_config, small_phantoms, tmp_path, monkeypatch):
    def poisoned(pairs, fields, train_cfg, rngs):
        nan = dc.Tensor(np.array(np.nan))
        return LossValue(nan, nan, dc.Tensor(np.zeros(())), {"pairs": len(pairs)})

    monkeypatch.setattr(trainer_module, "batch_loss", poisoned)
    trainer = Trainer(tiny_run_config, small_phantoms, tmp_path)
    with pytest.raises(NonFiniteLossError) as info:
        trainer.train()
    assert info.value.iteration == 1
    assert info.value.batch_seed is not None
    assert (tmp_path / "nonfinite_iter_000001.json").is_file()


def test_empty_training_set_raises(tiny_run_config, tmp_path):
    with pytest.raises(ValueError):
        Trainer(tiny_run_config, [], tmp_path)
