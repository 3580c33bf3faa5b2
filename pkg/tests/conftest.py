"""共享测试夹具：小编码器配置与小尺寸体模"""

from dataclasses import replace

import numpy as np
import pytest

from core import phantom as ph
from core.net import init_params
from utils.config_manager import AugmentConfig, EncoderConfig, RunConfig, TrainConfig, default_run_config, resolve, validate


@pytest.fixture
def tiny_encoder() -> EncoderConfig:
    """三级金字塔：步长 1/2/4，全局步长 4，局部步长 2"""
    return EncoderConfig(
        dim=2,
        in_channels=1,
        stage_channels=(4, 8, 8),
        global_stride=(4, 4),
        local_stride=(2, 2),
        embed_dim=8,
        fpn_channels=8,
    )


@pytest.fixture
def tiny_params(tiny_encoder):
    return init_params(tiny_encoder, seed=0)


@pytest.fixture
def tiny_run_config(tiny_encoder) -> RunConfig:
    base = default_run_config(2)
    config = replace(
        base,
        encoder=tiny_encoder,
        augment=replace(base.augment, patch_size=(32, 32)),
        train=replace(
            base.train,
            batch_size=2,
            iterations=3,
            n_pos=8,
            n_neg=16,
            n_rand_g=32,
            n_cand_l=48,
            log_every=1,
            checkpoint_every=2,
        ),
        data=replace(base.data, size=(64, 64), count=6),
        eval=replace(base.eval, n_template_pool=4, n_queries=2),
    )
    config = resolve(config)
    validate(config)
    return config


@pytest.fixture(scope="session")
def small_phantoms() -> list[ph.Phantom]:
    return ph.generate_many(seed=7, count=4, dim=2, size=(64, 64), variation=0.3)


@pytest.fixture(scope="session")
def small_phantom(small_phantoms) -> ph.Phantom:
    return small_phantoms[0]


@pytest.fixture
def no_jitter_augment() -> AugmentConfig:
    return AugmentConfig(patch_size=(32, 32), intensity_enabled=False)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def train_config() -> TrainConfig:
    return TrainConfig(n_pos=8, n_neg=16, n_rand_g=32, n_cand_l=48)
