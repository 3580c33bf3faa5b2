"""
由粗到细编码器
步长卷积金字塔 + 自顶向下融合；最粗层与上一层之间的融合连接被切断，
全局嵌入只来自最粗层，局部嵌入来自局部步长对应的融合层
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from core import diffcore as dc
from core.rng import make_rng
from utils.config_manager import EncoderConfig, RunConfig, from_plain_dict, pyramid_strides, to_plain_dict
from utils.error_handling import CheckpointError, ShapeError, TensorFormatError
from utils.tensor_io import read_json, read_tensor, write_json, write_tensor


logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
CHECKPOINT_FORMAT = 1

Params = dict[str, dc.Tensor]


@dataclass(frozen=True)
class EmbeddingField:
    """嵌入场：values 形状 (c, *cells)，格子 i 对应图像块像素 origin + stride·i"""

    values: dc.Tensor
    stride: tuple[int, ...]
    origin: tuple[int, ...]

    @property
    def array(self) -> np.ndarray:
        return self.values.values

    @property
    def cells(self) -> tuple[int, ...]:
        return self.values.shape[1:]

    @property
    def embed_dim(self) -> int:
        return self.values.shape[0]


def _local_level(config: EncoderConfig) -> int:
    return pyramid_strides(config).index(tuple(config.local_stride))


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """参数名 -> 形状（固定顺序，初始化与检查点依赖该顺序）"""
    dim = config.dim
    k3 = (3,) * dim
    k1 = (1,) * dim
    shapes: dict[str, tuple[int, ...]] = {}

    previous = config.in_channels
    for s, channels in enumerate(config.stage_channels):
        shapes[f"stage{s}.conv0.weight"] = (channels, previous, *k3)
        shapes[f"stage{s}.conv0.bias"] = (channels,)
        shapes[f"stage{s}.conv1.weight"] = (channels, channels, *k3)
        shapes[f"stage{s}.conv1.bias"] = (channels,)
        previous = channels

    for s in range(_local_level(config), len(config.stage_channels)):
        shapes[f"lateral{s}.weight"] = (config.fpn_channels, config.stage_channels[s], *k1)
        shapes[f"lateral{s}.bias"] = (config.fpn_channels,)

    for head in ("global_head", "local_head"):
        shapes[f"{head}.weight"] = (config.embed_dim, config.fpn_channels, *k3)
        shapes[f"{head}.bias"] = (config.embed_dim,)
    return shapes


def init_params(config: EncoderConfig, seed: int) -> Params:
    """
    按扇入缩放的均匀分布初始化（边界 sqrt(6 / fan_in)），偏置为 0

    Args:
        config: 编码器配置
        seed: 种子

    Returns:
        参数名 -> 需要梯度的 Tensor
    """
    rng = make_rng(seed, "init")
    params: Params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            values = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            values = rng.uniform(-bound, bound, size=shape)
        params[name] = dc.Tensor(values, requires_grad=True)
    return params


def count_params(params: Params) -> int:
    return int(sum(p.values.size for p in params.values()))


def _conv_block(x: dc.Tensor, params: Params, prefix: str, stride) -> dc.Tensor:
    x = dc.relu(dc.conv(x, params[f"{prefix}.conv0.weight"], params[f"{prefix}.conv0.bias"], stride=stride, padding=1))
    return dc.relu(dc.conv(x, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"], stride=1, padding=1))


def _head(x: dc.Tensor, params: Params, name: str) -> dc.Tensor:
    return dc.l2_normalize_channels(dc.conv(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=1, padding=1))


def forward(
    patch,
    params: Params,
    config: EncoderConfig,
    heads: tuple[str, ...] = ("global", "local"),
) -> tuple[EmbeddingField | None, EmbeddingField | None]:
    """
    编码一个图像块

    Args:
        patch: (*spatial) 或 (Cin, *spatial) 的数组或 Tensor
        params: 参数
        config: 编码器配置
        heads: 需要计算的嵌入头

    Returns:
        (F_g, F_l)，未请求的头返回 None
    """
    x = patch if isinstance(patch, dc.Tensor) else dc.Tensor(np.asarray(patch))
    if x.ndim == config.dim:
        x = dc.reshape(x, (1, *x.shape))
    if x.ndim != config.dim + 1 or x.shape[0] != config.in_channels:
        raise ShapeError(f"forward: expected {config.dim}D input with {config.in_channels} channels, got {x.shape}")
    for n, g in zip(x.shape[1:], config.global_stride, strict=True):
        if n % g:
            raise ShapeError(f"forward: input extents {x.shape[1:]} not divisible by global_stride {config.global_stride}")

    strides = pyramid_strides(config)
    last = len(strides) - 1
    local = _local_level(config)

    features = []
    previous = strides[0]
    for s, stride in enumerate(strides):
        step = tuple(b // a for a, b in zip(previous, stride, strict=True))
        x = _conv_block(x, params, f"stage{s}", step)
        features.append(x)
        previous = stride

    def lateral(s: int) -> dc.Tensor:
        return dc.conv(features[s], params[f"lateral{s}.weight"], params[f"lateral{s}.bias"])

    f_g = f_l = None
    zero = (0,) * config.dim

    if "global" in heads:
        f_g = EmbeddingField(_head(lateral(last), params, "global_head"), strides[last], zero)

    if "local" in heads:
        # 切断：最粗层不向更细层传递，自顶向下从倒数第二层开始
        fused = lateral(last - 1)
        for s in range(last - 2, local - 1, -1):
            factor = tuple(b // a for a, b in zip(strides[s], strides[s + 1], strict=True))
            fused = dc.add(lateral(s), dc.upsample_nearest(fused, factor))
        f_l = EmbeddingField(_head(fused, params, "local_head"), strides[local], zero)

    return f_g, f_l


def receptive_radius(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """
    两个嵌入头的感受野半径上界（像素，逐轴）

    最近邻上采样带来的位置偏差按该层步长计入。
    """
    strides = [np.asarray(s) for s in pyramid_strides(config)]
    radii = [2 * strides[0]]
    for s in range(1, len(strides)):
        radii.append(radii[-1] + strides[s - 1] + strides[s])

    last = len(strides) - 1
    local = _local_level(config)
    global_radius = radii[last] + strides[last]

    contributing = range(local, max(last, local + 1))
    local_radius = np.max(
        [radii[k] + (strides[k] if k > local else 0) for k in contributing],
        axis=0,
    ) + strides[local]

    return {
        "global": tuple(int(v) for v in global_radius),
        "local": tuple(int(v) for v in local_radius),
    }


# ========================================
# 检查点
# ========================================
@dataclass
class Checkpoint:
    params: Params
    run_config: RunConfig
    iteration: int
    variant: str
    optimizer_state: dict | None = None


def _safe_name(name: str) -> str:
    return name.replace("/", "_")


def save_checkpoint(
    directory: str | Path,
    params: Params,
    run_config: RunConfig,
    iteration: int,
    optimizer_state: dict | None = None,
) -> Path:
    """
    写出检查点目录：manifest.json + 每个参数一个 PET1 文件（优化器矩估计同样保存）

    Returns:
        检查点目录
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    for name, tensor in params.items():
        write_tensor(directory / "params" / f"{_safe_name(name)}.pet", tensor.values.astype(np.float32))

    optimizer_meta = None
    if optimizer_state is not None:
        for name in params:
            write_tensor(directory / "optimizer" / f"{_safe_name(name)}.m.pet", optimizer_state["m"][name])
            write_tensor(directory / "optimizer" / f"{_safe_name(name)}.v.pet", optimizer_state["v"][name])
        optimizer_meta = {"step": int(optimizer_state["step"])}

    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": to_plain_dict(run_config),
        "variant": run_config.train.variant,
        "iteration": int(iteration),
        "rng_state": {"seed": int(run_config.train.seed), "iteration": int(iteration)},
        "params": {name: list(tensor.shape) for name, tensor in params.items()},
        "optimizer": optimizer_meta,
    }
    write_json(directory / MANIFEST_NAME, manifest)
    logger.info(f"💾 检查点已保存: {directory} (iteration {iteration})")
    return directory


def load_checkpoint(directory: str | Path) -> Checkpoint:
    """读取检查点（参数位级一致）"""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise CheckpointError(f"checkpoint manifest not found: {manifest_path}")

    manifest = read_json(manifest_path)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{manifest_path}: unsupported checkpoint format {manifest.get('format')}")

    run_config = from_plain_dict(manifest["config"])
    expected = param_shapes(run_config.encoder)
    if set(expected) != set(manifest["params"]):
        raise CheckpointError(f"{manifest_path}: parameter names do not match the encoder config")

    params: Params = {}
    try:
        for name, shape in expected.items():
            values = read_tensor(directory / "params" / f"{_safe_name(name)}.pet")
            if values.shape != shape:
                raise CheckpointError(f"{name}: shape {values.shape} does not match {shape}")
            params[name] = dc.Tensor(values, requires_grad=True)

        optimizer_state = None
        if manifest.get("optimizer"):
            optimizer_state = {
                "step": int(manifest["optimizer"]["step"]),
                "m": {n: read_tensor(directory / "optimizer" / f"{_safe_name(n)}.m.pet") for n in expected},
                "v": {n: read_tensor(directory / "optimizer" / f"{_safe_name(n)}.v.pet") for n in expected},
            }
    except (FileNotFoundError, TensorFormatError) as e:
        raise CheckpointError(f"{directory}: {e}") from e

    return Checkpoint(
        params=params,
        run_config=run_config,
        iteration=int(manifest["iteration"]),
        variant=str(manifest["variant"]),
        optimizer_state=optimizer_state,
    )
