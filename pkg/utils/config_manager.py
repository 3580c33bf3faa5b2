"""
配置管理模块
运行配置 = 默认值 → 配置文件（dotenv 方言，带点号分节的键）→ 环境变量
"""

import logging
import os
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from utils.error_handling import ConfigError


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:
    """由粗到细编码器配置"""

    dim: int = 2
    in_channels: int = 1
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    global_stride: tuple[int, ...] = (8, 8)
    local_stride: tuple[int, ...] = (2, 2)
    embed_dim: int = 128
    fpn_channels: int = 64


@dataclass(frozen=True)
class AugmentConfig:
    """图像块对增强配置，开关对应 crop / scale / intensity_jitter / deform_rotate / flip"""

    patch_size: tuple[int, ...] = (96, 96)
    scale_range: tuple[float, ...] = (0.6, 1.4)
    rotation_deg: float = 30.0
    # 弹性形变幅度，相对图像块尺寸的比例，上限 0.05
    elastic_amplitude: float = 0.05
    elastic_grid: int = 4
    intensity_gamma_range: tuple[float, ...] = (0.7, 1.5)
    intensity_noise_std: float = 0.02
    intensity_scale: float = 0.1
    intensity_shift: float = 0.05
    crop_enabled: bool = True
    scale_enabled: bool = True
    intensity_enabled: bool = True
    deform_rotate_enabled: bool = True
    flip_enabled: bool = False


@dataclass(frozen=True)
class TrainConfig:
    """训练配置（含消融开关）"""

    batch_size: int = 16
    iterations: int = 2000
    lr: float = 1e-4
    tau: float = 0.5
    n_pos: int = 100
    n_neg: int = 500
    n_rand_g: int = 1000
    n_cand_l: int = 5000
    delta_mm: float = 3.0
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 500
    radam: bool = False
    no_coarse_to_fine: bool = False
    no_global_hard: bool = False
    no_global_diverse: bool = False
    no_local_hard: bool = False
    no_local_diverse: bool = False

    @property
    def variant(self) -> str:
        """消融变体名称，写入检查点清单"""
        switches = [
            name
            for name in (
                "no_coarse_to_fine",
                "no_global_hard",
                "no_global_diverse",
                "no_local_hard",
                "no_local_diverse",
            )
            if getattr(self, name)
        ]
        return "+".join(switches) if switches else "full"


@dataclass(frozen=True)
class DataConfig:
    """训练/评估数据来源：目录为空时按参数生成体模"""

    directory: str = ""
    count: int = 60
    dim: int = 2
    size: tuple[int, ...] = (128, 128)
    variation: float = 0.3
    seed: int = 0
    layout: str = "default"


@dataclass(frozen=True)
class EvalConfig:
    variant: str = "both"
    threshold: float = 1.0
    tolerance_px: float = 4.0
    n_template_pool: int = 40
    n_queries: int = 20
    tile_size: tuple[int, ...] = ()
    query_gamma: float = 1.0
    n_random_points: int = 0


@dataclass(frozen=True)
class RuntimeConfig:
    """运行时配置，主要来自环境变量"""

    threads: int = 0
    log_level: str = "INFO"
    log_file: str = "logs/anatembed.log"
    log_max_size: int = 10 * 1024 * 1024  # 10MB
    log_backup_count: int = 5


@dataclass(frozen=True)
class RunConfig:
    """完整运行配置"""

    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)


SECTIONS = ("train", "augment", "encoder", "data", "eval", "runtime")

EVAL_VARIANTS = ("both", "global-only", "local-only")


def default_run_config(dim: int = 2) -> RunConfig:
    """按维度给出默认配置（3D 使用 CT 的步长与参数）"""
    if dim == 2:
        return RunConfig()
    if dim != 3:
        raise ConfigError(f"dim must be 2 or 3, got {dim}")
    return RunConfig(
        train=TrainConfig(batch_size=8, n_cand_l=20000),
        augment=AugmentConfig(patch_size=(16, 48, 48)),
        encoder=EncoderConfig(
            dim=3,
            stage_channels=(16, 32, 64, 128, 128),
            global_stride=(4, 16, 16),
            local_stride=(2, 2, 2),
        ),
        data=DataConfig(dim=3, size=(64, 128, 128), count=24),
    )


# ========================================
# 文本 <-> 值 转换
# ========================================
def _parse_bool(key: str, text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def parse_value(key: str, annotation: Any, text: str) -> Any:
    """按数据类字段类型转换字符串"""
    text = str(text).strip()
    try:
        if annotation is bool:
            return _parse_bool(key, text)
        if annotation is int:
            return int(text)
        if annotation is float:
            return float(text)
        if annotation is str:
            return text
        if typing.get_origin(annotation) is tuple:
            (item_type, _ellipsis) = typing.get_args(annotation)
            if not text:
                return ()
            return tuple(item_type(part.strip()) for part in text.split(",") if part.strip())
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {text!r} ({e})") from e
    raise ConfigError(f"{key}: unsupported field type {annotation}")


def format_value(value: Any) -> str:
    """将值格式化为配置文件文本（浮点使用 repr，保证往返一致）"""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return str(value)


def to_flat_dict(run_config: RunConfig) -> dict[str, str]:
    """展开为 section.key -> 文本"""
    flat = {}
    for section in SECTIONS:
        section_cfg = getattr(run_config, section)
        for f in fields(section_cfg):
            flat[f"{section}.{f.name}"] = format_value(getattr(section_cfg, f.name))
    return flat


def to_plain_dict(run_config: RunConfig) -> dict[str, dict[str, Any]]:
    """转换为可 JSON 序列化的嵌套字典（检查点清单使用）"""
    result = {}
    for section in SECTIONS:
        section_cfg = getattr(run_config, section)
        result[section] = {
            f.name: list(v) if isinstance(v := getattr(section_cfg, f.name), tuple) else v
            for f in fields(section_cfg)
        }
    return result


def from_plain_dict(data: dict[str, dict[str, Any]]) -> RunConfig:
    """从嵌套字典恢复配置"""
    flat = {}
    for section, values in data.items():
        for key, value in values.items():
            flat[f"{section}.{key}"] = format_value(tuple(value) if isinstance(value, list) else value)
    dim = int(flat.get("data.dim", flat.get("encoder.dim", "2")))
    return apply_overrides(default_run_config(dim), flat)


def apply_overrides(run_config: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """
    将 section.key=文本 覆盖到配置上

    Raises:
        ConfigError: 未知分节或未知键
    """
    updates: dict[str, dict[str, Any]] = {section: {} for section in SECTIONS}

    for full_key, text in overrides.items():
        if text is None:
            raise ConfigError(f"{full_key}: missing value")
        section, _, key = full_key.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(f"unknown config key: {full_key}")

        section_cls = type(getattr(run_config, section))
        hints = typing.get_type_hints(section_cls)
        if key not in hints:
            raise ConfigError(f"unknown config key: {full_key}")

        updates[section][key] = parse_value(full_key, hints[key], text)

    sections = {
        section: replace(getattr(run_config, section), **values) if values else getattr(run_config, section)
        for section, values in updates.items()
    }
    return RunConfig(**sections)


def _broadcast(key: str, values: tuple, dim: int) -> tuple:
    if len(values) == 1:
        return values * dim
    if len(values) != dim:
        raise ConfigError(f"{key}: expected 1 or {dim} values, got {len(values)}")
    return values


def resolve(run_config: RunConfig) -> RunConfig:
    """标量步长/尺寸按维度展开"""
    dim = run_config.encoder.dim
    encoder = replace(
        run_config.encoder,
        global_stride=_broadcast("encoder.global_stride", run_config.encoder.global_stride, dim),
        local_stride=_broadcast("encoder.local_stride", run_config.encoder.local_stride, dim),
    )
    augment = replace(
        run_config.augment,
        patch_size=_broadcast("augment.patch_size", run_config.augment.patch_size, dim),
    )
    data = replace(run_config.data, size=_broadcast("data.size", run_config.data.size, run_config.data.dim))
    evaluation = run_config.eval
    if evaluation.tile_size:
        evaluation = replace(evaluation, tile_size=_broadcast("eval.tile_size", evaluation.tile_size, dim))
    return replace(run_config, encoder=encoder, augment=augment, data=data, eval=evaluation)


def pyramid_strides(encoder: EncoderConfig) -> list[tuple[int, ...]]:
    """
    每个阶段相对输入的累计步长

    阶段间在某轴上下采样 2 倍，直到该轴达到全局步长为止。
    """
    strides = [tuple(1 for _ in range(encoder.dim))]
    for _ in encoder.stage_channels[1:]:
        previous = strides[-1]
        strides.append(
            tuple(s * 2 if s < g else s for s, g in zip(previous, encoder.global_stride, strict=True))
        )
    return strides


def validate(run_config: RunConfig) -> None:
    """
    校验跨字段约束，任何工作开始前调用

    Raises:
        ConfigError: 约束不满足
    """
    enc, aug, train, data, ev = (
        run_config.encoder,
        run_config.augment,
        run_config.train,
        run_config.data,
        run_config.eval,
    )

    if enc.dim not in (2, 3):
        raise ConfigError(f"encoder.dim must be 2 or 3, got {enc.dim}")
    if data.dim != enc.dim:
        raise ConfigError(f"data.dim ({data.dim}) must equal encoder.dim ({enc.dim})")
    for key, values in (
        ("encoder.global_stride", enc.global_stride),
        ("encoder.local_stride", enc.local_stride),
        ("augment.patch_size", aug.patch_size),
        ("data.size", data.size),
    ):
        if len(values) != enc.dim:
            raise ConfigError(f"{key}: expected {enc.dim} values, got {len(values)}")
        if any(v < 1 for v in values):
            raise ConfigError(f"{key}: all values must be >= 1")
    if len(enc.stage_channels) < 2:
        raise ConfigError("encoder.stage_channels needs at least 2 stages")
    if min(enc.stage_channels) < 1 or enc.embed_dim < 1 or enc.fpn_channels < 1:
        raise ConfigError("encoder channel counts must be >= 1")

    for g, l in zip(enc.global_stride, enc.local_stride, strict=True):
        if g % l:
            raise ConfigError(f"encoder.global_stride {enc.global_stride} not divisible by local_stride {enc.local_stride}")

    strides = pyramid_strides(enc)
    if strides[-1] != enc.global_stride:
        raise ConfigError(
            f"encoder.global_stride {enc.global_stride} not realizable with {len(enc.stage_channels)} stages "
            f"(coarsest stage stride {strides[-1]})"
        )
    if enc.local_stride not in strides[:-1]:
        raise ConfigError(f"encoder.local_stride {enc.local_stride} does not match a finer stage stride {strides[:-1]}")

    for p, g in zip(aug.patch_size, enc.global_stride, strict=True):
        if p % g:
            raise ConfigError(f"augment.patch_size {aug.patch_size} not divisible by global_stride {enc.global_stride}")
    for p, n in zip(aug.patch_size, data.size, strict=True):
        if p > n:
            raise ConfigError(f"augment.patch_size {aug.patch_size} does not fit in data.size {data.size}")
    if len(aug.scale_range) != 2 or not 0 < aug.scale_range[0] <= aug.scale_range[1]:
        raise ConfigError(f"augment.scale_range invalid: {aug.scale_range}")
    if len(aug.intensity_gamma_range) != 2 or not 0 < aug.intensity_gamma_range[0] <= aug.intensity_gamma_range[1]:
        raise ConfigError(f"augment.intensity_gamma_range invalid: {aug.intensity_gamma_range}")
    if not 0 <= aug.elastic_amplitude <= 0.05:
        raise ConfigError("augment.elastic_amplitude must be in [0, 0.05]")
    if aug.elastic_grid < 2:
        raise ConfigError("augment.elastic_grid must be >= 2")

    for key in ("batch_size", "iterations", "n_pos", "n_neg", "n_rand_g", "n_cand_l", "log_every", "checkpoint_every"):
        if getattr(train, key) < 1:
            raise ConfigError(f"train.{key} must be >= 1")
    if train.tau <= 0 or train.lr <= 0:
        raise ConfigError("train.tau and train.lr must be > 0")
    if train.delta_mm < 0:
        raise ConfigError("train.delta_mm must be >= 0")
    if not train.no_local_diverse and not train.no_local_hard and train.n_cand_l <= train.n_neg:
        raise ConfigError("train.n_cand_l must be > train.n_neg")
    if train.no_global_hard and train.no_global_diverse and not train.no_coarse_to_fine:
        raise ConfigError("global head has no negatives: no_global_hard and no_global_diverse both set")
    if train.no_local_hard and train.no_local_diverse:
        raise ConfigError("local head needs hard or diverse negatives: no_local_hard and no_local_diverse both set")

    if not 0 <= data.variation <= 1:
        raise ConfigError("data.variation must be in [0, 1]")
    if min(data.size) < 32:
        raise ConfigError("data.size must be >= 32 per axis")
    if data.count < 1:
        raise ConfigError("data.count must be >= 1")

    if ev.variant not in EVAL_VARIANTS:
        raise ConfigError(f"eval.variant must be one of {EVAL_VARIANTS}, got {ev.variant!r}")
    for t, g in zip(ev.tile_size, enc.global_stride, strict=False):
        if t % g:
            raise ConfigError(f"eval.tile_size {ev.tile_size} not divisible by global_stride {enc.global_stride}")


def parse_override_args(items: list[str] | None) -> dict[str, str]:
    """命令行 --set section.key=value 列表 -> 覆盖字典"""
    overrides = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    return overrides


class ConfigManager:
    """配置管理器"""

    def __init__(self, config_file: str | None = None, overrides: dict[str, str] | None = None):
        self.config_file = config_file
        self.overrides = dict(overrides or {})
        self.config = RunConfig()
        self._load_config()

    def _load_config(self):
        """加载配置"""
        try:
            values = self._read_config_file() if self.config_file else {}
            values.update(self.overrides)
            dim = int(values.get("data.dim") or values.get("encoder.dim") or 2)
            config = apply_overrides(default_run_config(dim), values)
            config = self._load_from_environment(config)
            config = resolve(config)
            validate(config)
            self.config = config

            logger.info("Configuration loaded successfully")

        except ConfigError:
            raise
        except Exception as e:
            logger.error(f"Error loading configuration: {e}")
            raise ConfigError(str(e)) from e

    def _read_config_file(self) -> dict[str, str]:
        """从 dotenv 方言的配置文件读取键值"""
        from dotenv import dotenv_values

        path = Path(self.config_file)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")

        values = dict(dotenv_values(path))
        logger.info(f"Loaded configuration from {path} ({len(values)} keys)")
        return values

    def _load_from_environment(self, config: RunConfig) -> RunConfig:
        """从环境变量加载运行时配置"""

        def get_int_env(key: str, default: int) -> int:
            try:
                return int(os.getenv(key, str(default)))
            except ValueError as e:
                raise ConfigError(f"{key} must be an integer") from e

        runtime = config.runtime
        runtime = replace(
            runtime,
            threads=get_int_env("ANATEMBED_THREADS", runtime.threads),
            log_level=os.getenv("LOG_LEVEL", runtime.log_level),
            log_file=os.getenv("LOG_FILE", runtime.log_file),
            log_max_size=get_int_env("LOG_MAX_SIZE", runtime.log_max_size),
            log_backup_count=get_int_env("LOG_BACKUP_COUNT", runtime.log_backup_count),
        )
        return replace(config, runtime=runtime)


def load_config(config_file: str | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """加载并校验一份运行配置（供命令使用）"""
    return ConfigManager(config_file, overrides).config


# 全局配置管理器实例（默认值 + 环境变量）
config_manager = ConfigManager()


def get_config() -> RunConfig:
    """获取全局配置"""
    return config_manager.config


def config_echo(run_config: RunConfig) -> str:
    """完整配置的文本形式（配置文件方言）"""
    lines = ["# resolved run configuration"]
    lines.extend(f"{key}={value}" for key, value in to_flat_dict(run_config).items())
    return "\n".join(lines) + "\n"


def dump_config(run_config: RunConfig, path: str | Path) -> None:
    """以配置文件方言写出完整配置"""
    from utils.tensor_io import write_text

    write_text(path, config_echo(run_config))
