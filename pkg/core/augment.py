"""
图像块对增强
两个视图均由 (翻转, 弹性形变, 旋转, 缩放, 平移) 组成的可逆坐标变换从同一源图像重采样，
对应关系由坐标代数解析得到，强度扰动只改变数值
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from core.phantom import Phantom
from utils.config_manager import AugmentConfig
from utils.error_handling import AugmentError


logger = logging.getLogger(__name__)

ELASTIC_MAX_ITERS = 20
ELASTIC_TOLERANCE = 1e-6


@dataclass(frozen=True, eq=False)
class SpatialTransform:
    """
    图像块坐标 -> 源图像坐标

    正向：翻转 -> 弹性形变 -> 绕图像块中心旋转 -> 缩放回裁剪尺寸 -> 平移到裁剪位置。
    elastic 为 (D, g, ..., g) 的控制网格位移（像素）；3D 时旋转作用在轴 1、2 所在平面内。
    """

    crop_offset: tuple[float, ...]
    crop_size: tuple[int, ...]
    output_size: tuple[int, ...]
    rotation: float = 0.0
    elastic: np.ndarray | None = None
    flip_axes: tuple[int, ...] = field(default=())

    @property
    def dim(self) -> int:
        return len(self.output_size)

    def _rotation_matrix(self) -> np.ndarray:
        theta = np.deg2rad(self.rotation)
        c, s = np.cos(theta), np.sin(theta)
        matrix = np.eye(self.dim)
        i, j = self.dim - 2, self.dim - 1
        matrix[i, i], matrix[i, j], matrix[j, i], matrix[j, j] = c, -s, s, c
        return matrix

    def _center(self) -> np.ndarray:
        return (np.asarray(self.output_size, dtype=np.float64) - 1) / 2

    def _flip(self, points: np.ndarray) -> np.ndarray:
        if not self.flip_axes:
            return points
        points = points.copy()
        for axis in self.flip_axes:
            points[:, axis] = self.output_size[axis] - 1 - points[:, axis]
        return points

    def _elastic_displacement(self, points: np.ndarray) -> np.ndarray:
        grid = self.elastic.shape[1:]
        scale = (np.asarray(grid) - 1) / np.maximum(np.asarray(self.output_size) - 1, 1)
        grid_coords = (points * scale).T
        return np.stack(
            [ndimage.map_coordinates(self.elastic[k], grid_coords, order=3, mode="nearest") for k in range(self.dim)],
            axis=-1,
        )

    def _invert_elastic(self, targets: np.ndarray) -> np.ndarray:
        """不动点迭代求 p + e(p) = y"""
        points = targets.copy()
        for _ in range(ELASTIC_MAX_ITERS):
            updated = targets - self._elastic_displacement(points)
            change = np.max(np.abs(updated - points), initial=0.0)
            points = updated
            if change < ELASTIC_TOLERANCE:
                break
        return points

    def to_source(self, points) -> np.ndarray:
        """图像块像素坐标 (n, D) -> 源图像像素坐标"""
        p = np.asarray(points, dtype=np.float64).reshape(-1, self.dim)
        p = self._flip(p)
        if self.elastic is not None:
            p = p + self._elastic_displacement(p)
        if self.rotation:
            center = self._center()
            p = (p - center) @ self._rotation_matrix().T + center
        ratio = np.asarray(self.crop_size, dtype=np.float64) / np.asarray(self.output_size, dtype=np.float64)
        p = (p + 0.5) * ratio - 0.5
        return p + np.asarray(self.crop_offset, dtype=np.float64)

    def from_source(self, points) -> np.ndarray:
        """源图像像素坐标 (n, D) -> 图像块像素坐标（弹性部分数值求逆）"""
        p = np.asarray(points, dtype=np.float64).reshape(-1, self.dim)
        p = p - np.asarray(self.crop_offset, dtype=np.float64)
        ratio = np.asarray(self.output_size, dtype=np.float64) / np.asarray(self.crop_size, dtype=np.float64)
        p = (p + 0.5) * ratio - 0.5
        if self.rotation:
            center = self._center()
            p = (p - center) @ self._rotation_matrix() + center
        if self.elastic is not None:
            p = self._invert_elastic(p)
        return self._flip(p)

    def source_grid(self) -> np.ndarray:
        """图像块所有像素对应的源坐标，形状 (D, *output_size)"""
        grid = np.stack(np.meshgrid(*(np.arange(n) for n in self.output_size), indexing="ij"), axis=-1)
        source = self.to_source(grid.reshape(-1, self.dim))
        return np.moveaxis(source.reshape(*self.output_size, self.dim), -1, 0)


@dataclass(frozen=True, eq=False)
class PatchPair:
    """两个增强视图及其几何关系"""

    patch_a: np.ndarray
    patch_b: np.ndarray
    transform_a: SpatialTransform
    transform_b: SpatialTransform
    overlap_mask_a: np.ndarray
    body_mask_a: np.ndarray
    body_mask_b: np.ndarray
    source_shape: tuple[int, ...]
    spacing: tuple[float, ...]

    @property
    def has_overlap(self) -> bool:
        return bool(self.overlap_mask_a.any())

    def transform(self, which: str) -> SpatialTransform:
        return self.transform_a if which == "a" else self.transform_b


def _inside(points: np.ndarray, shape) -> np.ndarray:
    upper = np.asarray(shape, dtype=np.float64) - 1
    return np.all((points >= 0) & (points <= upper), axis=-1)


def map_points(pair: PatchPair, points, src: str = "a", dst: str = "b") -> tuple[np.ndarray, np.ndarray]:
    """
    批量对应关系：src 图像块坐标 -> dst 图像块坐标

    Returns:
        (对应坐标 (n, D), 是否有效 (n,))；源点需在源图像内，结果需在 dst 图像块内
    """
    source = pair.transform(src).to_source(points)
    mapped = pair.transform(dst).from_source(source)
    valid = _inside(source, pair.source_shape) & _inside(mapped, pair.transform(dst).output_size)
    return mapped, valid


def correspondence(pair: PatchPair, p) -> np.ndarray | None:
    """patch_a 中的像素 p 在 patch_b 中的对应位置；不存在时返回 None"""
    p = np.asarray(p, dtype=np.float64)
    if not _inside(p[None], pair.transform_a.output_size)[0]:
        raise AugmentError(f"point {tuple(p)} outside patch_a {pair.transform_a.output_size}")
    mapped, valid = map_points(pair, p[None], "a", "b")
    return mapped[0] if valid[0] else None


def overlap_mask(transform_a: SpatialTransform, transform_b: SpatialTransform, source_shape) -> np.ndarray:
    grid = np.stack(np.meshgrid(*(np.arange(n) for n in transform_a.output_size), indexing="ij"), axis=-1)
    points = grid.reshape(-1, transform_a.dim)
    source = transform_a.to_source(points)
    mapped = transform_b.from_source(source)
    valid = _inside(source, source_shape) & _inside(mapped, transform_b.output_size)
    return valid.reshape(transform_a.output_size)


def resample(image: np.ndarray, transform: SpatialTransform, order: int = 1) -> np.ndarray:
    """按变换重采样；图像用线性插值，掩膜用最近邻"""
    coords = transform.source_grid()
    return ndimage.map_coordinates(image, coords, order=order, mode="constant", cval=0.0)


def sample_transform(
    image_shape,
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> SpatialTransform:
    """
    随机采样一个空间变换

    Args:
        image_shape: 源图像尺寸
        cfg: 增强配置
        rng: 随机数流

    关闭随机裁剪时裁剪框居中，两个视图（未启用缩放时）完全相同。
    """
    dim = len(image_shape)
    nominal = np.asarray(cfg.patch_size, dtype=np.float64)
    shape = np.asarray(image_shape)

    if cfg.scale_enabled:
        factor = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
        crop_size = np.clip(np.round(nominal * factor).astype(np.int64), 1, shape)
    else:
        crop_size = np.minimum(nominal.astype(np.int64), shape)

    if cfg.crop_enabled:
        offset = np.array([rng.integers(0, n - c + 1) for n, c in zip(shape, crop_size, strict=True)], dtype=np.float64)
    else:
        offset = np.floor((shape - crop_size) / 2).astype(np.float64)

    rotation = 0.0
    elastic = None
    if cfg.deform_rotate_enabled:
        rotation = float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
        if cfg.elastic_amplitude > 0:
            grid = (cfg.elastic_grid,) * dim
            amplitude = cfg.elastic_amplitude * np.asarray(cfg.patch_size, dtype=np.float64)
            elastic = rng.uniform(-1.0, 1.0, size=(dim, *grid)) * amplitude.reshape((dim,) + (1,) * dim)

    flip_axes: tuple[int, ...] = ()
    if cfg.flip_enabled:
        flip_axes = tuple(axis for axis in range(dim) if rng.random() < 0.5)

    return SpatialTransform(
        crop_offset=tuple(float(v) for v in offset),
        crop_size=tuple(int(v) for v in crop_size),
        output_size=tuple(int(v) for v in cfg.patch_size),
        rotation=rotation,
        elastic=elastic,
        flip_axes=flip_axes,
    )


def jitter_intensity(values: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """gamma + 线性缩放平移 + 加性噪声，只作用于数值"""
    gamma = rng.uniform(cfg.intensity_gamma_range[0], cfg.intensity_gamma_range[1])
    gain = 1.0 + rng.uniform(-cfg.intensity_scale, cfg.intensity_scale)
    shift = rng.uniform(-cfg.intensity_shift, cfg.intensity_shift)
    noise = rng.normal(0.0, cfg.intensity_noise_std, size=values.shape) if cfg.intensity_noise_std > 0 else 0.0
    out = np.power(np.clip(values, 0.0, 1.0), gamma) * gain + shift + noise
    return out.astype(np.float32)


def build_pair(
    phantom: Phantom,
    transform_a: SpatialTransform,
    transform_b: SpatialTransform,
    cfg: AugmentConfig | None = None,
    rng: np.random.Generator | None = None,
) -> PatchPair:
    """按给定变换构造图像块对（cfg 与 rng 同时给出且启用时才做强度扰动）"""
    image = np.asarray(phantom.image, dtype=np.float64)
    mask = phantom.body_mask.astype(np.float64)

    patch_a = resample(image, transform_a).astype(np.float32)
    patch_b = resample(image, transform_b).astype(np.float32)
    if cfg is not None and rng is not None and cfg.intensity_enabled:
        patch_a = jitter_intensity(patch_a, cfg, rng)
        patch_b = jitter_intensity(patch_b, cfg, rng)

    return PatchPair(
        patch_a=patch_a,
        patch_b=patch_b,
        transform_a=transform_a,
        transform_b=transform_b,
        overlap_mask_a=overlap_mask(transform_a, transform_b, phantom.size),
        body_mask_a=resample(mask, transform_a, order=0) > 0.5,
        body_mask_b=resample(mask, transform_b, order=0) > 0.5,
        source_shape=tuple(phantom.size),
        spacing=tuple(phantom.spacing),
    )


def sample_pair(phantom: Phantom, cfg: AugmentConfig, rng: np.random.Generator) -> PatchPair:
    """
    从体模采样一对增强图像块（不重叠的图像块对也保留）

    Args:
        phantom: 源体模
        cfg: 增强配置
        rng: 随机数流

    Returns:
        PatchPair
    """
    if len(cfg.patch_size) != phantom.dim:
        raise AugmentError(f"patch_size {cfg.patch_size} does not match a {phantom.dim}D phantom")
    if any(p > n for p, n in zip(cfg.patch_size, phantom.size, strict=True)):
        raise AugmentError(f"patch_size {cfg.patch_size} does not fit in image {phantom.size}")

    transform_a = sample_transform(phantom.size, cfg, rng)
    transform_b = sample_transform(phantom.size, cfg, rng)
    pair = build_pair(phantom, transform_a, transform_b, cfg, rng)

    if not pair.has_overlap:
        logger.debug(f"图像块对不重叠，保留: {transform_a.crop_offset} / {transform_b.crop_offset}")
    return pair
