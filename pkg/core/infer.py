"""
推理：整图嵌入、模板锚点提取与相似度场匹配
S_g、S_l 为锚点与查询图每个格子的余弦相似度，线性上采样到图像分辨率后取 S_g + S_l 的峰值
"""

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from core import diffcore as dc
from core.net import EmbeddingField, Params, forward, receptive_radius
from utils.config_manager import EVAL_VARIANTS, EncoderConfig
from utils.error_handling import ShapeError


logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 1.0
TILE_MARGIN_CELLS = 16


@dataclass(frozen=True)
class ImageEmbedding:
    """整图嵌入；格子网格覆盖补齐到全局步长整数倍后的图像"""

    global_field: EmbeddingField | None
    local_field: EmbeddingField | None
    image_shape: tuple[int, ...]


@dataclass(frozen=True)
class Anchor:
    name: str
    point: tuple[float, ...]
    f_g: np.ndarray | None
    f_l: np.ndarray | None


@dataclass
class Template:
    """带标注点的模板图像"""

    image: np.ndarray
    embedding: ImageEmbedding
    anchors: dict[str, Anchor] = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return list(self.anchors)


@dataclass(frozen=True)
class MatchResult:
    point: tuple[int, ...]
    score: float
    global_peak: tuple[int, ...] | None = None
    global_score: float | None = None
    local_peak: tuple[int, ...] | None = None
    local_score: float | None = None

    def to_dict(self) -> dict:
        return {
            "point": list(self.point),
            "score": self.score,
            "global_peak": list(self.global_peak) if self.global_peak is not None else None,
            "global_score": self.global_score,
            "local_peak": list(self.local_peak) if self.local_peak is not None else None,
            "local_score": self.local_score,
        }


# ========================================
# 整图嵌入
# ========================================
def tile_margin(config: EncoderConfig) -> tuple[int, ...]:
    """分块重叠边距：max(16 个局部格子, 感受野半径)，向上取整到全局步长"""
    radii = receptive_radius(config)
    margins = []
    for axis in range(config.dim):
        needed = max(TILE_MARGIN_CELLS * config.local_stride[axis], radii["local"][axis], radii["global"][axis])
        g = config.global_stride[axis]
        margins.append(int(-(-needed // g) * g))
    return tuple(margins)


def _pad_to_stride(image: np.ndarray, stride) -> np.ndarray:
    pad = [(0, (-n) % s) for n, s in zip(image.shape, stride, strict=True)]
    return np.pad(image, pad) if any(p[1] for p in pad) else image


def _axis_tiles(extent: int, tile: int, margin: int, stride: int) -> list[tuple[int, int, int, int]]:
    """
    单轴分块：返回 (起点, 终点, 有效区起点, 有效区终点)

    相邻分块的有效区在重叠区中点（对齐到全局步长）处分界，两侧距分块边缘均不少于 margin。
    """
    if tile >= extent:
        return [(0, extent, 0, extent)]
    step = tile - 2 * margin
    if step < stride:
        raise ShapeError(f"tile size {tile} too small for margin {margin}")

    starts = list(range(0, extent - tile, step)) + [extent - tile]
    starts = sorted(set(starts))
    tiles = []
    for i, start in enumerate(starts):
        end = start + tile
        lo = 0 if i == 0 else tiles[-1][3]
        if i == len(starts) - 1:
            hi = extent
        else:
            next_start = starts[i + 1]
            hi = int(round((next_start + end) / 2 / stride)) * stride
        tiles.append((start, end, lo, hi))
    return tiles


def embed_image(
    image,
    params: Params,
    config: EncoderConfig,
    tile_size=None,
    heads: tuple[str, ...] = ("global", "local"),
    task_manager=None,
) -> ImageEmbedding:
    """
    计算整张图像的全局/局部嵌入场

    Args:
        image: 图像数组
        params: 编码器参数
        config: 编码器配置
        tile_size: 分块尺寸（全局步长的整数倍），None 表示不分块
        heads: 需要的嵌入头
        task_manager: 可选，分块并行计算

    Returns:
        ImageEmbedding
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != config.dim:
        raise ShapeError(f"embed_image: expected a {config.dim}D image, got shape {image.shape}")
    padded = _pad_to_stride(image, config.global_stride)

    with dc.no_grad():
        if not tile_size or all(t >= n for t, n in zip(tile_size, padded.shape, strict=True)):
            f_g, f_l = forward(padded, params, config, heads)
            return ImageEmbedding(f_g, f_l, image.shape)

        margins = tile_margin(config)
        per_axis = [
            _axis_tiles(n, min(t, n), m, g)
            for n, t, m, g in zip(padded.shape, tile_size, margins, config.global_stride, strict=True)
        ]
        tiles = list(itertools.product(*per_axis))

        def _run(tile):
            region = tuple(slice(start, end) for start, end, _, _ in tile)
            with dc.no_grad():
                return forward(padded[region], params, config, heads)

        if task_manager is not None:
            outputs = task_manager.map_ordered(_run, tiles, context="tiles")
        else:
            outputs = [_run(tile) for tile in tiles]

    def _stitch(head_index: int) -> EmbeddingField | None:
        first = outputs[0][head_index]
        if first is None:
            return None
        stride = first.stride
        cells = tuple(n // s for n, s in zip(padded.shape, stride, strict=True))
        result = np.zeros((first.embed_dim, *cells), dtype=first.array.dtype)
        for tile, out in zip(tiles, outputs, strict=True):
            dst = tuple(slice(lo // s, hi // s) for (_, _, lo, hi), s in zip(tile, stride, strict=True))
            src = tuple(slice((lo - start) // s, (hi - start) // s) for (start, _, lo, hi), s in zip(tile, stride, strict=True))
            result[(slice(None), *dst)] = out[head_index].array[(slice(None), *src)]
        return EmbeddingField(dc.Tensor(result), stride, (0,) * config.dim)

    logger.debug(f"分块嵌入: {len(tiles)} 个分块, 图像 {image.shape}")
    return ImageEmbedding(_stitch(0), _stitch(1), image.shape)


# ========================================
# 锚点与模板
# ========================================
def field_vector_at(embedding_field: EmbeddingField, point) -> np.ndarray:
    """在实数像素位置线性插值嵌入向量并重新归一化（格子 i 位于像素 stride·i）"""
    values = embedding_field.array
    cell_coords = (np.asarray(point, dtype=np.float64) - np.asarray(embedding_field.origin)) / np.asarray(embedding_field.stride)
    channels = np.arange(values.shape[0], dtype=np.float64)
    coords = np.vstack([channels, np.repeat(cell_coords[:, None], len(channels), axis=1)])
    vector = ndimage.map_coordinates(values.astype(np.float64), coords, order=1, mode="nearest")
    norm = np.linalg.norm(vector)
    return (vector / max(norm, 1e-12)).astype(np.float32)


def extract_anchor(embedding: ImageEmbedding, name: str, point) -> Anchor:
    point = tuple(float(v) for v in point)
    if any(not 0 <= v <= n - 1 for v, n in zip(point, embedding.image_shape, strict=True)):
        raise ShapeError(f"template point {name} {point} outside image {embedding.image_shape}")
    f_g = field_vector_at(embedding.global_field, point) if embedding.global_field is not None else None
    f_l = field_vector_at(embedding.local_field, point) if embedding.local_field is not None else None
    return Anchor(name, point, f_g, f_l)


def build_template(
    image,
    points: dict[str, tuple[float, ...]],
    params: Params,
    config: EncoderConfig,
    tile_size=None,
    heads: tuple[str, ...] = ("global", "local"),
) -> Template:
    """嵌入模板图像并缓存每个标注点的锚点嵌入"""
    embedding = embed_image(image, params, config, tile_size, heads)
    anchors = {name: extract_anchor(embedding, name, point) for name, point in points.items()}
    return Template(np.asarray(image), embedding, anchors)


# ========================================
# 匹配
# ========================================
def similarity_map(anchor_vector: np.ndarray, embedding_field: EmbeddingField, image_shape) -> np.ndarray:
    """余弦相似度场，线性上采样到图像分辨率"""
    values = embedding_field.array
    if anchor_vector.shape[0] != values.shape[0]:
        raise ShapeError(f"anchor dim {anchor_vector.shape[0]} != field dim {values.shape[0]}")
    sim = np.tensordot(anchor_vector.astype(np.float64), values.astype(np.float64), axes=([0], [0]))
    for axis, (n_cells, s, n_out) in enumerate(zip(sim.shape, embedding_field.stride, image_shape, strict=True)):
        sim = dc.apply_along_axis(sim, dc.linear_interp_matrix(n_cells, s, n_out), axis)
    return sim


def _peak(values: np.ndarray) -> tuple[tuple[int, ...], float]:
    """最大值位置；并列时取字典序最小的坐标"""
    flat = int(np.argmax(values))
    index = np.unravel_index(flat, values.shape)
    return tuple(int(i) for i in index), float(values.reshape(-1)[flat])


def match(anchor: Anchor, embedding: ImageEmbedding, mode: str = "both") -> MatchResult:
    """
    在查询图像中寻找锚点对应的位置

    Args:
        anchor: 模板锚点
        embedding: 查询图像嵌入
        mode: both / global-only / local-only，单图模式只读取对应的嵌入场
    """
    if mode not in EVAL_VARIANTS:
        raise ValueError(f"mode must be one of {EVAL_VARIANTS}, got {mode!r}")

    shape = embedding.image_shape
    s_g = s_l = None
    if mode in ("both", "global-only"):
        s_g = similarity_map(anchor.f_g, embedding.global_field, shape)
    if mode in ("both", "local-only"):
        s_l = similarity_map(anchor.f_l, embedding.local_field, shape)

    total = s_g if s_l is None else (s_l if s_g is None else s_g + s_l)
    point, score = _peak(total)

    global_peak = global_score = local_peak = local_score = None
    if s_g is not None:
        global_peak, global_score = _peak(s_g)
    if s_l is not None:
        local_peak, local_score = _peak(s_l)
    return MatchResult(point, score, global_peak, global_score, local_peak, local_score)


def mode_threshold(threshold: float, mode: str) -> float:
    """阈值针对 S_g + S_l 标定；单图模式按一半计"""
    return threshold if mode == "both" else threshold / 2


def match_with_threshold(
    anchor: Anchor,
    embedding: ImageEmbedding,
    threshold: float = DEFAULT_THRESHOLD,
    mode: str = "both",
) -> MatchResult | None:
    """得分低于阈值时视为不匹配，返回 None"""
    result = match(anchor, embedding, mode)
    if result.score < mode_threshold(threshold, mode):
        logger.debug(f"匹配被抑制: {anchor.name} score={result.score:.3f} < {threshold}")
        return None
    return result
