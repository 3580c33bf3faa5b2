"""
像素级对比学习
正样本对采样、全局/局部难负样本与多样负样本选择，以及带对称项的 InfoNCE 损失
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from core import diffcore as dc
from core.augment import PatchPair, map_points
from core.net import EmbeddingField
from utils.config_manager import TrainConfig
from utils.error_handling import NegativeSelectionError, NormalizationError


logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-3
MAX_POSITIVE_ERROR_PX = 0.5

_warned: set[str] = set()


def _warn_once(key: str, message: str) -> None:
    if key not in _warned:
        _warned.add(key)
        logger.warning(message)


# ========================================
# 数据类型
# ========================================
@dataclass(frozen=True)
class PositivePairs:
    """
    正样本像素（整数像素坐标）

    重叠时 pixels_b[i] 是 pixels_a[i] 的对应像素（四舍五入）；
    self_positive 时两侧各自独立采样，每个嵌入以自身为正样本。
    """

    pixels_a: np.ndarray
    pixels_b: np.ndarray
    self_positive: bool


@dataclass(frozen=True)
class NegativeSet:
    """某个锚点的负样本：indices 指向对应的嵌入库（批次全局库或图像块对局部库）"""

    indices: np.ndarray
    n_hard: int = 0
    n_diverse: int = 0


@dataclass
class LossValue:
    total: dc.Tensor
    global_term: dc.Tensor
    local_term: dc.Tensor
    stats: dict = field(default_factory=dict)


# ========================================
# 正样本
# ========================================
def positive_candidates(pair: PatchPair) -> tuple[np.ndarray, np.ndarray]:
    """
    重叠区中可作为正样本的像素：位于 body_a 上，且对应像素（四舍五入）位于 body_b 上

    逐轴取整后的欧氏误差在 2D 可达 0.71 px，因此只保留映射点与最近像素中心距离 <= 0.5 px 的候选。

    Returns:
        (patch_a 像素 (N, D), 对应的 patch_b 像素 (N, D))
    """
    dim = pair.patch_a.ndim
    candidates = np.argwhere(pair.overlap_mask_a & pair.body_mask_a)
    if len(candidates) == 0:
        return candidates.reshape(0, dim), candidates.reshape(0, dim)

    mapped, valid = map_points(pair, candidates, "a", "b")
    rounded = np.rint(mapped).astype(np.int64)
    rounded = np.clip(rounded, 0, np.asarray(pair.patch_b.shape) - 1)
    near = np.linalg.norm(mapped - rounded, axis=1) <= MAX_POSITIVE_ERROR_PX
    keep = valid & near & pair.body_mask_b[tuple(rounded.T)]
    return candidates[keep], rounded[keep]


def _sample_from_mask(mask: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    pixels = np.argwhere(mask)
    if len(pixels) == 0:
        _warn_once("empty_body", "图像块内没有体内像素，改为在整个图像块内采样")
        pixels = np.argwhere(np.ones_like(mask, dtype=bool))
    return pixels[rng.integers(len(pixels), size=count)]


def sample_positives(pair: PatchPair, n_pos: int, rng: np.random.Generator) -> PositivePairs:
    """
    采样 n_pos 个正样本对

    重叠区内（且在体内）均匀采样；重叠区为空或其中没有体内像素时，
    退化为自身正样本：两个图像块各自独立采样。
    """
    if n_pos < 1:
        raise ValueError(f"n_pos must be >= 1, got {n_pos}")

    if pair.has_overlap:
        pixels_a, pixels_b = positive_candidates(pair)
        if len(pixels_a):
            chosen = rng.integers(len(pixels_a), size=n_pos)
            return PositivePairs(pixels_a[chosen], pixels_b[chosen], self_positive=False)
        logger.debug("重叠区内没有体内像素，按不重叠处理")

    return PositivePairs(
        _sample_from_mask(pair.body_mask_a, n_pos, rng),
        _sample_from_mask(pair.body_mask_b, n_pos, rng),
        self_positive=True,
    )


# ========================================
# 几何工具
# ========================================
def delta_radius_px(delta_mm: float, spacing) -> np.ndarray:
    """δ(mm) 转换为逐轴像素半径（向上取整）"""
    return np.ceil(float(delta_mm) / np.asarray(spacing, dtype=np.float64))


def within_delta(cell_sources: np.ndarray, points: np.ndarray, radius_px: np.ndarray) -> np.ndarray:
    """
    (n, M) 布尔矩阵：格子源坐标是否落在某点的 δ 椭球内（含边界）

    Args:
        cell_sources: (M, D) 格子中心的源图像坐标
        points: (n, D) 参考点源坐标
        radius_px: (D,) 逐轴半径，0 表示只排除完全重合的位置
    """
    diff = cell_sources[None, :, :] - points[:, None, :]
    radius = np.asarray(radius_px, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(radius > 0, diff / np.where(radius > 0, radius, 1.0), np.where(diff == 0, 0.0, np.inf))
    return np.sum(scaled**2, axis=-1) <= 1.0


def cell_indices(field: EmbeddingField, pixels: np.ndarray) -> np.ndarray:
    """像素所在格子（按步长向下取整）的展平索引"""
    cells = np.floor_divide(np.asarray(pixels, dtype=np.int64) - np.asarray(field.origin), np.asarray(field.stride))
    cells = np.clip(cells, 0, np.asarray(field.cells) - 1)
    return np.ravel_multi_index(tuple(cells.T), field.cells)


def cell_pixels(field: EmbeddingField) -> np.ndarray:
    """所有格子位置（图像块像素坐标，展平顺序）"""
    grid = np.stack(np.meshgrid(*(np.arange(n) for n in field.cells), indexing="ij"), axis=-1).reshape(-1, len(field.cells))
    return grid * np.asarray(field.stride) + np.asarray(field.origin)


def flat_array(field: EmbeddingField) -> np.ndarray:
    """(格子数, c) 的嵌入矩阵（不参与求导）"""
    return field.array.reshape(field.embed_dim, -1).T


# ========================================
# 负样本选择
# ========================================
def top_k_eligible(scores: np.ndarray, eligible: np.ndarray, k: int) -> np.ndarray:
    """
    在可用元素中取分数最高的 k 个（稳定排序，分数相同时索引小的优先）

    Raises:
        NegativeSelectionError: 没有任何可用元素
    """
    candidates = np.flatnonzero(eligible)
    if len(candidates) == 0:
        raise NegativeSelectionError("no eligible negative cells after exclusion")
    order = np.argsort(-scores[candidates], kind="stable")
    return candidates[order[:k]]


def global_negatives(
    anchor: np.ndarray,
    bank: np.ndarray,
    pair_slice: slice,
    excluded: np.ndarray,
    n_neg: int,
    n_rand_g: int,
    rng: np.random.Generator,
    hard: bool = True,
    diverse: bool = True,
) -> NegativeSet:
    """
    单个锚点的全局负样本

    Args:
        anchor: (c,) 锚点全局嵌入
        bank: (M, c) 批次内所有图像块的全局嵌入（按图像块顺序展平拼接）
        pair_slice: 本图像块对 (F_g ∪ F_g') 在库中的范围
        excluded: (len(pair_slice),) 本图像块对中被排除的格子（自身格子与 δ 邻域）
        n_neg: 难负样本数
        n_rand_g: 多样负样本数（从整个批次均匀采样）
        rng: 随机数流
        hard: 是否选择难负样本
        diverse: 是否采样多样负样本

    Returns:
        NegativeSet，indices 为库索引
    """
    eligible_bank = np.ones(len(bank), dtype=bool)
    eligible_bank[pair_slice] = ~excluded

    hard_idx = np.empty(0, dtype=np.int64)
    if hard:
        scores = bank[pair_slice] @ anchor
        local_idx = top_k_eligible(scores, ~excluded, n_neg)
        if len(local_idx) < n_neg:
            _warn_once("global_hard", f"全局难负样本不足: 可用 {len(local_idx)} < n_neg={n_neg}，全部使用")
        hard_idx = local_idx + pair_slice.start

    diverse_idx = np.empty(0, dtype=np.int64)
    if diverse:
        pool = np.flatnonzero(eligible_bank)
        if len(pool) == 0:
            raise NegativeSelectionError("no eligible cells in the batch for diverse negatives")
        if len(pool) < n_rand_g:
            _warn_once("global_diverse", f"全局多样负样本不足: 可用 {len(pool)} < n_rand_g={n_rand_g}，全部使用")
            diverse_idx = pool
        else:
            diverse_idx = np.sort(rng.choice(pool, size=n_rand_g, replace=False))
        diverse_idx = diverse_idx[~np.isin(diverse_idx, hard_idx)]

    indices = np.concatenate([hard_idx, diverse_idx]).astype(np.int64)
    if len(indices) == 0:
        raise NegativeSelectionError("empty global negative set")
    return NegativeSet(indices, len(hard_idx), len(diverse_idx))


def local_negatives(
    combined: np.ndarray,
    excluded: np.ndarray,
    n_cand_l: int,
    n_neg: int,
    rng: np.random.Generator,
    hard: bool = True,
    diverse: bool = True,
) -> NegativeSet:
    """
    单个锚点的局部负样本

    Args:
        combined: (M,) 组合相似度 S_g(上采样) + S_l，覆盖本图像块对的两个局部场
        excluded: (M,) 被排除的格子
        n_cand_l: 候选池大小
        n_neg: 输出数量
        rng: 随机数流
        hard: False 时不看相似度，在全部可用格子中随机采样
        diverse: False 时直接取前 n_neg 个，不做候选池随机化
    """
    eligible = ~excluded
    if not eligible.any():
        raise NegativeSelectionError("no eligible local negative cells after exclusion")

    if hard:
        pool = top_k_eligible(combined, eligible, n_cand_l if diverse else n_neg)
    else:
        pool = np.flatnonzero(eligible)

    if len(pool) < n_neg:
        _warn_once("local", f"局部负样本不足: 可用 {len(pool)} < n_neg={n_neg}，全部使用")
        return NegativeSet(np.sort(pool), n_hard=len(pool) if hard else 0, n_diverse=0)

    if hard and not diverse:
        return NegativeSet(pool, n_hard=len(pool))
    chosen = np.sort(rng.choice(pool, size=n_neg, replace=False))
    return NegativeSet(chosen, n_hard=n_neg if hard else 0, n_diverse=0 if hard else n_neg)


def _pad_indices(sets: list[NegativeSet]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s.indices) for s in sets)
    index = np.zeros((len(sets), width), dtype=np.int64)
    mask = np.zeros((len(sets), width), dtype=bool)
    for row, s in enumerate(sets):
        index[row, : len(s.indices)] = s.indices
        mask[row, : len(s.indices)] = True
    return index, mask


# ========================================
# InfoNCE
# ========================================
def _check_normalized(name: str, values: np.ndarray) -> None:
    norms = np.linalg.norm(values.astype(np.float64), axis=-1)
    deviation = float(np.max(np.abs(norms - 1.0), initial=0.0))
    if deviation > NORM_TOLERANCE:
        raise NormalizationError(f"{name} not unit-normalized (max norm deviation {deviation:.2e})")


def info_nce(
    anchors: dc.Tensor,
    positives: dc.Tensor | None,
    bank: dc.Tensor,
    neg_index: np.ndarray,
    tau: float,
    neg_mask: np.ndarray | None = None,
) -> dc.Tensor:
    """
    InfoNCE 损失（对锚点求和）

    -log[exp(f·f'/τ) / (exp(f·f'/τ) + Σ_j exp(f·h_j/τ))]

    Args:
        anchors: (n, c) 锚点嵌入
        positives: (n, c) 正样本嵌入；None 表示自身正样本（正样本 logit 为 1/τ）
        bank: (M, c) 负样本库
        neg_index: (n, K) 每个锚点的负样本库索引
        tau: 温度
        neg_mask: (n, K) 有效负样本掩码（变长负样本集合补齐时使用）

    Raises:
        NormalizationError: 输入向量未归一化
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    neg_index = np.asarray(neg_index, dtype=np.int64)
    if neg_mask is None:
        neg_mask = np.ones(neg_index.shape, dtype=bool)

    _check_normalized("anchor", anchors.values)
    if positives is not None:
        _check_normalized("positive", positives.values)
    _check_normalized("negative", bank.values[np.unique(neg_index[neg_mask])])

    n = anchors.shape[0]
    if positives is None:
        positive_logits = dc.Tensor(np.ones((n, 1)))
    else:
        positive_logits = dc.reshape(dc.rowdot(anchors, positives), (n, 1))

    negative_logits = dc.gather_columns(dc.matmul(anchors, dc.transpose(bank)), neg_index)
    logits = dc.scale(dc.concat([positive_logits, negative_logits], axis=1), 1.0 / tau)
    mask = np.concatenate([np.ones((n, 1), dtype=bool), neg_mask], axis=1)

    # -log softmax(pos) = logsumexp(全部) - pos
    per_anchor = dc.sub(dc.logsumexp(logits, axis=1, mask=mask), dc.scale(dc.reshape(positive_logits, (n,)), 1.0 / tau))
    return dc.sum(per_anchor)


# ========================================
# 批次损失
# ========================================
@dataclass
class PairFields:
    """一个图像块对两个视图的全局/局部嵌入场（不需要的头为 None）"""

    global_a: EmbeddingField | None
    local_a: EmbeddingField
    global_b: EmbeddingField | None
    local_b: EmbeddingField


def _upsampled_similarity(anchor_vectors: np.ndarray, field: EmbeddingField, target_cells, factor) -> np.ndarray:
    """锚点与全局场的相似度图，线性上采样到局部格子网格后展平"""
    sim = (anchor_vectors @ flat_array(field).T).reshape(len(anchor_vectors), *field.cells)
    for axis, (n_in, f, n_out) in enumerate(zip(field.cells, factor, target_cells, strict=True), start=1):
        sim = dc.apply_along_axis(sim, dc.linear_interp_matrix(n_in, f, n_out), axis)
    return sim.reshape(len(anchor_vectors), -1)


class PairLoss:
    """单个图像块对的损失计算（两个方向的锚点）"""

    def __init__(
        self,
        pair: PatchPair,
        fields: PairFields,
        positives: PositivePairs,
        train_cfg: TrainConfig,
        rng: np.random.Generator,
    ):
        self.pair = pair
        self.fields = fields
        self.positives = positives
        self.cfg = train_cfg
        self.rng = rng
        self.radius = delta_radius_px(train_cfg.delta_mm, pair.spacing)
        self.dropped = 0

    def _side(self, which: str):
        return (self.fields.global_a, self.fields.local_a) if which == "a" else (self.fields.global_b, self.fields.local_b)

    def _sources(self, which: str, pixels: np.ndarray) -> np.ndarray:
        return self.pair.transform(which).to_source(pixels)

    def _cell_sources(self, field_a: EmbeddingField, field_b: EmbeddingField) -> np.ndarray:
        return np.concatenate(
            [self._sources("a", cell_pixels(field_a)), self._sources("b", cell_pixels(field_b))], axis=0
        )

    def _anchor_terms(self):
        """(锚点侧, 锚点像素, 正样本侧, 正样本像素或 None) 两个方向"""
        pos = self.positives
        if pos.self_positive:
            return [("a", pos.pixels_a, None, None), ("b", pos.pixels_b, None, None)]
        return [("a", pos.pixels_a, "b", pos.pixels_b), ("b", pos.pixels_b, "a", pos.pixels_a)]

    def _exclusion(self, field_a, field_b, side, pixels, other, other_pixels) -> np.ndarray:
        """(n, M_pair) 排除矩阵：δ 邻域 + 正样本对自身的格子"""
        cell_sources = self._cell_sources(field_a, field_b)
        anchor_src = self._sources(side, pixels)
        excluded = within_delta(cell_sources, anchor_src, self.radius)

        offset_b = int(np.prod(field_a.cells))
        rows = np.arange(len(pixels))
        own_field = field_a if side == "a" else field_b
        excluded[rows, cell_indices(own_field, pixels) + (0 if side == "a" else offset_b)] = True
        if other is not None:
            excluded |= within_delta(cell_sources, self._sources(other, other_pixels), self.radius)
            other_field = field_a if other == "a" else field_b
            excluded[rows, cell_indices(other_field, other_pixels) + (0 if other == "a" else offset_b)] = True
        return excluded

    def global_loss(self, bank: dc.Tensor, bank_array: np.ndarray, pair_slice: slice) -> dc.Tensor:
        field_a, field_b = self.fields.global_a, self.fields.global_b
        flat = {"a": dc.flatten_cells(field_a.values), "b": dc.flatten_cells(field_b.values)}
        terms = []
        for side, pixels, other, other_pixels in self._anchor_terms():
            excluded = self._exclusion(field_a, field_b, side, pixels, other, other_pixels)
            own_field = field_a if side == "a" else field_b
            anchor_cells = cell_indices(own_field, pixels)
            anchor_values = flat_array(own_field)[anchor_cells]

            kept, sets = [], []
            for i in range(len(pixels)):
                try:
                    sets.append(
                        global_negatives(
                            anchor_values[i],
                            bank_array,
                            pair_slice,
                            excluded[i],
                            self.cfg.n_neg,
                            self.cfg.n_rand_g,
                            self.rng,
                            hard=not self.cfg.no_global_hard,
                            diverse=not self.cfg.no_global_diverse,
                        )
                    )
                    kept.append(i)
                except NegativeSelectionError as e:
                    self.dropped += 1
                    _warn_once("drop_global", f"锚点没有可用的全局负样本，已丢弃: {e}")
            if not kept:
                continue

            kept = np.asarray(kept)
            anchors = dc.index_rows(flat[side], anchor_cells[kept])
            positives = None
            if other is not None:
                other_field = field_a if other == "a" else field_b
                positives = dc.index_rows(flat[other], cell_indices(other_field, other_pixels)[kept])
            index, mask = _pad_indices(sets)
            terms.append(info_nce(anchors, positives, bank, index, self.cfg.tau, mask))
        return _sum_terms(terms)

    def local_loss(self) -> dc.Tensor:
        field_a, field_b = self.fields.local_a, self.fields.local_b
        flat = {"a": dc.flatten_cells(field_a.values), "b": dc.flatten_cells(field_b.values)}
        local_bank = dc.concat([flat["a"], flat["b"]], axis=0)
        bank_array = np.concatenate([flat_array(field_a), flat_array(field_b)], axis=0)
        use_global = not self.cfg.no_coarse_to_fine

        terms = []
        for side, pixels, other, other_pixels in self._anchor_terms():
            excluded = self._exclusion(field_a, field_b, side, pixels, other, other_pixels)
            own_field = field_a if side == "a" else field_b
            anchor_cells = cell_indices(own_field, pixels)
            anchor_values = flat_array(own_field)[anchor_cells]

            combined = anchor_values @ bank_array.T
            if use_global:
                global_own = self.fields.global_a if side == "a" else self.fields.global_b
                global_vectors = flat_array(global_own)[cell_indices(global_own, pixels)]
                factor = tuple(g // s for g, s in zip(global_own.stride, field_a.stride, strict=True))
                combined = combined + np.concatenate(
                    [
                        _upsampled_similarity(global_vectors, self.fields.global_a, field_a.cells, factor),
                        _upsampled_similarity(global_vectors, self.fields.global_b, field_b.cells, factor),
                    ],
                    axis=1,
                )

            kept, sets = [], []
            for i in range(len(pixels)):
                try:
                    sets.append(
                        local_negatives(
                            combined[i],
                            excluded[i],
                            self.cfg.n_cand_l,
                            self.cfg.n_neg,
                            self.rng,
                            hard=not self.cfg.no_local_hard,
                            diverse=not self.cfg.no_local_diverse,
                        )
                    )
                    kept.append(i)
                except NegativeSelectionError as e:
                    self.dropped += 1
                    _warn_once("drop_local", f"锚点没有可用的局部负样本，已丢弃: {e}")
            if not kept:
                continue

            kept = np.asarray(kept)
            anchors = dc.index_rows(flat[side], anchor_cells[kept])
            positives = None
            if other is not None:
                other_field = field_a if other == "a" else field_b
                positives = dc.index_rows(flat[other], cell_indices(other_field, other_pixels)[kept])
            index, mask = _pad_indices(sets)
            terms.append(info_nce(anchors, positives, local_bank, index, self.cfg.tau, mask))
        return _sum_terms(terms)


def _sum_terms(terms: list[dc.Tensor]) -> dc.Tensor:
    """按固定顺序累加标量项"""
    if not terms:
        return dc.Tensor(np.zeros(()))
    total = terms[0]
    for term in terms[1:]:
        total = dc.add(total, term)
    return total


def batch_loss(
    pairs: list[PatchPair],
    fields: list[PairFields],
    train_cfg: TrainConfig,
    rngs: list[np.random.Generator],
) -> LossValue:
    """
    批次损失 L = L_g + L_l，两项均为各图像块对损失（锚点求和）的平均

    Args:
        pairs: 图像块对
        fields: 与 pairs 对应的嵌入场
        train_cfg: 训练配置（含消融开关）
        rngs: 每个图像块对独立的随机数流（正样本与负样本采样）
    """
    if not (len(pairs) == len(fields) == len(rngs)) or not pairs:
        raise ValueError("pairs, fields and rngs must be non-empty and of equal length")

    positives = [sample_positives(pair, train_cfg.n_pos, rng) for pair, rng in zip(pairs, rngs, strict=True)]
    losses = [
        PairLoss(pair, f, pos, train_cfg, rng) for pair, f, pos, rng in zip(pairs, fields, positives, rngs, strict=True)
    ]

    global_terms = []
    if not train_cfg.no_coarse_to_fine:
        flats, slices, start = [], [], 0
        for f in fields:
            for field_ in (f.global_a, f.global_b):
                flats.append(dc.flatten_cells(field_.values))
            size = int(np.prod(f.global_a.cells)) + int(np.prod(f.global_b.cells))
            slices.append(slice(start, start + size))
            start += size
        bank = dc.concat(flats, axis=0)
        bank_array = bank.values
        global_terms = [loss.global_loss(bank, bank_array, sl) for loss, sl in zip(losses, slices, strict=True)]

    local_terms = [loss.local_loss() for loss in losses]

    n_pairs = len(pairs)
    global_term = dc.scale(_sum_terms(global_terms), 1.0 / n_pairs)
    local_term = dc.scale(_sum_terms(local_terms), 1.0 / n_pairs)
    stats = {
        "pairs": n_pairs,
        "self_positive_pairs": sum(p.self_positive for p in positives),
        "dropped_anchors": sum(loss.dropped for loss in losses),
    }
    return LossValue(dc.add(global_term, local_term), global_term, local_term, stats)
