"""
合成解剖体模生成
规范布局（单位立方体中的椭球/管/壳）经低频正弦位移场扭曲后渲染，
每个像素都带有精确的规范坐标，作为所有匹配结果的验证依据
"""

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from core.rng import derive_seed, make_rng
from utils.error_handling import PhantomError
from utils.tensor_io import read_json, read_tensor, write_json, write_tensor


logger = logging.getLogger(__name__)

MIN_SIZE = 32
SHAPE_KINDS = ("ellipsoid", "tube", "shell")
# 所有轴上的模态振幅总和上限（相对 variation），保证位移场雅可比算子范数 < 1
WARP_AMPLITUDE_BUDGET = 0.1
MAX_MODES_PER_AXIS = 4
EDGE_SOFTNESS = 0.03
SHELL_THICKNESS = 0.13
NOISE_STD = 0.02
BIAS_STRENGTH = 0.05
INTENSITY_JITTER = 0.08
DEFAULT_SPACING = {2: 1.0, 3: 2.0}
FILE_PATTERN = re.compile(r"^phantom_(\d{4,})\.json$")


# ========================================
# 规范布局
# ========================================
@dataclass(frozen=True)
class Primitive:
    name: str
    kind: str
    center: tuple[float, ...]
    radii: tuple[float, ...]
    intensity: float


@dataclass(frozen=True)
class CanonicalLayout:
    """规范解剖布局：图元按顺序绘制，后绘制的覆盖先绘制的"""

    name: str
    primitives: tuple[Primitive, ...]
    landmark_defs: tuple[tuple[str, tuple[float, ...]], ...]

    @property
    def dim(self) -> int:
        return len(self.primitives[0].center)

    @property
    def landmark_names(self) -> list[str]:
        return [name for name, _ in self.landmark_defs]

    def layout_hash(self) -> str:
        payload = {
            "name": self.name,
            "primitives": [[p.name, p.kind, list(p.center), list(p.radii), p.intensity] for p in self.primitives],
            "landmarks": [[name, list(point)] for name, point in self.landmark_defs],
        }
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def validate(self) -> None:
        names = [p.name for p in self.primitives]
        if len(set(names)) != len(names):
            raise PhantomError(f"layout {self.name}: duplicate primitive names")
        for p in self.primitives:
            if p.kind not in SHAPE_KINDS:
                raise PhantomError(f"layout {self.name}: unknown shape kind {p.kind!r}")
        for name, point in self.landmark_defs:
            if any(not 0.0 <= v <= 1.0 for v in point):
                raise PhantomError(f"layout {self.name}: landmark {name} outside the unit cube")


def _layout_2d(symmetric: bool) -> CanonicalLayout:
    # 轴 0：头 -> 足；轴 1：右 -> 左（冠状面）
    if symmetric:
        organs = (
            Primitive("lung_right", "ellipsoid", (0.40, 0.33), (0.15, 0.11), 0.08),
            Primitive("lung_left", "ellipsoid", (0.40, 0.67), (0.15, 0.11), 0.08),
            Primitive("trachea", "tube", (0.22, 0.5), (0.10, 0.025), 0.05),
            Primitive("heart", "ellipsoid", (0.55, 0.5), (0.09, 0.08), 0.55),
            Primitive("liver", "ellipsoid", (0.76, 0.35), (0.08, 0.10), 0.5),
            Primitive("stomach", "ellipsoid", (0.76, 0.65), (0.08, 0.10), 0.5),
        )
        landmarks = (
            ("trachea_top", (0.14, 0.5)),
            ("carina", (0.31, 0.5)),
            ("right_lung_apex", (0.26, 0.33)),
            ("left_lung_apex", (0.26, 0.67)),
            ("heart_center", (0.55, 0.5)),
            ("liver_center", (0.76, 0.35)),
            ("stomach_center", (0.76, 0.65)),
            ("spine_base", (0.86, 0.5)),
        )
    else:
        organs = (
            Primitive("lung_right", "ellipsoid", (0.40, 0.33), (0.15, 0.11), 0.08),
            Primitive("lung_left", "ellipsoid", (0.42, 0.68), (0.13, 0.09), 0.1),
            Primitive("trachea", "tube", (0.22, 0.5), (0.10, 0.025), 0.05),
            Primitive("heart", "ellipsoid", (0.55, 0.56), (0.09, 0.10), 0.55),
            Primitive("liver", "ellipsoid", (0.74, 0.38), (0.10, 0.16), 0.5),
            Primitive("stomach", "ellipsoid", (0.78, 0.65), (0.07, 0.08), 0.25),
        )
        landmarks = (
            ("trachea_top", (0.14, 0.5)),
            ("carina", (0.31, 0.5)),
            ("right_lung_apex", (0.26, 0.33)),
            ("left_lung_apex", (0.30, 0.68)),
            ("heart_center", (0.55, 0.56)),
            ("liver_center", (0.74, 0.38)),
            ("stomach_center", (0.78, 0.65)),
            ("spine_base", (0.86, 0.5)),
        )

    primitives = (
        Primitive("body", "ellipsoid", (0.5, 0.5), (0.45, 0.42), 0.35),
        Primitive("spine", "tube", (0.6, 0.5), (0.28, 0.04), 0.9),
        Primitive("ribs", "shell", (0.45, 0.5), (0.30, 0.36), 0.75),
        *organs,
    )
    return CanonicalLayout("symmetric" if symmetric else "default", primitives, landmarks)


def _layout_3d(symmetric: bool) -> CanonicalLayout:
    # 轴 0：头 -> 足；轴 1：前 -> 后；轴 2：右 -> 左
    left_lung = (
        Primitive("lung_left", "ellipsoid", (0.40, 0.48, 0.67), (0.15, 0.18, 0.11), 0.08)
        if symmetric
        else Primitive("lung_left", "ellipsoid", (0.42, 0.48, 0.68), (0.13, 0.16, 0.09), 0.1)
    )
    heart_x = 0.5 if symmetric else 0.56
    primitives = (
        Primitive("body", "ellipsoid", (0.5, 0.5, 0.5), (0.45, 0.36, 0.42), 0.35),
        Primitive("spine", "tube", (0.6, 0.68, 0.5), (0.28, 0.05, 0.04), 0.9),
        Primitive("ribs", "shell", (0.45, 0.5, 0.5), (0.30, 0.30, 0.36), 0.75),
        Primitive("lung_right", "ellipsoid", (0.40, 0.48, 0.33), (0.15, 0.18, 0.11), 0.08),
        left_lung,
        Primitive("trachea", "tube", (0.22, 0.42, 0.5), (0.10, 0.03, 0.025), 0.05),
        Primitive("heart", "ellipsoid", (0.55, 0.38, heart_x), (0.09, 0.10, 0.10), 0.55),
        Primitive("liver", "ellipsoid", (0.74, 0.5, 0.38), (0.10, 0.18, 0.16), 0.5),
        Primitive("stomach", "ellipsoid", (0.78, 0.4, 0.65), (0.07, 0.08, 0.08), 0.25),
        Primitive("kidney_right", "ellipsoid", (0.82, 0.64, 0.36), (0.06, 0.04, 0.04), 0.6),
        Primitive("kidney_left", "ellipsoid", (0.84, 0.64, 0.64), (0.06, 0.04, 0.04), 0.6),
    )
    landmarks = (
        ("trachea_top", (0.14, 0.42, 0.5)),
        ("carina", (0.31, 0.42, 0.5)),
        ("right_lung_apex", (0.26, 0.48, 0.33)),
        ("left_lung_apex", (0.26 if symmetric else 0.30, 0.48, 0.67 if symmetric else 0.68)),
        ("sternum", (0.45, 0.215, 0.5)),
        ("heart_center", (0.55, 0.38, heart_x)),
        ("liver_center", (0.74, 0.5, 0.38)),
        ("stomach_center", (0.78, 0.4, 0.65)),
        ("spine_top", (0.34, 0.68, 0.5)),
        ("spine_base", (0.86, 0.68, 0.5)),
        ("kidney_right", (0.82, 0.64, 0.36)),
        ("kidney_left", (0.84, 0.64, 0.64)),
    )
    return CanonicalLayout("symmetric" if symmetric else "default", primitives, landmarks)


def default_layout(dim: int, symmetric: bool = False) -> CanonicalLayout:
    """
    默认布局：2D 8 个标志点，3D 12 个标志点；默认左右不对称

    Args:
        dim: 维度 2 或 3
        symmetric: 是否使用左右对称的对照布局
    """
    if dim == 2:
        layout = _layout_2d(symmetric)
    elif dim == 3:
        layout = _layout_3d(symmetric)
    else:
        raise PhantomError(f"dim must be 2 or 3, got {dim}")
    layout.validate()
    return layout


def get_layout(name: str, dim: int) -> CanonicalLayout:
    if name not in ("default", "symmetric"):
        raise PhantomError(f"unknown layout: {name!r}")
    return default_layout(dim, symmetric=name == "symmetric")


# ========================================
# 位移场
# ========================================
@dataclass(frozen=True)
class WarpMode:
    """单个正弦模态：d_axis(q) += amplitude * sin(2π·frequency·⟨wave, q⟩ + phase) * 包络"""

    axis: int
    amplitude: float
    frequency: float
    wave: tuple[float, ...]
    phase: float

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "amplitude": self.amplitude,
            "frequency": self.frequency,
            "wave": list(self.wave),
            "phase": self.phase,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "WarpMode":
        return cls(int(data["axis"]), float(data["amplitude"]), float(data["frequency"]), tuple(data["wave"]), float(data["phase"]))


def _sample_warp(rng: np.random.Generator, dim: int, variation: float) -> tuple[WarpMode, ...]:
    if variation <= 0:
        return ()

    counts = rng.integers(1, MAX_MODES_PER_AXIS + 1, size=dim)
    raw = []
    for axis in range(dim):
        for _ in range(int(counts[axis])):
            wave = rng.normal(size=dim)
            wave /= np.linalg.norm(wave)
            raw.append((axis, rng.uniform(0.5, 1.0), rng.uniform(0.25, 1.0), wave, rng.uniform(0, 2 * np.pi)))

    budget = WARP_AMPLITUDE_BUDGET * variation * rng.uniform(0.6, 1.0)
    total = sum(r[1] for r in raw)
    return tuple(
        WarpMode(axis, float(a * budget / total), float(k), tuple(float(v) for v in wave), float(phase))
        for axis, a, k, wave, phase in raw
    )


def warp_displacement(warp: tuple[WarpMode, ...], q: np.ndarray) -> np.ndarray:
    """
    位移场 d(q)，q 的最后一维为坐标轴

    包络 sin(π q_axis) 使边界处位移为 0，规范坐标保持在 [0,1] 内。
    """
    d = np.zeros_like(q, dtype=np.float64)
    for mode in warp:
        phase = 2 * np.pi * mode.frequency * (q @ np.asarray(mode.wave)) + mode.phase
        envelope = np.sin(np.pi * np.clip(q[..., mode.axis], 0.0, 1.0))
        d[..., mode.axis] += mode.amplitude * np.sin(phase) * envelope
    return d


def _solve_inverse(warp: tuple[WarpMode, ...], canonical: np.ndarray, start: np.ndarray | None = None) -> np.ndarray:
    """不动点迭代求解 q + d(q) = c（位移场 Lipschitz 常数 < 1，迭代收敛）"""
    canonical = np.asarray(canonical, dtype=np.float64)
    q = canonical.copy() if start is None else np.asarray(start, dtype=np.float64).copy()
    if not warp:
        return canonical.copy()
    for _ in range(200):
        updated = canonical - warp_displacement(warp, q)
        if np.max(np.abs(updated - q), initial=0.0) < 1e-13:
            return updated
        q = updated
    return q


# ========================================
# 体模
# ========================================
@dataclass(frozen=True)
class Landmark:
    name: str
    point: tuple[float, ...]


@dataclass(frozen=True)
class Phantom:
    """
    合成体模（创建后不可变）

    coord_field 形状为 (D, *size)，landmarks 为实数像素坐标。
    origin/full_size 记录裁剪前的网格，canonical_at 据此解析地计算规范坐标。
    """

    image: np.ndarray
    spacing: tuple[float, ...]
    coord_field: np.ndarray
    body_mask: np.ndarray
    landmarks: tuple[Landmark, ...]
    seed: int
    variation: float
    layout: CanonicalLayout
    warp: tuple[WarpMode, ...] = ()
    origin: tuple[int, ...] = ()
    full_size: tuple[int, ...] = ()
    phantom_id: str = field(default="")

    @property
    def dim(self) -> int:
        return self.image.ndim

    @property
    def size(self) -> tuple[int, ...]:
        return self.image.shape

    def landmark(self, name: str) -> Landmark:
        for lm in self.landmarks:
            if lm.name == name:
                return lm
        raise PhantomError(f"landmark {name!r} not present in phantom {self.phantom_id or self.seed}")

    def landmark_points(self) -> np.ndarray:
        return np.array([lm.point for lm in self.landmarks], dtype=np.float64).reshape(-1, self.dim)


def _freeze(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


def _primitive_alpha(primitive: Primitive, canonical: np.ndarray) -> np.ndarray:
    """图元的软边不透明度，>= 0.5 的区域即图元支撑集"""
    offset = (canonical - np.asarray(primitive.center)) / np.asarray(primitive.radii)

    if primitive.kind == "ellipsoid":
        radius = np.linalg.norm(offset, axis=-1)
    elif primitive.kind == "tube":
        long_axis = int(np.argmax(primitive.radii))
        cross = np.delete(offset, long_axis, axis=-1)
        radius = np.maximum(np.linalg.norm(cross, axis=-1), np.abs(offset[..., long_axis]))
    else:
        shell_radius = np.linalg.norm(offset, axis=-1)
        half = SHELL_THICKNESS / 2
        radius = np.abs(shell_radius - (1 - half)) / half

    return np.clip(0.5 + (1.0 - radius) / (2 * EDGE_SOFTNESS), 0.0, 1.0)


def _render(layout: CanonicalLayout, canonical: np.ndarray, levels: list[float]) -> tuple[np.ndarray, np.ndarray]:
    image = np.zeros(canonical.shape[:-1], dtype=np.float64)
    mask = np.zeros(canonical.shape[:-1], dtype=bool)
    for primitive, level in zip(layout.primitives, levels, strict=True):
        alpha = _primitive_alpha(primitive, canonical)
        image = image * (1 - alpha) + level * alpha
        mask |= alpha >= 0.5
    return image, mask


def _pixel_to_unit(points: np.ndarray, full_size) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) + 0.5) / np.asarray(full_size, dtype=np.float64)


def _unit_to_pixel(q: np.ndarray, full_size) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) * np.asarray(full_size, dtype=np.float64) - 0.5


def generate(
    seed: int,
    dim: int,
    size,
    variation: float,
    layout: CanonicalLayout | None = None,
    spacing=None,
) -> Phantom:
    """
    生成一个体模

    Args:
        seed: 体模种子（独立的命名随机数流）
        dim: 维度 2 或 3
        size: 各轴像素数（>= 32）
        variation: 形变幅度 [0, 1]
        layout: 规范布局，默认不对称布局
        spacing: 每轴像素间距 mm

    Returns:
        Phantom
    """
    if dim not in (2, 3):
        raise PhantomError(f"dim must be 2 or 3, got {dim}")
    size = (int(size),) * dim if np.isscalar(size) else tuple(int(s) for s in size)
    if len(size) != dim:
        raise PhantomError(f"size {size} does not match dim {dim}")
    if min(size) < MIN_SIZE:
        raise PhantomError(f"size {size} below the minimum of {MIN_SIZE} pixels per axis")
    if not 0.0 <= variation <= 1.0:
        raise PhantomError(f"variation must be in [0, 1], got {variation}")

    layout = layout or default_layout(dim)
    if layout.dim != dim:
        raise PhantomError(f"layout {layout.name} is {layout.dim}D, requested {dim}D")
    spacing = (DEFAULT_SPACING[dim],) * dim if spacing is None else tuple(float(s) for s in np.broadcast_to(spacing, (dim,)))

    rng = make_rng(seed, "phantom")
    warp = _sample_warp(rng, dim, variation)
    levels = [p.intensity * (1 + rng.uniform(-INTENSITY_JITTER, INTENSITY_JITTER)) for p in layout.primitives]

    grid = np.stack(np.meshgrid(*(np.arange(n) for n in size), indexing="ij"), axis=-1)
    q = _pixel_to_unit(grid, size)
    canonical = q + warp_displacement(warp, q)

    image, mask = _render(layout, canonical, levels)

    # 体内噪声与乘性偏置场
    bias = np.ones(size, dtype=np.float64)
    for _ in range(2):
        wave = rng.normal(size=dim)
        wave /= np.linalg.norm(wave)
        bias += 0.5 * BIAS_STRENGTH * np.sin(2 * np.pi * rng.uniform(0.3, 1.0) * (q @ wave) + rng.uniform(0, 2 * np.pi))
    noise = rng.normal(0.0, NOISE_STD, size=size)
    image = np.where(mask, image * bias + noise, image)
    image = np.clip(image, 0.0, 1.0)

    landmarks = []
    for name, point in layout.landmark_defs:
        q_lm = _solve_inverse(warp, np.asarray(point, dtype=np.float64))
        landmarks.append(Landmark(name, tuple(float(v) for v in _unit_to_pixel(q_lm, size))))

    phantom = Phantom(
        image=_freeze(image.astype(np.float32)),
        spacing=spacing,
        coord_field=_freeze(np.moveaxis(canonical, -1, 0).astype(np.float32)),
        body_mask=_freeze(mask),
        landmarks=tuple(landmarks),
        seed=int(seed),
        variation=float(variation),
        layout=layout,
        warp=warp,
        origin=(0,) * dim,
        full_size=size,
    )
    _check_landmarks(phantom)
    return phantom


def _check_landmarks(phantom: Phantom) -> None:
    for lm in phantom.landmarks:
        index = tuple(int(round(v)) for v in lm.point)
        if any(not 0 <= i < n for i, n in zip(index, phantom.size, strict=True)):
            raise PhantomError(f"landmark {lm.name} at {lm.point} outside image {phantom.size}")
        if not phantom.body_mask[index]:
            raise PhantomError(f"landmark {lm.name} at {lm.point} not on the body mask")


def generate_many(
    seed: int,
    count: int,
    dim: int,
    size,
    variation: float,
    layout: CanonicalLayout | None = None,
    task_manager=None,
) -> list[Phantom]:
    """按 (种子, 序号) 派生每个体模的种子，可并行生成且结果与顺序无关"""
    seeds = [derive_seed(seed, "dataset", k) for k in range(count)]

    def _one(k: int) -> Phantom:
        phantom = generate(seeds[k], dim, size, variation, layout)
        return _with_id(phantom, f"phantom_{k:04d}")

    if task_manager is not None:
        return task_manager.map_ordered(_one, range(count))
    return [_one(k) for k in range(count)]


def _with_id(phantom: Phantom, phantom_id: str) -> Phantom:
    return replace(phantom, phantom_id=phantom_id)


# ========================================
# 规范坐标查询
# ========================================
def canonical_at(phantom: Phantom, points) -> np.ndarray:
    """
    解析计算实数像素位置处的规范坐标

    Args:
        phantom: 体模
        points: (n, D) 像素坐标（当前网格）

    Returns:
        (n, D) 规范坐标
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, phantom.dim)
    q = _pixel_to_unit(points + np.asarray(phantom.origin), phantom.full_size)
    return q + warp_displacement(phantom.warp, q)


def inverse_lookup(phantom: Phantom, canonical_points) -> np.ndarray:
    """
    规范坐标 -> 像素坐标：先在 coord_field 上做最近邻搜索，再用解析位移场迭代细化

    Returns:
        (n, D) 当前网格中的实数像素坐标
    """
    canonical_points = np.asarray(canonical_points, dtype=np.float64).reshape(-1, phantom.dim)
    values = phantom.coord_field.reshape(phantom.dim, -1).T
    tree = cKDTree(values)
    _, nearest = tree.query(canonical_points)
    start_pixels = np.stack(np.unravel_index(nearest, phantom.size), axis=-1).astype(np.float64)

    start = _pixel_to_unit(start_pixels + np.asarray(phantom.origin), phantom.full_size)
    q = _solve_inverse(phantom.warp, canonical_points, start)
    return _unit_to_pixel(q, phantom.full_size) - np.asarray(phantom.origin)


def crop(phantom: Phantom, offset, size) -> Phantom:
    """
    裁剪体模（模拟有限视野扫描），只保留仍在视野内且位于体内的标志点
    """
    offset = tuple(int(o) for o in offset)
    size = tuple(int(s) for s in size)
    if any(o < 0 or o + s > n for o, s, n in zip(offset, size, phantom.size, strict=True)):
        raise PhantomError(f"crop {offset}+{size} outside image {phantom.size}")

    region = tuple(slice(o, o + s) for o, s in zip(offset, size, strict=True))
    mask = phantom.body_mask[region]
    landmarks = []
    for lm in phantom.landmarks:
        point = tuple(v - o for v, o in zip(lm.point, offset, strict=True))
        index = tuple(int(round(v)) for v in point)
        if all(0 <= i < n for i, n in zip(index, size, strict=True)) and mask[index]:
            landmarks.append(Landmark(lm.name, point))

    return replace(
        phantom,
        image=_freeze(phantom.image[region].copy()),
        coord_field=_freeze(phantom.coord_field[(slice(None), *region)].copy()),
        body_mask=_freeze(mask.copy()),
        landmarks=tuple(landmarks),
        origin=tuple(a + b for a, b in zip(phantom.origin, offset, strict=True)),
    )


def landmark_set(phantoms: list[Phantom]) -> np.ndarray:
    """
    标志点矩阵 (图像数, 标志点数, D)，行顺序与 landmark_defs 一致

    Raises:
        PhantomError: 布局不一致或标志点缺失
    """
    if not phantoms:
        raise PhantomError("landmark_set needs at least one phantom")
    reference = phantoms[0].layout.layout_hash()
    names = phantoms[0].layout.landmark_names

    rows = []
    for phantom in phantoms:
        if phantom.layout.layout_hash() != reference:
            raise PhantomError(f"phantom {phantom.phantom_id or phantom.seed} uses a different layout")
        by_name = {lm.name: lm.point for lm in phantom.landmarks}
        missing = [n for n in names if n not in by_name]
        if missing:
            raise PhantomError(f"phantom {phantom.phantom_id or phantom.seed} is missing landmarks {missing}")
        rows.append([by_name[n] for n in names])
    return np.asarray(rows, dtype=np.float64)


# ========================================
# 持久化
# ========================================
def save(phantom: Phantom, prefix: str | Path) -> None:
    """写出 prefix.{image,coord,mask}.pet 与 prefix.json"""
    prefix = Path(prefix)
    write_tensor(f"{prefix}.image.pet", phantom.image)
    write_tensor(f"{prefix}.coord.pet", phantom.coord_field)
    write_tensor(f"{prefix}.mask.pet", phantom.body_mask.astype(np.uint8))
    write_json(
        f"{prefix}.json",
        {
            "phantom_id": phantom.phantom_id or prefix.name,
            "seed": phantom.seed,
            "dim": phantom.dim,
            "size": list(phantom.size),
            "spacing": list(phantom.spacing),
            "variation": phantom.variation,
            "layout": phantom.layout.name,
            "layout_hash": phantom.layout.layout_hash(),
            "landmarks": [{"name": lm.name, "point": list(lm.point)} for lm in phantom.landmarks],
            "warp": [mode.to_dict() for mode in phantom.warp],
            "origin": list(phantom.origin),
            "full_size": list(phantom.full_size),
        },
    )


def load(prefix: str | Path) -> Phantom:
    """读取 save 写出的体模"""
    prefix = Path(prefix)
    sidecar_path = Path(f"{prefix}.json")
    if not sidecar_path.is_file():
        raise PhantomError(f"phantom sidecar not found: {sidecar_path}")
    meta = read_json(sidecar_path)

    dim = int(meta["dim"])
    layout = get_layout(meta["layout"], dim)
    if layout.layout_hash() != meta["layout_hash"]:
        raise PhantomError(f"{sidecar_path}: layout hash mismatch")

    image = read_tensor(f"{prefix}.image.pet")
    coord_field = read_tensor(f"{prefix}.coord.pet")
    mask = read_tensor(f"{prefix}.mask.pet").astype(bool)
    if image.shape != tuple(meta["size"]) or coord_field.shape != (dim, *image.shape) or mask.shape != image.shape:
        raise PhantomError(f"{prefix}: tensor shapes do not match the sidecar")

    return Phantom(
        image=_freeze(image),
        spacing=tuple(float(s) for s in meta["spacing"]),
        coord_field=_freeze(coord_field),
        body_mask=_freeze(mask),
        landmarks=tuple(Landmark(lm["name"], tuple(float(v) for v in lm["point"])) for lm in meta["landmarks"]),
        seed=int(meta["seed"]),
        variation=float(meta["variation"]),
        layout=layout,
        warp=tuple(WarpMode.from_dict(m) for m in meta["warp"]),
        origin=tuple(int(v) for v in meta["origin"]),
        full_size=tuple(int(v) for v in meta["full_size"]),
        phantom_id=str(meta.get("phantom_id", prefix.name)),
    )


def load_directory(directory: str | Path) -> list[Phantom]:
    """按文件名顺序读取目录下所有 phantom_NNNN"""
    directory = Path(directory)
    if not directory.is_dir():
        raise PhantomError(f"phantom directory not found: {directory}")
    sidecars = sorted(p for p in directory.iterdir() if FILE_PATTERN.match(p.name))
    if not sidecars:
        raise PhantomError(f"no phantom_NNNN.json files in {directory}")
    phantoms = [load(directory / p.name[: -len(".json")]) for p in sidecars]
    logger.info(f"📂 从 {directory} 读取 {len(phantoms)} 个体模")
    return phantoms


def load_image(path: str | Path) -> tuple[np.ndarray, Phantom | None]:
    """
    读取图像：既可以是体模前缀（带 .json），也可以是单独的 .pet 图像文件
    """
    path = Path(path)
    text = str(path)
    for suffix in (".json", ".image.pet"):
        if text.endswith(suffix):
            text = text[: -len(suffix)]
    if Path(f"{text}.json").is_file():
        phantom = load(text)
        return phantom.image, phantom
    if path.is_file():
        return read_tensor(path).astype(np.float32), None
    raise PhantomError(f"image not found: {path}")
