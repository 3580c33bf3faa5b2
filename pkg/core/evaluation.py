"""
评估：误差指标、模板选择、基准测试与实验工具（参数扫描、消融、增强阶梯、随机点匹配、不匹配研究）

报告以 JSON + CSV 写出，另附 gnuplot 可直接读取的 .dat 表；运行时统计单独写到 *.runtime.json，
其余输出在相同配置与种子下逐字节一致。
"""

import csv
import io
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from core.infer import Template, build_template, embed_image, extract_anchor, match, match_with_threshold
from core.net import Params, init_params, load_checkpoint
from core.phantom import MIN_SIZE, Phantom, canonical_at, crop, generate_many, get_layout, inverse_lookup, landmark_set, load_directory
from core.rng import make_rng
from core.trainer import TrainResult, train
from utils.config_manager import EVAL_VARIANTS, EncoderConfig, EvalConfig, RunConfig, apply_overrides, resolve, validate
from utils.task_manager import Stopwatch, TaskManager
from utils.tensor_io import write_json, write_text


logger = logging.getLogger(__name__)

ABLATION_VARIANTS = (
    "full",
    "no_coarse_to_fine",
    "no_global_hard",
    "no_global_diverse",
    "no_local_hard",
    "no_local_diverse",
)

# 增强阶梯：每一步在上一步的基础上打开一项增强
LADDER_STEPS = (
    ("crop", "augment.crop_enabled"),
    ("+scale", "augment.scale_enabled"),
    ("+intensity", "augment.intensity_enabled"),
    ("+deform_rotate", "augment.deform_rotate_enabled"),
    ("+flip", "augment.flip_enabled"),
)

# 扫描参数的简写
SWEEP_ALIASES = {
    "embed_dim": "encoder.embed_dim",
    "patch_size": "augment.patch_size",
    "n_pos": "train.n_pos",
    "n_neg": "train.n_neg",
    "tau": "train.tau",
    "delta_mm": "train.delta_mm",
}

NO_MATCH_EXCLUSION_PX = 16

ROW_COLUMNS = ("variant", "query_id", "landmark", "pred", "gt", "error_px", "error_mm", "hit", "score")


# ========================================
# 指标
# ========================================
def radial_errors(pred, gt, spacing=None) -> np.ndarray:
    """
    预测点与真值点的欧氏距离

    Args:
        pred: (n, D) 预测像素坐标
        gt: (n, D) 真值像素坐标
        spacing: 每轴像素间距 mm；None 时返回像素距离

    Returns:
        (n,) 距离
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    offset = pred - gt
    if spacing is not None:
        offset = offset * np.asarray(spacing, dtype=np.float64)
    return np.sqrt(np.sum(offset * offset, axis=-1))


def tolerance_boxes(gt, half_width: float) -> np.ndarray:
    """以真值点为中心、半宽 half_width 的立方体，形状 (n, 2, D)"""
    gt = np.asarray(gt, dtype=np.float64)
    return np.stack([gt - half_width, gt + half_width], axis=-2)


def box_accuracy(pred_points, gt_boxes) -> float:
    """
    落在真值框内（闭区间，边界算命中）的预测点比例

    Raises:
        ValueError: 输入为空
    """
    pred_points = np.asarray(pred_points, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64)
    if pred_points.size == 0:
        raise ValueError("box_accuracy needs at least one prediction")
    if gt_boxes.shape != (pred_points.shape[0], 2, pred_points.shape[1]):
        raise ValueError(f"gt_boxes shape {gt_boxes.shape} does not match predictions {pred_points.shape}")
    inside = np.all((pred_points >= gt_boxes[:, 0]) & (pred_points <= gt_boxes[:, 1]), axis=-1)
    return float(np.mean(inside))


def select_template(landmark_matrices) -> int:
    """
    选择标志点分布最接近平均的图像作为模板

    每张图像的标志点按坐标列做 min-max 归一化到 [0, 1]，对所有图像取平均，
    返回与平均矩阵 Frobenius 距离最小的图像序号（并列取最小序号）。

    Args:
        landmark_matrices: (图像数, 标志点数, D)
    """
    matrices = np.asarray(landmark_matrices, dtype=np.float64)
    if matrices.ndim != 3 or matrices.shape[0] == 0:
        raise ValueError(f"expected (n_images, n_landmarks, D) landmarks, got shape {matrices.shape}")

    lo = matrices.min(axis=1, keepdims=True)
    span = matrices.max(axis=1, keepdims=True) - lo
    normalized = np.where(span > 0, (matrices - lo) / np.where(span > 0, span, 1.0), 0.0)
    mean = normalized.mean(axis=0)
    distances = np.sum((normalized - mean) ** 2, axis=(1, 2))
    return int(np.argmin(distances))


def choose_template(phantoms: Sequence[Phantom]) -> Phantom:
    index = select_template(landmark_set(list(phantoms)))
    template = phantoms[index]
    logger.info(f"📌 模板: {template.phantom_id or template.seed} (序号 {index}/{len(phantoms)})")
    return template


def summarize_rows(rows: list[dict]) -> dict:
    """由逐点结果计算 MRE ± std、最大误差与命中率（行顺序固定，结果可复算）"""
    if not rows:
        return {"n": 0}
    px = np.array([row["error_px"] for row in rows], dtype=np.float64)
    mm = np.array([row["error_mm"] for row in rows], dtype=np.float64)
    hits = np.array([row["hit"] for row in rows], dtype=bool)
    return {
        "n": len(rows),
        "mre_px": float(np.mean(px)),
        "std_px": float(np.std(px)),
        "max_px": float(np.max(px)),
        "mre_mm": float(np.mean(mm)),
        "std_mm": float(np.std(mm)),
        "max_mm": float(np.max(mm)),
        "accuracy": float(np.mean(hits)),
    }


# ========================================
# 报告
# ========================================
def _format_cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return " ".join(_format_cell(v) for v in value)
    return str(value)


def _csv_text(columns: Sequence[str], rows: list[dict]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_format_cell(row.get(column, "")) for column in columns])
    return buffer.getvalue()


def _strip_suffix(prefix: str | Path) -> Path:
    prefix = Path(prefix)
    return prefix.with_suffix("") if prefix.suffix in (".json", ".csv") else prefix


@dataclass
class BenchmarkReport:
    """基准测试报告"""

    kind: str
    template_id: str
    variants: tuple[str, ...]
    tolerance_px: float
    rows: list[dict] = field(default_factory=list)
    self_match: dict[str, float] = field(default_factory=dict)
    runtime: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def variant_rows(self, variant: str) -> list[dict]:
        return [row for row in self.rows if row["variant"] == variant]

    @property
    def summary(self) -> dict[str, dict]:
        return {variant: summarize_rows(self.variant_rows(variant)) for variant in self.variants}

    def per_landmark(self, variant: str) -> dict[str, float]:
        """每个标志点的平均误差（按首次出现的顺序）"""
        errors: dict[str, list[float]] = {}
        for row in self.variant_rows(variant):
            errors.setdefault(row["landmark"], []).append(row["error_px"])
        return {name: float(np.mean(values)) for name, values in errors.items()}

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "template_id": self.template_id,
            "variants": list(self.variants),
            "tolerance_px": self.tolerance_px,
            "summary": self.summary,
            "per_landmark": {variant: self.per_landmark(variant) for variant in self.variants},
            "self_match": self.self_match,
            "meta": self.meta,
            "rows": self.rows,
        }

    def write(self, prefix: str | Path) -> Path:
        """
        写出 prefix.json、prefix.csv、每个变体一个 prefix.<variant>.dat 以及 prefix.runtime.json

        Returns:
            JSON 报告路径
        """
        prefix = _strip_suffix(prefix)
        json_path = Path(f"{prefix}.json")
        write_json(json_path, self.to_dict())
        write_text(f"{prefix}.csv", _csv_text(ROW_COLUMNS, self.rows))
        for variant in self.variants:
            lines = ["# index landmark mean_error_px"]
            lines.extend(f"{i} {name} {value!r}" for i, (name, value) in enumerate(self.per_landmark(variant).items()))
            write_text(f"{prefix}.{variant}.dat", "\n".join(lines) + "\n")
        write_json(f"{prefix}.runtime.json", self.runtime)
        logger.info(f"📝 报告已写出: {json_path}")
        return json_path


@dataclass
class ExperimentTable:
    """扫描 / 消融 / 增强阶梯的结果表"""

    name: str
    columns: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "columns": list(self.columns), "meta": self.meta, "rows": self.rows}

    def write(self, prefix: str | Path) -> Path:
        """写出 prefix.json、prefix.csv 与 gnuplot 表 prefix.dat"""
        prefix = _strip_suffix(prefix)
        json_path = Path(f"{prefix}.json")
        write_json(json_path, self.to_dict())
        write_text(f"{prefix}.csv", _csv_text(self.columns, self.rows))
        lines = ["# " + " ".join(self.columns)]
        lines.extend(" ".join(_format_cell(row.get(column, "")).replace(" ", ",") for column in self.columns) for row in self.rows)
        write_text(f"{prefix}.dat", "\n".join(lines) + "\n")
        logger.info(f"📝 {self.name} 结果表已写出: {json_path}")
        return json_path


# ========================================
# 基准测试
# ========================================
def heads_for(variants: Sequence[str]) -> tuple[str, ...]:
    """推理变体需要的嵌入头"""
    for variant in variants:
        if variant not in EVAL_VARIANTS:
            raise ValueError(f"variant must be one of {EVAL_VARIANTS}, got {variant!r}")
    heads = []
    if any(v in ("both", "global-only") for v in variants):
        heads.append("global")
    if any(v in ("both", "local-only") for v in variants):
        heads.append("local")
    return tuple(heads)


def apply_gamma(image: np.ndarray, gamma: float) -> np.ndarray:
    """对比度变换（查询图像灰度重映射）"""
    if gamma == 1.0:
        return image
    return np.power(np.clip(image, 0.0, None), gamma).astype(np.float32)


def _row(variant: str, query: Phantom, name: str, result, gt, tolerance_px: float) -> dict:
    pred = np.asarray(result.point, dtype=np.float64)[None]
    gt = np.asarray(gt, dtype=np.float64)[None]
    return {
        "variant": variant,
        "query_id": query.phantom_id or str(query.seed),
        "landmark": name,
        "pred": [int(v) for v in result.point],
        "gt": [float(v) for v in gt[0]],
        "error_px": float(radial_errors(pred, gt)[0]),
        "error_mm": float(radial_errors(pred, gt, query.spacing)[0]),
        "hit": bool(box_accuracy(pred, tolerance_boxes(gt, tolerance_px)) == 1.0),
        "score": float(result.score),
    }


def self_match_rate(template: Template, variant: str, local_stride) -> float:
    """模板自匹配：返回点与模板点距离不超过局部步长的比例"""
    if not template.anchors:
        return 0.0
    radius = float(max(local_stride))
    hits = 0
    for anchor in template.anchors.values():
        result = match(anchor, template.embedding, variant)
        error = radial_errors(np.asarray(result.point, dtype=np.float64)[None], np.asarray(anchor.point)[None])[0]
        hits += int(error <= radius)
    return hits / len(template.anchors)


def _evaluate_queries(
    template: Template,
    queries: Sequence[Phantom],
    ground_truth: Callable[[Phantom], dict[str, tuple[float, ...]]],
    params: Params,
    config: EncoderConfig,
    variants: Sequence[str],
    eval_cfg: EvalConfig,
    task_manager: TaskManager | None,
) -> tuple[list[dict], dict[str, float]]:
    """逐查询（可并行）嵌入与匹配；行按 查询 -> 变体 -> 目标 的固定顺序汇总"""
    heads = heads_for(variants)
    tile = eval_cfg.tile_size or None

    def _one(query: Phantom):
        targets = ground_truth(query)
        watch = Stopwatch()
        embedding = embed_image(apply_gamma(query.image, eval_cfg.query_gamma), params, config, tile, heads)
        embed_ms = watch.elapsed_ms()
        rows, match_ms = [], []
        for variant in variants:
            for name, gt in targets.items():
                watch = Stopwatch()
                result = match(template.anchors[name], embedding, variant)
                match_ms.append(watch.elapsed_ms())
                rows.append(_row(variant, query, name, result, gt, eval_cfg.tolerance_px))
        return rows, embed_ms, match_ms

    if task_manager is not None:
        outputs = task_manager.map_ordered(_one, queries, context="benchmark")
    else:
        outputs = [_one(query) for query in queries]

    rows = [row for out in outputs for row in out[0]]
    embed_ms = [out[1] for out in outputs]
    match_ms = [ms for out in outputs for ms in out[2]]
    runtime = {
        "queries": len(queries),
        "embed_ms_mean": float(np.mean(embed_ms)) if embed_ms else 0.0,
        "match_ms_mean": float(np.mean(match_ms)) if match_ms else 0.0,
        "matches": len(match_ms),
    }
    return rows, runtime


def run_benchmark(
    params: Params,
    config: EncoderConfig,
    template: Phantom,
    queries: Sequence[Phantom],
    variants: Sequence[str] = ("both",),
    eval_cfg: EvalConfig | None = None,
    task_manager: TaskManager | None = None,
) -> BenchmarkReport:
    """
    标志点匹配基准测试

    模板的每个标志点在每张查询图像中匹配，与查询的真值标志点比较。

    Args:
        params: 编码器参数
        config: 编码器配置
        template: 模板体模
        queries: 查询体模
        variants: 推理变体（both / global-only / local-only）
        eval_cfg: 评估配置（容差、分块、查询对比度变换）
        task_manager: 可选，查询间并行

    Returns:
        BenchmarkReport
    """
    eval_cfg = eval_cfg or EvalConfig()
    variants = tuple(variants)
    heads = heads_for(variants)
    if not queries:
        raise ValueError("run_benchmark needs at least one query")

    points = {lm.name: lm.point for lm in template.landmarks}
    prepared = build_template(template.image, points, params, config, eval_cfg.tile_size or None, heads)

    def _ground_truth(query: Phantom) -> dict[str, tuple[float, ...]]:
        present = {lm.name: lm.point for lm in query.landmarks}
        return {name: present[name] for name in points if name in present}

    logger.info(f"🔍 基准测试: 模板 {template.phantom_id or template.seed}, {len(queries)} 张查询, 变体 {list(variants)}")
    rows, runtime = _evaluate_queries(prepared, queries, _ground_truth, params, config, variants, eval_cfg, task_manager)

    report = BenchmarkReport(
        kind="landmarks",
        template_id=template.phantom_id or str(template.seed),
        variants=variants,
        tolerance_px=float(eval_cfg.tolerance_px),
        rows=rows,
        self_match={v: self_match_rate(prepared, v, config.local_stride) for v in variants},
        runtime=runtime,
        meta={"query_gamma": float(eval_cfg.query_gamma), "queries": [q.phantom_id or str(q.seed) for q in queries]},
    )
    for variant, stats in report.summary.items():
        if stats["n"]:
            logger.info(
                f"  {variant}: MRE {stats['mre_px']:.2f}±{stats['std_px']:.2f} px, "
                f"max {stats['max_px']:.2f} px, acc {stats['accuracy']:.3f}"
            )
    return report


def run_point_matching(
    params: Params,
    config: EncoderConfig,
    template: Phantom,
    queries: Sequence[Phantom],
    n_points: int,
    seed: int = 0,
    variants: Sequence[str] = ("both",),
    eval_cfg: EvalConfig | None = None,
    task_manager: TaskManager | None = None,
) -> BenchmarkReport:
    """
    随机解剖点匹配

    在模板体内随机取点，每张查询中的真值由规范坐标反查得到；
    反查结果落在查询图像外或体外的点不计入。
    """
    eval_cfg = eval_cfg or EvalConfig()
    variants = tuple(variants)
    heads = heads_for(variants)
    if n_points < 1:
        raise ValueError(f"n_points must be >= 1, got {n_points}")

    rng = make_rng(seed, "point_matching")
    body = np.argwhere(template.body_mask)
    chosen = body[rng.choice(len(body), size=min(n_points, len(body)), replace=False)]
    names = [f"point_{k:04d}" for k in range(len(chosen))]
    canonical = canonical_at(template, chosen)

    embedding = embed_image(template.image, params, config, eval_cfg.tile_size or None, heads)
    prepared = Template(
        template.image,
        embedding,
        {name: extract_anchor(embedding, name, point) for name, point in zip(names, chosen, strict=True)},
    )

    def _ground_truth(query: Phantom) -> dict[str, tuple[float, ...]]:
        located = inverse_lookup(query, canonical)
        targets = {}
        for name, point in zip(names, located, strict=True):
            index = tuple(int(round(v)) for v in point)
            if all(0 <= i < n for i, n in zip(index, query.size, strict=True)) and query.body_mask[index]:
                targets[name] = tuple(float(v) for v in point)
        return targets

    logger.info(f"🎯 随机点匹配: {len(names)} 个点, {len(queries)} 张查询")
    rows, runtime = _evaluate_queries(prepared, queries, _ground_truth, params, config, variants, eval_cfg, task_manager)
    return BenchmarkReport(
        kind="points",
        template_id=template.phantom_id or str(template.seed),
        variants=variants,
        tolerance_px=float(eval_cfg.tolerance_px),
        rows=rows,
        self_match={v: self_match_rate(prepared, v, config.local_stride) for v in variants},
        runtime=runtime,
        meta={"n_points": len(names), "seed": int(seed)},
    )


def _exclusion_crop(query: Phantom, point, exclusion_px: int) -> tuple[tuple[int, ...], tuple[int, ...]] | None:
    """沿第一轴裁掉标志点附近区域，保留较大的一侧；剩余部分不足最小尺寸时返回 None"""
    extent = query.size[0]
    lo = int(np.floor(point[0] - exclusion_px))
    hi = int(np.ceil(point[0] + exclusion_px)) + 1
    above, below = max(lo, 0), max(extent - hi, 0)
    if max(above, below) < MIN_SIZE:
        return None
    offset = [0] * query.dim
    size = list(query.size)
    if above >= below:
        size[0] = above
    else:
        offset[0] = hi
        size[0] = below
    return tuple(offset), tuple(size)


def run_no_match_study(
    params: Params,
    config: EncoderConfig,
    template: Phantom,
    queries: Sequence[Phantom],
    threshold: float,
    variant: str = "both",
    exclusion_px: int = NO_MATCH_EXCLUSION_PX,
    eval_cfg: EvalConfig | None = None,
    task_manager: TaskManager | None = None,
) -> ExperimentTable:
    """
    有限视野研究：查询图像裁掉目标标志点所在区域后，统计被阈值抑制的匹配比例；
    同时给出未裁剪查询中保留（得分达到阈值）的比例作为对照
    """
    eval_cfg = eval_cfg or EvalConfig()
    heads = heads_for((variant,))
    tile = eval_cfg.tile_size or None
    points = {lm.name: lm.point for lm in template.landmarks}
    prepared = build_template(template.image, points, params, config, tile, heads)

    def _one(query: Phantom) -> list[dict]:
        rows = []
        full = embed_image(query.image, params, config, tile, heads)
        for lm in query.landmarks:
            if lm.name not in prepared.anchors:
                continue
            anchor = prepared.anchors[lm.name]
            retained = match_with_threshold(anchor, full, threshold, variant) is not None

            region = _exclusion_crop(query, lm.point, exclusion_px)
            if region is None:
                continue
            cropped = crop(query, *region)
            embedding = embed_image(cropped.image, params, config, tile, heads)
            result = match(anchor, embedding, variant)
            suppressed = match_with_threshold(anchor, embedding, threshold, variant) is None
            rows.append(
                {
                    "query_id": query.phantom_id or str(query.seed),
                    "landmark": lm.name,
                    "crop_offset": list(region[0]),
                    "crop_size": list(region[1]),
                    "score": float(result.score),
                    "suppressed": suppressed,
                    "retained_full": retained,
                }
            )
        return rows

    if task_manager is not None:
        outputs = task_manager.map_ordered(_one, queries, context="no_match")
    else:
        outputs = [_one(query) for query in queries]
    rows = [row for out in outputs for row in out]

    cases = len(rows)
    suppressed = sum(row["suppressed"] for row in rows)
    retained = sum(row["retained_full"] for row in rows)
    meta = {
        "threshold": float(threshold),
        "variant": variant,
        "exclusion_px": int(exclusion_px),
        "cases": cases,
        "suppressed": suppressed,
        "suppressed_fraction": suppressed / cases if cases else 0.0,
        "retained_fraction": retained / cases if cases else 0.0,
    }
    logger.info(f"🚫 不匹配研究: {suppressed}/{cases} 被抑制, 未裁剪保留 {retained}/{cases}")
    return ExperimentTable(
        "no_match",
        ("query_id", "landmark", "crop_offset", "crop_size", "score", "suppressed", "retained_full"),
        rows,
        meta,
    )


# ========================================
# 实验工具（训练 + 评估）
# ========================================
def prepare_dataset(run_config: RunConfig, task_manager: TaskManager | None = None) -> list[Phantom]:
    """读取 data.directory 下的体模，未配置目录时按 data.* 生成"""
    data = run_config.data
    if data.directory:
        return load_directory(data.directory)
    layout = get_layout(data.layout, data.dim)
    logger.info(f"🧪 生成 {data.count} 个 {data.dim}D 体模 (seed={data.seed}, size={data.size}, layout={layout.name})")
    return generate_many(data.seed, data.count, data.dim, data.size, data.variation, layout, task_manager)


def split_dataset(phantoms: Sequence[Phantom], eval_cfg: EvalConfig) -> tuple[list[Phantom], list[Phantom]]:
    """前 n_template_pool 个用于训练与模板选择，其后 n_queries 个作为留出查询"""
    pool = list(phantoms[: eval_cfg.n_template_pool])
    queries = list(phantoms[eval_cfg.n_template_pool : eval_cfg.n_template_pool + eval_cfg.n_queries])
    if not queries:
        raise ValueError(
            f"dataset of {len(phantoms)} phantoms leaves no held-out queries "
            f"(eval.n_template_pool={eval_cfg.n_template_pool})"
        )
    return pool, queries


def inference_variant(run_config: RunConfig) -> str:
    """无粗到细结构的模型只有局部嵌入，推理只用 S_l"""
    return "local-only" if run_config.train.no_coarse_to_fine else run_config.eval.variant


def train_and_benchmark(
    run_config: RunConfig,
    train_set: Sequence[Phantom],
    queries: Sequence[Phantom],
    out_dir: str | Path,
    variants: Sequence[str] | None = None,
    task_manager: TaskManager | None = None,
) -> tuple[TrainResult, BenchmarkReport]:
    """训练一个模型并在留出查询上评估"""
    result = train(run_config, list(train_set), out_dir, task_manager=task_manager)
    params = load_checkpoint(result.checkpoint_dir).params
    template = choose_template(train_set)
    report = run_benchmark(
        params,
        run_config.encoder,
        template,
        queries,
        variants or (inference_variant(run_config),),
        run_config.eval,
        task_manager,
    )
    return result, report


def _experiment_row(report: BenchmarkReport, variant: str, /, **labels) -> dict:
    """结果表的一行；没有可评估的查询时指标单元格写 n/a"""
    stats = report.summary[variant]
    if not stats.get("n"):
        logger.warning(f"⚠️ 变体 {variant} 没有可评估的结果，指标记为 n/a")
        return {**labels, **{column: MISSING_CELL for column in METRIC_COLUMNS}}
    return {**labels, **{column: stats[column] for column in METRIC_COLUMNS}}


METRIC_COLUMNS = ("mre_px", "std_px", "max_px", "mre_mm", "accuracy")
MISSING_CELL = "n/a"


def _override(base_cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    config = resolve(apply_overrides(base_cfg, overrides))
    validate(config)
    return config


def run_sweep(
    param_name: str,
    values: Sequence[str],
    base_cfg: RunConfig,
    out_dir: str | Path,
    dataset: Sequence[Phantom] | None = None,
    task_manager: TaskManager | None = None,
) -> ExperimentTable:
    """
    单参数扫描

    eval.* 参数只重新评估（模型训练一次），其余参数每个取值重新训练。

    Args:
        param_name: section.key 或简写（embed_dim、patch_size、n_pos、n_neg、tau、delta_mm）
        values: 取值文本列表
        base_cfg: 基础配置
        out_dir: 每个取值的训练输出目录的父目录
    """
    key = SWEEP_ALIASES.get(param_name, param_name)
    if not values:
        raise ValueError("run_sweep needs at least one value")
    configs = [_override(base_cfg, {key: str(value)}) for value in values]

    phantoms = list(dataset) if dataset is not None else prepare_dataset(base_cfg, task_manager)
    train_set, queries = split_dataset(phantoms, base_cfg.eval)
    out_dir = Path(out_dir)
    table = ExperimentTable("sweep", ("param", "value", *METRIC_COLUMNS), meta={"param": key, "values": [str(v) for v in values]})

    if key.startswith("eval."):
        result = train(base_cfg, train_set, out_dir / "base", task_manager=task_manager)
        params = load_checkpoint(result.checkpoint_dir).params
        template = choose_template(train_set)
        for value, config in zip(values, configs, strict=True):
            variant = inference_variant(config)
            report = run_benchmark(params, config.encoder, template, queries, (variant,), config.eval, task_manager)
            table.rows.append(_experiment_row(report, variant, param=key, value=str(value)))
        return table

    for k, (value, config) in enumerate(zip(values, configs, strict=True)):
        logger.info(f"📈 扫描 {key}={value} ({k + 1}/{len(values)})")
        _, report = train_and_benchmark(config, train_set, queries, out_dir / f"value_{k:02d}", task_manager=task_manager)
        table.rows.append(_experiment_row(report, inference_variant(config), param=key, value=str(value)))
    return table


def run_ablation(
    base_cfg: RunConfig,
    seeds: Sequence[int],
    out_dir: str | Path,
    dataset: Sequence[Phantom] | None = None,
    task_manager: TaskManager | None = None,
) -> ExperimentTable:
    """
    消融实验：每个种子训练完整模型与每个消融开关，另附随机初始化基线

    完整模型额外报告 global-only / local-only 推理变体。
    """
    phantoms = list(dataset) if dataset is not None else prepare_dataset(base_cfg, task_manager)
    train_set, queries = split_dataset(phantoms, base_cfg.eval)
    template = choose_template(train_set)
    out_dir = Path(out_dir)
    table = ExperimentTable("ablation", ("variant", "inference", "seed", *METRIC_COLUMNS), meta={"seeds": [int(s) for s in seeds]})

    for seed in seeds:
        seed_cfg = _override(base_cfg, {"train.seed": str(seed)})

        baseline = init_params(seed_cfg.encoder, seed_cfg.train.seed)
        report = run_benchmark(baseline, seed_cfg.encoder, template, queries, ("both",), seed_cfg.eval, task_manager)
        table.rows.append(_experiment_row(report, "both", variant="random_init", inference="both", seed=int(seed)))

        for variant in ABLATION_VARIANTS:
            config = seed_cfg if variant == "full" else _override(seed_cfg, {f"train.{variant}": "true"})
            inference = EVAL_VARIANTS if variant == "full" else (inference_variant(config),)
            logger.info(f"🧩 消融 {variant} (seed={seed})")
            _, report = train_and_benchmark(
                config, train_set, queries, out_dir / f"seed_{seed}" / variant, inference, task_manager
            )
            for mode in inference:
                table.rows.append(_experiment_row(report, mode, variant=variant, inference=mode, seed=int(seed)))
    return table


def run_augmentation_ladder(
    base_cfg: RunConfig,
    seeds: Sequence[int],
    out_dir: str | Path,
    dataset: Sequence[Phantom] | None = None,
    task_manager: TaskManager | None = None,
) -> ExperimentTable:
    """增强阶梯：仅裁剪 -> +缩放 -> +灰度 -> +形变旋转 -> +翻转，每步每个种子一行"""
    phantoms = list(dataset) if dataset is not None else prepare_dataset(base_cfg, task_manager)
    train_set, queries = split_dataset(phantoms, base_cfg.eval)
    out_dir = Path(out_dir)
    table = ExperimentTable("ladder", ("step", "seed", *METRIC_COLUMNS), meta={"seeds": [int(s) for s in seeds], "layout": base_cfg.data.layout})

    for seed in seeds:
        overrides = {key: "false" for _, key in LADDER_STEPS}
        overrides["train.seed"] = str(seed)
        for k, (step, key) in enumerate(LADDER_STEPS):
            overrides[key] = "true"
            config = _override(base_cfg, overrides)
            logger.info(f"🪜 增强阶梯 {step} (seed={seed})")
            _, report = train_and_benchmark(config, train_set, queries, out_dir / f"seed_{seed}" / f"step_{k}", task_manager=task_manager)
            table.rows.append(_experiment_row(report, inference_variant(config), step=step, seed=int(seed)))
    return table
