"""
match 命令：把模板上的一个点匹配到查询图像
"""

import argparse
import logging
from pathlib import Path

from core.evaluation import heads_for, inference_variant
from core.infer import build_template, embed_image, match, mode_threshold
from core.net import load_checkpoint
from core.phantom import load_image
from utils.command_factory import command_factory
from utils.config_manager import EVAL_VARIANTS, config_echo, dump_config
from utils.error_handling import ConfigError
from utils.formatter import emit_json
from utils.tensor_io import write_json


logger = logging.getLogger(__name__)


def add_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--checkpoint", required=True, help="检查点目录")
    parser.add_argument("--template", required=True, help="模板体模前缀或 .pet 图像")
    target = parser.add_mutually_exclusive_group(required=True)
    target.add_argument("--point", help="模板上的像素坐标，例如 40.5,61")
    target.add_argument("--landmark", help="模板体模的标志点名称")
    parser.add_argument("--query", required=True, help="查询体模前缀或 .pet 图像")
    parser.add_argument("--threshold", type=float, default=None, help="不匹配阈值（针对 S_g + S_l），默认取 eval.threshold")
    parser.add_argument("--variant", choices=EVAL_VARIANTS, default=None, help="推理变体")
    parser.add_argument("--out", default=None, help="可选：结果 JSON 路径（同目录写配置回显；配置回显总会写入日志）")


def _parse_point(text: str, dim: int) -> tuple[float, ...]:
    try:
        point = tuple(float(part) for part in text.split(","))
    except ValueError as e:
        raise ConfigError(f"--point: cannot parse {text!r}") from e
    if len(point) != dim:
        raise ConfigError(f"--point: expected {dim} coordinates, got {len(point)}")
    return point


def match_command(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    config = checkpoint.run_config
    variant = args.variant or inference_variant(config)
    threshold = config.eval.threshold if args.threshold is None else args.threshold
    heads = heads_for((variant,))
    tile = config.eval.tile_size or None
    logger.info(f"匹配配置: variant={variant}, threshold={threshold}\n{config_echo(config)}")

    template_image, template_phantom = load_image(args.template)
    if args.landmark is not None:
        if template_phantom is None:
            raise ConfigError("--landmark needs a phantom template (with its .json sidecar)")
        name, point = args.landmark, template_phantom.landmark(args.landmark).point
    else:
        name, point = None, _parse_point(args.point, template_image.ndim)

    template = build_template(template_image, {name or "point": point}, checkpoint.params, config.encoder, tile, heads)
    query_image, query_phantom = load_image(args.query)
    embedding = embed_image(query_image, checkpoint.params, config.encoder, tile, heads)

    result = match(template.anchors[name or "point"], embedding, variant)
    matched = result.score >= mode_threshold(threshold, variant)
    query_id = query_phantom.phantom_id if query_phantom is not None and query_phantom.phantom_id else Path(args.query).name
    output = {
        "query_id": query_id,
        "landmark": name,
        "point": list(result.point),
        "score": result.score,
        "matched": bool(matched),
    }
    logger.info(f"{'✅' if matched else '⚠️'} {name or point} -> {result.point} (score={result.score:.3f}, threshold={threshold})")

    if args.out:
        out_path = Path(args.out)
        write_json(out_path, {**output, "variant": variant, "threshold": threshold, "details": result.to_dict()})
        dump_config(config, out_path.parent / f"{out_path.stem}.config.env")
    emit_json(output)
    return 0


command_factory.register_command("match", match_command, description="模板点匹配", arguments=add_arguments)
