"""
eval 命令：标志点匹配基准测试
"""

import argparse
import logging
from pathlib import Path

from core.evaluation import (
    choose_template,
    inference_variant,
    run_benchmark,
    run_no_match_study,
    run_point_matching,
)
from core.net import init_params, load_checkpoint
from core.phantom import load_directory
from utils.command_factory import command_factory
from utils.config_manager import EVAL_VARIANTS, apply_overrides, dump_config, parse_override_args, resolve, validate
from utils.formatter import emit_json, format_report_summary, format_table
from utils.task_manager import get_task_manager


logger = logging.getLogger(__name__)


def add_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--checkpoint", required=True, help="检查点目录")
    parser.add_argument("--template-dir", required=True, help="模板候选体模目录")
    parser.add_argument("--query-dir", required=True, help="查询体模目录（与模板目录相同时自动留出）")
    parser.add_argument("--variant", choices=(*EVAL_VARIANTS, "all"), default=None, help="推理变体，all 表示三种都评估")
    parser.add_argument("--report", required=True, help="报告路径前缀")
    parser.add_argument("--random-init", action="store_true", help="使用随机初始化参数（基线）")
    parser.add_argument("--points", type=int, default=None, help="额外做随机点匹配的点数（默认 eval.n_random_points）")
    parser.add_argument("--no-match-threshold", type=float, default=None, help="额外做有限视野不匹配研究，给出阈值")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="覆盖 eval.* 配置项，可重复")


def _split(template_dir: Path, query_dir: Path, n_pool: int, n_queries: int):
    pool = load_directory(template_dir)
    if template_dir.resolve() == query_dir.resolve():
        return pool[:n_pool], pool[n_pool : n_pool + n_queries]
    return pool[:n_pool], load_directory(query_dir)


def evaluate_command(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    config = resolve(apply_overrides(checkpoint.run_config, parse_override_args(args.set)))
    validate(config)
    if args.variant == "all":
        variants = EVAL_VARIANTS
    else:
        variants = (args.variant or inference_variant(config),)

    params = init_params(config.encoder, config.train.seed) if args.random_init else checkpoint.params
    pool, queries = _split(Path(args.template_dir), Path(args.query_dir), config.eval.n_template_pool, config.eval.n_queries)
    if not queries:
        raise ValueError("no held-out query phantoms to evaluate")
    template = choose_template(pool)

    task_manager = get_task_manager()
    report = run_benchmark(params, config.encoder, template, queries, variants, config.eval, task_manager)
    report.meta["checkpoint"] = str(args.checkpoint)
    report.meta["random_init"] = bool(args.random_init)
    prefix = Path(args.report)
    report_path = report.write(prefix)
    dump_config(config, prefix.parent / f"{prefix.stem}.config.env")
    logger.info("\n" + format_report_summary(report))

    n_points = config.eval.n_random_points if args.points is None else args.points
    if n_points:
        points = run_point_matching(params, config.encoder, template, queries, n_points, config.train.seed, variants, config.eval, task_manager)
        points.write(prefix.parent / f"{prefix.stem}.points")
        logger.info("\n" + format_report_summary(points))

    if args.no_match_threshold is not None:
        study = run_no_match_study(
            params, config.encoder, template, queries, args.no_match_threshold, variants[0], eval_cfg=config.eval, task_manager=task_manager
        )
        study.write(prefix.parent / f"{prefix.stem}.no_match")
        logger.info("\n" + format_table(study))

    emit_json({"report": str(report_path), "summary": report.summary, "self_match": report.self_match})
    return 0


command_factory.register_command("eval", evaluate_command, description="标志点匹配基准测试", arguments=add_arguments)
