"""
sweep 命令：单参数扫描（逐值重新训练或重新评估）
"""

import argparse
import logging
from pathlib import Path

from core.evaluation import run_sweep
from utils.command_factory import command_factory
from utils.config_manager import dump_config, load_config, parse_override_args
from utils.formatter import emit_json, format_table
from utils.task_manager import get_task_manager


logger = logging.getLogger(__name__)


def add_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--config", default=None, help="基础配置文件")
    parser.add_argument("--param", required=True, help="参数名：section.key 或 embed_dim / patch_size / n_pos / n_neg / tau / delta_mm")
    parser.add_argument("--values", nargs="+", required=True, help="参数取值（空格分隔，向量值用逗号）")
    parser.add_argument("--report", required=True, help="结果表路径前缀")
    parser.add_argument("--out", default=None, help="训练输出目录（默认与报告同目录下的 <报告名>_runs）")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="覆盖配置项，可重复")


def sweep_command(args: argparse.Namespace) -> int:
    base_cfg = load_config(args.config, parse_override_args(args.set))
    prefix = Path(args.report)
    out_dir = Path(args.out) if args.out else prefix.parent / f"{prefix.stem}_runs"

    table = run_sweep(args.param, args.values, base_cfg, out_dir, task_manager=get_task_manager())
    path = table.write(prefix)
    dump_config(base_cfg, prefix.parent / f"{prefix.stem}.config.env")
    logger.info("\n" + format_table(table))
    emit_json({"report": str(path), "rows": table.rows})
    return 0


command_factory.register_command("sweep", sweep_command, description="单参数扫描", arguments=add_arguments)
