"""
ablation 命令：消融实验（完整模型 + 各消融开关 + 随机初始化基线）
"""

import argparse
import logging
from pathlib import Path

from core.evaluation import run_ablation
from utils.command_factory import command_factory
from utils.config_manager import dump_config, load_config, parse_override_args
from utils.formatter import emit_json, format_table
from utils.task_manager import get_task_manager


logger = logging.getLogger(__name__)


def add_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--config", default=None, help="基础配置文件")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0], help="训练种子")
    parser.add_argument("--report", required=True, help="结果表路径前缀")
    parser.add_argument("--out", default=None, help="训练输出目录（默认与报告同目录下的 <报告名>_runs）")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="覆盖配置项，可重复")


def ablation_command(args: argparse.Namespace) -> int:
    base_cfg = load_config(args.config, parse_override_args(args.set))
    prefix = Path(args.report)
    out_dir = Path(args.out) if args.out else prefix.parent / f"{prefix.stem}_runs"

    table = run_ablation(base_cfg, args.seeds, out_dir, task_manager=get_task_manager())
    path = table.write(prefix)
    dump_config(base_cfg, prefix.parent / f"{prefix.stem}.config.env")
    logger.info("\n" + format_table(table))
    emit_json({"report": str(path), "rows": len(table.rows)})
    return 0


command_factory.register_command("ablation", ablation_command, description="消融实验", arguments=add_arguments)
