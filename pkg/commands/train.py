"""
train 命令：在体模数据集上训练嵌入编码器
"""

import argparse
import logging
from pathlib import Path

from core.evaluation import prepare_dataset
from core.trainer import train
from utils.command_factory import command_factory
from utils.config_manager import dump_config, load_config, parse_override_args
from utils.formatter import emit_json
from utils.task_manager import get_task_manager


logger = logging.getLogger(__name__)


def add_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--config", default=None, help="配置文件（dotenv 方言，section.key=value）")
    parser.add_argument("--data", default=None, help="体模目录；不给时按 data.* 现场生成")
    parser.add_argument("--out", required=True, help="输出目录（检查点、损失日志、配置回显）")
    parser.add_argument("--resume", default=None, help="从检查点目录恢复训练")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="覆盖配置项，可重复")


def train_command(args: argparse.Namespace) -> int:
    overrides = parse_override_args(args.set)
    if args.data:
        overrides["data.directory"] = args.data
    run_config = load_config(args.config, overrides)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(run_config, out_dir / "config.env")

    task_manager = get_task_manager()
    phantoms = prepare_dataset(run_config, task_manager)
    pool = phantoms[: run_config.eval.n_template_pool]
    if len(pool) < len(phantoms):
        logger.info(f"训练集取前 {len(pool)} 个体模，其余 {len(phantoms) - len(pool)} 个留作查询")

    result = train(run_config, pool, out_dir, resume=args.resume, task_manager=task_manager)
    last = result.history[-1] if result.history else None
    emit_json(
        {
            "checkpoint": str(result.checkpoint_dir),
            "iteration": result.iteration,
            "L_g": last[1] if last else None,
            "L_l": last[2] if last else None,
        }
    )
    return 0


command_factory.register_command("train", train_command, description="训练嵌入编码器", arguments=add_arguments)
