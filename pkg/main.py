#!/usr/bin/env python3
"""
自监督像素级解剖嵌入 命令行入口

功能特点:
- 带真值规范坐标的合成体模生成
- 粗到细（全局 + 局部）像素嵌入的对比学习训练
- 整图嵌入、模板点匹配与不匹配阈值
- 标志点基准测试、参数扫描、消融与增强阶梯实验
"""

import importlib
import logging
import pkgutil
import sys
from pathlib import Path


# 导入环境变量配置
try:
    from dotenv import load_dotenv

    load_dotenv()
except ImportError:
    print("⚠️ python-dotenv 未安装，直接使用环境变量", file=sys.stderr)

from utils.command_factory import command_factory
from utils.config_manager import get_config
from utils.error_handling import with_error_handling
from utils.log_manager import setup_logging
from utils.task_manager import shutdown_task_manager


logger = logging.getLogger(__name__)

COMMANDS_DIR = Path(__file__).resolve().parent / "commands"


def load_commands():
    """动态加载并注册所有命令"""
    for _, name, _ in pkgutil.iter_modules([str(COMMANDS_DIR)]):
        try:
            importlib.import_module(f"commands.{name}")
            logger.debug(f"成功加载命令模块: {name}")
        except Exception as e:
            logger.error(f"加载命令模块 {name} 失败: {e}")


@with_error_handling
def main(argv: list[str] | None = None) -> int:
    # ========================================
    # 配置日志系统
    # ========================================
    config = get_config()
    setup_logging(config.runtime)
    logger.debug(f"日志级别: {config.runtime.log_level.upper()}, 线程上限: {config.runtime.threads or '全部核心'}")

    # ========================================
    # 加载命令并分发
    # ========================================
    load_commands()
    try:
        return command_factory.dispatch(argv)
    finally:
        shutdown_task_manager()


if __name__ == "__main__":
    sys.exit(main())
