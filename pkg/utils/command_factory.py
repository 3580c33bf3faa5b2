#!/usr/bin/env python3
"""
命令工厂模块
统一注册子命令并构建命令行解析器，所有处理函数统一套上错误处理装饰器
"""

import argparse
import logging
from collections.abc import Callable, Sequence
from typing import Any

from utils.error_handling import ConfigError, with_error_handling


logger = logging.getLogger(__name__)

PROG = "anatembed"


class CommandLineParser(argparse.ArgumentParser):
    """参数错误抛出 ConfigError，由错误处理装饰器统一输出单行错误"""

    def error(self, message: str):
        raise ConfigError(f"{self.prog}: {message}")


class CommandFactory:
    """命令工厂类"""

    def __init__(self):
        self.commands: dict[str, dict[str, Any]] = {}

    def register_command(
        self,
        command: str,
        handler: Callable[[argparse.Namespace], int | None],
        description: str = "",
        arguments: Callable[[argparse.ArgumentParser], None] | None = None,
    ):
        """
        注册命令

        Args:
            command: 子命令名称
            handler: 命令处理函数，接收解析后的参数，返回退出码（None 视为 0）
            description: 命令描述
            arguments: 向子命令解析器添加参数的函数
        """
        self.commands[command] = {
            "handler": with_error_handling(handler),
            "description": description,
            "arguments": arguments,
        }
        logger.debug(f"注册命令: {command}")

    def build_parser(self) -> argparse.ArgumentParser:
        """构建带全部子命令的解析器"""
        parser = CommandLineParser(prog=PROG, description="自监督像素级解剖嵌入：体模生成、训练、嵌入、匹配与评估")
        subparsers = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=CommandLineParser)
        subparsers.required = True
        for command, info in self.commands.items():
            sub = subparsers.add_parser(command, help=info["description"], description=info["description"])
            if info["arguments"] is not None:
                info["arguments"](sub)
        return parser

    def dispatch(self, argv: Sequence[str] | None = None) -> int:
        """
        解析参数并执行对应命令

        Returns:
            进程退出码
        """
        args = self.build_parser().parse_args(argv)
        info = self.commands[args.command]
        logger.debug(f"执行命令: {args.command}")
        return info["handler"](args)


# 全局命令工厂实例
command_factory = CommandFactory()
