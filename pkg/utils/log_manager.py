"""
日志管理模块
日志系统初始化（轮换文件 + stderr）以及训练损失 CSV 日志
"""

import csv
import logging
import logging.handlers
import os
from pathlib import Path

from utils.config_manager import RuntimeConfig


logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOSS_LOG_HEADER = ("iteration", "L_g", "L_l", "wall_ms")


def setup_logging(runtime: RuntimeConfig, console: bool = True) -> None:
    """
    配置根日志器（带轮换）

    stdout 保留给命令的机器可读输出，控制台日志写到 stderr。

    Args:
        runtime: 运行时配置（级别、文件、轮换大小与份数）
        console: 是否输出到 stderr
    """
    handlers: list[logging.Handler] = []
    if runtime.log_file:
        log_dir = os.path.dirname(runtime.log_file)
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
        handlers.append(
            logging.handlers.RotatingFileHandler(
                runtime.log_file,
                maxBytes=runtime.log_max_size,
                backupCount=runtime.log_backup_count,
                encoding="utf-8",
            )
        )
    if console:
        handlers.append(logging.StreamHandler())

    logging.basicConfig(
        format=LOG_FORMAT,
        level=getattr(logging, runtime.log_level.upper(), logging.INFO),
        handlers=handlers,
        force=True,
    )


class LossLog:
    """训练损失 CSV 日志：表头只写一次，恢复训练时追加"""

    def __init__(self, path: str | Path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        write_header = not (append and self.path.is_file() and self.path.stat().st_size > 0)
        self._file = open(self.path, "a" if append else "w", encoding="utf-8", newline="")
        self._writer = csv.writer(self._file)
        if write_header:
            self._writer.writerow(LOSS_LOG_HEADER)
            self._file.flush()

    def write(self, iteration: int, loss_global: float, loss_local: float, wall_ms: float) -> None:
        self._writer.writerow([iteration, repr(float(loss_global)), repr(float(loss_local)), f"{wall_ms:.1f}"])
        self._file.flush()

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()

    def __enter__(self) -> "LossLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_loss_log(path: str | Path) -> list[dict]:
    """读取损失日志为字典列表（wall_ms 以外的字段均为确定性数值）"""
    with open(path, encoding="utf-8", newline="") as f:
        return [
            {
                "iteration": int(row["iteration"]),
                "L_g": float(row["L_g"]),
                "L_l": float(row["L_l"]),
                "wall_ms": float(row["wall_ms"]),
            }
            for row in csv.DictReader(f)
        ]
