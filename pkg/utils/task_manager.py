"""
统一的并行任务管理器

基于线程池执行相互独立的任务（体模生成、批次内前向、逐查询匹配），
结果始终按输入顺序返回，下游所有归约的顺序因此是固定的。
"""

import logging
import os
import threading
import time
from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from typing import Any


logger = logging.getLogger(__name__)


class TaskManager:
    """统一的并行任务管理器

    Features:
    - 线程数上限（ANATEMBED_THREADS，0 表示全部核心）
    - 按输入顺序返回结果
    - 按上下文分组的任务统计
    - 优雅关闭支持
    """

    def __init__(self, max_workers: int = 0):
        """
        初始化任务管理器

        Args:
            max_workers: 最大线程数，<= 0 时使用 CPU 核心数
        """
        self.max_workers = max_workers if max_workers > 0 else (os.cpu_count() or 1)
        self._executor: ThreadPoolExecutor | None = None
        self._lock = threading.Lock()
        self._is_shutting_down = False
        self.stats: dict[str, int] = {"submitted": 0, "completed": 0, "failed": 0}
        self.context_stats: dict[str, int] = {}

        logger.debug(f"任务管理器已初始化，最大线程数: {self.max_workers}")

    def _get_executor(self) -> ThreadPoolExecutor:
        with self._lock:
            if self._executor is None:
                self._executor = ThreadPoolExecutor(max_workers=self.max_workers, thread_name_prefix="anatembed")
            return self._executor

    def map_ordered(self, func: Callable[[Any], Any], items: Iterable[Any], context: str = "default") -> list[Any]:
        """并行执行并按输入顺序返回结果

        Args:
            func: 任务函数
            items: 输入序列
            context: 任务上下文（用于分类统计）

        Returns:
            与 items 等长、顺序一致的结果列表

        Raises:
            RuntimeError: 任务管理器正在关闭
            任务抛出的第一个异常（按输入顺序）
        """
        if self._is_shutting_down:
            raise RuntimeError("任务管理器正在关闭，无法创建新任务")

        items = list(items)
        self.stats["submitted"] += len(items)
        self.context_stats[context] = self.context_stats.get(context, 0) + len(items)

        if self.max_workers == 1 or len(items) <= 1:
            results = [self._run(func, item) for item in items]
        else:
            futures = [self._get_executor().submit(self._run, func, item) for item in items]
            results = [future.result() for future in futures]

        logger.debug(f"完成 {len(items)} 个任务 ({context})")
        return results

    def _run(self, func: Callable[[Any], Any], item: Any) -> Any:
        try:
            result = func(item)
        except Exception as e:
            with self._lock:
                self.stats["failed"] += 1
            logger.warning(f"任务执行失败: {e}")
            raise
        with self._lock:
            self.stats["completed"] += 1
        return result

    def shutdown(self):
        """优雅关闭任务管理器"""
        self._is_shutting_down = True
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None
        logger.debug("任务管理器已关闭")

    def get_stats(self) -> dict[str, Any]:
        """获取任务统计信息"""
        return {
            "max_workers": self.max_workers,
            "submitted_tasks": self.stats["submitted"],
            "completed_tasks": self.stats["completed"],
            "failed_tasks": self.stats["failed"],
            "context_breakdown": dict(self.context_stats),
            "is_shutting_down": self._is_shutting_down,
        }

    def print_stats(self):
        """打印任务统计信息"""
        stats = self.get_stats()
        logger.info("=== 任务管理器统计 ===")
        logger.info(f"线程数: {stats['max_workers']}")
        logger.info(f"已提交: {stats['submitted_tasks']}")
        logger.info(f"已完成: {stats['completed_tasks']}")
        logger.info(f"失败: {stats['failed_tasks']}")
        if stats["context_breakdown"]:
            logger.info("按上下文分组:")
            for context, count in stats["context_breakdown"].items():
                logger.info(f"  {context}: {count}")


class Stopwatch:
    """毫秒计时器（只用于日志与运行时统计，不影响计算结果）"""

    def __init__(self):
        self.start = time.perf_counter()

    def elapsed_ms(self) -> float:
        return (time.perf_counter() - self.start) * 1000.0


_task_manager: TaskManager | None = None


def get_task_manager(max_workers: int | None = None) -> TaskManager:
    """获取全局任务管理器实例（首次调用时按线程上限创建）"""
    global _task_manager
    if _task_manager is None:
        if max_workers is None:
            from utils.config_manager import get_config

            max_workers = get_config().runtime.threads
        _task_manager = TaskManager(max_workers)
    return _task_manager


def shutdown_task_manager():
    """关闭任务管理器的便捷函数"""
    global _task_manager
    if _task_manager is not None:
        if _task_manager.stats["submitted"]:
            _task_manager.print_stats()
        _task_manager.shutdown()
        _task_manager = None
