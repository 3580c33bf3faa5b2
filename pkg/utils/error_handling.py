"""
错误处理机制
统一的异常层级、错误分析器以及命令行处理函数的错误处理装饰器
"""

import json
import logging
import sys
from functools import wraps


logger = logging.getLogger(__name__)


class AnatEmbedError(Exception):
    """所有领域异常的基类，code 为机器可解析的错误码"""

    code = "internal"
    exit_code = 1


class ConfigError(AnatEmbedError):
    """配置无效或包含未知键"""

    code = "config"
    exit_code = 2


class PhantomError(AnatEmbedError):
    code = "phantom"


class AugmentError(AnatEmbedError):
    code = "augment"


class ShapeError(AnatEmbedError):
    """diffcore 形状约定被违反"""

    code = "shape"


class NormalizationError(AnatEmbedError):
    """InfoNCE 输入向量未归一化"""

    code = "normalization"


class NegativeSelectionError(AnatEmbedError):
    """可用负样本集合为空"""

    code = "negatives"


class NonFiniteLossError(AnatEmbedError):
    """损失出现 NaN/Inf，携带出错批次的种子"""

    code = "nonfinite_loss"

    def __init__(self, message: str, batch_seed: int | None = None, iteration: int | None = None):
        super().__init__(message)
        self.batch_seed = batch_seed
        self.iteration = iteration


class CheckpointError(AnatEmbedError):
    code = "checkpoint"


class TensorFormatError(AnatEmbedError):
    code = "tensor_format"


class ErrorAnalyzer:
    """错误分析器"""

    @staticmethod
    def analyze(error: BaseException) -> dict:
        """
        分析异常，得到错误码、退出码和单行消息

        Args:
            error: 捕获到的异常

        Returns:
            包含 code / type / message / exit_code 的字典
        """
        error_info = {
            "code": "internal",
            "type": type(error).__name__,
            "message": " ".join(str(error).split()) or type(error).__name__,
            "exit_code": 1,
        }

        if isinstance(error, AnatEmbedError):
            error_info.update({"code": error.code, "exit_code": error.exit_code})
            if isinstance(error, NonFiniteLossError) and error.batch_seed is not None:
                error_info["batch_seed"] = error.batch_seed
        elif isinstance(error, FileNotFoundError):
            error_info.update({"code": "not_found"})
        elif isinstance(error, (ValueError, TypeError)):
            error_info.update({"code": "invalid_argument", "exit_code": 2})
        elif isinstance(error, KeyboardInterrupt):
            error_info.update({"code": "interrupted", "exit_code": 130})

        return error_info


def emit_error_line(error_info: dict, stream=None) -> None:
    """向 stderr 输出单行 JSON 错误信息"""
    stream = stream or sys.stderr
    payload = {key: value for key, value in error_info.items() if key != "exit_code"}
    payload["error"] = payload.pop("code")
    stream.write(json.dumps(payload, ensure_ascii=False, sort_keys=True) + "\n")
    stream.flush()


def with_error_handling(func):
    """
    命令处理函数的通用错误处理装饰器

    成功时返回处理函数的退出码（默认 0），失败时记录日志、输出单行错误并返回非零退出码。

    Args:
        func: 要装饰的函数
    """

    @wraps(func)
    def wrapper(*args, **kwargs) -> int:
        try:
            result = func(*args, **kwargs)
            return 0 if result is None else int(result)
        except (Exception, KeyboardInterrupt) as e:
            error_info = ErrorAnalyzer.analyze(e)
            if error_info["exit_code"] == 2:
                logger.error(f"Error in {func.__name__}: {e}")
            else:
                logger.error(f"Error in {func.__name__}: {e}", exc_info=True)
            emit_error_line(error_info)
            return error_info["exit_code"]

    return wrapper
