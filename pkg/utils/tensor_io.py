"""
二进制张量文件读写
PET1 格式: 魔数 "PET1"、u8 数据类型标记 (f32=1, u8=2)、u8 维数、小端 u64 各维长度、小端原始数据
所有写操作均为原子操作（临时文件 + 重命名）
"""

import json
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Any

import numpy as np

from utils.error_handling import TensorFormatError


logger = logging.getLogger(__name__)

MAGIC = b"PET1"

# 数据类型标记 -> numpy 小端类型
DTYPE_TAGS = {
    1: np.dtype("<f4"),
    2: np.dtype("u1"),
}
TAG_BY_KIND = {"f": 1, "u": 2, "b": 2}


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    """写入临时文件后原子替换目标文件"""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise


def encode_tensor(array: np.ndarray) -> bytes:
    """将 numpy 数组编码为 PET1 字节串"""
    array = np.asarray(array)
    tag = TAG_BY_KIND.get(array.dtype.kind)
    if tag is None:
        raise TensorFormatError(f"不支持的数据类型: {array.dtype}")
    if array.ndim > 255:
        raise TensorFormatError(f"维数过多: {array.ndim}")

    data = np.ascontiguousarray(array.astype(DTYPE_TAGS[tag], copy=False))
    header = MAGIC + struct.pack("<BB", tag, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape) if array.ndim else b""
    return header + data.tobytes(order="C")


def decode_tensor(payload: bytes) -> np.ndarray:
    """从 PET1 字节串解码 numpy 数组"""
    if len(payload) < 6 or payload[:4] != MAGIC:
        raise TensorFormatError("魔数错误，不是 PET1 文件")

    tag, rank = struct.unpack_from("<BB", payload, 4)
    if tag not in DTYPE_TAGS:
        raise TensorFormatError(f"未知的数据类型标记: {tag}")

    offset = 6 + 8 * rank
    if len(payload) < offset:
        raise TensorFormatError("文件头被截断")
    shape = struct.unpack_from(f"<{rank}Q", payload, 6) if rank else ()

    dtype = DTYPE_TAGS[tag]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(payload) - offset != expected:
        raise TensorFormatError(f"数据长度不匹配: 期望 {expected} 字节, 实际 {len(payload) - offset} 字节")

    return np.frombuffer(payload, dtype=dtype, offset=offset).reshape(shape).copy()


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    """原子写入 PET1 张量文件"""
    _atomic_write_bytes(Path(path), encode_tensor(array))
    logger.debug(f"写入张量: {path} shape={np.shape(array)}")


def read_tensor(path: str | Path) -> np.ndarray:
    """读取 PET1 张量文件"""
    return decode_tensor(Path(path).read_bytes())


def write_json(path: str | Path, data: Any) -> None:
    """原子写入 JSON 文件（键排序，保证字节级可复现）"""
    text = json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    _atomic_write_bytes(Path(path), text.encode("utf-8"))


def write_text(path: str | Path, text: str) -> None:
    """原子写入文本文件"""
    _atomic_write_bytes(Path(path), text.encode("utf-8"))


def read_json(path: str | Path) -> Any:
    with open(path, encoding="utf-8") as f:
        return json.load(f)
