"""
命名的可拆分随机数流
基于计数器的 Philox 生成器，流由 (种子, 名称/编号...) 唯一确定，与生成顺序无关
"""

import zlib

import numpy as np


def _stream_key(part) -> int:
    """字符串名称通过 CRC32 映射为整数"""
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def make_rng(seed: int, *stream) -> np.random.Generator:
    """
    创建命名随机数流

    Args:
        seed: 全局种子
        stream: 流的路径，如 ("phantom", 3) 或 ("train", iteration, "pair", k)

    Returns:
        独立的 numpy Generator（Philox 位生成器）
    """
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_stream_key(p) for p in stream))
    return np.random.Generator(np.random.Philox(sequence))


def derive_seed(seed: int, *stream) -> int:
    """从命名流派生一个 63 位整数种子（用于诊断信息与子任务）"""
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_stream_key(p) for p in stream))
    return int(sequence.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
