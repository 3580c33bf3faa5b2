"""
embed 命令：计算整张图像的全局/局部嵌入场
"""

import argparse
import logging
from pathlib import Path

from core.evaluation import heads_for, inference_variant
from core.infer import embed_image
from core.net import load_checkpoint
from core.phantom import load_image
from utils.command_factory import command_factory
from utils.config_manager import dump_config
from utils.formatter import emit_json
from utils.tensor_io import write_json, write_tensor


logger = logging.getLogger(__name__)


def add_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--checkpoint", required=True, help="检查点目录")
    parser.add_argument("--image", required=True, help="体模前缀或 .pet 图像")
    parser.add_argument("--out", required=True, help="输出目录")


def embed_command(args: argparse.Namespace) -> int:
    """写出 global.pet / local.pet（形状 (c, *cells)）与 embedding.json"""
    checkpoint = load_checkpoint(args.checkpoint)
    config = checkpoint.run_config
    image, _ = load_image(args.image)

    heads = heads_for((inference_variant(config),))
    embedding = embed_image(image, checkpoint.params, config.encoder, config.eval.tile_size or None, heads)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"image_shape": list(embedding.image_shape), "fields": {}}
    for name, field in (("global", embedding.global_field), ("local", embedding.local_field)):
        if field is None:
            continue
        write_tensor(out_dir / f"{name}.pet", field.array)
        meta["fields"][name] = {"stride": list(field.stride), "cells": list(field.cells), "embed_dim": field.embed_dim}
    write_json(out_dir / "embedding.json", meta)
    dump_config(config, out_dir / "config.env")

    logger.info(f"✅ 嵌入已写出: {out_dir}")
    emit_json({"out": str(out_dir), **meta})
    return 0


command_factory.register_command("embed", embed_command, description="计算整图嵌入", arguments=add_arguments)
