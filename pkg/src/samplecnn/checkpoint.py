"""チェックポイントのバイナリ形式

すべてリトルエンディアン:

    magic      "SLCN"
    version    u16 (= 1)
    config     u32 長さ + UTF-8 JSON {"model": ModelConfig, "metadata": {...}}
    count      u32
    tensor * count:
        name   u16 長さ + UTF-8
        rank   u8
        dims   u32 * rank
        data   f32 * prod(dims)

読み込みは全体を検証してからモデルを作るので、壊れたファイルから部分的なモデルはできない
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .model import Model, ModelConfig, ModelParams, param_shapes
from .tensor import NonFiniteError

logger = logging.getLogger(__name__)

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "decode_checkpoint",
    "encode_checkpoint",
    "load_checkpoint",
    "save_checkpoint",
]

MAGIC = b"SLCN"
VERSION = 1


class CheckpointError(ValueError):
    """magic / version / 構造 / 形状の不正"""


@dataclass
class Checkpoint:
    """モデル設定、全テンソル (batch-norm の移動平均を含む)、学習メタデータ

    metadata は JSON に書ける値だけを持つ (epoch、best_metric、vocabulary、task など)
    """

    config: ModelConfig
    arrays: dict[str, np.ndarray]
    metadata: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Model, **metadata: Any) -> Checkpoint:
        arrays = {name: t.data.astype(np.float32) for name, t in model.params.items()}
        return cls(model.config, arrays, dict(metadata))

    def to_model(self) -> Model:
        return Model(self.config, ModelParams.from_arrays(self.arrays, self.config))


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    header = json.dumps(
        {"model": checkpoint.config.to_dict(), "metadata": checkpoint.metadata},
        sort_keys=True,
    ).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(header)), header]
    parts.append(struct.pack("<I", len(checkpoint.arrays)))
    for name, array in checkpoint.arrays.items():
        encoded = name.encode()
        parts.append(struct.pack("<HB", len(encoded), array.ndim) + encoded)
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise CheckpointError(f"{what} を読むためのデータが不足しています (offset {self.offset})")
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(data: bytes) -> Checkpoint:
    """バイト列からチェックポイントを復元する

    Raises:
        CheckpointError: magic / version の不一致、切り詰め、余分なバイト、設定との形状不一致
    """
    reader = _Reader(data)
    if reader.take(4, "magic") != MAGIC:
        raise CheckpointError("magic が SLCN ではありません")
    (version,) = reader.unpack("<H", "version")
    if version != VERSION:
        raise CheckpointError(f"未対応のバージョンです: {version}")
    (length,) = reader.unpack("<I", "config 長")
    try:
        header = json.loads(reader.take(length, "config").decode())
        config = ModelConfig.from_dict(header["model"])
        metadata = header.get("metadata", {})
    except (ValueError, KeyError, TypeError, AttributeError) as e:
        raise CheckpointError(f"config ブロックが不正です: {e}") from e

    expected = param_shapes(config)
    (count,) = reader.unpack("<I", "テンソル数")
    if count != len(expected):
        raise CheckpointError(f"テンソル数 {count} が設定から求めた {len(expected)} と一致しません")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len, rank = reader.unpack("<HB", "テンソル名")
        try:
            name = reader.take(name_len, "テンソル名").decode()
        except UnicodeDecodeError as e:
            raise CheckpointError(f"テンソル名が UTF-8 ではありません (offset {reader.offset})") from e
        if name not in expected or name in arrays:
            raise CheckpointError(f"予期しないテンソル名です: {name!r}")
        shape = reader.unpack(f"<{rank}I", f"{name} の次元")
        if tuple(shape) != expected[name]:
            raise CheckpointError(f"{name}: 形状 {shape} が設定から求めた {expected[name]} と一致しません")
        size = math.prod(shape) * 4
        arrays[name] = np.frombuffer(reader.take(size, name), dtype="<f4").reshape(shape).astype(np.float32)
    if reader.offset != len(data):
        raise CheckpointError(f"末尾に余分な {len(data) - reader.offset} バイトがあります")
    ordered = {name: arrays[name] for name in expected}
    try:
        ModelParams.from_arrays(ordered, config)
    except (ValueError, NonFiniteError) as e:
        raise CheckpointError(str(e)) from e
    return Checkpoint(config, ordered, metadata)


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> None:
    """同じディレクトリの一時ファイルに書いてから置き換える"""
    path = Path(path)
    data = encode_checkpoint(checkpoint)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    logger.debug("checkpoint saved: %s (%d bytes)", path, len(data))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        return decode_checkpoint(path.read_bytes())
    except CheckpointError as e:
        raise CheckpointError(f"{path}: {e}") from e
