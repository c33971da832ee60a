"""WAV の読み書きとリサンプリング

対応する WAV は RIFF/WAVE、リトルエンディアン、PCM 16-bit 整数または 32-bit 浮動小数点、
1-2 チャネル (WAVE_FORMAT_EXTENSIBLE のサブフォーマットも同じ 2 種類のみ)
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "WavEncoding",
    "WavFormatError",
    "Waveform",
    "decode_wav",
    "encode_wav",
    "read_wav",
    "resample",
    "write_wav",
]

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE
_SUPPORTED = {(WAVE_FORMAT_PCM, 16), (WAVE_FORMAT_IEEE_FLOAT, 32)}

PCM16_SCALE = 32768.0

# リサンプラ: 1 位相あたり 32 タップの Kaiser 窓 sinc、遮断は低い方のナイキストの 0.9 倍
TAPS_PER_PHASE = 32
CUTOFF = 0.9
KAISER_BETA = 8.6
# 一度に計算する出力サンプル数
RESAMPLE_CHUNK = 4096


class WavFormatError(ValueError):
    """未対応または壊れた WAV"""


class WavEncoding(Enum):
    PCM16 = "pcm16"
    FLOAT32 = "float32"


@dataclass(frozen=True)
class Waveform:
    """モノラル波形 (値域 [-1, 1] の float32)"""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise ValueError(f"波形は 1 次元である必要があります: shape={samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("波形に NaN または Inf が含まれています")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate は正である必要があります: {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        """秒"""
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class _Format:
    tag: int
    channels: int
    sample_rate: int
    block_align: int
    bits: int


def _parse_fmt(body: bytes) -> _Format:
    if len(body) < 16:
        raise WavFormatError(f"fmt チャンクが短すぎます: {len(body)} バイト")
    tag, channels, sample_rate, _byte_rate, block_align, bits = struct.unpack_from("<HHIIHH", body)
    if tag == WAVE_FORMAT_EXTENSIBLE:
        # cbSize(2) validBits(2) channelMask(4) の後にサブフォーマット GUID が続く
        if len(body) < 26:
            raise WavFormatError("WAVE_FORMAT_EXTENSIBLE の fmt チャンクが短すぎます")
        (tag,) = struct.unpack_from("<H", body, 24)
    return _Format(tag, channels, sample_rate, block_align, bits)


def _check_supported(fmt: _Format) -> None:
    if (fmt.tag, fmt.bits) not in _SUPPORTED:
        raise WavFormatError(f"未対応のフォーマットです: format tag 0x{fmt.tag:04x}, {fmt.bits} bit")


def _decode_frames(fmt: _Format, payload: bytes) -> np.ndarray:
    _check_supported(fmt)
    if (fmt.tag, fmt.bits) == (WAVE_FORMAT_PCM, 16):
        frames = np.frombuffer(payload, dtype="<i2").astype(np.float64) / PCM16_SCALE
    else:
        frames = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return frames.reshape(-1, fmt.channels).mean(axis=1)


def decode_wav(data: bytes | bytearray | memoryview) -> Waveform:
    """WAV バイト列をモノラル波形にデコードする

    ステレオはチャネル平均、16-bit 整数は 1/32768 倍する

    Raises:
        WavFormatError: RIFF/WAVE でない、未対応フォーマット、チャンクの切り詰め
    """
    data = bytes(data)
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError("RIFF/WAVE ヘッダがありません")

    fmt: _Format | None = None
    offset = 12
    while offset + 8 <= len(data):
        chunk_id = data[offset : offset + 4]
        (size,) = struct.unpack_from("<I", data, offset + 4)
        body_start = offset + 8
        body_end = body_start + size
        if chunk_id == b"fmt ":
            if body_end > len(data):
                raise WavFormatError("fmt チャンクが途中で切れています")
            fmt = _parse_fmt(data[body_start:body_end])
        elif chunk_id == b"data":
            if fmt is None:
                raise WavFormatError("data チャンクが fmt チャンクより前にあります")
            if body_end > len(data):
                raise WavFormatError(
                    f"truncated data chunk: ヘッダは {size} バイト、実データは {len(data) - body_start} バイト"
                )
            _check_supported(fmt)
            if not 1 <= fmt.channels <= 2:
                raise WavFormatError(f"チャネル数は 1 か 2 です: {fmt.channels}")
            if fmt.sample_rate == 0:
                raise WavFormatError("sample_rate が 0 です")
            if fmt.block_align != fmt.channels * fmt.bits // 8:
                raise WavFormatError(
                    f"block_align {fmt.block_align} が {fmt.channels} ch x {fmt.bits} bit と合いません"
                )
            if size % fmt.block_align:
                raise WavFormatError(
                    f"truncated data chunk: {size} バイトはフレーム長 {fmt.block_align} の倍数ではありません"
                )
            samples = _decode_frames(fmt, data[body_start:body_end])
            logger.debug(
                "decoded wav: tag=0x%04x channels=%d rate=%d frames=%d",
                fmt.tag,
                fmt.channels,
                fmt.sample_rate,
                samples.shape[0],
            )
            try:
                return Waveform(samples.astype(np.float32), fmt.sample_rate)
            except ValueError as e:
                raise WavFormatError(str(e)) from e
        # RIFF チャンクは偶数境界に揃える
        offset = body_end + (size & 1)
    if fmt is None:
        raise WavFormatError("fmt チャンクがありません")
    raise WavFormatError("data チャンクがありません")


def encode_wav(waveform: Waveform, encoding: WavEncoding | str = WavEncoding.PCM16) -> bytes:
    """モノラル WAV にエンコードする (PCM16 は [-1, 1] にクリップ)"""
    encoding = WavEncoding(encoding)
    if encoding is WavEncoding.PCM16:
        scaled = np.round(np.clip(waveform.samples.astype(np.float64), -1.0, 1.0) * PCM16_SCALE)
        payload = np.clip(scaled, -32768, 32767).astype("<i2").tobytes()
        tag, bits = WAVE_FORMAT_PCM, 16
    else:
        payload = waveform.samples.astype("<f4").tobytes()
        tag, bits = WAVE_FORMAT_IEEE_FLOAT, 32
    block_align = bits // 8
    fmt = struct.pack(
        "<HHIIHH",
        tag,
        1,
        waveform.sample_rate,
        waveform.sample_rate * block_align,
        block_align,
        bits,
    )
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    chunks += b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks


def read_wav(path: str | Path) -> Waveform:
    path = Path(path)
    try:
        return decode_wav(path.read_bytes())
    except WavFormatError as e:
        raise WavFormatError(f"{path}: {e}") from e


def write_wav(
    path: str | Path, waveform: Waveform, encoding: WavEncoding | str = WavEncoding.PCM16
) -> None:
    Path(path).write_bytes(encode_wav(waveform, encoding))


def resampled_length(length: int, source_rate: int, target_rate: int) -> int:
    """round(length * target / source) を整数演算で求める (0.5 は切り上げ)"""
    return (2 * length * target_rate + source_rate) // (2 * source_rate)


def resample(waveform: Waveform, target_rate: int) -> Waveform:
    """Kaiser 窓 sinc による帯域制限補間

    同じレートなら同一のサンプルを返す。出力長は round(len * target / source)

    Raises:
        ValueError: target_rate が正でない場合
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate は正である必要があります: {target_rate}")
    source_rate = waveform.sample_rate
    if target_rate == source_rate:
        return Waveform(waveform.samples.copy(), source_rate)

    x = waveform.samples.astype(np.float64)
    n_in = x.shape[0]
    n_out = resampled_length(n_in, source_rate, target_rate)
    # 入力サンプル単位での遮断周波数 (入力ナイキストに対する比) と窓の半幅
    scale = min(1.0, target_rate / source_rate)
    cutoff = CUTOFF * scale
    half = TAPS_PER_PHASE / 2 / scale
    reach = math.ceil(half)
    taps = np.arange(-reach, reach + 1)
    norm = np.i0(KAISER_BETA)

    out = np.empty(n_out, dtype=np.float64)
    for start in range(0, n_out, RESAMPLE_CHUNK):
        index = np.arange(start, min(start + RESAMPLE_CHUNK, n_out))
        position = index * (source_rate / target_rate)
        base = np.floor(position).astype(np.int64)
        source = base[:, None] + taps[None, :]
        distance = position[:, None] - source
        ratio = np.clip(distance / half, -1.0, 1.0)
        window = np.i0(KAISER_BETA * np.sqrt(1.0 - ratio * ratio)) / norm
        weight = cutoff * np.sinc(cutoff * distance) * window
        weight[np.abs(distance) > half] = 0.0
        valid = (source >= 0) & (source < n_in)
        values = np.where(valid, x[np.clip(source, 0, n_in - 1)], 0.0)
        out[index] = np.sum(values * weight, axis=1)

    logger.debug("resampled %d -> %d samples (%d Hz -> %d Hz)", n_in, n_out, source_rate, target_rate)
    return Waveform(out.astype(np.float32), target_rate)
