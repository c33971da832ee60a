"""マニフェスト、セグメント分割、ミニバッチ

マニフェストは 1 行 1 レコードの JSON Lines:

    {"path": "clips/a.wav", "labels": ["guitar", "rock"], "split": "train"}

path はマニフェストのあるディレクトリからの相対パスでもよい
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .audio import Waveform, read_wav, resample, write_wav

logger = logging.getLogger(__name__)

__all__ = [
    "Batch",
    "Clip",
    "ClipRecord",
    "Manifest",
    "ManifestError",
    "SegmentPlan",
    "Split",
    "TaskKind",
    "encode_targets",
    "extract_segments",
    "iter_batches",
    "load_clips",
    "load_manifest",
    "plan_segments",
    "synth_tone_dataset",
]


class ManifestError(ValueError):
    """マニフェストの不正 (line は 1 始まり、ファイル全体の問題なら None)"""

    def __init__(self, message: str, line: int | None = None) -> None:
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class Split(Enum):
    TRAIN = "train"
    VALID = "valid"
    TEST = "test"


class TaskKind(Enum):
    MULTILABEL = "multilabel"
    MULTICLASS = "multiclass"


@dataclass(frozen=True)
class ClipRecord:
    path: Path
    labels: tuple[int, ...]
    split: Split


@dataclass(frozen=True)
class Manifest:
    """検証済みのレコードとラベル語彙 (ソート済み、インデックスは位置)"""

    records: tuple[ClipRecord, ...]
    vocabulary: tuple[str, ...]
    task: TaskKind

    @property
    def n_classes(self) -> int:
        return len(self.vocabulary)

    def split(self, split: Split | str) -> list[ClipRecord]:
        split = Split(split)
        return [r for r in self.records if r.split is split]


def load_manifest(path: str | Path, task: TaskKind | str = TaskKind.MULTILABEL) -> Manifest:
    """JSON Lines のマニフェストを読む

    Raises:
        ManifestError: 空のマニフェスト、読めない行、未知の split、重複した clip、
            multiclass で 1 つでないラベル
    """
    path = Path(path)
    task = TaskKind(task)
    raw: list[tuple[int, Path, list[str], Split]] = []
    seen: dict[Path, int] = {}
    with path.open(encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"JSON として読めません: {e.msg}", number) from e
            if not isinstance(entry, dict):
                raise ManifestError("レコードは JSON オブジェクトである必要があります", number)
            unknown = set(entry) - {"path", "labels", "split"}
            if unknown:
                raise ManifestError(f"未知のフィールドがあります: {sorted(unknown)}", number)
            clip_path = entry.get("path")
            labels = entry.get("labels")
            if not isinstance(clip_path, str) or not clip_path:
                raise ManifestError("path は空でない文字列である必要があります", number)
            if not isinstance(labels, list) or not all(isinstance(x, str) for x in labels):
                raise ManifestError("labels は文字列のリストである必要があります", number)
            try:
                split = Split(entry.get("split"))
            except ValueError as e:
                raise ManifestError(f"未知の split です: {entry.get('split')!r}", number) from e
            if task is TaskKind.MULTICLASS and len(labels) != 1:
                raise ManifestError(
                    f"multiclass のレコードはラベルを 1 つだけ持ちます: {labels}", number
                )
            resolved = (path.parent / clip_path).resolve()
            if resolved in seen:
                raise ManifestError(
                    f"duplicate clip: {clip_path} ({seen[resolved]} 行目と重複)", number
                )
            seen[resolved] = number
            raw.append((number, resolved, labels, split))
    if not raw:
        raise ManifestError(f"empty manifest: {path}")

    vocabulary = tuple(sorted({label for _, _, labels, _ in raw for label in labels}))
    index = {label: i for i, label in enumerate(vocabulary)}
    records = tuple(
        ClipRecord(clip_path, tuple(sorted({index[label] for label in labels})), split)
        for _, clip_path, labels, split in raw
    )
    logger.info(
        "manifest loaded: %s records=%d classes=%d", path, len(records), len(vocabulary)
    )
    return Manifest(records, vocabulary, task)


@dataclass(frozen=True)
class SegmentPlan:
    """クリップから切り出すセグメントの位置

    padded_len は末尾ゼロ埋め後のクリップ長
    """

    segment_len: int
    offsets: tuple[int, ...]
    padded_len: int

    @property
    def n_segments(self) -> int:
        return len(self.offsets)


def plan_segments(clip_len: int, segment_len: int, n_segments: int) -> SegmentPlan:
    """[0, clip_len - segment_len] に等間隔 (整数) でセグメントを並べる

    クリップがセグメント以下の長さなら末尾をゼロ埋めし、offset 0 の 1 つだけにする
    """
    if segment_len <= 0:
        raise ValueError(f"segment_len は正である必要があります: {segment_len}")
    if n_segments < 1:
        raise ValueError(f"n_segments は 1 以上です: {n_segments}")
    if clip_len <= segment_len:
        return SegmentPlan(segment_len, (0,), segment_len)
    span = clip_len - segment_len
    if n_segments == 1:
        return SegmentPlan(segment_len, (0,), clip_len)
    offsets = tuple(i * span // (n_segments - 1) for i in range(n_segments))
    return SegmentPlan(segment_len, offsets, clip_len)


def extract_segments(samples: np.ndarray, plan: SegmentPlan) -> np.ndarray:
    """[n_segments, segment_len] の float32 行列"""
    samples = np.asarray(samples, dtype=np.float32)
    padded = np.zeros(plan.padded_len, dtype=np.float32)
    length = min(samples.shape[0], plan.padded_len)
    padded[:length] = samples[:length]
    return np.stack([padded[o : o + plan.segment_len] for o in plan.offsets])


@dataclass(frozen=True)
class Clip:
    """デコードとリサンプル済みのクリップ"""

    record: ClipRecord
    samples: np.ndarray


def _load_one(record: ClipRecord, sample_rate: int) -> Clip:
    waveform = read_wav(record.path)
    if waveform.sample_rate != sample_rate:
        waveform = resample(waveform, sample_rate)
    if len(waveform) == 0:
        raise ValueError(f"{record.path}: 空のクリップです")
    logger.debug("clip loaded: %s (%d samples)", record.path, len(waveform))
    return Clip(record, waveform.samples)


def load_clips(records: Sequence[ClipRecord], sample_rate: int, workers: int = 1) -> list[Clip]:
    """デコードとリサンプルをクリップ単位で並列に行う (結果はレコード順)"""
    if workers <= 1:
        return [_load_one(r, sample_rate) for r in records]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(lambda r: _load_one(r, sample_rate), records))


def encode_targets(
    records: Sequence[ClipRecord], n_classes: int, task: TaskKind
) -> np.ndarray:
    """multilabel は [N, C] の 0/1、multiclass は [N] のクラス番号"""
    for record in records:
        if any(not 0 <= label < n_classes for label in record.labels):
            raise ValueError(f"{record.path}: クラス番号が n_classes={n_classes} の範囲外です")
    if task is TaskKind.MULTICLASS:
        return np.array([r.labels[0] for r in records], dtype=np.int64)
    targets = np.zeros((len(records), n_classes), dtype=np.float32)
    for i, record in enumerate(records):
        targets[i, list(record.labels)] = 1.0
    return targets


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray  # [B, 1, segment_len]
    targets: np.ndarray
    indices: np.ndarray


def iter_batches(
    clips: Sequence[Clip],
    segment_len: int,
    batch_size: int,
    n_classes: int,
    task: TaskKind,
    rng: np.random.Generator,
) -> Iterator[Batch]:
    """シャッフルしたミニバッチ (長いクリップからはランダムな 1 セグメントを切り出す)

    同じ rng の状態からは同じ順序と同じ切り出し位置になる
    """
    if batch_size < 1:
        raise ValueError(f"batch_size は 1 以上です: {batch_size}")
    order = rng.permutation(len(clips))
    for start in range(0, len(order), batch_size):
        indices = order[start : start + batch_size]
        inputs = np.zeros((len(indices), 1, segment_len), dtype=np.float32)
        for row, i in enumerate(indices):
            samples = clips[i].samples
            if samples.shape[0] > segment_len:
                offset = int(rng.integers(0, samples.shape[0] - segment_len + 1))
                inputs[row, 0] = samples[offset : offset + segment_len]
            else:
                inputs[row, 0, : samples.shape[0]] = samples
        targets = encode_targets([clips[i].record for i in indices], n_classes, task)
        yield Batch(inputs, targets, indices)


def _band_centers(n_classes: int, low: float, high: float) -> np.ndarray:
    return low * (high / low) ** (np.arange(n_classes) / max(1, n_classes - 1))


def synth_tone_dataset(
    out_dir: str | Path,
    *,
    n_classes: int = 4,
    clips_per_split: dict[str, int] | None = None,
    clip_len: int = 729,
    sample_rate: int = 16000,
    task: TaskKind | str = TaskKind.MULTILABEL,
    noise: float = 0.05,
    seed: int = 0,
) -> Path:
    """クラスごとに周波数帯を決めた合成トーンのデータセットを書き出す

    クラス k のトーンは 300 Hz から 4 kHz の対数等間隔の中心周波数 (±5% の揺らぎ)
    multiclass は i 番目のクリップがクラス i mod n_classes、
    multilabel はそれにランダムなクラスを加えた集合 (どの split も件数が n_classes 以上なら全クラスが現れる)

    Returns:
        manifest.jsonl のパス
    """
    out_dir = Path(out_dir)
    task = TaskKind(task)
    if n_classes < 2:
        raise ValueError(f"n_classes は 2 以上です: {n_classes}")
    counts = clips_per_split or {"train": 16, "valid": 8, "test": 8}
    rng = np.random.default_rng(seed)
    centers = _band_centers(n_classes, 300.0, 4000.0)
    width = len(str(n_classes - 1))
    names = [f"tone{k:0{width}d}" for k in range(n_classes)]
    t = np.arange(clip_len) / sample_rate

    (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    lines: list[str] = []
    for split_name, count in counts.items():
        split = Split(split_name)
        for i in range(count):
            if task is TaskKind.MULTICLASS:
                labels = [i % n_classes]
            else:
                mask = rng.random(n_classes) < 0.5
                mask[i % n_classes] = True
                labels = [int(k) for k in np.flatnonzero(mask)]
            signal = rng.normal(0.0, noise, clip_len)
            for k in labels:
                freq = centers[k] * rng.uniform(0.95, 1.05)
                signal += np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
            peak = np.max(np.abs(signal))
            signal *= 0.8 / peak if peak > 0 else 1.0
            relative = f"clips/{split.value}_{i:03d}.wav"
            write_wav(out_dir / relative, Waveform(signal.astype(np.float32), sample_rate))
            lines.append(
                json.dumps({"path": relative, "labels": [names[k] for k in labels], "split": split.value})
            )
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("synthetic dataset written: %s clips=%d", manifest, len(lines))
    return manifest
