"""学習ループ、クリップ単位の推論、評価

クリップのスコアは全セグメントのスコア (sigmoid / softmax 後) の算術平均
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .audio import Waveform, resample
from .checkpoint import Checkpoint, save_checkpoint
from .dataset import (
    Clip,
    Manifest,
    Split,
    TaskKind,
    encode_targets,
    extract_segments,
    iter_batches,
    load_clips,
    plan_segments,
)
from .layers import ConfigError
from .losses import task_loss
from .metrics import accuracy, instance_f1, macro_auc, micro_auc
from .model import Model, ModelConfig, OutputKind, build_model
from .optim import OptimizerConfig, OptimizerState, ScheduleConfig, StepDecay, optimizer_step
from .tensor import SUPPORTED_DTYPES, NonFiniteError, Tensor, backward, no_grad, precision

logger = logging.getLogger(__name__)

__all__ = [
    "MetricRow",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "evaluate",
    "predict_clip",
    "primary_metric",
    "read_metric_log",
    "train",
    "write_metric_log",
]

METRIC_LOG_HEADER = ("epoch", "split", "metric", "value")


class TrainingDivergedError(RuntimeError):
    """損失が有限でなくなった"""

    def __init__(self, epoch: int, batch: int, lr: float, detail: str) -> None:
        super().__init__(f"学習が発散しました: epoch={epoch} batch={batch} lr={lr:g}: {detail}")
        self.epoch = epoch
        self.batch = batch
        self.lr = lr


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 30
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    seed: int = 0
    precision: str = "float32"

    def validate(self, where: str = "train") -> None:
        if self.batch_size < 1:
            raise ConfigError(f"{where}.batch_size は 1 以上です: {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"{where}.epochs は 1 以上です: {self.epochs}")
        try:
            resolved = np.dtype(self.precision).type
        except TypeError as e:
            raise ConfigError(f"{where}.precision が不正です: {self.precision!r}") from e
        if resolved not in SUPPORTED_DTYPES:
            raise ConfigError(f"{where}.precision は float32 か float64 です: {self.precision}")
        self.optimizer.validate(f"{where}.optimizer")
        self.schedule.validate(f"{where}.schedule")

    def to_dict(self) -> dict[str, Any]:
        return {
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "optimizer": self.optimizer.to_dict(),
            "schedule": self.schedule.to_dict(),
            "seed": self.seed,
            "precision": self.precision,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], where: str = "train") -> TrainConfig:
        unknown = set(data) - {"batch_size", "epochs", "optimizer", "schedule", "seed", "precision"}
        if unknown:
            raise ConfigError(f"{where}: 未知のキーがあります: {sorted(unknown)}")
        try:
            config = cls(
                batch_size=int(data.get("batch_size", cls.batch_size)),
                epochs=int(data.get("epochs", cls.epochs)),
                optimizer=OptimizerConfig.from_dict(data.get("optimizer", {}), f"{where}.optimizer"),
                schedule=ScheduleConfig.from_dict(data.get("schedule", {}), f"{where}.schedule"),
                seed=int(data.get("seed", cls.seed)),
                precision=str(data.get("precision", cls.precision)),
            )
        except TypeError as e:
            raise ConfigError(f"{where}: {e}") from e
        config.validate(where)
        return config


@dataclass(frozen=True)
class MetricRow:
    epoch: int
    split: str
    metric: str
    value: float


def write_metric_log(rows: Iterable[MetricRow], path: str | Path) -> None:
    """epoch,split,metric,value の CSV (値は repr で書くので読み戻すと同じ float になる)"""
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRIC_LOG_HEADER)
        for row in rows:
            writer.writerow((row.epoch, row.split, row.metric, repr(float(row.value))))


def read_metric_log(path: str | Path) -> list[MetricRow]:
    with Path(path).open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if tuple(header or ()) != METRIC_LOG_HEADER:
            raise ValueError(f"{path}: ヘッダが {','.join(METRIC_LOG_HEADER)} ではありません")
        return [MetricRow(int(e), s, m, float(v)) for e, s, m, v in reader]


def _segment_logits(model: Model, samples: np.ndarray, n_segments: int) -> list[Tensor]:
    plan = plan_segments(samples.shape[0], model.config.input_len, n_segments)
    segments = extract_segments(samples, plan)
    return [model.forward(segment[None, None, :], train=False) for segment in segments]


def _as_samples(model: Model, waveform: Waveform | np.ndarray) -> np.ndarray:
    if isinstance(waveform, Waveform):
        if waveform.sample_rate != model.config.sample_rate:
            waveform = resample(waveform, model.config.sample_rate)
        waveform = waveform.samples
    samples = np.asarray(waveform, dtype=np.float32).reshape(-1)
    if samples.size == 0:
        raise ValueError("空の波形は推論できません")
    return samples


def predict_clip(model: Model, waveform: Waveform | np.ndarray, n_segments: int = 1) -> np.ndarray:
    """セグメントごとのスコアの平均 [n_classes]

    セグメントを 1 つずつ推論し、先頭から順に足し合わせる
    """
    samples = _as_samples(model, waveform)
    plan = plan_segments(samples.shape[0], model.config.input_len, n_segments)
    total: np.ndarray | None = None
    for segment in extract_segments(samples, plan):
        scores = model.predict_scores(segment[None, None, :])[0]
        total = scores if total is None else total + scores
    assert total is not None
    return total / plan.n_segments


def primary_metric(task: TaskKind) -> str:
    """最良チェックポイントの選択に使う指標 (大きいほど良い)"""
    return "accuracy" if task is TaskKind.MULTICLASS else "macro_auc"


def _evaluate_clip(
    model: Model, clip: Clip, target: np.ndarray, task: TaskKind, n_segments: int
) -> tuple[np.ndarray, list[float]]:
    with no_grad():
        total: np.ndarray | None = None
        losses: list[float] = []
        logits = _segment_logits(model, clip.samples, n_segments)
        for segment_logits in logits:
            scores = model.activate(segment_logits).numpy()[0]
            total = scores if total is None else total + scores
            losses.append(task_loss(segment_logits, target, task).item())
    assert total is not None
    return total / len(logits), losses


def evaluate(
    model: Model,
    clips: Sequence[Clip],
    task: TaskKind,
    *,
    n_segments: int = 1,
    threshold: float | None = None,
    workers: int = 1,
) -> dict[str, float]:
    """クリップ単位 (セグメント平均) の指標とセグメント単位の平均損失

    multilabel: macro_auc、micro_auc、threshold があれば instance_f1
    multiclass: accuracy
    どちらも loss を含む
    """
    if not clips:
        raise ValueError("評価するクリップがありません")
    n_classes = model.config.head.n_classes
    targets = encode_targets([c.record for c in clips], n_classes, task)
    rows = [targets[i : i + 1] for i in range(len(clips))]
    frozen = model.freeze()

    def run(i: int) -> tuple[np.ndarray, list[float]]:
        return _evaluate_clip(frozen, clips[i], rows[i], task, n_segments)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(run, range(len(clips))))
    else:
        results = [run(i) for i in range(len(clips))]

    scores = np.stack([s for s, _ in results])
    losses = [loss for _, clip_losses in results for loss in clip_losses]
    metrics: dict[str, float] = {}
    if task is TaskKind.MULTICLASS:
        metrics["accuracy"] = accuracy(scores, targets)
    else:
        try:
            metrics["macro_auc"] = macro_auc(scores, targets).value
        except ValueError as e:
            logger.warning("macro AUC を計算できません: %s", e)
        try:
            metrics["micro_auc"] = micro_auc(scores, targets)
        except ValueError as e:
            logger.warning("micro AUC を計算できません: %s", e)
        if threshold is not None:
            metrics["instance_f1"] = instance_f1(scores, targets, threshold)
    metrics["loss"] = float(np.mean(losses))
    return metrics


@dataclass
class TrainResult:
    model: Model
    best: Checkpoint
    rows: list[MetricRow]
    checkpoint_path: Path
    log_path: Path


def _check_task(model_config: ModelConfig, manifest: Manifest) -> None:
    expected = (
        OutputKind.SOFTMAX_MULTICLASS
        if manifest.task is TaskKind.MULTICLASS
        else OutputKind.SIGMOID_MULTILABEL
    )
    if model_config.head.output is not expected:
        raise ConfigError(
            f"head.output {model_config.head.output.value} はタスク {manifest.task.value} と一致しません"
        )
    if model_config.head.n_classes != manifest.n_classes:
        raise ConfigError(
            f"head.n_classes {model_config.head.n_classes} がマニフェストのラベル数 {manifest.n_classes} と一致しません"
        )


def _selection_score(metrics: Mapping[str, float], task: TaskKind) -> float:
    name = primary_metric(task)
    if name in metrics:
        return metrics[name]
    return -metrics["loss"]


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    manifest: Manifest,
    out_dir: str | Path,
    *,
    eval_segments: int = 1,
    threshold: float | None = None,
    workers: int = 1,
) -> TrainResult:
    """学習して最良のチェックポイントと指標ログを out_dir に書く

    out_dir/best.ckpt と out_dir/metrics.csv はエポックごとに更新する

    Raises:
        TrainingDivergedError: 損失が NaN / Inf になった場合
        ConfigError: 設定とマニフェストの不整合
    """
    model_config.validate()
    train_config.validate()
    _check_task(model_config, manifest)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / "best.ckpt"
    log_path = out_dir / "metrics.csv"
    task = manifest.task
    rate = model_config.sample_rate

    with precision(train_config.precision):
        model = build_model(model_config, seed=train_config.seed)
        train_clips = load_clips(manifest.split(Split.TRAIN), rate, workers)
        valid_clips = load_clips(manifest.split(Split.VALID), rate, workers)
        if not train_clips or not valid_clips:
            raise ValueError("マニフェストには train と valid の両方のクリップが必要です")
        logger.info(
            "training: train=%d valid=%d epochs=%d batch=%d",
            len(train_clips),
            len(valid_clips),
            train_config.epochs,
            train_config.batch_size,
        )

        rng = np.random.default_rng(train_config.seed)
        trainable = model.params.trainable()
        state = OptimizerState()
        lr = train_config.optimizer.lr
        schedule = StepDecay(lr, train_config.schedule)
        rows: list[MetricRow] = []
        best_score = -math.inf
        best: Checkpoint | None = None

        for epoch in range(1, train_config.epochs + 1):
            losses: list[float] = []
            batches = iter_batches(
                train_clips,
                model_config.input_len,
                train_config.batch_size,
                model_config.head.n_classes,
                task,
                rng,
            )
            for number, batch in enumerate(batches, start=1):
                for tensor in trainable.values():
                    tensor.zero_grad()
                try:
                    logits = model.forward(batch.inputs, train=True, rng=rng)
                    loss = task_loss(logits, batch.targets, task)
                except NonFiniteError as e:
                    raise TrainingDivergedError(epoch, number, lr, str(e)) from e
                backward(loss)
                optimizer_step(
                    {name: t.data for name, t in trainable.items()},
                    {name: t.grad for name, t in trainable.items()},
                    state,
                    train_config.optimizer,
                    lr=lr,
                )
                losses.append(loss.item())
            rows.append(MetricRow(epoch, "train", "loss", float(np.mean(losses))))

            metrics = evaluate(
                model,
                valid_clips,
                task,
                n_segments=eval_segments,
                threshold=threshold,
                workers=workers,
            )
            rows.extend(MetricRow(epoch, "valid", name, value) for name, value in metrics.items())
            score = _selection_score(metrics, task)
            logger.info(
                "epoch %d: train_loss=%.6f %s lr=%g",
                epoch,
                rows[-len(metrics) - 1].value,
                " ".join(f"{k}={v:.6f}" for k, v in metrics.items()),
                lr,
            )
            if best is None or score > best_score:
                best_score = score
                best = Checkpoint.from_model(
                    model,
                    epoch=epoch,
                    metric=primary_metric(task) if primary_metric(task) in metrics else "-loss",
                    best_metric=score,
                    vocabulary=list(manifest.vocabulary),
                    task=task.value,
                )
                save_checkpoint(best, checkpoint_path)
                logger.info("best checkpoint updated: epoch=%d score=%.6f", epoch, score)
            write_metric_log(rows, log_path)
            lr = schedule.observe(score)

    assert best is not None
    return TrainResult(model, best, rows, checkpoint_path, log_path)
