"""実行設定 (1 つの JSON 文書)

    {
      "version": 1,
      "model": {"preset": "dcase", "block_kind": "rese2", "n_classes": 17},
      "train": {"batch_size": 16, "epochs": 30, "optimizer": {"kind": "sgd-momentum", "lr": 0.01}},
      "data": {"manifest": "data/manifest.jsonl", "task": "multilabel", "segments": 1},
      "viz": {"noise_len": 729, "steps": 256},
      "output_dir": "runs/dcase-rese2"
    }

model は ModelConfig をそのまま書くか、preset を指定する
未知のキーはどの階層でもエラーにする
load_run_config は data.manifest と output_dir の相対パスを設定ファイルのディレクトリ基準で解決する
"""

from __future__ import annotations

import json
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .dataset import TaskKind
from .layers import ConfigError
from .model import ModelConfig, OutputKind
from .presets import preset_config
from .training import TrainConfig
from .viz import VizConfig

__all__ = ["CONFIG_VERSION", "DataConfig", "RunConfig", "load_run_config", "model_from_dict"]

CONFIG_VERSION = 1

PRESET_KEYS = {"preset", "block_kind", "n_classes", "filters_scale"}


def _check_keys(data: Mapping[str, Any], allowed: set[str], where: str) -> None:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where} は JSON オブジェクトである必要があります")
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"{where}: 未知のキーがあります: {sorted(unknown)}")


@dataclass(frozen=True)
class DataConfig:
    manifest: str
    task: TaskKind = TaskKind.MULTILABEL
    segments: int = 1
    threshold: float | None = None
    workers: int = 1

    def validate(self, where: str = "data") -> None:
        if not self.manifest:
            raise ConfigError(f"{where}.manifest が空です")
        if self.segments < 1:
            raise ConfigError(f"{where}.segments は 1 以上です: {self.segments}")
        if self.threshold is not None and not 0 < self.threshold < 1:
            raise ConfigError(f"{where}.threshold は (0, 1) の範囲です: {self.threshold}")
        if self.workers < 1:
            raise ConfigError(f"{where}.workers は 1 以上です: {self.workers}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "manifest": self.manifest,
            "task": self.task.value,
            "segments": self.segments,
            "threshold": self.threshold,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], where: str = "data") -> DataConfig:
        _check_keys(data, {"manifest", "task", "segments", "threshold", "workers"}, where)
        try:
            task = TaskKind(data.get("task", TaskKind.MULTILABEL.value))
        except ValueError as e:
            raise ConfigError(f"{where}.task が不正です: {data.get('task')!r}") from e
        threshold = data.get("threshold")
        config = cls(
            manifest=str(data.get("manifest", "")),
            task=task,
            segments=int(data.get("segments", 1)),
            threshold=None if threshold is None else float(threshold),
            workers=int(data.get("workers", 1)),
        )
        config.validate(where)
        return config


def model_from_dict(data: Mapping[str, Any], where: str = "model") -> ModelConfig:
    """ModelConfig の辞書、または preset 指定からモデル設定を作る"""
    if isinstance(data, Mapping) and "preset" in data:
        _check_keys(data, PRESET_KEYS, where)
        n_classes = data.get("n_classes")
        return preset_config(
            str(data["preset"]),
            block_kind=data.get("block_kind", "basic"),
            n_classes=None if n_classes is None else int(n_classes),
            filters_scale=float(data.get("filters_scale", 1.0)),
        )
    _check_keys(data, {"input_len", "sample_rate", "stem", "blocks", "concat_taps", "head"}, where)
    return ModelConfig.from_dict(data, where)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    data: DataConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    viz: VizConfig = field(default_factory=VizConfig)
    output_dir: str = "runs"

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.data.validate()
        self.viz.validate()
        expected = (
            OutputKind.SOFTMAX_MULTICLASS
            if self.data.task is TaskKind.MULTICLASS
            else OutputKind.SIGMOID_MULTILABEL
        )
        if self.model.head.output is not expected:
            raise ConfigError(
                f"model.head.output ({self.model.head.output.value}) が "
                f"data.task ({self.data.task.value}) と一致しません"
            )

    def check_files(self, base: Path | None = None) -> None:
        """参照しているファイルが存在することを確認する"""
        manifest = self.manifest_path(base)
        if not manifest.is_file():
            raise ConfigError(f"data.manifest が見つかりません: {manifest}")

    def manifest_path(self, base: Path | None = None) -> Path:
        path = Path(self.data.manifest)
        return path if path.is_absolute() or base is None else base / path

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": CONFIG_VERSION,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": self.data.to_dict(),
            "viz": self.viz.to_dict(),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RunConfig:
        _check_keys(data, {"version", "model", "train", "data", "viz", "output_dir"}, "config")
        version = data.get("version")
        if version != CONFIG_VERSION:
            raise ConfigError(f"config.version は {CONFIG_VERSION} である必要があります: {version!r}")
        if "model" not in data or "data" not in data:
            raise ConfigError("config には model と data が必要です")
        try:
            config = cls(
                model=model_from_dict(data["model"]),
                data=DataConfig.from_dict(data["data"]),
                train=TrainConfig.from_dict(data.get("train", {})),
                viz=VizConfig.from_dict(data.get("viz", {})),
                output_dir=str(data.get("output_dir", "runs")),
            )
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"config の値が不正です: {e}") from e
        config.validate()
        return config


def load_run_config(path: str | Path) -> RunConfig:
    """JSON ファイルから RunConfig を読む

    data.manifest と output_dir の相対パスは設定ファイルのディレクトリを基準にする
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: JSON として読めません: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: 先頭は JSON オブジェクトである必要があります")
    config = RunConfig.from_dict(raw)
    manifest = config.manifest_path(path.parent)
    output_dir = Path(config.output_dir)
    if not output_dir.is_absolute():
        output_dir = path.parent / output_dir
    data = DataConfig.from_dict({**config.data.to_dict(), "manifest": str(manifest)})
    return RunConfig(config.model, data, config.train, config.viz, str(output_dir))
