"""学習済みフィルタの可視化

1. ガウスノイズの入力から勾配上昇で対象フィルタの活性 (残りの時間方向の平均) を最大化する
2. 得られた波形の振幅スペクトルを log(1 + |X|) で圧縮する
3. フィルタをピーク周波数でソートし、CSV とグレースケール画像 (PGM) に書き出す
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import _kernels
from . import functional as F
from .layers import ConfigError
from .model import Model, ModelConfig
from .tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

__all__ = [
    "AscentResult",
    "SpectrumSheet",
    "VizConfig",
    "activation_maximization",
    "check_viz_geometry",
    "emit_sheet",
    "read_sheet_csv",
    "sort_by_peak",
    "spectrum",
    "visualize_layer",
]

# 3 サンプルのフィルタとプーリングだけで構成する必要のある段数 (stem + 5 ブロック)
VIZ_STAGES = 6


@dataclass(frozen=True)
class VizConfig:
    layer: int = 1
    noise_len: int = 729
    steps: int = 256
    step_size: float = 0.1
    l2: float = 1e-3
    noise_scale: float = 0.01
    seed: int = 0
    sample_rate: int = 16000
    max_halvings: int = 30

    def validate(self, where: str = "viz") -> None:
        if self.layer < 1:
            raise ConfigError(f"{where}.layer は 1 以上です: {self.layer}")
        if self.noise_len < 2:
            raise ConfigError(f"{where}.noise_len は 2 以上です: {self.noise_len}")
        if self.steps < 1:
            raise ConfigError(f"{where}.steps は 1 以上です: {self.steps}")
        if self.step_size <= 0 or self.noise_scale < 0 or self.l2 < 0:
            raise ConfigError(
                f"{where}: step_size は正、noise_scale と l2 は 0 以上です: "
                f"step_size={self.step_size} noise_scale={self.noise_scale} l2={self.l2}"
            )
        if self.sample_rate <= 0 or self.max_halvings < 0:
            raise ConfigError(f"{where}: sample_rate と max_halvings が不正です")

    def to_dict(self) -> dict[str, Any]:
        return {
            "layer": self.layer,
            "noise_len": self.noise_len,
            "steps": self.steps,
            "step_size": self.step_size,
            "l2": self.l2,
            "noise_scale": self.noise_scale,
            "seed": self.seed,
            "sample_rate": self.sample_rate,
            "max_halvings": self.max_halvings,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], where: str = "viz") -> VizConfig:
        defaults = cls().to_dict()
        unknown = set(data) - set(defaults)
        if unknown:
            raise ConfigError(f"{where}: 未知のキーがあります: {sorted(unknown)}")
        merged = {**defaults, **data}
        try:
            config = cls(
                layer=int(merged["layer"]),
                noise_len=int(merged["noise_len"]),
                steps=int(merged["steps"]),
                step_size=float(merged["step_size"]),
                l2=float(merged["l2"]),
                noise_scale=float(merged["noise_scale"]),
                seed=int(merged["seed"]),
                sample_rate=int(merged["sample_rate"]),
                max_halvings=int(merged["max_halvings"]),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{where}: {e}") from e
        config.validate(where)
        return config


def check_viz_geometry(config: ModelConfig) -> None:
    """最初の 6 段 (stem + 5 ブロック) が 3 サンプルのフィルタとプーリングであることを確認する

    Raises:
        ConfigError: 条件を満たさない段を名前で示す
    """
    if len(config.blocks) < VIZ_STAGES - 1:
        raise ConfigError(f"可視化には {VIZ_STAGES - 1} ブロック以上が必要です: {len(config.blocks)}")
    if config.stem.kernel != 3 or config.stem.stride != 3:
        raise ConfigError(
            f"stem は kernel 3 / stride 3 である必要があります: {config.stem.kernel}/{config.stem.stride}"
        )
    for i, spec in enumerate(config.blocks[: VIZ_STAGES - 1]):
        if spec.conv_kernel != 3 or spec.pool_size != 3:
            raise ConfigError(
                f"blocks[{i}] は conv_kernel 3 / pool_size 3 である必要があります: "
                f"{spec.conv_kernel}/{spec.pool_size}"
            )


@dataclass(frozen=True)
class AscentResult:
    """waveform は最終的な入力、trace は初期値を含む各ステップの目的関数値

    dead は活性の勾配が初期点で恒等的に 0 だったことを示す (入力は更新しない)
    """

    waveform: np.ndarray
    trace: tuple[float, ...]
    dead: bool


def _objective(
    model: Model, x: np.ndarray, layer: int, filter_index: int, l2: float
) -> tuple[Tensor, Tensor, Tensor]:
    """(入力テンソル, 活性項, 目的関数) を返す"""
    inputs = Tensor(x, requires_grad=True)
    activation = model.features(inputs, layer)
    target = F.mean(F.slice(activation, axis=1, start=filter_index, stop=filter_index + 1))
    objective = target - l2 * F.sum(F.square(inputs))
    return inputs, target, objective


def _evaluate(model: Model, x: np.ndarray, layer: int, filter_index: int, l2: float) -> float:
    with no_grad():
        return _objective(model, x, layer, filter_index, l2)[2].item()


def _gradients(
    model: Model, x: np.ndarray, layer: int, filter_index: int, l2: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """(目的関数値, 活性項の勾配, 目的関数の勾配)"""
    inputs, target, objective = _objective(model, x, layer, filter_index, l2)
    activation_grad = np.zeros_like(x)
    if target.node is not None:
        backward(target)
        if inputs.grad is not None:
            activation_grad = inputs.grad.copy()
    total = activation_grad - 2 * l2 * x
    return objective.item(), activation_grad, total


def activation_maximization(
    model: Model,
    layer: int,
    filter_index: int,
    cfg: VizConfig,
    rng: np.random.Generator | None = None,
) -> AscentResult:
    """対象フィルタの活性を最大化する入力波形を勾配上昇で求める

    目的関数は mean_t a[filter, t] - l2 |x|^2
    各ステップは step_size から始め、目的関数が増えるまで刻みを半分にする (max_halvings 回まで)
    増えなければそのステップは動かないので trace は単調非減少になる

    Args:
        model: 推論モードで使うモデル (パラメータも勾配も変更しない)
        layer: 1 は stem の出力、k はブロック k - 1 の出力
        filter_index: 対象フィルタ
        cfg: 可視化の設定
        rng: 初期ノイズ用 (None なら cfg.seed から作る)
    """
    n_filters = _layer_filters(model.config, layer)
    if not 0 <= filter_index < n_filters:
        raise ValueError(f"filter {filter_index} は 0..{n_filters - 1} の範囲外です")
    if any(t.requires_grad for _, t in model.params.items()):
        model = model.freeze()
    rng = rng or np.random.default_rng(cfg.seed)
    dtype = model.params["stem.conv.weight"].data.dtype
    x = (rng.standard_normal(cfg.noise_len) * cfg.noise_scale).astype(dtype)[None, None, :]

    value, activation_grad, grad = _gradients(model, x, layer, filter_index, cfg.l2)
    trace = [value]
    if not np.any(activation_grad):
        logger.warning("layer %d filter %d: dead objective (zero gradient)", layer, filter_index)
        return AscentResult(x[0, 0].copy(), tuple(trace * (cfg.steps + 1)), True)

    for _ in range(cfg.steps):
        step = cfg.step_size
        for _ in range(cfg.max_halvings + 1):
            candidate = (x + step * grad).astype(dtype)
            candidate_value = _evaluate(model, candidate, layer, filter_index, cfg.l2)
            if candidate_value > value:
                x = candidate
                value, _, grad = _gradients(model, x, layer, filter_index, cfg.l2)
                break
            step /= 2
        trace.append(value)
    return AscentResult(x[0, 0].copy(), tuple(trace), False)


def spectrum(x: np.ndarray, sample_rate: int = 16000) -> tuple[np.ndarray, np.ndarray]:
    """片側の log(1 + |X|) と各ビンの周波数 (k * sample_rate / N Hz)

    Returns:
        (振幅 [N // 2 + 1], 周波数 [N // 2 + 1])
    """
    x = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] < 2:
        raise ValueError(f"spectrum には 2 サンプル以上が必要です: {x.shape[0]}")
    bins = x.shape[0] // 2 + 1
    re = np.empty(bins, dtype=np.float64)
    im = np.empty(bins, dtype=np.float64)
    _kernels.dft_real(x, re, im)
    magnitude = np.log1p(np.hypot(re, im))
    freqs = np.arange(bins) * sample_rate / x.shape[0]
    return magnitude, freqs


def sort_by_peak(rows: np.ndarray) -> np.ndarray:
    """ピークのビンで行を安定ソートする順列"""
    rows = np.asarray(rows)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ValueError(f"rows は 1 行以上の 2 次元配列です: shape={rows.shape}")
    return np.argsort(np.argmax(rows, axis=1), kind="stable")


@dataclass(frozen=True)
class SpectrumSheet:
    """spectra はフィルタ番号順 [filters, bins]、permutation はピーク順の並び"""

    layer: int
    spectra: np.ndarray
    permutation: np.ndarray
    freqs: np.ndarray
    dead: tuple[bool, ...] = ()

    @property
    def sorted_spectra(self) -> np.ndarray:
        return self.spectra[self.permutation]

    @classmethod
    def build(
        cls, layer: int, spectra: np.ndarray, freqs: np.ndarray, dead: tuple[bool, ...] = ()
    ) -> SpectrumSheet:
        return cls(layer, spectra, sort_by_peak(spectra), freqs, dead)


def emit_sheet(sheet: SpectrumSheet, out_dir: str | Path) -> tuple[Path, Path]:
    """layerN.csv と layerN.pgm を書き出す

    CSV は 1 行 1 ビン、列は hz とソート済みフィルタ (見出しは filter_<番号>)
    PGM (P5) は列がソート済みフィルタ、上の行ほど高い周波数。シート全体で min-max 正規化し、
    値がすべて等しければ 128 にする
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ordered = sheet.sorted_spectra
    csv_path = out_dir / f"layer{sheet.layer}.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["hz", *(f"filter_{i}" for i in sheet.permutation)])
        for k, hz in enumerate(sheet.freqs):
            writer.writerow([f"{hz:.9g}", *(f"{v:.9g}" for v in ordered[:, k])])

    low, high = float(ordered.min()), float(ordered.max())
    if high > low:
        pixels = np.round((ordered - low) / (high - low) * 255).astype(np.uint8)
    else:
        pixels = np.full(ordered.shape, 128, dtype=np.uint8)
    image = pixels.T[::-1]
    pgm_path = out_dir / f"layer{sheet.layer}.pgm"
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    pgm_path.write_bytes(header + np.ascontiguousarray(image).tobytes())
    logger.info("sheet written: %s %s", csv_path, pgm_path)
    return csv_path, pgm_path


def read_sheet_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """emit_sheet の CSV を読む

    Returns:
        (周波数 [bins], 振幅 [bins, filters] (ソート順), フィルタ番号 (ソート順))
    """
    with Path(path).open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        if not header or header[0] != "hz":
            raise ValueError(f"{path}: 先頭列が hz ではありません")
        filters = [int(name.removeprefix("filter_")) for name in header[1:]]
        rows = [[float(v) for v in row] for row in reader]
    table = np.array(rows, dtype=np.float64)
    return table[:, 0], table[:, 1:], filters


def _layer_filters(config: ModelConfig, layer: int) -> int:
    if not 1 <= layer <= config.n_layers:
        raise ValueError(f"layer {layer} は 1..{config.n_layers} の範囲外です")
    return config.stem.filters if layer == 1 else config.blocks[layer - 2].filters


def visualize_layer(model: Model, layer: int, cfg: VizConfig, workers: int = 1) -> SpectrumSheet:
    """層の全フィルタについて勾配上昇とスペクトルを求めてシートにする

    フィルタ f の初期ノイズは (cfg.seed, f) から作るので並列数によらず同じ結果になる
    """
    n_filters = _layer_filters(model.config, layer)
    frozen = model.freeze()

    def run(filter_index: int) -> AscentResult:
        rng = np.random.default_rng([cfg.seed, filter_index])
        return activation_maximization(frozen, layer, filter_index, cfg, rng)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(run, range(n_filters)))
    else:
        results = [run(f) for f in range(n_filters)]

    spectra = []
    freqs = np.empty(0)
    for result in results:
        magnitude, freqs = spectrum(result.waveform, cfg.sample_rate)
        spectra.append(magnitude)
    dead = tuple(r.dead for r in results)
    if any(dead):
        logger.warning("layer %d: %d/%d filters dead", layer, sum(dead), n_filters)
    return SpectrumSheet.build(layer, np.stack(spectra), freqs, dead)
