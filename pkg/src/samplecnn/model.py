"""モデルの組み立て

stem -> ブロック列 -> タップごとのグローバル max-pool -> チャネル連結 -> 全結合ヘッド
タップが最後のブロック 1 つなら SampleCNN、複数なら multi-level concatenation (-Multi)
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from . import functional as F
from .layers import BlockKind, BlockSpec, ConfigError, batchnorm, conv1d_forward, run_block
from .tensor import Tensor, get_default_dtype, no_grad

logger = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "HeadSpec",
    "Model",
    "ModelConfig",
    "ModelParams",
    "OutputKind",
    "StemSpec",
    "build_model",
    "extent_trace",
    "param_shapes",
    "receptive_field",
]


class OutputKind(Enum):
    """ヘッドの出力"""

    SIGMOID_MULTILABEL = "sigmoid-multilabel"
    SOFTMAX_MULTICLASS = "softmax-multiclass"


def _check_keys(data: Mapping[str, Any], allowed: set[str], where: str) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"{where}: 未知のキーがあります: {sorted(unknown)}")


@dataclass(frozen=True)
class StemSpec:
    """最初の畳み込み (サンプルレベルの stride 付き)"""

    kernel: int = 3
    stride: int = 3
    filters: int = 128
    batch_norm: bool = True

    def to_dict(self) -> dict[str, Any]:
        return {
            "kernel": self.kernel,
            "stride": self.stride,
            "filters": self.filters,
            "batch_norm": self.batch_norm,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], where: str = "stem") -> StemSpec:
        _check_keys(data, {"kernel", "stride", "filters", "batch_norm"}, where)
        return cls(
            kernel=int(data.get("kernel", cls.kernel)),
            stride=int(data.get("stride", cls.stride)),
            filters=int(data.get("filters", cls.filters)),
            batch_norm=bool(data.get("batch_norm", cls.batch_norm)),
        )


@dataclass(frozen=True)
class HeadSpec:
    """全結合ヘッド

    hidden が 0 なら隠れ層なしで連結特徴から直接ロジットを出す
    """

    n_classes: int = 50
    hidden: int = 512
    output: OutputKind = OutputKind.SIGMOID_MULTILABEL
    dropout: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_classes": self.n_classes,
            "hidden": self.hidden,
            "output": self.output.value,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], where: str = "head") -> HeadSpec:
        _check_keys(data, {"n_classes", "hidden", "output", "dropout"}, where)
        try:
            output = OutputKind(data.get("output", cls.output.value))
        except ValueError as e:
            raise ConfigError(f"{where}.output が不正です: {data.get('output')!r}") from e
        return cls(
            n_classes=int(data.get("n_classes", cls.n_classes)),
            hidden=int(data.get("hidden", cls.hidden)),
            output=output,
            dropout=float(data.get("dropout", cls.dropout)),
        )


@dataclass(frozen=True)
class ModelConfig:
    """アーキテクチャの宣言的な記述"""

    input_len: int
    blocks: tuple[BlockSpec, ...]
    stem: StemSpec = field(default_factory=StemSpec)
    concat_taps: tuple[int, ...] = ()
    head: HeadSpec = field(default_factory=HeadSpec)
    sample_rate: int = 16000

    def validate(self) -> None:
        """不変条件を確認する

        Raises:
            ConfigError: 違反したフィールド名を含む
        """
        if self.input_len < 1:
            raise ConfigError(f"input_len は 1 以上です: {self.input_len}")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate は正である必要があります: {self.sample_rate}")
        if self.stem.kernel < 1 or self.stem.stride < 1 or self.stem.filters < 1:
            raise ConfigError(f"stem の kernel / stride / filters は 1 以上です: {self.stem}")
        if not self.blocks:
            raise ConfigError("blocks が空です")
        for i, spec in enumerate(self.blocks):
            spec.validate(f"blocks[{i}]")
        downsampling = self.stem.stride * math.prod(b.pool_size for b in self.blocks)
        if downsampling > self.input_len:
            raise ConfigError(
                f"input_len ({self.input_len}) が stem stride と pool_size の積 ({downsampling}) より小さい"
            )
        if not self.concat_taps:
            raise ConfigError("concat_taps が空です")
        for i, tap in enumerate(self.concat_taps):
            if not 0 <= tap < len(self.blocks):
                raise ConfigError(f"concat_taps[{i}] = {tap} はブロック番号の範囲外です")
            if i > 0 and tap <= self.concat_taps[i - 1]:
                raise ConfigError(f"concat_taps は狭義単調増加である必要があります: {self.concat_taps}")
        if self.head.n_classes < 2:
            raise ConfigError(f"head.n_classes は 2 以上です: {self.head.n_classes}")
        if self.head.hidden < 0:
            raise ConfigError(f"head.hidden は 0 以上です: {self.head.hidden}")
        if not 0 <= self.head.dropout < 1:
            raise ConfigError(f"head.dropout は [0, 1) の範囲です: {self.head.dropout}")
        extent_trace(self)

    @property
    def head_width(self) -> int:
        """連結特徴の次元 (タップのフィルタ数の和)"""
        return sum(self.blocks[i].filters for i in self.concat_taps)

    @property
    def n_layers(self) -> int:
        """可視化で数える層数 (stem + ブロック数)"""
        return len(self.blocks) + 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_len": self.input_len,
            "sample_rate": self.sample_rate,
            "stem": self.stem.to_dict(),
            "blocks": [b.to_dict() for b in self.blocks],
            "concat_taps": list(self.concat_taps),
            "head": self.head.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], where: str = "model") -> ModelConfig:
        _check_keys(
            data, {"input_len", "sample_rate", "stem", "blocks", "concat_taps", "head"}, where
        )
        if "input_len" not in data or "blocks" not in data:
            raise ConfigError(f"{where}: input_len と blocks は必須です")
        blocks = tuple(
            BlockSpec.from_dict(b, f"{where}.blocks[{i}]") for i, b in enumerate(data["blocks"])
        )
        taps = data.get("concat_taps")
        config = cls(
            input_len=int(data["input_len"]),
            sample_rate=int(data.get("sample_rate", 16000)),
            stem=StemSpec.from_dict(data.get("stem", {}), f"{where}.stem"),
            blocks=blocks,
            concat_taps=tuple(int(t) for t in taps) if taps is not None else default_taps(blocks),
            head=HeadSpec.from_dict(data.get("head", {}), f"{where}.head"),
        )
        config.validate()
        return config


def default_taps(blocks: tuple[BlockSpec, ...]) -> tuple[int, ...]:
    """ReSE-2 なら最後の 3 ブロック、それ以外は最後のブロックだけ"""
    if blocks and blocks[-1].kind is BlockKind.RESE2:
        return tuple(range(max(0, len(blocks) - 3), len(blocks)))
    return (len(blocks) - 1,)


def extent_trace(config: ModelConfig, input_len: int | None = None) -> list[int]:
    """stem の出力と各ブロックの出力の時間長

    Raises:
        ConfigError: 途中で時間長が足りなくなる場合
    """
    extent = config.input_len if input_len is None else input_len
    if extent < config.stem.kernel:
        raise ConfigError(f"stem: 入力長 {extent} が kernel {config.stem.kernel} より短い")
    extent = (extent - config.stem.kernel) // config.stem.stride + 1
    trace = [extent]
    for i, spec in enumerate(config.blocks):
        if extent < spec.pool_size:
            raise ConfigError(f"blocks[{i}]: 時間長 {extent} が pool_size {spec.pool_size} より短い")
        extent //= spec.pool_size
        trace.append(extent)
    return trace


def receptive_field(config: ModelConfig, block_index: int) -> int:
    """block_index (0 は stem) の 1 フレームに影響する入力サンプル数"""
    if not 0 <= block_index <= len(config.blocks):
        raise ValueError(f"block_index {block_index} は 0..{len(config.blocks)} の範囲外です")
    span = config.stem.kernel
    jump = config.stem.stride
    for spec in config.blocks[:block_index]:
        span += spec.n_convs * (spec.conv_kernel - 1) * jump
        span += (spec.pool_size - 1) * jump
        jump *= spec.pool_size
    return span


def _bn_shapes(prefix: str, channels: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.gamma": (channels,),
        f"{prefix}.beta": (channels,),
        f"{prefix}.running_mean": (channels,),
        f"{prefix}.running_var": (channels,),
    }


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """パラメータ名と形状 (順序は初期化とチェックポイントの順序)

    batch-norm が続く畳み込みはバイアスを持たない (beta が同じ役割を持つ)
    """
    stem = config.stem
    shapes: dict[str, tuple[int, ...]] = {"stem.conv.weight": (stem.filters, 1, stem.kernel)}
    if stem.batch_norm:
        shapes.update(_bn_shapes("stem.bn", stem.filters))
    else:
        shapes["stem.conv.bias"] = (stem.filters,)
    channels = stem.filters
    for i, spec in enumerate(config.blocks):
        prefix = f"blocks.{i}"
        k, f = spec.conv_kernel, spec.filters
        if spec.kind is BlockKind.BASIC:
            shapes[f"{prefix}.conv.weight"] = (f, channels, k)
            shapes.update(_bn_shapes(f"{prefix}.bn", f))
        else:
            reduced = f // spec.se_reduction
            shapes[f"{prefix}.conv1.weight"] = (f, channels, k)
            shapes.update(_bn_shapes(f"{prefix}.bn1", f))
            shapes[f"{prefix}.conv2.weight"] = (f, f, k)
            shapes.update(_bn_shapes(f"{prefix}.bn2", f))
            shapes[f"{prefix}.se.fc1.weight"] = (reduced, f)
            shapes[f"{prefix}.se.fc1.bias"] = (reduced,)
            shapes[f"{prefix}.se.fc2.weight"] = (f, reduced)
            shapes[f"{prefix}.se.fc2.bias"] = (f,)
            if channels != f:
                shapes[f"{prefix}.proj.weight"] = (f, channels, 1)
                shapes[f"{prefix}.proj.bias"] = (f,)
        channels = f
    width = config.head_width
    if config.head.hidden:
        shapes["head.fc1.weight"] = (config.head.hidden, width)
        shapes["head.fc1.bias"] = (config.head.hidden,)
        width = config.head.hidden
    shapes["head.fc2.weight"] = (config.head.n_classes, width)
    shapes["head.fc2.bias"] = (config.head.n_classes,)
    return shapes


def _is_buffer(name: str) -> bool:
    return name.endswith(".running_mean") or name.endswith(".running_var")


def _glorot_bound(shape: tuple[int, ...]) -> float:
    receptive = shape[2] if len(shape) == 3 else 1
    fan_out = shape[0] * receptive
    fan_in = shape[1] * receptive
    return math.sqrt(6 / (fan_in + fan_out))


@dataclass
class ModelParams:
    """名前付きパラメータ (batch-norm の移動平均を含む)"""

    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.tensors.items()

    def trainable(self) -> dict[str, Tensor]:
        """勾配で更新するパラメータ (移動平均を除く)"""
        return {name: t for name, t in self.tensors.items() if not _is_buffer(name)}

    def arrays(self) -> dict[str, np.ndarray]:
        """全テンソルのコピー"""
        return {name: t.numpy() for name, t in self.tensors.items()}

    def validate(self, config: ModelConfig) -> None:
        expected = param_shapes(config)
        if list(expected) != list(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ConfigError(f"パラメータ名が設定と一致しません: missing={missing}, extra={extra}")
        for name, shape in expected.items():
            actual = self.tensors[name].shape
            if actual != shape:
                raise ConfigError(f"{name}: 形状 {actual} が設定から求めた {shape} と一致しません")
            if name.endswith(".running_var") and np.any(self.tensors[name].data <= 0):
                raise ConfigError(f"{name}: running_var は正である必要があります")

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], config: ModelConfig) -> ModelParams:
        tensors = {
            name: Tensor(np.array(array), requires_grad=not _is_buffer(name), name=name)
            for name, array in arrays.items()
        }
        params = cls(tensors)
        params.validate(config)
        return params


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """重みは ±sqrt(6 / (fan_in + fan_out)) の一様分布、gamma 1、それ以外 0、running_var 1"""
    rng = np.random.default_rng(seed)
    dtype = get_default_dtype()
    tensors: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".weight"):
            bound = _glorot_bound(shape)
            array = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gamma") or name.endswith(".running_var"):
            array = np.ones(shape)
        else:
            array = np.zeros(shape)
        tensors[name] = Tensor(array, dtype=dtype, requires_grad=not _is_buffer(name), name=name)
    return ModelParams(tensors)


class Model:
    """宣言的な設定から組み立てたモデル

    forward() はロジット [N, n_classes] を返す
    推論 (train=False) はパラメータを書き換えないので、複数スレッドから同時に呼べる
    """

    def __init__(self, config: ModelConfig, params: ModelParams) -> None:
        config.validate()
        params.validate(config)
        self.config = config
        self.params = params

    @property
    def output(self) -> OutputKind:
        return self.config.head.output

    def _as_input(self, x: Tensor | np.ndarray) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x), dtype=self.params["stem.conv.weight"].data.dtype.type)
        if x.ndim == 1:
            x = F.reshape(x, (1, 1, x.shape[0]))
        elif x.ndim == 2:
            if x.shape[0] != 1:
                raise ValueError(f"モデル入力は [N, 1, T]、[1, T]、[T] のいずれかです: shape={x.shape}")
            x = F.reshape(x, (1, *x.shape))
        if x.ndim != 3 or x.shape[1] != 1:
            raise ValueError(f"モデル入力は [N, 1, T]、[1, T]、[T] のいずれかです: shape={x.shape}")
        return x

    def _stem(self, x: Tensor, train: bool) -> Tensor:
        stem = self.config.stem
        p = self.params
        if stem.batch_norm:
            h = conv1d_forward(x, p["stem.conv.weight"], None, stride=stem.stride)
            return F.relu(batchnorm(h, p.tensors, "stem.bn", train=train))
        h = conv1d_forward(x, p["stem.conv.weight"], p["stem.conv.bias"], stride=stem.stride)
        return F.relu(h)

    def layer_outputs(
        self, x: Tensor | np.ndarray, *, train: bool = False, upto: int | None = None
    ) -> list[Tensor]:
        """stem と各ブロックの出力 (upto 層目まで)"""
        n_layers = self.config.n_layers if upto is None else upto
        if not 1 <= n_layers <= self.config.n_layers:
            raise ValueError(f"layer {upto} は 1..{self.config.n_layers} の範囲外です")
        h = self._stem(self._as_input(x), train)
        outputs = [h]
        for i, spec in enumerate(self.config.blocks[: n_layers - 1]):
            h = run_block(h, self.params.tensors, f"blocks.{i}", spec, train=train)
            outputs.append(h)
        return outputs

    def features(self, x: Tensor | np.ndarray, layer: int, *, train: bool = False) -> Tensor:
        """layer 層目の活性 (1 は stem、k はブロック k - 1 の出力)"""
        return self.layer_outputs(x, train=train, upto=layer)[-1]

    def forward(
        self,
        x: Tensor | np.ndarray,
        *,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        outputs = self.layer_outputs(x, train=train)
        pooled = [F.amax(outputs[i + 1], axis=2) for i in self.config.concat_taps]
        h = pooled[0] if len(pooled) == 1 else F.concat(pooled, axis=1)
        p = self.params
        head = self.config.head
        if head.hidden:
            h = F.relu(F.linear(h, p["head.fc1.weight"], p["head.fc1.bias"]))
            if train and head.dropout > 0:
                if rng is None:
                    raise ValueError("dropout を使う学習には rng が必要です")
                h = F.dropout(h, head.dropout, rng)
        return F.linear(h, p["head.fc2.weight"], p["head.fc2.bias"])

    __call__ = forward

    def activate(self, logits: Tensor) -> Tensor:
        """ロジットからスコア (sigmoid または softmax)"""
        if self.output is OutputKind.SOFTMAX_MULTICLASS:
            return F.softmax(logits, axis=1)
        return F.sigmoid(logits)

    def predict_scores(self, x: Tensor | np.ndarray) -> np.ndarray:
        """推論モードのスコア [N, n_classes]"""
        with no_grad():
            return self.activate(self.forward(x, train=False)).numpy()

    def freeze(self) -> Model:
        """勾配を必要としないパラメータのコピーを持つモデル"""
        frozen = {
            name: Tensor(t.numpy(), dtype=t.data.dtype.type, name=name)
            for name, t in self.params.items()
        }
        return Model(self.config, ModelParams(frozen))


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    """設定を検証して初期化済みのモデルを作る"""
    config.validate()
    params = init_params(config, seed)
    logger.debug(
        "model built: blocks=%d taps=%s params=%d",
        len(config.blocks),
        list(config.concat_taps),
        sum(t.size for t in params.trainable().values()),
    )
    return Model(config, params)
