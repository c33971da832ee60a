"""層とビルディングブロック

SampleCNN ブロック: conv -> batch-norm -> ReLU -> max-pool
ReSE-2 ブロック: conv1 -> bn1 -> ReLU -> conv2 -> bn2 -> SE -> 残差加算 -> ReLU -> max-pool

パラメータは "blocks.0.conv1.weight" のような名前付きテンソルの辞書から読む
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass
from enum import Enum
from typing import Any

import numpy as np

from . import functional as F
from .tensor import Tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

# ブロックの畳み込みとプーリングは 2 か 3 サンプル
SAMPLE_LEVEL_SIZES = (2, 3)


class ConfigError(ValueError):
    """モデル / 実行設定の不変条件違反"""


class BlockKind(Enum):
    """ビルディングブロックの種類"""

    BASIC = "basic"
    RESE2 = "rese2"


@dataclass(frozen=True)
class BlockSpec:
    """1 ブロックの宣言的な記述"""

    kind: BlockKind = BlockKind.BASIC
    filters: int = 128
    pool_size: int = 3
    conv_kernel: int = 3
    se_reduction: int = 16

    @property
    def n_convs(self) -> int:
        return 2 if self.kind is BlockKind.RESE2 else 1

    def validate(self, where: str = "block") -> None:
        if self.conv_kernel not in SAMPLE_LEVEL_SIZES:
            raise ConfigError(f"{where}.conv_kernel は 2 か 3 です: {self.conv_kernel}")
        if self.pool_size not in SAMPLE_LEVEL_SIZES:
            raise ConfigError(f"{where}.pool_size は 2 か 3 です: {self.pool_size}")
        if self.filters < 1:
            raise ConfigError(f"{where}.filters は 1 以上です: {self.filters}")
        if self.kind is BlockKind.RESE2:
            if self.se_reduction < 1 or self.filters % self.se_reduction != 0:
                raise ConfigError(
                    f"{where}.se_reduction ({self.se_reduction}) は filters ({self.filters}) を割り切る必要があります"
                )

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "filters": self.filters,
            "pool_size": self.pool_size,
            "conv_kernel": self.conv_kernel,
            "se_reduction": self.se_reduction,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], where: str = "block") -> BlockSpec:
        unknown = set(data) - {"kind", "filters", "pool_size", "conv_kernel", "se_reduction"}
        if unknown:
            raise ConfigError(f"{where}: 未知のキーがあります: {sorted(unknown)}")
        try:
            kind = BlockKind(data.get("kind", BlockKind.BASIC.value))
        except ValueError as e:
            raise ConfigError(f"{where}.kind が不正です: {data.get('kind')!r}") from e
        return cls(
            kind=kind,
            filters=int(data.get("filters", cls.filters)),
            pool_size=int(data.get("pool_size", cls.pool_size)),
            conv_kernel=int(data.get("conv_kernel", cls.conv_kernel)),
            se_reduction=int(data.get("se_reduction", cls.se_reduction)),
        )


def conv1d_forward(
    x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0
) -> Tensor:
    """1 次元畳み込み

    x [C_in, T] または [N, C_in, T]、w [C_out, C_in, K]、b [C_out]
    出力時間長は floor((T + 2 pad - K) / stride) + 1
    """
    if b is None:
        b = Tensor(np.zeros(w.shape[0]), dtype=w.data.dtype.type)
    return F.conv1d(x, w, b, stride=stride, pad=pad)


def same_conv(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """時間長を変えない畳み込み (左 (K-1)//2、右 K-1-左 のゼロ埋め)"""
    kernel = w.shape[2]
    left = (kernel - 1) // 2
    right = kernel - 1 - left
    if left == right:
        return conv1d_forward(x, w, b, pad=left)
    return conv1d_forward(F.pad(x, axis=-1, left=left, right=right), w, b)


def batchnorm(
    x: Tensor,
    params: Mapping[str, Tensor],
    prefix: str,
    *,
    train: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """prefix.gamma / beta / running_mean / running_var を使うバッチ正規化"""
    return F.batch_norm(
        x,
        params[f"{prefix}.gamma"],
        params[f"{prefix}.beta"],
        params[f"{prefix}.running_mean"].data,
        params[f"{prefix}.running_var"].data,
        train=train,
        momentum=momentum,
        eps=eps,
    )


def se_gates(u: Tensor, fc1_w: Tensor, fc1_b: Tensor, fc2_w: Tensor, fc2_b: Tensor) -> Tensor:
    """SE のゲート s = sigmoid(fc2 relu(fc1 z))、z はチャネルごとの時間平均

    u [N, C, T] に対して [N, C] を返す
    """
    squeezed = F.mean(u, axis=2)
    hidden = F.relu(F.linear(squeezed, fc1_w, fc1_b))
    return F.sigmoid(F.linear(hidden, fc2_w, fc2_b))


def se_module(u: Tensor, fc1_w: Tensor, fc1_b: Tensor, fc2_w: Tensor, fc2_b: Tensor) -> Tensor:
    """Squeeze-and-Excitation

    out[c, t] = s_c u[c, t]。u は [C, T] または [N, C, T]
    """
    if u.ndim == 2:
        batched = F.reshape(u, (1, *u.shape))
        gates = se_gates(batched, fc1_w, fc1_b, fc2_w, fc2_b)
        return F.reshape(F.scale_channels(batched, gates), u.shape)
    return F.scale_channels(u, se_gates(u, fc1_w, fc1_b, fc2_w, fc2_b))


def _check_poolable(name: str, x: Tensor, spec: BlockSpec) -> None:
    if x.shape[-1] < spec.pool_size:
        raise ValueError(f"{name}: 時間長 {x.shape[-1]} が pool_size {spec.pool_size} より短い")


def basic_block(
    x: Tensor, params: Mapping[str, Tensor], prefix: str, spec: BlockSpec, *, train: bool
) -> Tensor:
    """maxpool(relu(batchnorm(conv(x))))"""
    _check_poolable("basic_block", x, spec)
    h = same_conv(x, params[f"{prefix}.conv.weight"])
    h = F.relu(batchnorm(h, params, f"{prefix}.bn", train=train))
    return F.max_pool1d(h, spec.pool_size)


def rese2_block(
    x: Tensor, params: Mapping[str, Tensor], prefix: str, spec: BlockSpec, *, train: bool
) -> Tensor:
    """maxpool(relu(se(bn2(conv2(relu(bn1(conv1(x)))))) + residual(x)))

    入力チャネル数が filters と異なる場合は 1 サンプルの畳み込み (prefix.proj) で残差を射影する
    """
    _check_poolable("rese2_block", x, spec)
    channels = x.shape[-2]
    if channels != spec.filters and f"{prefix}.proj.weight" not in params:
        raise ValueError(
            f"rese2_block: 入力チャネル {channels} と filters {spec.filters} が異なり、射影がありません"
        )
    h = same_conv(x, params[f"{prefix}.conv1.weight"])
    h = F.relu(batchnorm(h, params, f"{prefix}.bn1", train=train))
    h = same_conv(h, params[f"{prefix}.conv2.weight"])
    h = batchnorm(h, params, f"{prefix}.bn2", train=train)
    h = se_module(
        h,
        params[f"{prefix}.se.fc1.weight"],
        params[f"{prefix}.se.fc1.bias"],
        params[f"{prefix}.se.fc2.weight"],
        params[f"{prefix}.se.fc2.bias"],
    )
    residual = x
    if f"{prefix}.proj.weight" in params:
        residual = conv1d_forward(x, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"])
    return F.max_pool1d(F.relu(h + residual), spec.pool_size)


def run_block(
    x: Tensor, params: Mapping[str, Tensor], prefix: str, spec: BlockSpec, *, train: bool
) -> Tensor:
    if spec.kind is BlockKind.RESE2:
        return rese2_block(x, params, prefix, spec, train=train)
    return basic_block(x, params, prefix, spec, train=train)
