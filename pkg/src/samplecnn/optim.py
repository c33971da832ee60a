"""オプティマイザと学習率スケジュール

sgd-momentum: v <- mu v + g, p <- p - lr v
adam: バイアス補正付きの標準的な漸化式
weight decay はどちらも勾配への加算 g + lambda p
"""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, MutableMapping
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from .layers import ConfigError

logger = logging.getLogger(__name__)

__all__ = [
    "OptimizerConfig",
    "OptimizerKind",
    "OptimizerState",
    "ScheduleConfig",
    "ScheduleKind",
    "StepDecay",
    "optimizer_step",
]


class OptimizerKind(Enum):
    SGD_MOMENTUM = "sgd-momentum"
    ADAM = "adam"


class ScheduleKind(Enum):
    CONSTANT = "constant"
    STEP_DECAY = "step-decay"


@dataclass(frozen=True)
class OptimizerConfig:
    kind: OptimizerKind = OptimizerKind.SGD_MOMENTUM
    lr: float = 0.01
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def validate(self, where: str = "optimizer") -> None:
        # lr = 0 はパラメータを固定したまま学習ループを回すために許す
        if not math.isfinite(self.lr) or self.lr < 0:
            raise ConfigError(f"{where}.lr は 0 以上の有限値です: {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"{where}.momentum は [0, 1) の範囲です: {self.momentum}")
        if not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"{where}.betas は [0, 1) の範囲です: {self.betas}")
        if self.eps <= 0:
            raise ConfigError(f"{where}.eps は正である必要があります: {self.eps}")
        if self.weight_decay < 0:
            raise ConfigError(f"{where}.weight_decay は 0 以上です: {self.weight_decay}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "lr": self.lr,
            "momentum": self.momentum,
            "betas": list(self.betas),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], where: str = "optimizer") -> OptimizerConfig:
        unknown = set(data) - {"kind", "lr", "momentum", "betas", "eps", "weight_decay"}
        if unknown:
            raise ConfigError(f"{where}: 未知のキーがあります: {sorted(unknown)}")
        try:
            kind = OptimizerKind(data.get("kind", cls.kind.value))
        except ValueError as e:
            raise ConfigError(f"{where}.kind が不正です: {data.get('kind')!r}") from e
        betas = data.get("betas", cls().betas)
        if len(betas) != 2:
            raise ConfigError(f"{where}.betas は 2 要素です: {betas}")
        config = cls(
            kind=kind,
            lr=float(data.get("lr", cls.lr)),
            momentum=float(data.get("momentum", cls.momentum)),
            betas=(float(betas[0]), float(betas[1])),
            eps=float(data.get("eps", cls.eps)),
            weight_decay=float(data.get("weight_decay", cls.weight_decay)),
        )
        config.validate(where)
        return config


@dataclass
class OptimizerState:
    """ステップ数とパラメータごとのスロット (velocity、m、v)"""

    step: int = 0
    slots: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)


def optimizer_step(
    params: MutableMapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray | None],
    state: OptimizerState,
    config: OptimizerConfig,
    lr: float | None = None,
) -> tuple[MutableMapping[str, np.ndarray], OptimizerState]:
    """params をその場で 1 ステップ更新する

    勾配が None のパラメータは更新しない

    Args:
        lr: スケジュールで変えた学習率 (None なら config.lr)

    Returns:
        (params, state)
    """
    rate = config.lr if lr is None else lr
    state.step += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"{name}: 勾配の形状 {g.shape} がパラメータ {p.shape} と一致しません")
        if config.weight_decay:
            g = g + config.weight_decay * p
        slots = state.slots.setdefault(name, {})
        if config.kind is OptimizerKind.SGD_MOMENTUM:
            velocity = slots.setdefault("velocity", np.zeros_like(p))
            velocity *= config.momentum
            velocity += g
            p -= (rate * velocity).astype(p.dtype, copy=False)
        else:
            beta1, beta2 = config.betas
            m = slots.setdefault("m", np.zeros_like(p))
            v = slots.setdefault("v", np.zeros_like(p))
            m *= beta1
            m += (1 - beta1) * g
            v *= beta2
            v += (1 - beta2) * g * g
            m_hat = m / (1 - beta1**state.step)
            v_hat = v / (1 - beta2**state.step)
            p -= (rate * m_hat / (np.sqrt(v_hat) + config.eps)).astype(p.dtype, copy=False)
    return params, state


@dataclass(frozen=True)
class ScheduleConfig:
    """step-decay は検証指標が patience エポック改善しなければ lr を factor 倍にする"""

    kind: ScheduleKind = ScheduleKind.STEP_DECAY
    factor: float = 0.2
    patience: int = 3

    def validate(self, where: str = "schedule") -> None:
        if not 0 < self.factor < 1:
            raise ConfigError(f"{where}.factor は (0, 1) の範囲です: {self.factor}")
        if self.patience < 1:
            raise ConfigError(f"{where}.patience は 1 以上です: {self.patience}")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "factor": self.factor, "patience": self.patience}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], where: str = "schedule") -> ScheduleConfig:
        unknown = set(data) - {"kind", "factor", "patience"}
        if unknown:
            raise ConfigError(f"{where}: 未知のキーがあります: {sorted(unknown)}")
        try:
            kind = ScheduleKind(data.get("kind", cls.kind.value))
        except ValueError as e:
            raise ConfigError(f"{where}.kind が不正です: {data.get('kind')!r}") from e
        config = cls(
            kind=kind,
            factor=float(data.get("factor", cls.factor)),
            patience=int(data.get("patience", cls.patience)),
        )
        config.validate(where)
        return config


class StepDecay:
    """検証指標 (大きいほど良い) の停滞で学習率を下げる"""

    def __init__(self, lr: float, config: ScheduleConfig) -> None:
        self.lr = lr
        self.config = config
        self.best = -math.inf
        self.bad_epochs = 0

    def observe(self, metric: float) -> float:
        """エポック末の指標を受け取り、次エポックの学習率を返す"""
        if self.config.kind is ScheduleKind.CONSTANT:
            return self.lr
        if metric > self.best:
            self.best = metric
            self.bad_epochs = 0
            return self.lr
        self.bad_epochs += 1
        if self.bad_epochs >= self.config.patience:
            self.lr *= self.config.factor
            self.bad_epochs = 0
            logger.info("lr decayed to %g", self.lr)
        return self.lr
