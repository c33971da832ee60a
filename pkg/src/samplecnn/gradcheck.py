"""有限差分による勾配チェック

解析的勾配と中心差分 (f(x + eps) - f(x - eps)) / 2 eps を比較する
64-bit 精度 (tensor.precision(np.float64)) で使う前提

ReLU の入力や max-pool の「最大値と 2 番目の差」が 0 に近い点では劣勾配が曖昧になるので、
kink_monitor() でそれらの最小値を記録し、smooth_point() で小さすぎる点を引き直す
"""

from __future__ import annotations

import contextlib
import math
from collections.abc import Callable, Iterator, Sequence
from contextvars import ContextVar
from dataclasses import dataclass
from typing import TypeVar

import numpy as np

from .tensor import Tensor, backward, no_grad

# 引き直しの基準となる最小マージン
KINK_MARGIN = 1e-3


@dataclass
class KinkMonitor:
    """forward 中に観測した最小マージン"""

    relu: float = math.inf
    pool: float = math.inf

    @property
    def smallest(self) -> float:
        return min(self.relu, self.pool)


_monitor: ContextVar[KinkMonitor | None] = ContextVar("kink_monitor", default=None)


def monitoring() -> bool:
    return _monitor.get() is not None


def report_margin(kind: str, value: float) -> None:
    """演算側から呼ばれ、監視中なら最小値を更新する"""
    monitor = _monitor.get()
    if monitor is None:
        return
    if kind == "relu":
        monitor.relu = min(monitor.relu, value)
    else:
        monitor.pool = min(monitor.pool, value)


@contextlib.contextmanager
def kink_monitor() -> Iterator[KinkMonitor]:
    monitor = KinkMonitor()
    token = _monitor.set(monitor)
    try:
        yield monitor
    finally:
        _monitor.reset(token)


T = TypeVar("T")


def smooth_point(
    sample: Callable[[np.random.Generator], T],
    evaluate: Callable[[T], object],
    rng: np.random.Generator,
    *,
    margin: float = KINK_MARGIN,
    max_tries: int = 200,
) -> T:
    """キンク近傍を避けた点を引く

    Args:
        sample: 乱数から点を作る関数
        evaluate: 点で forward を実行する関数
        rng: 乱数生成器
        margin: ReLU 入力と pool マージンに要求する最小値

    Raises:
        RuntimeError: max_tries 回引いても条件を満たさない場合
    """
    for _ in range(max_tries):
        point = sample(rng)
        with no_grad(), kink_monitor() as monitor:
            evaluate(point)
        if monitor.smallest >= margin:
            return point
    raise RuntimeError(f"{max_tries} 回引き直してもキンクから {margin} 離れた点が見つかりません")


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if np.any(np.isnan(analytic)) or np.any(np.isnan(numeric)):
        return math.inf
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale))


def grad_check(
    fn: Callable[..., Tensor],
    point: Sequence[Tensor],
    epsilon: float = 1e-5,
    *,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """全座標での |解析 - 数値| / max(|解析|, |数値|, 1e-8) の最大値を返す

    Args:
        fn: point のテンソルを受け取りスカラーを返す関数
        point: 勾配を求めるテンソル (requires_grad=True)
        epsilon: 中心差分の刻み幅
        max_coords: テンソルごとに調べる座標数の上限 (None なら全座標)
        rng: max_coords を使うときの座標選択用乱数

    Returns:
        最大相対誤差。どちらかに NaN があれば inf
    """
    for tensor in point:
        tensor.zero_grad()
    root = fn(*point)
    if root.data.size != 1:
        raise ValueError(f"grad_check の関数はスカラーを返す必要があります: shape={root.shape}")
    if root.node is not None:
        backward(root)

    chooser = rng or np.random.default_rng(0)
    worst = 0.0
    for tensor in point:
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(chooser.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(coords.size, dtype=np.float64)
        with no_grad():
            for i, coord in enumerate(coords):
                original = flat[coord]
                flat[coord] = original + epsilon
                upper = fn(*point).item()
                flat[coord] = original - epsilon
                lower = fn(*point).item()
                flat[coord] = original
                numeric[i] = (upper - lower) / (2 * epsilon)
        worst = max(worst, _relative_error(analytic.reshape(-1)[coords], numeric))
    return worst
