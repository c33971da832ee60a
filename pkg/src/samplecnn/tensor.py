"""Tensor と逆伝播 (reverse-mode 自動微分)

データは行優先の numpy 配列で保持する
勾配を必要とする入力を含む演算は TapeNode を出力に記録し、backward() で逆順にたどる
"""

from __future__ import annotations

import contextlib
from collections.abc import Iterator, Sequence
from contextvars import ContextVar
from typing import Any, ClassVar

import numpy as np

# 学習・推論は 32-bit、勾配チェックだけ 64-bit
_default_dtype: ContextVar[type[np.floating]] = ContextVar("default_dtype", default=np.float32)
_grad_enabled: ContextVar[bool] = ContextVar("grad_enabled", default=True)

SUPPORTED_DTYPES = (np.float32, np.float64)


class NonFiniteError(FloatingPointError):
    """NaN / Inf を含む値が演算に入った、または演算から出た"""


def get_default_dtype() -> type[np.floating]:
    """現在のコンテキストの既定精度を返す"""
    return _default_dtype.get()


@contextlib.contextmanager
def precision(dtype: type[np.floating] | str) -> Iterator[None]:
    """既定精度を一時的に切り替える

    Args:
        dtype: np.float32 / np.float64 または "float32" / "float64"
    """
    resolved = np.dtype(dtype).type
    if resolved not in SUPPORTED_DTYPES:
        raise ValueError(f"未対応の精度です: {dtype}")
    token = _default_dtype.set(resolved)
    try:
        yield
    finally:
        _default_dtype.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """テープを記録しない区間"""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def check_finite(array: np.ndarray, op: str, role: str) -> None:
    """配列がすべて有限値であることを確認する"""
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{op}: {role} に NaN または Inf が含まれています")


class Tensor:
    """n 次元の浮動小数点配列

    rank 1-3 ([T], [C, T], [N, C, T]) を主に使う
    requires_grad が真の葉テンソルは backward() 後に grad を持つ
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(
        self,
        data: Any,
        *,
        requires_grad: bool = False,
        dtype: type[np.floating] | None = None,
        name: str | None = None,
        node: TapeNode | None = None,
    ) -> None:
        target = dtype or (data.dtype.type if isinstance(data, np.ndarray) else get_default_dtype())
        if target not in SUPPORTED_DTYPES:
            target = get_default_dtype()
        array = np.ascontiguousarray(data, dtype=target)
        if array.size == 0:
            raise ValueError(f"空のテンソルは作れません: shape={array.shape}")
        check_finite(array, "tensor", "data")
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node = node
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        """データのコピーを返す"""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() はスカラーのみ対応: shape={self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        """テープから切り離したテンソル (データは共有しない)"""
        return Tensor(self.data.copy(), dtype=self.data.dtype.type, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # 演算子は functional に委譲する

    def __add__(self, other: Tensor | float) -> Tensor:
        from . import functional as F

        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Tensor | float) -> Tensor:
        from . import functional as F

        return F.sub(self, other)

    def __rsub__(self, other: Tensor | float) -> Tensor:
        from . import functional as F

        return F.sub(other, self)

    def __mul__(self, other: Tensor | float) -> Tensor:
        from . import functional as F

        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Tensor | float) -> Tensor:
        from . import functional as F

        return F.div(self, other)

    def __neg__(self) -> Tensor:
        from . import functional as F

        return F.neg(self)

    def sum(self) -> Tensor:
        from . import functional as F

        return F.sum(self)

    def mean(self, axis: int | None = None) -> Tensor:
        from . import functional as F

        return F.mean(self, axis)

    def reshape(self, *shape: int) -> Tensor:
        from . import functional as F

        return F.reshape(self, shape)


def as_tensor(value: Tensor | float | np.ndarray, like: Tensor | None = None) -> Tensor:
    """スカラーや配列をテンソルに揃える"""
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype.type if like is not None else None
    return Tensor(np.asarray(value), dtype=dtype)


class TapeNode:
    """テープ上の 1 演算

    サブクラスは forward() と backward() を実装する
    saved には逆伝播に必要な値を保存する
    """

    op: ClassVar[str] = "op"

    def __init__(self, *inputs: Tensor) -> None:
        self.inputs = inputs
        self.saved: dict[str, Any] = {}

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        """出力に対する勾配から、各入力に対する勾配を返す"""
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        dtypes = {t.data.dtype for t in inputs}
        if len(dtypes) > 1:
            names = ", ".join(str(d) for d in sorted(dtypes, key=str))
            raise TypeError(f"{cls.op}: 精度が混在しています ({names})")
        for t in inputs:
            check_finite(t.data, cls.op, "input")
        node = cls(*inputs)
        out = node.forward(*(t.data for t in inputs), **kwargs)
        check_finite(out, cls.op, "output")
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        return Tensor(
            out,
            dtype=inputs[0].data.dtype.type,
            requires_grad=requires_grad,
            node=node if requires_grad else None,
        )


def _topological_order(root: Tensor) -> list[Tensor]:
    """root から到達できるテンソルを入力が先になる順に並べる"""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in reversed(tensor.node.inputs):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """root (スカラー) から逆伝播し、requires_grad の葉に勾配を加算する

    繰り返し呼ぶと勾配は累積する。消したい場合は zero_grad() を呼ぶ

    Raises:
        ValueError: root がスカラーでない、またはテープに接続されていない場合
    """
    if root.data.size != 1:
        raise ValueError(f"backward の root はスカラーである必要があります: shape={root.shape}")
    if root.node is None:
        raise ValueError("detached root: 勾配を記録した演算から作られたテンソルではありません")

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for tensor in reversed(_topological_order(root)):
        grad = grads.pop(id(tensor), None)
        if grad is None:
            continue
        if tensor.node is None:
            if tensor.requires_grad:
                tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
            continue
        input_grads = tensor.node.backward(grad)
        for parent, g in zip(tensor.node.inputs, input_grads, strict=True):
            if g is None or not parent.requires_grad:
                continue
            if g.shape != parent.shape:
                raise RuntimeError(
                    f"{tensor.node.op}: 勾配の形状 {g.shape} が入力の形状 {parent.shape} と一致しません"
                )
            g = g.astype(parent.data.dtype, copy=False)
            key = id(parent)
            grads[key] = grads[key] + g if key in grads else g
