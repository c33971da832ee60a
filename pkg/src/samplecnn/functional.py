"""微分可能な演算

各演算は TapeNode のサブクラスとして forward / backward を持ち、
小文字の関数 (add, conv1d, ...) から呼び出す

形状の規約は行優先の [N, C, T]。rank 2 の [C, T] は N = 1 として扱う
ブロードキャストはスカラーとチャネル方向 ([N, C, 1]) のみ想定している
"""

from __future__ import annotations

import builtins
from collections.abc import Sequence

import numpy as np

from . import _kernels
from .gradcheck import monitoring, report_margin
from .tensor import TapeNode, Tensor, as_tensor


def _shape_error(op: str, a: tuple[int, ...], b: tuple[int, ...], detail: str = "") -> ValueError:
    suffix = f" ({detail})" if detail else ""
    return ValueError(f"{op}: 形状が一致しません {a} と {b}{suffix}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """ブロードキャストで広がった次元を足し戻す"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise _shape_error(op, a.shape, b.shape) from e


def _batched(op: str, x: Tensor) -> tuple[Tensor, bool]:
    """[C, T] を [1, C, T] に揃える"""
    if x.ndim == 3:
        return x, False
    if x.ndim == 2:
        return reshape(x, (1, *x.shape)), True
    raise ValueError(f"{op}: 入力は [C, T] か [N, C, T] である必要があります: shape={x.shape}")


# 要素ごとの演算


class Add(TapeNode):
    op = "add"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _check_broadcast(self.op, a, b)
        return a + b

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        a, b = self.inputs
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)


class Sub(TapeNode):
    op = "sub"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _check_broadcast(self.op, a, b)
        return a - b

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        a, b = self.inputs
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)


class Mul(TapeNode):
    op = "mul"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _check_broadcast(self.op, a, b)
        return a * b

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        a, b = self.inputs
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)


class Div(TapeNode):
    op = "div"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _check_broadcast(self.op, a, b)
        if np.any(b == 0):
            raise ZeroDivisionError(f"{self.op}: 0 で割っています")
        return a / b

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        a, b = self.inputs
        return (
            _unbroadcast(grad / b.data, a.shape),
            _unbroadcast(-grad * a.data / (b.data * b.data), b.shape),
        )


class Neg(TapeNode):
    op = "neg"

    def forward(self, x: np.ndarray) -> np.ndarray:
        return -x

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        return (-grad,)


class Square(TapeNode):
    op = "square"

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x * x

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        (x,) = self.inputs
        return (2 * x.data * grad,)


class Relu(TapeNode):
    op = "relu"

    def forward(self, x: np.ndarray) -> np.ndarray:
        if monitoring():
            report_margin("relu", float(np.min(np.abs(x))))
        return np.maximum(x, 0)

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        (x,) = self.inputs
        return (grad * (x.data > 0),)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out


class Sigmoid(TapeNode):
    op = "sigmoid"

    def forward(self, x: np.ndarray) -> np.ndarray:
        out = _sigmoid(x)
        self.saved["out"] = out
        return out

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        out = self.saved["out"]
        return (grad * out * (1 - out),)


class Exp(TapeNode):
    op = "exp"

    def forward(self, x: np.ndarray) -> np.ndarray:
        with np.errstate(over="ignore"):
            out = np.exp(x)
        self.saved["out"] = out
        return out

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        return (grad * self.saved["out"],)


class Log(TapeNode):
    op = "log"

    def forward(self, x: np.ndarray) -> np.ndarray:
        if np.any(x <= 0):
            raise ValueError(f"{self.op}: 正でない値の対数は取れません")
        return np.log(x)

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        (x,) = self.inputs
        return (grad / x.data,)


# 縮約・形状変換


class Sum(TapeNode):
    op = "sum"

    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x.sum(), dtype=x.dtype)

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        (x,) = self.inputs
        return (np.full(x.shape, grad.reshape(()), dtype=x.dtype),)


class Mean(TapeNode):
    op = "mean"

    def forward(self, x: np.ndarray, *, axis: int | None) -> np.ndarray:
        self.saved["axis"] = axis
        return np.asarray(x.mean(axis=axis), dtype=x.dtype)

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        (x,) = self.inputs
        axis = self.saved["axis"]
        if axis is None:
            return (np.full(x.shape, grad.reshape(()) / x.size, dtype=x.dtype),)
        expanded = np.expand_dims(grad, axis) / x.shape[axis]
        return (np.broadcast_to(expanded, x.shape).astype(x.dtype),)


class Max(TapeNode):
    op = "max"

    def forward(self, x: np.ndarray, *, axis: int) -> np.ndarray:
        index = np.argmax(x, axis=axis)
        self.saved["axis"] = axis
        self.saved["index"] = index
        if monitoring() and x.shape[axis] > 1:
            top2 = -np.partition(-x, 1, axis=axis)
            first, second = np.take(top2, 0, axis=axis), np.take(top2, 1, axis=axis)
            gap = np.where((first == 0) & (second == 0), np.inf, first - second)
            report_margin("pool", float(gap.min()))
        return np.take_along_axis(x, np.expand_dims(index, axis), axis=axis).squeeze(axis)

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        (x,) = self.inputs
        axis = self.saved["axis"]
        dx = np.zeros_like(x.data)
        index = np.expand_dims(self.saved["index"], axis)
        np.put_along_axis(dx, index, np.expand_dims(grad, axis), axis=axis)
        return (dx,)


class Reshape(TapeNode):
    op = "reshape"

    def forward(self, x: np.ndarray, *, shape: tuple[int, ...]) -> np.ndarray:
        try:
            return x.reshape(shape)
        except ValueError as e:
            raise _shape_error(self.op, x.shape, shape) from e

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        (x,) = self.inputs
        return (grad.reshape(x.shape),)


class Concat(TapeNode):
    op = "concat"

    def forward(self, *arrays: np.ndarray, axis: int) -> np.ndarray:
        first = arrays[0]
        for other in arrays[1:]:
            if other.ndim != first.ndim or any(
                a != b for i, (a, b) in enumerate(zip(first.shape, other.shape)) if i != axis % first.ndim
            ):
                raise _shape_error(self.op, first.shape, other.shape, f"axis={axis} 以外が異なる")
        self.saved["axis"] = axis
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        axis = self.saved["axis"]
        bounds = np.cumsum([t.shape[axis] for t in self.inputs])[:-1]
        return tuple(np.split(grad, bounds, axis=axis))


class Slice(TapeNode):
    op = "slice"

    def forward(self, x: np.ndarray, *, axis: int, start: int, stop: int) -> np.ndarray:
        if not 0 <= start < stop <= x.shape[axis]:
            raise ValueError(f"{self.op}: 範囲 [{start}, {stop}) が軸 {axis} (長さ {x.shape[axis]}) の外です")
        self.saved["index"] = (axis, start, stop)
        return np.take(x, np.arange(start, stop), axis=axis)

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        (x,) = self.inputs
        axis, start, stop = self.saved["index"]
        dx = np.zeros_like(x.data)
        region = [builtins.slice(None)] * x.ndim
        region[axis] = builtins.slice(start, stop)
        dx[tuple(region)] = grad
        return (dx,)


class Pad(TapeNode):
    op = "pad"

    def forward(self, x: np.ndarray, *, axis: int, left: int, right: int) -> np.ndarray:
        if left < 0 or right < 0:
            raise ValueError(f"{self.op}: パディング量は 0 以上です: left={left}, right={right}")
        widths = [(0, 0)] * x.ndim
        widths[axis] = (left, right)
        self.saved["index"] = (axis, left, x.shape[axis])
        return np.pad(x, widths)

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        axis, left, extent = self.saved["index"]
        return (np.take(grad, np.arange(left, left + extent), axis=axis),)


# 層で使う演算


class Linear(TapeNode):
    """x [N, F] @ w[O, F]^T + b[O]"""

    op = "linear"

    def forward(self, x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
            raise _shape_error(self.op, x.shape, w.shape)
        if b.shape != (w.shape[0],):
            raise _shape_error(self.op, w.shape, b.shape, "bias")
        return x @ w.T + b

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        x, w, _ = self.inputs
        return grad @ w.data, grad.T @ x.data, grad.sum(axis=0)


class Conv1d(TapeNode):
    """x [N, C_in, T], w [C_out, C_in, K], b [C_out] -> [N, C_out, T']"""

    op = "conv1d"

    def forward(
        self, x: np.ndarray, w: np.ndarray, b: np.ndarray, *, stride: int, pad: int
    ) -> np.ndarray:
        if x.ndim != 3 or w.ndim != 3:
            raise _shape_error(self.op, x.shape, w.shape, "rank")
        if x.shape[1] != w.shape[1]:
            raise _shape_error(self.op, x.shape, w.shape, "チャネル数")
        if b.shape != (w.shape[0],):
            raise _shape_error(self.op, w.shape, b.shape, "bias")
        if stride < 1 or pad < 0:
            raise ValueError(f"{self.op}: stride={stride}, pad={pad} は不正です")
        kernel = w.shape[2]
        if x.shape[2] + 2 * pad < kernel:
            raise _shape_error(self.op, x.shape, w.shape, "時間長がカーネルより短い")
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad))) if pad else x
        t_out = conv1d_extent(x.shape[2], kernel, stride, pad)
        out = np.zeros((x.shape[0], w.shape[0], t_out), dtype=x.dtype)
        _kernels.conv1d_forward(padded, w, stride, out)
        out += b[None, :, None]
        self.saved["padded"] = padded
        self.saved["geometry"] = (stride, pad)
        return out

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        x, w, b = self.inputs
        stride, pad = self.saved["geometry"]
        padded = self.saved["padded"]
        grad = np.ascontiguousarray(grad)
        dx = None
        if x.requires_grad:
            dx_padded = np.zeros_like(padded)
            _kernels.conv1d_backward_input(grad, w.data, stride, dx_padded)
            dx = dx_padded[:, :, pad : pad + x.shape[2]].copy()
        dw = None
        if w.requires_grad:
            dw = np.zeros_like(w.data)
            _kernels.conv1d_backward_weight(grad, padded, stride, dw)
        db = grad.sum(axis=(0, 2)) if b.requires_grad else None
        return dx, dw, db


def conv1d_extent(extent: int, kernel: int, stride: int, pad: int) -> int:
    """conv1d の出力時間長 floor((T + 2 pad - K) / stride) + 1"""
    return (extent + 2 * pad - kernel) // stride + 1


class MaxPool1d(TapeNode):
    """重なりのない max-pool (端数フレームは切り捨て)"""

    op = "maxpool1d"

    def forward(self, x: np.ndarray, *, pool: int) -> np.ndarray:
        if x.ndim != 3:
            raise ValueError(f"{self.op}: 入力は [N, C, T] である必要があります: shape={x.shape}")
        if pool < 1 or x.shape[2] < pool:
            raise ValueError(f"{self.op}: 時間長 {x.shape[2]} が pool_size {pool} より短い")
        t_out = x.shape[2] // pool
        out = np.empty((x.shape[0], x.shape[1], t_out), dtype=x.dtype)
        index = np.empty(out.shape, dtype=np.int64)
        margin = np.empty(1, dtype=np.float64)
        _kernels.maxpool1d_forward(np.ascontiguousarray(x), pool, out, index, margin)
        if monitoring() and pool > 1:
            report_margin("pool", float(margin[0]))
        self.saved["index"] = index
        return out

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        (x,) = self.inputs
        dx = np.zeros_like(x.data)
        _kernels.maxpool1d_backward(np.ascontiguousarray(grad), self.saved["index"], dx)
        return (dx,)


class BatchNorm(TapeNode):
    """チャネルごとのバッチ正規化 (x, gamma, beta)

    学習モードは (N, T) 方向のバッチ統計で正規化し、移動平均を更新する
    推論モードは移動平均だけを使う
    """

    op = "batch_norm"

    def forward(
        self,
        x: np.ndarray,
        gamma: np.ndarray,
        beta: np.ndarray,
        *,
        running_mean: np.ndarray | None,
        running_var: np.ndarray | None,
        train: bool,
        momentum: float,
        eps: float,
    ) -> np.ndarray:
        if eps <= 0:
            raise ValueError(f"{self.op}: eps は正である必要があります: {eps}")
        if x.ndim != 3 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
            raise _shape_error(self.op, x.shape, gamma.shape)
        axes = (0, 2)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            count = x.shape[0] * x.shape[2]
            if running_mean is not None and running_var is not None:
                unbiased = var * count / (count - 1) if count > 1 else var
                running_mean *= 1 - momentum
                running_mean += momentum * mean
                running_var *= 1 - momentum
                running_var += momentum * unbiased
        else:
            if running_mean is None or running_var is None:
                raise ValueError(f"{self.op}: 推論モードには移動平均が必要です")
            mean, var = running_mean, running_var
        inv = (1 / np.sqrt(var + eps)).astype(x.dtype)
        xhat = (x - mean[None, :, None]) * inv[None, :, None]
        self.saved.update(xhat=xhat, inv=inv, train=train)
        return gamma[None, :, None] * xhat + beta[None, :, None]

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        x, gamma, _ = self.inputs
        xhat, inv = self.saved["xhat"], self.saved["inv"]
        axes = (0, 2)
        dgamma = (grad * xhat).sum(axis=axes)
        dbeta = grad.sum(axis=axes)
        dxhat = grad * gamma.data[None, :, None]
        if self.saved["train"]:
            count = x.shape[0] * x.shape[2]
            dx = (inv[None, :, None] / count) * (
                count * dxhat
                - dxhat.sum(axis=axes)[None, :, None]
                - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None]
            )
        else:
            dx = dxhat * inv[None, :, None]
        return dx, dgamma, dbeta


class ScaleChannels(TapeNode):
    """u [N, C, T] * s [N, C] (チャネルごとの再スケール)"""

    op = "scale_channels"

    def forward(self, u: np.ndarray, s: np.ndarray) -> np.ndarray:
        if u.ndim != 3 or s.shape != u.shape[:2]:
            raise _shape_error(self.op, u.shape, s.shape)
        return u * s[:, :, None]

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        u, s = self.inputs
        return grad * s.data[:, :, None], (grad * u.data).sum(axis=2)


class LogSoftmax(TapeNode):
    op = "log_softmax"

    def forward(self, z: np.ndarray, *, axis: int) -> np.ndarray:
        shifted = z - z.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        self.saved.update(out=out, axis=axis)
        return out

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        out, axis = self.saved["out"], self.saved["axis"]
        return (grad - np.exp(out) * grad.sum(axis=axis, keepdims=True),)


class Dropout(TapeNode):
    op = "dropout"

    def forward(self, x: np.ndarray, *, mask: np.ndarray) -> np.ndarray:
        self.saved["mask"] = mask
        return x * mask

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        return (grad * self.saved["mask"],)


class BceWithLogits(TapeNode):
    """mean(max(z, 0) - z t + log(1 + exp(-|z|)))"""

    op = "bce_with_logits"

    def forward(self, z: np.ndarray, *, targets: np.ndarray) -> np.ndarray:
        if targets.shape != z.shape:
            raise _shape_error(self.op, z.shape, targets.shape)
        if not np.all((targets == 0) | (targets == 1)):
            raise ValueError(f"{self.op}: target は 0 か 1 である必要があります")
        t = targets.astype(z.dtype)
        self.saved["targets"] = t
        loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
        return np.asarray(loss.mean(), dtype=z.dtype)

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        (z,) = self.inputs
        scale = grad.reshape(()) / z.size
        return ((_sigmoid(z.data) - self.saved["targets"]) * scale,)


class CrossEntropy(TapeNode):
    """mean(-log softmax(z)[class])"""

    op = "cross_entropy"

    def forward(self, z: np.ndarray, *, classes: np.ndarray) -> np.ndarray:
        if z.ndim != 2 or classes.shape != (z.shape[0],):
            raise _shape_error(self.op, z.shape, classes.shape)
        if np.any(classes < 0) or np.any(classes >= z.shape[1]):
            raise ValueError(f"{self.op}: クラス番号が範囲外です (K={z.shape[1]})")
        peak = z.max(axis=1, keepdims=True)
        total = np.exp(z - peak).sum(axis=1, keepdims=True)
        log_prob = z - peak - np.log(total)
        self.saved.update(log_prob=log_prob, classes=classes)
        picked = log_prob[np.arange(z.shape[0]), classes]
        return np.asarray(-picked.mean(), dtype=z.dtype)

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        (z,) = self.inputs
        log_prob, classes = self.saved["log_prob"], self.saved["classes"]
        dz = np.exp(log_prob)
        dz[np.arange(z.shape[0]), classes] -= 1
        return (dz * (grad.reshape(()) / z.shape[0]),)


# 関数インターフェース


def add(a: Tensor | float, b: Tensor | float) -> Tensor:
    a, b = _pair(a, b)
    return Add.apply(a, b)


def sub(a: Tensor | float, b: Tensor | float) -> Tensor:
    a, b = _pair(a, b)
    return Sub.apply(a, b)


def mul(a: Tensor | float, b: Tensor | float) -> Tensor:
    a, b = _pair(a, b)
    return Mul.apply(a, b)


def div(a: Tensor | float, b: Tensor | float) -> Tensor:
    a, b = _pair(a, b)
    return Div.apply(a, b)


def _pair(a: Tensor | float, b: Tensor | float) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return as_tensor(a, like=b), b
    raise TypeError("少なくとも一方は Tensor である必要があります")


def neg(x: Tensor) -> Tensor:
    return Neg.apply(x)


def square(x: Tensor) -> Tensor:
    return Square.apply(x)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def sum(x: Tensor) -> Tensor:  # noqa: A001
    return Sum.apply(x)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    return Mean.apply(x, axis=axis)


def amax(x: Tensor, axis: int) -> Tensor:
    """軸方向の最大値 (同値は最小インデックスが勾配を受け取る)"""
    return Max.apply(x, axis=axis)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ValueError("concat: テンソルが 1 つもありません")
    return Concat.apply(*tensors, axis=axis)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """チャネル方向の連結 ([C1, T] + [C2, T] -> [C1 + C2, T])"""
    axis = 0 if tensors[0].ndim == 2 else 1
    return concat(tensors, axis=axis)


def slice(x: Tensor, axis: int, start: int, stop: int) -> Tensor:  # noqa: A001
    return Slice.apply(x, axis=axis, start=start, stop=stop)


def pad(x: Tensor, axis: int, left: int, right: int) -> Tensor:
    return Pad.apply(x, axis=axis, left=left, right=right)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return Linear.apply(x, w, b)


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    batched, squeeze = _batched("conv1d", x)
    out = Conv1d.apply(batched, w, b, stride=stride, pad=pad)
    return reshape(out, out.shape[1:]) if squeeze else out


def max_pool1d(x: Tensor, pool: int) -> Tensor:
    batched, squeeze = _batched("maxpool1d", x)
    out = MaxPool1d.apply(batched, pool=pool)
    return reshape(out, out.shape[1:]) if squeeze else out


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    *,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """バッチ正規化

    running_mean / running_var は学習モードでその場更新される
    """
    batched, squeeze = _batched("batch_norm", x)
    out = BatchNorm.apply(
        batched,
        gamma,
        beta,
        running_mean=running_mean,
        running_var=running_var,
        train=train,
        momentum=momentum,
        eps=eps,
    )
    return reshape(out, out.shape[1:]) if squeeze else out


def scale_channels(u: Tensor, s: Tensor) -> Tensor:
    if u.ndim == 2:
        out = ScaleChannels.apply(reshape(u, (1, *u.shape)), reshape(s, (1, *s.shape)))
        return reshape(out, out.shape[1:])
    return ScaleChannels.apply(u, s)


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(z, axis=axis)


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(z, axis=axis))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """逆スケーリング付きドロップアウト (学習時のみ呼ぶ)"""
    if rate <= 0:
        return x
    keep = rng.random(x.shape) >= rate
    mask = (keep / (1 - rate)).astype(x.dtype)
    return Dropout.apply(x, mask=mask)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    return BceWithLogits.apply(logits, targets=np.asarray(targets))


def cross_entropy(logits: Tensor, classes: np.ndarray) -> Tensor:
    return CrossEntropy.apply(logits, classes=np.asarray(classes, dtype=np.int64))
