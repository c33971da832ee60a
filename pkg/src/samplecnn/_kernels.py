"""数値カーネル

conv1d / max-pool / 実数 DFT のループを numba で JIT コンパイルする
出力配列は呼び出し側で確保して渡す

ループの順序は固定なので、同じ入力に対して結果はビット単位で一致する
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def conv1d_forward(x, w, stride, out):
    """out[n, o, t] += sum_c sum_k w[o, c, k] * x[n, c, t * stride + k]

    x はパディング済み [N, C_in, T]、w は [C_out, C_in, K]、out は [N, C_out, T'] (ゼロ初期化済み)
    """
    n_batch, c_in, _ = x.shape
    c_out, _, k_size = w.shape
    t_out = out.shape[2]
    for n in range(n_batch):
        for o in range(c_out):
            for c in range(c_in):
                for k in range(k_size):
                    wv = w[o, c, k]
                    for t in range(t_out):
                        out[n, o, t] += wv * x[n, c, t * stride + k]


@njit(cache=True)
def conv1d_backward_input(grad, w, stride, dx):
    """dx[n, c, t * stride + k] += w[o, c, k] * grad[n, o, t]"""
    n_batch, c_out, t_out = grad.shape
    _, c_in, k_size = w.shape
    for n in range(n_batch):
        for o in range(c_out):
            for c in range(c_in):
                for k in range(k_size):
                    wv = w[o, c, k]
                    for t in range(t_out):
                        dx[n, c, t * stride + k] += wv * grad[n, o, t]


@njit(cache=True)
def conv1d_backward_weight(grad, x, stride, dw):
    """dw[o, c, k] = sum_n sum_t grad[n, o, t] * x[n, c, t * stride + k]"""
    n_batch, c_out, t_out = grad.shape
    _, c_in, k_size = dw.shape
    for o in range(c_out):
        for c in range(c_in):
            for k in range(k_size):
                acc = dw[o, c, k]
                for n in range(n_batch):
                    for t in range(t_out):
                        acc += grad[n, o, t] * x[n, c, t * stride + k]
                dw[o, c, k] = acc


@njit(cache=True)
def maxpool1d_forward(x, pool, out, index, margin):
    """重なりのない max-pool

    端数のフレームは捨てる (floor)。同値の場合は最初 (最小インデックス) の最大値を選ぶ
    margin には全ウィンドウ中で最小の「最大値 - 2 番目の値」を書き込む (0 同士の同値は除く)
    """
    n_batch, channels, _ = x.shape
    t_out = out.shape[2]
    smallest = np.inf
    for n in range(n_batch):
        for c in range(channels):
            for t in range(t_out):
                base = t * pool
                best = x[n, c, base]
                best_i = base
                for j in range(1, pool):
                    v = x[n, c, base + j]
                    if v > best:
                        best = v
                        best_i = base + j
                runner_up = -np.inf
                for j in range(pool):
                    if base + j != best_i:
                        v = x[n, c, base + j]
                        if v > runner_up:
                            runner_up = v
                gap = best - runner_up
                # ReLU で 0 になった値同士の同値は摂動しても入れ替わらない
                if not (best == 0 and runner_up == 0) and gap < smallest:
                    smallest = gap
                out[n, c, t] = best
                index[n, c, t] = best_i
    margin[0] = smallest


@njit(cache=True)
def maxpool1d_backward(grad, index, dx):
    """各出力の勾配を選ばれた入力位置にだけ流す"""
    n_batch, channels, t_out = grad.shape
    for n in range(n_batch):
        for c in range(channels):
            for t in range(t_out):
                dx[n, c, index[n, c, t]] += grad[n, c, t]


@njit(cache=True)
def dft_real(x, re, im):
    """実数入力の片側 DFT を直接和で求める (O(N^2))

    位相は (k * n) mod N から求めるので、大きな k * n でも角度の精度が落ちない
    """
    size = x.shape[0]
    bins = re.shape[0]
    step = 2.0 * np.pi / size
    for k in range(bins):
        acc_re = 0.0
        acc_im = 0.0
        for n in range(size):
            angle = step * ((k * n) % size)
            acc_re += x[n] * np.cos(angle)
            acc_im -= x[n] * np.sin(angle)
        re[k] = acc_re
        im[k] = acc_im
