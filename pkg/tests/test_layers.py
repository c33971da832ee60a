"""層とビルディングブロックのテスト"""

import numpy as np
import pytest

from samplecnn import functional as F
from samplecnn.layers import (
    BlockKind,
    BlockSpec,
    ConfigError,
    basic_block,
    batchnorm,
    conv1d_forward,
    rese2_block,
    same_conv,
    se_module,
)
from samplecnn.tensor import Tensor, precision


def _bn(params, prefix, channels, *, beta=0.0):
    params[f"{prefix}.gamma"] = Tensor(np.ones(channels, dtype=np.float32))
    params[f"{prefix}.beta"] = Tensor(np.full(channels, beta, dtype=np.float32))
    params[f"{prefix}.running_mean"] = Tensor(np.zeros(channels, dtype=np.float32))
    params[f"{prefix}.running_var"] = Tensor(np.ones(channels, dtype=np.float32))


def _rese2_params(rng, channels, filters, reduced, *, zero_convs=False):
    def weight(*shape):
        if zero_convs:
            return Tensor(np.zeros(shape, dtype=np.float32))
        return Tensor(rng.normal(size=shape).astype(np.float32))

    params = {
        "b.conv1.weight": weight(filters, channels, 3),
        "b.conv2.weight": weight(filters, filters, 3),
        "b.se.fc1.weight": Tensor(rng.normal(size=(reduced, filters)).astype(np.float32)),
        "b.se.fc1.bias": Tensor(np.zeros(reduced, dtype=np.float32)),
        "b.se.fc2.weight": Tensor(rng.normal(size=(filters, reduced)).astype(np.float32)),
        "b.se.fc2.bias": Tensor(np.zeros(filters, dtype=np.float32)),
    }
    _bn(params, "b.bn1", filters)
    _bn(params, "b.bn2", filters)
    return params


# BlockSpec のテスト


def test_block_spec_defaults():
    """既定は 3 サンプルの畳み込みと pool 3"""
    spec = BlockSpec()
    assert spec.conv_kernel == 3
    assert spec.pool_size == 3
    assert spec.n_convs == 1
    assert BlockSpec(kind=BlockKind.RESE2).n_convs == 2


@pytest.mark.parametrize(
    "spec",
    [
        BlockSpec(conv_kernel=5),
        BlockSpec(pool_size=4),
        BlockSpec(filters=0),
        BlockSpec(kind=BlockKind.RESE2, filters=12, se_reduction=5),
    ],
)
def test_block_spec_invalid(spec):
    """サンプルレベルでない大きさや割り切れない se_reduction はエラー"""
    with pytest.raises(ConfigError):
        spec.validate()


def test_block_spec_error_names_field():
    """エラーメッセージにフィールド名が入る"""
    with pytest.raises(ConfigError, match=r"blocks\[2\].pool_size"):
        BlockSpec(pool_size=5).validate("blocks[2]")


def test_block_spec_from_dict_rejects_unknown_key():
    """未知のキーは ConfigError"""
    with pytest.raises(ConfigError):
        BlockSpec.from_dict({"filters": 8, "kernel_size": 3})


def test_block_spec_dict_roundtrip():
    """to_dict と from_dict で同じ値に戻る"""
    spec = BlockSpec(kind=BlockKind.RESE2, filters=64, pool_size=2, conv_kernel=2, se_reduction=8)
    assert BlockSpec.from_dict(spec.to_dict()) == spec


# 畳み込みのテスト


def test_conv1d_forward_without_bias():
    """バイアス省略時は 0"""
    x = Tensor([[1.0, 2.0, 3.0, 4.0]])
    w = Tensor([[[1.0, 1.0]]])
    np.testing.assert_array_equal(conv1d_forward(x, w).data, [[3.0, 5.0, 7.0]])


@pytest.mark.parametrize("kernel", [1, 2, 3])
def test_same_conv_keeps_extent(rng, kernel):
    """same 畳み込みは時間長を変えない"""
    x = Tensor(rng.normal(size=(2, 3, 10)).astype(np.float32))
    w = Tensor(rng.normal(size=(4, 3, kernel)).astype(np.float32))
    assert same_conv(x, w).shape == (2, 4, 10)


def test_same_conv_kernel3_pads_symmetrically():
    """K = 3 は左右 1 サンプルずつゼロ埋め"""
    x = Tensor([[1.0, 2.0, 3.0]])
    w = Tensor([[[1.0, 1.0, 1.0]]])
    np.testing.assert_array_equal(same_conv(x, w).data, [[3.0, 6.0, 5.0]])


def test_same_conv_kernel2_pads_right():
    """K = 2 は左 0、右 1 サンプルのゼロ埋め"""
    x = Tensor([[1.0, 2.0, 3.0]])
    w = Tensor([[[1.0, 1.0]]])
    np.testing.assert_array_equal(same_conv(x, w).data, [[3.0, 5.0, 3.0]])


# batchnorm のテスト


def test_batchnorm_reads_named_params():
    """prefix 付きの名前でパラメータを引く"""
    params = {}
    _bn(params, "stem.bn", 2, beta=0.5)
    x = Tensor(np.zeros((1, 2, 4), dtype=np.float32))
    out = batchnorm(x, params, "stem.bn", train=False)
    np.testing.assert_allclose(out.data, 0.5)


def test_batchnorm_train_updates_named_running_stats():
    """学習モードは辞書内の移動平均を書き換える"""
    params = {}
    _bn(params, "bn", 1)
    x = Tensor(np.full((1, 1, 4), 2.0, dtype=np.float32))
    batchnorm(x, params, "bn", train=True)
    assert params["bn.running_mean"].data[0] == pytest.approx(0.2)


# SE モジュールのテスト


def test_se_module_zero_weights_halves():
    """全結合の重みとバイアスが 0 ならゲートは 0.5"""
    u = Tensor(np.arange(12, dtype=np.float32).reshape(1, 4, 3))
    zeros = [
        Tensor(np.zeros((2, 4), dtype=np.float32)),
        Tensor(np.zeros(2, dtype=np.float32)),
        Tensor(np.zeros((4, 2), dtype=np.float32)),
        Tensor(np.zeros(4, dtype=np.float32)),
    ]
    np.testing.assert_allclose(se_module(u, *zeros).data, u.data * 0.5)


def test_se_module_large_bias_passes_through():
    """fc2 のバイアスが大きければ入力がほぼそのまま出る"""
    u = Tensor(np.arange(12, dtype=np.float32).reshape(4, 3))
    params = [
        Tensor(np.zeros((2, 4), dtype=np.float32)),
        Tensor(np.zeros(2, dtype=np.float32)),
        Tensor(np.zeros((4, 2), dtype=np.float32)),
        Tensor(np.full(4, 30.0, dtype=np.float32)),
    ]
    out = se_module(u, *params)
    assert out.shape == (4, 3)
    np.testing.assert_allclose(out.data, u.data, rtol=1e-6)


def test_se_module_gates_are_per_example(rng):
    """ゲートはバッチ内の各入力で別々に計算される"""
    u = rng.normal(size=(2, 4, 5)).astype(np.float32)
    params = [
        Tensor(rng.normal(size=(2, 4)).astype(np.float32)),
        Tensor(np.zeros(2, dtype=np.float32)),
        Tensor(rng.normal(size=(4, 2)).astype(np.float32)),
        Tensor(np.zeros(4, dtype=np.float32)),
    ]
    batched = se_module(Tensor(u), *params).data
    single = se_module(Tensor(u[1]), *params).data
    np.testing.assert_allclose(batched[1], single, rtol=1e-5)


def test_se_module_gates_stay_in_open_interval(rng):
    """1000 個のランダム入力でゲートは常に (0, 1)"""
    with precision(np.float64):
        u = rng.normal(size=(1000, 4, 5))
        u[np.abs(u) < 1e-3] = 1.0
        params = [
            Tensor(rng.normal(size=(2, 4))),
            Tensor(rng.normal(size=2)),
            Tensor(rng.normal(size=(4, 2))),
            Tensor(rng.normal(size=4)),
        ]
        gates = se_module(Tensor(u), *params).data / u
    assert np.all((gates > 0) & (gates < 1))
    np.testing.assert_allclose(gates, gates[:, :, :1].repeat(5, axis=2), rtol=1e-12)


# ブロックのテスト


def test_basic_block_shape(rng):
    """[N, C, T] -> [N, filters, T // pool]"""
    params = {"b.conv.weight": Tensor(rng.normal(size=(6, 4, 3)).astype(np.float32))}
    _bn(params, "b.bn", 6)
    x = Tensor(rng.normal(size=(2, 4, 10)).astype(np.float32))
    out = basic_block(x, params, "b", BlockSpec(filters=6, pool_size=3), train=False)
    assert out.shape == (2, 6, 3)
    assert np.all(out.data >= 0)


def test_basic_block_too_short_is_error(rng):
    """時間長が pool_size 未満ならエラー"""
    params = {"b.conv.weight": Tensor(rng.normal(size=(2, 1, 3)).astype(np.float32))}
    _bn(params, "b.bn", 2)
    x = Tensor(np.ones((1, 1, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        basic_block(x, params, "b", BlockSpec(filters=2, pool_size=3), train=False)


def test_rese2_block_shape(rng):
    """ReSE-2 ブロックの出力形状"""
    spec = BlockSpec(kind=BlockKind.RESE2, filters=4, pool_size=2, se_reduction=2)
    params = _rese2_params(rng, 4, 4, 2)
    x = Tensor(rng.normal(size=(2, 4, 9)).astype(np.float32))
    assert rese2_block(x, params, "b", spec, train=True).shape == (2, 4, 4)


def test_rese2_block_zero_branch_is_residual(rng):
    """畳み込みが 0 なら maxpool(relu(x)) になる (恒等残差)"""
    spec = BlockSpec(kind=BlockKind.RESE2, filters=4, pool_size=3, se_reduction=2)
    params = _rese2_params(rng, 4, 4, 2, zero_convs=True)
    x = Tensor(rng.normal(size=(1, 4, 9)).astype(np.float32))
    out = rese2_block(x, params, "b", spec, train=False)
    expected = F.max_pool1d(F.relu(x), 3)
    np.testing.assert_allclose(out.data, expected.data, atol=1e-6)


def test_rese2_block_projection(rng):
    """チャネル数が変わるときは 1 サンプルの射影を残差に使う"""
    spec = BlockSpec(kind=BlockKind.RESE2, filters=4, pool_size=3, se_reduction=2)
    params = _rese2_params(rng, 2, 4, 2, zero_convs=True)
    params["b.proj.weight"] = Tensor(np.ones((4, 2, 1), dtype=np.float32))
    params["b.proj.bias"] = Tensor(np.zeros(4, dtype=np.float32))
    x = Tensor(np.abs(rng.normal(size=(1, 2, 6))).astype(np.float32))
    out = rese2_block(x, params, "b", spec, train=False)
    summed = x.data.sum(axis=1).reshape(1, 2, 3).max(axis=2)
    np.testing.assert_allclose(out.data, np.repeat(summed[:, None, :], 4, axis=1), rtol=1e-6)


def test_rese2_block_missing_projection_is_error(rng):
    """チャネル数が違うのに射影がなければエラー"""
    spec = BlockSpec(kind=BlockKind.RESE2, filters=4, pool_size=3, se_reduction=2)
    params = _rese2_params(rng, 2, 4, 2)
    x = Tensor(rng.normal(size=(1, 2, 9)).astype(np.float32))
    with pytest.raises(ValueError):
        rese2_block(x, params, "b", spec, train=False)


def test_blocks_accept_float64(rng):
    """64-bit のパラメータでも同じように動く"""
    with precision(np.float64):
        params = {"b.conv.weight": Tensor(rng.normal(size=(2, 1, 3)))}
        params["b.bn.gamma"] = Tensor(np.ones(2))
        params["b.bn.beta"] = Tensor(np.zeros(2))
        params["b.bn.running_mean"] = Tensor(np.zeros(2))
        params["b.bn.running_var"] = Tensor(np.ones(2))
        x = Tensor(rng.normal(size=(1, 1, 9)))
        out = basic_block(x, params, "b", BlockSpec(filters=2), train=True)
    assert out.dtype == np.float64
