"""有限差分による勾配チェックのテスト

すべて 64-bit 精度で行う
"""

import numpy as np
import pytest

from samplecnn import functional as F
from samplecnn.gradcheck import grad_check, kink_monitor, smooth_point
from samplecnn.layers import BlockKind, BlockSpec, basic_block, rese2_block, se_module
from samplecnn.losses import bce_multilabel_loss, cross_entropy_loss
from samplecnn.model import OutputKind, build_model
from samplecnn.tensor import Tensor, precision

from conftest import tiny_config

INSTANCES = 20
TOLERANCE = 1e-4


@pytest.fixture(autouse=True)
def float64():
    with precision(np.float64):
        yield


def _param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _weighted(out, weights):
    """出力とランダムな重みの内積 (定数和になる演算でも勾配が消えない)"""
    return F.sum(out * Tensor(weights))


# grad_check 自体のテスト


def test_grad_check_detects_wrong_gradient():
    """逆伝播が誤っていれば大きな誤差を返す"""

    def wrong(x):
        # square の勾配 2x を持つが値は x^3
        return F.sum(F.square(x) * Tensor(x.data.copy()))

    x = Tensor([0.5, -1.5, 2.0], requires_grad=True)
    assert grad_check(wrong, [x]) > 0.1


def test_grad_check_polynomial():
    """x^2 + x の勾配は一致する"""
    x = Tensor([0.3, -0.7, 1.1], requires_grad=True)
    assert grad_check(lambda t: F.sum(t * t + t), [x]) < TOLERANCE


def test_grad_check_restores_point(rng):
    """チェック後も点の値は変わらない"""
    x = _param(rng, 2, 3)
    before = x.data.copy()
    grad_check(lambda t: F.sum(F.square(t)), [x])
    np.testing.assert_array_equal(x.data, before)


def test_kink_monitor_records_relu_margin():
    """ReLU 入力の最小絶対値を記録する"""
    with kink_monitor() as monitor:
        F.relu(Tensor([0.5, -0.01, 2.0]))
    assert monitor.relu == pytest.approx(0.01)


def test_smooth_point_gives_up():
    """条件を満たす点が引けなければ RuntimeError"""
    with pytest.raises(RuntimeError):
        smooth_point(
            lambda rng: Tensor([0.0]),
            lambda x: F.relu(x),
            np.random.default_rng(0),
            max_tries=3,
        )


# 演算の勾配チェック


def test_conv1d_weight_gradient_matches_finite_difference(rng):
    """sum(conv1d(x, w)) の w に関する勾配"""
    for _ in range(INSTANCES):
        x = Tensor(rng.normal(size=(1, 2, 7)))
        w = _param(rng, 3, 2, 3)
        b = Tensor(np.zeros(3))
        assert grad_check(lambda w, x=x, b=b: F.sum(F.conv1d(x, w, b)), [w]) < TOLERANCE


def test_conv1d_gradients_with_stride_and_pad(rng):
    """stride と pad 付きの conv1d の入力・重み・バイアスの勾配"""
    for _ in range(INSTANCES):
        stride = int(rng.integers(1, 4))
        pad = int(rng.integers(0, 2))
        kernel = int(rng.integers(1, 4))
        extent = int(rng.integers(max(kernel, 2), 8))
        x = _param(rng, 2, 2, extent)
        w = _param(rng, 3, 2, kernel)
        b = _param(rng, 3)
        t_out = (extent + 2 * pad - kernel) // stride + 1
        weights = rng.normal(size=(2, 3, t_out))

        def fn(x, w, b, stride=stride, pad=pad, weights=weights):
            return _weighted(F.conv1d(x, w, b, stride=stride, pad=pad), weights)

        assert grad_check(fn, [x, w, b]) < TOLERANCE


def test_max_pool_gradient(rng):
    """max-pool の勾配 (最大値の近傍を避けた点)"""
    for _ in range(INSTANCES):
        pool = int(rng.integers(2, 4))
        extent = int(rng.integers(pool, 8))
        weights = rng.normal(size=(1, 2, extent // pool))
        x = smooth_point(
            lambda r, extent=extent: _param(r, 1, 2, extent),
            lambda x, pool=pool: F.max_pool1d(x, pool),
            rng,
        )

        def fn(x, pool=pool, weights=weights):
            return _weighted(F.max_pool1d(x, pool), weights)

        assert grad_check(fn, [x]) < TOLERANCE


def test_relu_and_sigmoid_gradients(rng):
    """relu と sigmoid の合成"""
    for _ in range(INSTANCES):
        weights = rng.normal(size=(2, 5))
        x = smooth_point(lambda r: _param(r, 2, 5), F.relu, rng)

        def fn(x, weights=weights):
            return _weighted(F.sigmoid(F.relu(x)), weights)

        assert grad_check(fn, [x]) < TOLERANCE


def test_batch_norm_train_gradients(rng):
    """学習モードの batch-norm の x、gamma、beta に関する勾配"""
    for _ in range(INSTANCES):
        extent = int(rng.integers(2, 8))
        x = _param(rng, 2, 3, extent)
        gamma = Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True)
        beta = _param(rng, 3)
        weights = rng.normal(size=(2, 3, extent))

        def fn(x, gamma, beta, weights=weights):
            return _weighted(F.batch_norm(x, gamma, beta, train=True), weights)

        assert grad_check(fn, [x, gamma, beta]) < TOLERANCE


def test_batch_norm_infer_gradients(rng):
    """推論モードの batch-norm は移動平均を定数として扱う"""
    for _ in range(INSTANCES):
        x = _param(rng, 1, 3, 5)
        gamma = _param(rng, 3)
        beta = _param(rng, 3)
        mean = rng.normal(size=3)
        var = rng.uniform(0.5, 2.0, size=3)
        weights = rng.normal(size=(1, 3, 5))

        def fn(x, gamma, beta, mean=mean, var=var, weights=weights):
            return _weighted(F.batch_norm(x, gamma, beta, mean, var, train=False), weights)

        assert grad_check(fn, [x, gamma, beta]) < TOLERANCE


def test_se_module_gradients(rng):
    """SE モジュールの入力と全結合層の勾配"""
    for _ in range(INSTANCES):
        channels, reduced = 4, 2
        weights = rng.normal(size=(1, channels, 6))
        u, fc1_w, fc1_b, fc2_w, fc2_b = smooth_point(
            lambda r: (
                _param(r, 1, channels, 6),
                _param(r, reduced, channels),
                _param(r, reduced),
                _param(r, channels, reduced),
                _param(r, channels),
            ),
            lambda p: se_module(*p),
            rng,
        )

        def fn(*p, weights=weights):
            return _weighted(se_module(*p), weights)

        assert grad_check(fn, [u, fc1_w, fc1_b, fc2_w, fc2_b]) < TOLERANCE


def _block_params(rng, prefix, spec, channels):
    shapes = {}
    f, k = spec.filters, spec.conv_kernel
    if spec.kind is BlockKind.BASIC:
        shapes[f"{prefix}.conv.weight"] = (f, channels, k)
        norms = [f"{prefix}.bn"]
    else:
        reduced = f // spec.se_reduction
        shapes[f"{prefix}.conv1.weight"] = (f, channels, k)
        shapes[f"{prefix}.conv2.weight"] = (f, f, k)
        shapes[f"{prefix}.se.fc1.weight"] = (reduced, f)
        shapes[f"{prefix}.se.fc1.bias"] = (reduced,)
        shapes[f"{prefix}.se.fc2.weight"] = (f, reduced)
        shapes[f"{prefix}.se.fc2.bias"] = (f,)
        if channels != f:
            shapes[f"{prefix}.proj.weight"] = (f, channels, 1)
            shapes[f"{prefix}.proj.bias"] = (f,)
        norms = [f"{prefix}.bn1", f"{prefix}.bn2"]
    params = {name: _param(rng, *shape) for name, shape in shapes.items()}
    for norm in norms:
        params[f"{norm}.gamma"] = Tensor(rng.uniform(0.5, 1.5, size=f), requires_grad=True)
        params[f"{norm}.beta"] = _param(rng, f)
        params[f"{norm}.running_mean"] = Tensor(np.zeros(f))
        params[f"{norm}.running_var"] = Tensor(np.ones(f))
    return params


def _trainable(params):
    return [t for t in params.values() if t.requires_grad]


def test_basic_block_gradients(rng):
    """SampleCNN ブロック (学習モード)"""
    spec = BlockSpec(kind=BlockKind.BASIC, filters=3, pool_size=3)
    for _ in range(INSTANCES):
        weights = rng.normal(size=(2, 3, 2))
        x, params = smooth_point(
            lambda r: (_param(r, 2, 2, 6), _block_params(r, "b", spec, 2)),
            lambda p: basic_block(p[0], p[1], "b", spec, train=True),
            rng,
        )

        def fn(x, *_, params=params, weights=weights):
            return _weighted(basic_block(x, params, "b", spec, train=True), weights)

        assert grad_check(fn, [x, *_trainable(params)]) < TOLERANCE


@pytest.mark.parametrize("in_channels", [4, 2])
def test_rese2_block_gradients(rng, in_channels):
    """ReSE-2 ブロック (恒等残差と射影残差)"""
    spec = BlockSpec(kind=BlockKind.RESE2, filters=4, pool_size=2, se_reduction=2)
    for _ in range(INSTANCES):
        weights = rng.normal(size=(2, 4, 3))
        x, params = smooth_point(
            lambda r: (_param(r, 2, in_channels, 6), _block_params(r, "b", spec, in_channels)),
            lambda p: rese2_block(p[0], p[1], "b", spec, train=True),
            rng,
        )

        def fn(x, *_, params=params, weights=weights):
            return _weighted(rese2_block(x, params, "b", spec, train=True), weights)

        assert grad_check(fn, [x, *_trainable(params)]) < TOLERANCE


# 損失の勾配チェック


def test_bce_loss_gradients(rng):
    """sigmoid 交差エントロピー"""
    for _ in range(INSTANCES):
        z = _param(rng, 3, 4)
        targets = rng.integers(0, 2, size=(3, 4)).astype(np.float64)
        assert grad_check(lambda z, t=targets: bce_multilabel_loss(z, t), [z]) < TOLERANCE


def test_cross_entropy_loss_gradients(rng):
    """softmax 交差エントロピー"""
    for _ in range(INSTANCES):
        z = _param(rng, 3, 5)
        classes = rng.integers(0, 5, size=3)
        assert grad_check(lambda z, c=classes: cross_entropy_loss(z, c), [z]) < TOLERANCE


# モデル全体の勾配チェック


def _model_point(config, seed, rng):
    return build_model(config, seed=seed), Tensor(rng.normal(size=(2, 1, config.input_len)))


def test_rese2_multi_loss_gradients(rng):
    """4 ブロックの ReSE-2-Multi の bce 損失 (全パラメータの一部座標)"""
    config = tiny_config(BlockKind.RESE2, filters=(4, 4, 8, 8), input_len=243, n_classes=3)
    for seed in range(INSTANCES):
        targets = rng.integers(0, 2, size=(2, 3)).astype(np.float64)
        model, x = smooth_point(
            lambda r, seed=seed: _model_point(config, seed, r),
            lambda p: p[0].forward(p[1], train=True),
            rng,
        )
        point = list(model.params.trainable().values())

        def fn(*_, model=model, x=x, targets=targets):
            return bce_multilabel_loss(model.forward(x, train=True), targets)

        assert grad_check(fn, point, max_coords=4, rng=rng) < TOLERANCE


def test_sample_cnn_cross_entropy_gradients(rng):
    """SampleCNN の softmax 出力の損失"""
    config = tiny_config(BlockKind.BASIC, output=OutputKind.SOFTMAX_MULTICLASS)
    for seed in range(INSTANCES):
        classes = rng.integers(0, 3, size=2)
        model, x = smooth_point(
            lambda r, seed=seed: _model_point(config, seed, r),
            lambda p: p[0].forward(p[1], train=True),
            rng,
        )
        point = list(model.params.trainable().values())

        def fn(*_, model=model, x=x, classes=classes):
            return cross_entropy_loss(model.forward(x, train=True), classes)

        assert grad_check(fn, point, max_coords=4, rng=rng) < TOLERANCE
