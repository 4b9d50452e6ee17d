import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cloudseg import layers as L
from cloudseg.errors import ConfigurationError, DimensionError, NumericError, ValidationError
from cloudseg.gradsuite import LAYERS, run_suite
from cloudseg.layers import AdamState, LayerParams, adam_step
from cloudseg.tensor import Tensor, grad_check, mul, tsum


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# brute-force oracles

def conv_oracle(x, k, b=None, padding="valid"):
    kh, kw, cin, cout = k.shape
    if padding == "same":
        pt, pl = (kh - 1) // 2, (kw - 1) // 2
        x = np.pad(x, ((pt, kh - 1 - pt), (pl, kw - 1 - pl), (0, 0)))
    h, w = x.shape[0] - kh + 1, x.shape[1] - kw + 1
    out = np.zeros((h, w, cout))
    for i in range(h):
        for j in range(w):
            for o in range(cout):
                total = 0.0
                for a in range(kh):
                    for c in range(kw):
                        for ch in range(cin):
                            total += x[i + a, j + c, ch] * k[a, c, ch, o]
                out[i, j, o] = total + (0.0 if b is None else b[o])
    return out


def deconv_oracle(x, k, stride):
    kh, kw, cout, cin = k.shape
    h, w = x.shape[:2]
    out = np.zeros(((h - 1) * stride + kh, (w - 1) * stride + kw, cout))
    for i in range(h):
        for j in range(w):
            for a in range(kh):
                for c in range(kw):
                    out[i * stride + a, j * stride + c] += k[a, c] @ x[i, j]
    return out


def pool_oracle(x):
    h, w, c = x.shape
    out = np.empty((h // 2, w // 2, c))
    for i in range(h // 2):
        for j in range(w // 2):
            for ch in range(c):
                out[i, j, ch] = max(x[2 * i + a, 2 * j + b, ch] for a in (0, 1) for b in (0, 1))
    return out


# convolution

@pytest.mark.parametrize("padding", ["valid", "same"])
def test_conv2d_matches_nested_loops(padding):
    rng = np.random.default_rng(0)
    x, k, b = rng.normal(size=(5, 6, 2)), rng.normal(size=(3, 3, 2, 4)), rng.normal(size=4)
    out = L.conv2d(_t(x), _t(k), _t(b), padding)
    np.testing.assert_allclose(out.data, conv_oracle(x, k, b, padding), rtol=1e-12, atol=1e-12)


def test_conv2d_identity_kernel():
    x = np.random.default_rng(1).normal(size=(4, 5, 3))
    k = np.eye(3).reshape(1, 1, 3, 3)
    np.testing.assert_array_equal(L.conv2d(_t(x), _t(k), _t(np.zeros(3))).data, x)


def test_conv2d_boundary_kernel_full_scale_shape():
    out = L.conv2d(Tensor(np.zeros((667, 800, 2), np.float32)), Tensor(np.zeros((28, 1, 2, 2), np.float32)))
    assert out.shape == (640, 800, 2)


def test_conv2d_kernel_too_large():
    with pytest.raises(DimensionError):
        L.conv2d(_t(np.zeros((2, 2, 1))), _t(np.zeros((3, 3, 1, 1))))


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        L.conv2d(_t(np.zeros((4, 4, 2))), _t(np.zeros((3, 3, 3, 1))))


def test_conv2d_batch_equals_per_sample():
    rng = np.random.default_rng(2)
    x, k = rng.normal(size=(3, 6, 5, 2)), rng.normal(size=(3, 3, 2, 2))
    batched = L.conv2d(_t(x), _t(k), padding="same").data
    for n in range(3):
        np.testing.assert_allclose(batched[n], L.conv2d(_t(x[n]), _t(k), padding="same").data)


# transposed convolution

def test_deconv2d_scatter_add_stride2():
    rng = np.random.default_rng(3)
    x, k = rng.normal(size=(3, 3, 1)), rng.normal(size=(2, 2, 1, 1))
    np.testing.assert_allclose(L.deconv2d(_t(x), _t(k), stride=2).data, deconv_oracle(x, k, 2), rtol=1e-12)


def test_deconv2d_scatter_add_tall_kernel():
    rng = np.random.default_rng(4)
    x, k = rng.normal(size=(5, 3, 2)), rng.normal(size=(4, 1, 3, 2))
    out = L.deconv2d(_t(x), _t(k), stride=1).data
    assert out.shape == (8, 3, 3)
    np.testing.assert_allclose(out, deconv_oracle(x, k, 1), rtol=1e-12)


def test_deconv2d_block_upsampling_shape():
    x = Tensor(np.zeros((80, 100, 128), np.float32))
    assert L.deconv2d(x, Tensor(np.zeros((2, 2, 64, 128), np.float32)), stride=2).shape == (160, 200, 64)


def test_deconv2d_boundary_shape():
    x = Tensor(np.zeros((640, 800, 4), np.float32))
    assert L.deconv2d(x, Tensor(np.zeros((28, 1, 4, 4), np.float32)), stride=1).shape == (667, 800, 4)


@pytest.mark.parametrize("kshape,stride", [((3, 3, 1, 1), 2), ((2, 2, 1, 1), 3), ((2, 1, 1, 1), 2)])
def test_deconv2d_unsupported_configurations(kshape, stride):
    with pytest.raises(ConfigurationError):
        L.deconv2d(_t(np.zeros((3, 3, 1))), _t(np.zeros(kshape)), stride=stride)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), kh=st.integers(1, 4), kw=st.integers(1, 3),
       cin=st.integers(1, 3), cout=st.integers(1, 3))
def test_conv_deconv_adjoint(seed, kh, kw, cin, cout):
    # <conv(x, k), y> == <x, deconv(y, k)> with the same kernel array
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(kh + 3, kw + 2, cin))
    k = rng.normal(size=(kh, kw, cin, cout))
    y = rng.normal(size=(4, 3, cout))
    lhs = float(np.sum(L.conv2d(_t(x), _t(k)).data * y))
    rhs = float(np.sum(x * L.deconv2d(_t(y), _t(k)).data))
    assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(lhs))


# pooling

def test_maxpool_matches_window_max():
    x = np.random.default_rng(5).normal(size=(6, 8, 3))
    np.testing.assert_array_equal(L.maxpool2(_t(x)).data, pool_oracle(x))


def test_maxpool_full_scale_shape():
    assert L.maxpool2(Tensor(np.zeros((640, 800, 16), np.float32))).shape == (320, 400, 16)


def test_maxpool_tie_goes_to_first_cell():
    x = _t(np.full((2, 2, 1), 7.0))
    x.requires_grad = True
    out = L.maxpool2(x)
    np.testing.assert_array_equal(out.data, [[[7.0]]])
    tsum(out).backward()
    np.testing.assert_array_equal(x.grad[..., 0], [[1.0, 0.0], [0.0, 0.0]])


def test_maxpool_odd_dimension():
    with pytest.raises(DimensionError):
        L.maxpool2(_t(np.zeros((3, 4, 1))))


def test_maxpool_after_upsample_of_constant_is_identity():
    x = _t(np.full((3, 5, 2), -1.25))
    np.testing.assert_array_equal(L.maxpool2(L.upsample2(x)).data, x.data)


# dropout

def test_dropout_rate_zero_train_is_identity():
    x = _t(np.arange(6.0))
    assert L.dropout(x, 0.0, True, np.random.default_rng(0)) is x


def test_dropout_infer_is_bitwise_identity():
    x = _t(np.random.default_rng(6).normal(size=(4, 4)))
    out = L.dropout(x, 0.5, False)
    assert out.data.tobytes() == x.data.tobytes()


def test_dropout_statistics():
    out = L.dropout(_t(np.ones(100_000)), 0.5, True, np.random.default_rng(7)).data
    kept = out[out != 0]
    assert abs(kept.size / out.size - 0.5) <= 0.01
    assert abs(kept.mean() - 2.0) <= 0.05


@pytest.mark.parametrize("rate", [1.0, 1.5, -0.1])
def test_dropout_bad_rate(rate):
    with pytest.raises(ConfigurationError):
        L.dropout(_t(np.ones(3)), rate, True, np.random.default_rng(0))


# batch normalization

def _bn(c, gamma=1.0, beta=0.0):
    return LayerParams(gamma=_t(np.full(c, gamma)), beta=_t(np.full(c, beta)),
                       running_mean=np.zeros(c), running_var=np.ones(c))


def test_batchnorm_train_normalizes():
    x = _t(np.random.default_rng(8).normal(3.0, 5.0, size=(4, 6, 5, 3)))
    out = L.batchnorm(x, _bn(3), train=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=(0, 1, 2)), 1.0, atol=1e-4)


def test_batchnorm_scale_and_shift():
    x = _t(np.random.default_rng(9).normal(size=(200, 2)))
    out = L.batchnorm(x, _bn(2, gamma=2.0, beta=3.0), train=True).data
    np.testing.assert_allclose(out.mean(axis=0), 3.0, atol=1e-6)
    np.testing.assert_allclose(out.std(axis=0), 2.0, atol=1e-4)


def test_batchnorm_running_statistics_update():
    x = np.random.default_rng(10).normal(2.0, 3.0, size=(50, 4))
    p = _bn(4)
    L.batchnorm(_t(x), p, train=True, momentum=0.9)
    np.testing.assert_allclose(p.running_mean, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(p.running_var, 0.9 + 0.1 * x.var(axis=0))


def test_batchnorm_infer_uses_running_statistics():
    p = _bn(2)
    p.running_mean = np.array([1.0, -1.0])
    p.running_var = np.array([4.0, 0.25])
    out = L.batchnorm(_t([[3.0, -0.5]]), p, train=False).data
    np.testing.assert_allclose(out, [[2.0 / math.sqrt(4 + L.BN_EPS), 0.5 / math.sqrt(0.25 + L.BN_EPS)]])


def test_batchnorm_empty_batch():
    with pytest.raises(DimensionError):
        L.batchnorm(_t(np.zeros((0, 3))), _bn(3), train=True)


def test_batchnorm_gradient():
    rng = np.random.default_rng(11)
    p = _bn(3)
    p.gamma, p.beta = _t(rng.uniform(0.5, 2, 3)), _t(rng.normal(size=3))

    def op(x, g, b):
        p.gamma, p.beta = g, b
        return L.batchnorm(x, p, train=True)

    assert grad_check(op, [_t(rng.normal(size=(3, 4, 2, 3))), p.gamma, p.beta]).max_error <= 1e-5


# dense / relu / softmax

def test_dense_shapes_and_values():
    x, k, b = np.arange(3.0), np.arange(6.0).reshape(3, 2), np.array([1.0, -1.0])
    np.testing.assert_allclose(L.dense(_t(x), _t(k), _t(b)).data, x @ k + b)
    assert L.dense(_t(np.ones((5, 3))), _t(k)).shape == (5, 2)
    with pytest.raises(DimensionError):
        L.dense(_t(np.ones(4)), _t(k))


def test_relu_values():
    np.testing.assert_array_equal(L.relu(_t([-1.0, 2.0])).data, [0.0, 2.0])


def test_softmax_symmetric():
    np.testing.assert_allclose(L.softmax(_t([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_full_scale_pixels_sum_to_one():
    z = np.random.default_rng(12).normal(size=(667, 800, 2))
    np.testing.assert_allclose(L.softmax(_t(z)).data.sum(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-50, 50))
def test_softmax_shift_invariance(seed, shift):
    z = np.random.default_rng(seed).normal(size=(3, 4, 2))
    np.testing.assert_allclose(L.softmax(_t(z + shift)).data, L.softmax(_t(z)).data, atol=1e-6)


# losses

def test_cross_entropy_uniform_is_ln2():
    target = np.tile([0.0, 1.0], (4, 4, 1))
    loss = L.cross_entropy(_t(np.full((4, 4, 2), 0.5)), target)
    assert abs(float(loss.data) - math.log(2)) <= 1e-6


def test_cross_entropy_perfect_prediction():
    target = np.array([[1.0, 0.0], [0.0, 1.0]])
    loss = float(L.cross_entropy(_t(target.copy()), target).data)
    assert loss <= 1e-6 + abs(math.log(1 - 1e-7))


def test_cross_entropy_rejects_soft_targets():
    with pytest.raises(ValidationError):
        L.cross_entropy(_t(np.full((2, 2), 0.5)), np.full((2, 2), 0.5))
    with pytest.raises(ValidationError):
        L.softmax_cross_entropy(_t(np.zeros((2, 2))), np.array([[1.0, 1.0], [0.0, 1.0]]))


def test_softmax_cross_entropy_matches_composition():
    rng = np.random.default_rng(13)
    z = rng.normal(size=(4, 4, 2))
    lab = rng.integers(0, 2, (4, 4))
    target = np.stack([1 - lab, lab], axis=-1).astype(float)
    fused = float(L.softmax_cross_entropy(_t(z), target).data)
    composed = float(L.cross_entropy(L.softmax(_t(z)), target).data)
    assert abs(fused - composed) <= 1e-12


def test_cross_entropy_pixel_gradient():
    rng = np.random.default_rng(14)
    lab = rng.integers(0, 2, (4, 4))
    target = np.stack([1 - lab, lab], axis=-1).astype(float)
    p = rng.uniform(0.1, 0.9, (4, 4))
    pred = _t(np.stack([1 - p, p], axis=-1))
    assert grad_check(lambda q: L.cross_entropy(q, target), [pred]).max_error <= 1e-6


def test_softmax_cross_entropy_gradient_on_single_pair():
    target = np.array([[0.0, 1.0]])
    assert grad_check(lambda z: L.softmax_cross_entropy(z, target), [_t([[0.3, -1.2]])]).max_error <= 1e-6


# optimizer

def test_adam_first_step_has_magnitude_lr():
    w = _t([5.0])
    w.grad = np.array([1.0])
    state = AdamState(lr=0.001)
    adam_step({"w": w}, state)
    assert abs((5.0 - w.data[0]) - 0.001) <= 1e-8
    assert state.t == 1


def test_adam_constant_lr_without_decay():
    state = AdamState(lr=0.01, decay=0.0)
    assert state.effective_lr(0) == state.effective_lr(50) == 0.01
    assert AdamState(lr=0.01, decay=1.0).effective_lr(1) == 0.005


def test_adam_converges_on_quadratic():
    w = _t([0.0])
    w.requires_grad = True
    state = AdamState(lr=0.05)
    for _ in range(500):
        w.grad = None
        d = w - _t([3.0])
        tsum(mul(d, d)).backward()
        adam_step({"w": w}, state)
    assert abs(w.data[0] - 3.0) <= 1e-2


def test_adam_nan_gradient_names_parameter():
    w = _t([1.0])
    w.grad = np.array([np.nan])
    with pytest.raises(NumericError, match="block1_conv1/kernel"):
        adam_step({"block1_conv1/kernel": w}, AdamState())


def test_adam_moments_match_parameter_shapes():
    w = _t(np.ones((2, 3)))
    w.grad = np.ones((2, 3))
    state = AdamState()
    adam_step({"w": w}, state)
    adam_step({"w": w}, state)
    assert state.m["w"].shape == state.v["w"].shape == (2, 3)
    assert state.t == 2


# gradient suite (a small run; the acceptance suite runs 20 seeds)

def test_gradient_suite_covers_every_layer():
    rows = run_suite(seeds=3)
    assert [r.layer for r in rows] == list(LAYERS)
    assert all(r.passed for r in rows), [(r.layer, r.max_error) for r in rows if not r.passed]
