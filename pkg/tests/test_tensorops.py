import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import GRAD_RTOL, max_rel_error, numeric_grad
from renn import tensorops as ops
from renn.errors import ConfigError, PreconditionError, UsageError
from renn.tensorops import LayerParams


def naive_conv(x, kernels, biases):
    """Triple-loop same-padded cross-correlation."""
    n_out, n_in, w = kernels.shape
    length = x.shape[1]
    half = w // 2
    out = np.zeros((n_out, length))
    for c in range(n_out):
        for i in range(length):
            acc = biases[c]
            for cp in range(n_in):
                for j in range(w):
                    src = i + j - half
                    if 0 <= src < length:
                        acc += kernels[c, cp, j] * x[cp, src]
            out[c, i] = acc
    return out


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


class TestConv:
    def test_difference_kernel(self):
        out = ops.conv1d_forward([1.0, 2.0, 3.0], LayerParams.conv([1.0, 0.0, -1.0]))
        # naive oracle: x[i-1] - x[i+1] with zero padding
        np.testing.assert_array_equal(out, [[-2.0, -2.0, 2.0]])

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 17))
        np.testing.assert_array_equal(ops.conv1d_forward(x, LayerParams.conv([0.0, 1.0, 0.0])), x)

    def test_bias_only(self, rng):
        x = rng.normal(size=(1, 9))
        out = ops.conv1d_forward(x, LayerParams.conv([0.0, 0.0, 0.0], [0.5]))
        np.testing.assert_array_equal(out, np.full((1, 9), 0.5))

    @pytest.mark.parametrize("width", [1, 3])
    def test_matches_naive_loop(self, rng, width):
        x = rng.normal(size=(3, 20))
        p = LayerParams.conv(rng.normal(size=(4, 3, width)), rng.normal(size=4))
        np.testing.assert_allclose(ops.conv1d_forward(x, p), naive_conv(x, p.kernels, p.biases),
                                   rtol=0, atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ConfigError):
            ops.conv1d_forward(rng.normal(size=(2, 8)), LayerParams.conv(np.ones((1, 3, 3))))


def test_relu_examples():
    np.testing.assert_array_equal(ops.relu([-1.0, 0.0, 2.0]), [[0.0, 0.0, 2.0]])
    np.testing.assert_array_equal(ops.relu([-3.0, -0.5]), [[0.0, 0.0]])
    np.testing.assert_array_equal(ops.relu([1.0, 4.0]), [[1.0, 4.0]])


class TestMaxPool:
    def test_examples(self):
        out, _ = ops.maxpool2_forward([1.0, 3.0, 2.0, 0.0])
        np.testing.assert_array_equal(out, [[3.0, 2.0]])
        out, idx = ops.maxpool2_forward([5.0, 5.0])
        assert out[0, 0] == 5.0 and idx[0, 0] == 0
        out, _ = ops.maxpool2_forward([-1.0, -2.0])
        np.testing.assert_array_equal(out, [[-1.0]])

    def test_odd_length_rejected(self):
        with pytest.raises(PreconditionError):
            ops.maxpool2_forward([1.0, 2.0, 3.0])

    def test_backward_routes_to_argmax(self, rng):
        x = rng.normal(size=(2, 10))
        out, cache = ops.forward("pool", x)
        g = rng.normal(size=out.shape)
        dx, _ = ops.backward("pool", cache, g)
        pairs = x.reshape(2, 5, 2)
        winners = pairs.argmax(axis=2)
        for c in range(2):
            for i in range(5):
                assert dx[c, 2 * i + winners[c, i]] == g[c, i]
                assert dx[c, 2 * i + 1 - winners[c, i]] == 0.0

    @given(arrays(np.float64, (2, 8), elements=finite))
    def test_outputs_are_inputs(self, x):
        out, _ = ops.maxpool2_forward(x)
        pairs = x.reshape(2, 4, 2)
        assert np.all((out == pairs[..., 0]) | (out == pairs[..., 1]))


class TestDeconv:
    def test_formula_expansion(self):
        x = [3.0, 4.0]
        # direct expansion: out[2i] = a*x[i], out[2i+1] = b*x[i]
        np.testing.assert_array_equal(ops.deconv2_forward(x, LayerParams.conv([1.0, 2.0])),
                                      [[3.0, 6.0, 4.0, 8.0]])
        np.testing.assert_array_equal(ops.deconv2_forward(x, LayerParams.conv([1.0, 0.0])),
                                      [[3.0, 0.0, 4.0, 0.0]])
        np.testing.assert_array_equal(ops.deconv2_forward(x, LayerParams.conv([1.0, 1.0])),
                                      [[3.0, 3.0, 4.0, 4.0]])

    def test_multichannel_sum(self, rng):
        x = rng.normal(size=(3, 5))
        p = LayerParams.conv(rng.normal(size=(2, 3, 2)), rng.normal(size=2))
        out = ops.deconv2_forward(x, p)
        for c in range(2):
            for i in range(5):
                for j in range(2):
                    expect = p.biases[c] + sum(p.kernels[c, cp, j] * x[cp, i] for cp in range(3))
                    assert out[c, 2 * i + j] == pytest.approx(expect, abs=1e-12)


class TestBatchNorm:
    def test_standardized_channel_passes_through(self, rng):
        x = rng.normal(size=(1, 1000))
        x = (x - x.mean()) / x.std()
        out = ops.batchnorm_forward(x, LayerParams.batchnorm(1))
        np.testing.assert_allclose(out, x / math.sqrt(1 + ops.BN_EPS), atol=1e-12)

    def test_constant_channel_gives_beta(self):
        out = ops.batchnorm_forward(np.full((1, 6), 3.0), LayerParams.batchnorm(1, beta=0.7))
        np.testing.assert_allclose(out, 0.7, atol=1e-15)

    def test_hand_example(self):
        # (x - 2) / 1 * 2 + 1 for x = [1, 3]
        out = ops.batchnorm_forward([1.0, 3.0], LayerParams.batchnorm(1, gamma=2.0, beta=1.0))
        np.testing.assert_allclose(out, [[-1.0, 3.0]], atol=1e-4)

    def test_running_stats_and_infer(self):
        p = LayerParams.batchnorm(1)
        ops.batchnorm_forward([1.0, 3.0], p, "train")
        assert p.bn_running_mean[0] == pytest.approx(0.2)
        assert p.bn_running_var[0] == pytest.approx(0.9 + 0.1 * 1.0)
        out = ops.batchnorm_forward([1.2], p, "infer")
        assert out[0, 0] == pytest.approx(1.0 / math.sqrt(1.0 + ops.BN_EPS))
        assert np.all(p.bn_running_var >= 0)


class TestSoftmaxAndLoss:
    def test_examples(self):
        np.testing.assert_allclose(ops.softmax_channels([[0.0], [0.0]]), [[0.5], [0.5]])
        np.testing.assert_allclose(ops.softmax_channels([[math.log(2)], [0.0]]),
                                   [[2 / 3], [1 / 3]], rtol=1e-15)
        out = ops.softmax_channels([[1000.0], [0.0]])
        assert np.all(np.isfinite(out))
        assert out[0, 0] == pytest.approx(1.0) and out[1, 0] == pytest.approx(0.0, abs=1e-300)

    @given(arrays(np.float64, (2, 16), elements=st.floats(-1e6, 1e6)))
    def test_columns_sum_to_one(self, x):
        np.testing.assert_allclose(ops.softmax_channels(x).sum(axis=0), 1.0, atol=1e-9)

    def test_perfect_prediction(self):
        y = np.array([0, 1, 0, 1.0])
        pred = np.stack([1 - y, y])
        assert ops.weighted_cross_entropy(pred, y, 5.0) < 1e-11

    def test_single_half_positive(self):
        loss = ops.weighted_cross_entropy([[0.5], [0.5]], [1.0], 1.0)
        assert loss == pytest.approx(-math.log(0.5))
        assert loss == pytest.approx(0.6931, abs=1e-4)

    def test_linear_in_pos_weight(self, rng):
        pred = ops.softmax_channels(rng.normal(size=(2, 30)))
        y = (rng.random(30) < 0.2).astype(float)
        pos_only = y.copy()
        neg_term = ops.weighted_cross_entropy(pred, y, 0.0)
        one = ops.weighted_cross_entropy(pred, y, 1.0) - neg_term
        two = ops.weighted_cross_entropy(pred, y, 2.0) - neg_term
        assert two == pytest.approx(2 * one, rel=1e-12)
        assert pos_only.sum() > 0


# -- gradient checks ----------------------------------------------------------

def _layer_check(kind, x, p, rng, mode="train"):
    out, cache = ops.forward(kind, x, p, mode)
    weights = rng.normal(size=out.shape)

    def loss():
        return float((ops.forward(kind, x, p, mode)[0] * weights).sum())

    dx, pgrads = ops.backward(kind, cache, weights, p)
    errors = [max_rel_error(dx, numeric_grad(loss, x))]
    if p is not None:
        for name, arr in p.trainable().items():
            errors.append(max_rel_error(pgrads[name], numeric_grad(loss, arr)))
    return max(errors)


@pytest.mark.parametrize("width", [1, 3])
def test_conv_gradients(rng, width):
    x = rng.normal(size=(3, 12))
    p = LayerParams.conv(rng.normal(size=(2, 3, width)), rng.normal(size=2))
    assert _layer_check("conv", x, p, rng) <= 1e-6


def test_deconv_gradients(rng):
    x = rng.normal(size=(3, 7))
    p = LayerParams.conv(rng.normal(size=(2, 3, 2)), rng.normal(size=2))
    assert _layer_check("deconv", x, p, rng) <= GRAD_RTOL


@pytest.mark.parametrize("mode", ["train", "infer"])
def test_batchnorm_gradients(rng, mode):
    x = rng.normal(size=(3, 15)) * 2 + 1
    p = LayerParams.batchnorm(3)
    p.bn_gamma[:] = rng.normal(size=3)
    p.bn_beta[:] = rng.normal(size=3)
    p.bn_running_var[:] = rng.uniform(0.5, 2, size=3)
    assert _layer_check("bn", x, p, rng, mode) <= GRAD_RTOL


def test_relu_gradients(rng):
    x = rng.normal(size=(2, 20))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    assert _layer_check("relu", x, None, rng) <= GRAD_RTOL
    _, cache = ops.forward("relu", [[-1.0, 2.0]])
    dx, _ = ops.backward("relu", cache, [[1.0, 1.0]])
    np.testing.assert_array_equal(dx, [[0.0, 1.0]])


def test_pool_gradients(rng):
    x = rng.normal(size=(2, 16))
    assert _layer_check("pool", x, None, rng) <= GRAD_RTOL


def test_softmax_cross_entropy_gradient(rng):
    logits = rng.normal(size=(2, 25))
    y = (rng.random(25) < 0.3).astype(float)

    def loss():
        return ops.weighted_cross_entropy(ops.softmax_channels(logits), y, 3.5)

    analytic = ops.softmax_cross_entropy_backward(ops.softmax_channels(logits), y, 3.5)
    assert max_rel_error(analytic, numeric_grad(loss, logits)) <= GRAD_RTOL


def test_backward_without_cache():
    with pytest.raises(UsageError):
        ops.backward("conv", None, np.zeros((1, 4)), LayerParams.conv([1.0, 2.0, 3.0]))


# -- linearity and determinism ------------------------------------------------

@settings(max_examples=30)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_and_deconv_are_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 2, 10))
    pc = LayerParams.conv(rng.normal(size=(3, 2, 3)))
    pd = LayerParams.conv(rng.normal(size=(3, 2, 2)))
    for fn, p in ((ops.conv1d_forward, pc), (ops.deconv2_forward, pd)):
        lhs = fn(a * x + b * y, p)
        rhs = a * fn(x, p) + b * fn(y, p)
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


def test_forward_backward_bit_identical(rng):
    x = rng.normal(size=(2, 16))
    p = LayerParams.conv(rng.normal(size=(2, 2, 3)), rng.normal(size=2))
    g = rng.normal(size=(2, 16))
    o1, c1 = ops.forward("conv", x, p)
    o2, c2 = ops.forward("conv", x, p)
    assert o1.tobytes() == o2.tobytes()
    d1, _ = ops.backward("conv", c1, g, p)
    d2, _ = ops.backward("conv", c2, g, p)
    assert d1.tobytes() == d2.tobytes()


# -- Adam ---------------------------------------------------------------------

class TestAdam:
    def test_zero_gradient_is_noop(self):
        theta = np.array([1.0, -2.0])
        state = ops.AdamState.zeros_like([theta])
        ops.adam_step([theta], [np.zeros(2)], state, 0.1)
        np.testing.assert_array_equal(theta, [1.0, -2.0])
        assert state.step_count == 1

    def test_first_step_magnitude(self):
        theta = np.array([0.0, 0.0])
        g = np.array([0.3, -4.0])
        state = ops.AdamState.zeros_like([theta])
        ops.adam_step([theta], [g], state, 0.01)
        expected = -0.01 * g / (np.abs(g) + ops.ADAM_EPS)
        np.testing.assert_allclose(theta, expected, rtol=1e-12)
        assert np.all(state.second_moment[0] >= 0)

    def test_scalar_quadratic(self):
        theta = np.array([0.0])
        state = ops.AdamState.zeros_like([theta])
        for _ in range(200):
            ops.adam_step([theta], [2 * (theta - 3.0)], state, 0.1)
        assert abs(theta[0] - 3.0) < 3.0
        assert state.step_count == 200

    def test_rejects_bad_lr(self):
        with pytest.raises(ConfigError):
            ops.adam_step([np.zeros(1)], [np.zeros(1)], ops.AdamState(), 0.0)
