import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hemcnn import nn


def naive_conv(x, kernel, bias, stride):
    m, n = kernel.shape
    ho = (x.shape[0] - m) // stride[0] + 1
    wo = (x.shape[1] - n) // stride[1] + 1
    out = np.zeros((ho, wo))
    for i in range(ho):
        for j in range(wo):
            acc = bias
            for a in range(m):
                for b in range(n):
                    acc += kernel[a, b] * x[i * stride[0] + a, j * stride[1] + b]
            out[i, j] = acc
    return out


def central_diff(fn, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = fn(x)
        x[idx] = old - h
        fm = fn(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


class TestConvForward:
    def test_table_shape(self):
        f = nn.ConvFilter(np.ones((2, 10)), 0.0, (2, 1))
        assert nn.conv2d_forward(np.zeros((48, 38)), f).shape == (24, 29)

    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(6, 9))
        f = nn.ConvFilter(np.ones((1, 1)))
        np.testing.assert_array_equal(nn.conv2d_forward(x, f), x)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_naive(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(5, 7))
        f = nn.ConvFilter(rng.normal(size=(2, 3)), rng.normal(), (2, 2))
        np.testing.assert_allclose(nn.conv2d_forward(x, f), naive_conv(x, f.kernel, f.bias, f.stride), atol=1e-12)

    def test_batched_equals_loop(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 8, 11))
        f = nn.ConvFilter(rng.normal(size=(3, 2)), 0.5, (1, 3))
        batched = nn.conv2d_forward(x, f)
        for k in range(4):
            np.testing.assert_array_equal(batched[k], nn.conv2d_forward(x[k], f))

    def test_kernel_too_large(self):
        with pytest.raises(ValueError):
            nn.conv2d_forward(np.zeros((3, 3)), nn.ConvFilter(np.ones((4, 1))))

    def test_translation_equivariance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 20))
        f = nn.ConvFilter(rng.normal(size=(2, 4)), 0.1, (1, 1))
        shifted = np.roll(x, 1, axis=1)
        a = nn.conv2d_forward(x, f)
        b = nn.conv2d_forward(shifted, f)
        np.testing.assert_array_equal(b[:, 1:], a[:, :-1])


@given(d=st.integers(1, 60), k=st.integers(1, 12), s=st.integers(1, 6))
def test_shape_algebra(d, k, s):
    if k > d:
        with pytest.raises(ValueError):
            nn.conv_output_shape((d, d), (k, k), (s, s))
    else:
        rows, cols = nn.conv_output_shape((d, d), (k, 1), (s, 1))
        assert rows == (d - k) // s + 1
        assert cols == d
        x = np.zeros((d, d))
        assert nn.conv2d_forward(x, nn.ConvFilter(np.ones((k, 1)), 0, (s, 1))).shape == (rows, cols)


class TestConvBackward:
    def test_zero_grad(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 6))
        f = nn.ConvFilter(rng.normal(size=(2, 2)), 0.3, (1, 2))
        gk, gb, gi = nn.conv2d_backward(x, f, np.zeros((4, 3)))
        assert not gk.any() and gb == 0.0 and not gi.any()

    def test_identity_kernel_grad_input(self):
        g = np.random.default_rng(2).normal(size=(4, 5))
        _, gb, gi = nn.conv2d_backward(np.zeros((4, 5)), nn.ConvFilter(np.ones((1, 1))), g)
        np.testing.assert_array_equal(gi, g)
        assert gb == pytest.approx(g.sum())

    @pytest.mark.parametrize("seed", range(6))
    @pytest.mark.parametrize("kshape,stride", [((2, 3), (2, 2)), ((1, 5), (1, 2)), ((3, 3), (3, 3)), ((2, 1), (1, 1))])
    def test_finite_differences(self, seed, kshape, stride):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(6, 9))
        f = nn.ConvFilter(rng.normal(size=kshape), rng.normal(), stride)
        g = rng.normal(size=nn.conv_output_shape(x.shape, kshape, stride))
        gk, gb, gi = nn.conv2d_backward(x, f, g)

        def loss_k(k):
            return float((nn.conv2d_forward(x, nn.ConvFilter(k, f.bias, stride)) * g).sum())

        def loss_x(xx):
            return float((nn.conv2d_forward(xx, f) * g).sum())

        assert rel_err(gk, central_diff(loss_k, f.kernel)) < 1e-6
        assert rel_err(gi, central_diff(loss_x, x)) < 1e-6
        fd_b = (
            (nn.conv2d_forward(x, nn.ConvFilter(f.kernel, f.bias + 1e-5, stride)) * g).sum()
            - (nn.conv2d_forward(x, nn.ConvFilter(f.kernel, f.bias - 1e-5, stride)) * g).sum()
        ) / 2e-5
        assert rel_err(gb, fd_b) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nn.conv2d_backward(np.zeros((4, 4)), nn.ConvFilter(np.ones((2, 2))), np.zeros((2, 2)))


class TestElu:
    def test_zero(self):
        assert nn.elu(np.array(0.0)) == 0.0
        assert nn.elu_backward(np.array(0.0), 1.0) == 1.0
        assert nn.elu_backward(np.array(-1e-12), 1.0) == pytest.approx(1.0)

    def test_asymptote(self):
        assert nn.elu(np.array(-1e4)) == pytest.approx(-1.0)
        assert nn.elu(np.array(-np.inf)) == -1.0

    @pytest.mark.parametrize("x", [-2.0, -0.1, 0.3])
    def test_finite_difference(self, x):
        h = 1e-5
        fd = (nn.elu(np.array(x + h)) - nn.elu(np.array(x - h))) / (2 * h)
        assert rel_err(nn.elu_backward(np.array(x), 1.0), fd) < 1e-6


class TestSoftmaxLoss:
    def test_symmetric(self):
        logp = nn.log_softmax(np.array([0.0, 0.0]))
        np.testing.assert_allclose(logp, [-math.log(2)] * 2)
        assert nn.nll_loss(logp, 0) == pytest.approx(0.6931, abs=1e-4)

    def test_stability(self):
        logp = nn.log_softmax(np.array([1000.0, 0.0]))
        assert np.all(np.isfinite(logp))
        np.testing.assert_allclose(logp, [0.0, -1000.0], atol=1e-12)
        assert np.all(np.isfinite(nn.log_softmax(np.array([-1e4, 1e4]))))

    @pytest.mark.parametrize("label", [0, 1])
    def test_grad(self, label):
        z = np.array([0.7, -1.3])
        g = nn.nll_grad_logits(nn.log_softmax(z), label)
        fd = central_diff(lambda zz: float(nn.nll_loss(nn.log_softmax(zz), label)), z)
        assert rel_err(g, fd) < 1e-6
        soft = np.exp(z) / np.exp(z).sum()
        np.testing.assert_allclose(g, soft - np.eye(2)[label], atol=1e-15)

    def test_normalised(self):
        logp = nn.log_softmax(np.random.default_rng(0).normal(size=(10, 2)) * 30)
        np.testing.assert_allclose(np.exp(logp).sum(axis=-1), 1.0, atol=1e-12)


class TestAdam:
    def test_first_step(self):
        state = nn.AdamState.zeros(1, weight_decay=0.0)
        theta = nn.adam_step(np.zeros(1), np.ones(1), state, 0.03)
        assert theta[0] == pytest.approx(-0.03, abs=1e-6)
        assert state.t == 1

    def test_zero_gradient(self):
        state = nn.AdamState.zeros(3, weight_decay=0.0)
        np.testing.assert_array_equal(nn.adam_step(np.zeros(3), np.zeros(3), state, 0.03), np.zeros(3))

    def test_weight_decay_enters_gradient(self):
        state = nn.AdamState.zeros(1, weight_decay=1e-3)
        theta = nn.adam_step(np.ones(1), np.zeros(1), state, 0.03)
        expected = 1.0 - 0.03 * 1e-3 / (1e-3 + 1e-8)
        assert theta[0] == pytest.approx(expected, abs=1e-12)
        assert theta[0] == pytest.approx(0.97, abs=1e-6)

    def test_moments_nonnegative(self):
        rng = np.random.default_rng(0)
        state = nn.AdamState.zeros(5)
        theta = rng.normal(size=5)
        for _ in range(20):
            theta = nn.adam_step(theta, rng.normal(size=5), state, 0.01)
        assert np.all(state.v >= 0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nn.adam_step(np.zeros(2), np.zeros(3), nn.AdamState.zeros(2), 0.1)


class TestSchedule:
    def test_values(self):
        s = nn.TrainSchedule()
        assert nn.lr_at_epoch(s, 0) == 0.03
        assert nn.lr_at_epoch(s, 1) == pytest.approx(0.027, abs=1e-15)
        assert nn.lr_at_epoch(s, 14) == pytest.approx(0.03 * 0.9 ** 14, abs=1e-12)
        assert nn.lr_at_epoch(s, 14) == pytest.approx(0.0068630, abs=1e-7)

    def test_invalid_decay(self):
        with pytest.raises(ValueError):
            nn.TrainSchedule(decay_per_epoch=1.5)


class TestInit:
    def test_bound_and_determinism(self):
        a = nn.init_filter(12, 5, np.random.default_rng(4))
        b = nn.init_filter(12, 5, np.random.default_rng(4))
        limit = math.sqrt(6 / 61)
        assert np.all(np.abs(a.kernel) <= limit)
        assert a.bias == 0.0
        np.testing.assert_array_equal(a.kernel, b.kernel)

    def test_mean_within_3se(self):
        rng = np.random.default_rng(11)
        draws = np.concatenate([nn.init_filter(1, 1, rng).kernel.ravel() for _ in range(10_000)])
        limit = math.sqrt(6 / 2)
        se = limit / math.sqrt(3) / math.sqrt(draws.size)
        assert abs(draws.mean()) < 3 * se


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_composed_network_gradient(seed):
    """conv -> elu -> conv -> log-softmax gradient against central differences."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 9))
    f1 = nn.ConvFilter(rng.normal(size=(2, 3)), rng.normal(), (2, 1))
    f2 = nn.ConvFilter(rng.normal(size=(1, 7)), rng.normal(), (1, 7))
    label = int(rng.integers(2))

    def loss(k1):
        z = nn.conv2d_forward(x, nn.ConvFilter(k1, f1.bias, f1.stride))
        return float(nn.nll_loss(nn.log_softmax(nn.conv2d_forward(nn.elu(z), f2)[:, 0]), label))

    z1 = nn.conv2d_forward(x, f1)
    logits = nn.conv2d_forward(nn.elu(z1), f2)
    g = nn.nll_grad_logits(nn.log_softmax(logits[:, 0]), label)[:, None]
    _, _, ga = nn.conv2d_backward(nn.elu(z1), f2, g)
    gk1, _, _ = nn.conv2d_backward(x, f1, nn.elu_backward(z1, ga))
    assert rel_err(gk1, central_diff(loss, f1.kernel)) < 1e-5


def test_single_filter_loss_decreases():
    """Logistic regression as one conv filter on separable data: epoch loss never rises."""
    rng = np.random.default_rng(0)
    n = 40
    y = np.repeat([0, 1], n // 2)
    x = rng.normal(size=(n, 2, 4)) * 0.3
    x[y == 1, 1] += 1.5
    x[y == 0, 0] += 1.5
    f = nn.ConvFilter(np.zeros((1, 4)), 0.0, (1, 4))
    theta = np.append(f.kernel.ravel(), f.bias)
    state = nn.AdamState.zeros(theta.size, weight_decay=0.0)
    losses = []
    for epoch in range(15):
        lr = 0.05 * 0.9 ** epoch
        f = nn.ConvFilter(theta[:4].reshape(1, 4), theta[4], (1, 4))
        logits = nn.conv2d_forward(x, f)[..., 0]
        logp = nn.log_softmax(logits)
        losses.append(float(nn.nll_loss(logp, y).mean()))
        g = nn.nll_grad_logits(logp, y)[..., None] / n
        gk, gb, _ = nn.conv2d_backward(x, f, g, need_input_grad=False)
        theta = nn.adam_step(theta, np.append(gk.ravel(), gb), state, lr)
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]
