import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from camel2.nn import (
    AdamState,
    CheckpointError,
    LrSchedule,
    MlpParams,
    adam_step,
    backward,
    checkpoint_bytes,
    forward,
    glorot_init,
    init_mlp,
    load_checkpoint,
    lr_at_epoch,
    parse_checkpoint,
    positive_probability,
    save_checkpoint,
    softmax,
    softmax_ce,
)


def loss_of(params, x, y):
    return softmax_ce(forward(params, x)[0], y)[0]


def analytic_grads(params, x, y):
    logits, cache = forward(params, x)
    _, dlogits = softmax_ce(logits, y)
    return backward(params, cache, dlogits)


def reference_loss(layers, x, y):
    """Mean cross-entropy of a ReLU network, evaluated in long double."""
    h = x.astype(np.longdouble)
    for i, (w, b) in enumerate(layers):
        h = h @ w.T + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0)
    h = h - h.max(axis=1, keepdims=True)
    logp = h - np.log(np.exp(h).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(y)), y].mean()


def min_preactivation(params, x):
    h, smallest = x, np.inf
    for w, b in params.layers[:-1]:
        z = h @ w.T + b
        smallest = min(smallest, np.abs(z).min())
        h = np.maximum(z, 0)
    return smallest


def random_network(rng):
    """Random small MLP and batch, redrawn until no hidden pre-activation
    lies within 1e-2 of the ReLU kink (finite differences need smoothness)."""
    while True:
        depth = rng.integers(1, 4)
        sizes = [int(rng.integers(1, 7)) for _ in range(depth)] + [2]
        params = init_mlp(sizes, rng, dtype=np.float64)
        # non-zero biases so every parameter has a generic gradient
        params = MlpParams([(w, rng.normal(0, 0.3, b.shape)) for w, b in params.layers])
        n = int(rng.integers(1, 9))
        x = rng.normal(size=(n, sizes[0]))
        y = rng.integers(0, 2, size=n)
        if min_preactivation(params, x) > 1e-2:
            return params, x, y


def finite_difference_error(params, x, y, h=1e-4):
    """Largest per-coordinate relative error between backprop and a
    fourth-order central difference of the long-double reference loss.
    Errors are relative to max(|g|, 1e-6), so near-zero gradients are
    compared absolutely."""
    grads = analytic_grads(params, x, y)
    layers = [(w.astype(np.longdouble), b.astype(np.longdouble)) for w, b in params.layers]
    worst = 0.0
    for li, (w, b) in enumerate(layers):
        for which, arr in enumerate((w, b)):
            g = grads[li][which]
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                f = []
                for step in (2 * h, h, -h, -2 * h):
                    arr[idx] = orig + np.longdouble(step)
                    f.append(reference_loss(layers, x, y))
                arr[idx] = orig
                num = float((-f[0] + 8 * f[1] - 8 * f[2] + f[3]) / (12 * np.longdouble(h)))
                scale = max(abs(num), abs(g[idx]), 1e-6)
                worst = max(worst, abs(num - g[idx]) / scale)
    return worst


class TestForward:
    def test_zero_network(self):
        params = MlpParams([(np.zeros((3, 4)), np.zeros(3)), (np.zeros((2, 3)), np.zeros(2))])
        logits, _ = forward(params, np.ones((5, 4)))
        np.testing.assert_array_equal(logits, 0.0)
        np.testing.assert_array_equal(positive_probability(params, np.ones((5, 4))), 0.5)

    def test_hand_computed(self):
        w = np.array([[1.0, 2.0], [-1.0, 0.5]])
        b = np.array([0.5, -1.0])
        params = MlpParams([(w, b)])
        logits, _ = forward(params, np.array([[2.0, -1.0]]))
        # [1*2 + 2*(-1) + 0.5, -1*2 + 0.5*(-1) - 1]
        np.testing.assert_array_equal(logits, [[0.5, -3.5]])

    def test_relu_hidden_layer(self):
        params = MlpParams([(np.array([[1.0], [-1.0]]), np.zeros(2)), (np.eye(2), np.zeros(2))])
        logits, cache = forward(params, np.array([[3.0]]))
        np.testing.assert_array_equal(logits, [[3.0, 0.0]])
        np.testing.assert_array_equal(cache[1], [[3.0, 0.0]])

    def test_order_preserving_and_pure(self):
        rng = np.random.default_rng(0)
        params = init_mlp([6, 5, 2], rng)
        x = rng.normal(size=(9, 6)).astype(np.float32)
        full, _ = forward(params, x)
        again, _ = forward(params, x)
        assert full.tobytes() == again.tobytes()
        for i in range(9):
            np.testing.assert_allclose(forward(params, x[i : i + 1])[0][0], full[i], rtol=1e-6)

    def test_shape_check(self):
        params = init_mlp([3, 2], np.random.default_rng(0))
        with pytest.raises(ValueError):
            forward(params, np.zeros((2, 4)))

    def test_output_width(self):
        with pytest.raises(ValueError):
            init_mlp([3, 3], np.random.default_rng(0))


class TestSoftmaxCe:
    @pytest.mark.parametrize("label", [0, 1])
    def test_ln2(self, label):
        loss, grad = softmax_ce(np.array([0.0, 0.0]), label)
        assert loss == pytest.approx(math.log(2), abs=1e-15)
        np.testing.assert_allclose(grad, [0.5 - (label == 0), 0.5 - (label == 1)])

    def test_saturated(self):
        loss, _ = softmax_ce(np.array([20.0, -20.0]), 0)
        assert 0 <= loss < 1e-15

    def test_batch_mean(self):
        logits = np.array([[1.0, 2.0], [0.5, -0.5]])
        loss, grad = softmax_ce(logits, [1, 0])
        p = softmax(logits)
        assert loss == pytest.approx(-(math.log(p[0, 1]) + math.log(p[1, 0])) / 2, rel=1e-14)
        assert grad.shape == (2, 2)

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=40).filter(lambda v: len(v) % 2 == 0))
    def test_probabilities_and_loss(self, vals):
        z = np.array(vals).reshape(-1, 2)
        np.testing.assert_allclose(softmax(z).sum(axis=1), 1.0, atol=1e-12)
        assert softmax_ce(z, np.zeros(len(z), dtype=int))[0] >= 0


class TestBackward:
    def test_zero_output_gradient(self):
        rng = np.random.default_rng(1)
        params = init_mlp([4, 3, 2], rng, np.float64)
        _, cache = forward(params, rng.normal(size=(5, 4)))
        for gw, gb in backward(params, cache, np.zeros((5, 2))):
            assert not gw.any() and not gb.any()

    def test_duplicated_batch(self):
        rng = np.random.default_rng(2)
        params = init_mlp([4, 3, 2], rng, np.float64)
        x, y = rng.normal(size=(6, 4)), rng.integers(0, 2, 6)
        single = analytic_grads(params, x, y)
        double = analytic_grads(params, np.vstack([x, x]), np.r_[y, y])
        for (a, b), (c, d) in zip(single, double):
            np.testing.assert_allclose(a, c, rtol=1e-13, atol=1e-16)
            np.testing.assert_allclose(b, d, rtol=1e-13, atol=1e-16)

    def test_finite_differences_double(self):
        rng = np.random.default_rng(2024)
        worst = max(finite_difference_error(*random_network(rng)) for _ in range(100))
        assert worst < 1e-7

    def test_finite_differences_single(self):
        rng = np.random.default_rng(5)
        params, x, y = random_network(rng)
        g32 = analytic_grads(params.astype(np.float32), x, y)
        g64 = analytic_grads(params, x, y)
        for (a, b), (c, d) in zip(g32, g64):
            np.testing.assert_allclose(a, c, rtol=1e-4, atol=1e-6)
            np.testing.assert_allclose(b, d, rtol=1e-4, atol=1e-6)

    def test_shape_mismatch(self):
        params = init_mlp([3, 2], np.random.default_rng(0), np.float64)
        _, cache = forward(params, np.zeros((4, 3)))
        with pytest.raises(ValueError):
            backward(params, cache, np.zeros((3, 2)))


def scalar_adam(grads, lr, b1=0.9, b2=0.999, eps=1e-8, p0=0.0):
    """Plain-float Adam on one parameter."""
    p, m, v = p0, 0.0, 0.0
    trace = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        trace.append(p)
    return trace


def scalar_network(value):
    return MlpParams([(np.array([[value]]), np.array([0.0])), (np.eye(2, 1), np.zeros(2))])


def scalar_grads(g):
    return [(np.array([[g]]), np.array([0.0])), (np.zeros((2, 1)), np.zeros(2))]


class TestAdam:
    def test_zero_gradient_is_noop(self):
        params = init_mlp([3, 4, 2], np.random.default_rng(0))
        zero = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers]
        new, state = adam_step(params, zero, AdamState.fresh(params), 0.001)
        assert new.equals(params) and state.step_count == 1

    def test_first_step(self):
        params = scalar_network(0.0)
        new, _ = adam_step(params, scalar_grads(1.0), AdamState.fresh(params), 0.001)
        assert new.layers[0][0][0, 0] == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-18)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            grads = rng.normal(0, rng.uniform(0.01, 10), size=50)
            lrs = [lr_at_epoch(1 + i // 10) for i in range(50)]
            params = scalar_network(0.3)
            state = AdamState.fresh(params)
            got = []
            for g, lr in zip(grads, lrs):
                params, state = adam_step(params, scalar_grads(g), state, lr)
                got.append(params.layers[0][0][0, 0])
            # reference with the same per-step learning rates
            p, m, v = 0.3, 0.0, 0.0
            for t, (g, lr) in enumerate(zip(grads, lrs), start=1):
                m = 0.9 * m + 0.1 * g
                v = 0.999 * v + 0.001 * g * g
                p = p - lr * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
                assert abs(got[t - 1] - p) <= 1e-12
            assert state.step_count == 50

    def test_constant_lr_reference(self):
        grads = [0.5, -1.0, 2.0, 0.0, 3.0]
        params = scalar_network(0.0)
        state = AdamState.fresh(params)
        for g, ref in zip(grads, scalar_adam(grads, 0.01)):
            params, state = adam_step(params, scalar_grads(g), state, 0.01)
            assert abs(params.layers[0][0][0, 0] - ref) <= 1e-12

    def test_rejects_non_finite(self):
        params = scalar_network(0.0)
        with pytest.raises(FloatingPointError):
            adam_step(params, scalar_grads(float("nan")), AdamState.fresh(params), 0.001)

    def test_rejects_incongruent(self):
        params = scalar_network(0.0)
        with pytest.raises(ValueError):
            adam_step(params, scalar_grads(1.0)[:1], AdamState.fresh(params), 0.001)


class TestSchedule:
    @pytest.mark.parametrize("epoch, lr", [(1, 0.001), (5, 0.001), (6, 0.0005), (11, 0.00025), (16, 0.000125)])
    def test_values(self, epoch, lr):
        assert lr_at_epoch(epoch) == lr

    def test_non_increasing(self):
        lrs = [lr_at_epoch(e, LrSchedule(0.01, 3)) for e in range(1, 60)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_invalid(self):
        with pytest.raises(ValueError):
            lr_at_epoch(0)
        with pytest.raises(ValueError):
            LrSchedule(halve_every=0)


class TestGlorot:
    def test_small_limits(self):
        w = glorot_init(4, 2, np.random.default_rng(0))
        assert w.shape == (2, 4) and np.abs(w).max() <= 1.0

    def test_mean(self):
        w = glorot_init(3, 3, np.random.default_rng(0), dtype=np.float64)
        draws = np.concatenate([glorot_init(3, 3, np.random.default_rng(s), np.float64).ravel() for s in range(11_112)])
        assert np.abs(w).max() <= 1.0
        assert abs(draws.mean()) < 0.01

    @given(st.integers(1, 50), st.integers(1, 50), st.integers(0, 2**16))
    def test_bounded(self, fi, fo, seed):
        w = glorot_init(fi, fo, np.random.default_rng(seed))
        assert np.abs(w).max() <= np.float32(math.sqrt(6 / (fi + fo)))


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        params = init_mlp([7, 5, 3, 2], np.random.default_rng(3))
        save_checkpoint(params, 12, tmp_path / "a.ckpt")
        ck = load_checkpoint(tmp_path / "a.ckpt")
        assert ck.epoch == 12 and ck.params.equals(params)

    def test_epoch_tags(self):
        params = init_mlp([3, 2], np.random.default_rng(0))
        assert parse_checkpoint(checkpoint_bytes(params, 12)).epoch == 12
        assert parse_checkpoint(checkpoint_bytes(params, 14)).epoch == 14
        assert checkpoint_bytes(params, 12) != checkpoint_bytes(params, 14)

    def test_layout(self):
        params = init_mlp([3, 2], np.random.default_rng(0))
        buf = checkpoint_bytes(params, 1)
        assert buf[:8] == b"CAMEL2CK"
        assert len(buf) == 8 + 12 + 8 + 4 * (6 + 2) + 4

    @pytest.mark.parametrize("cut", [1, 4, 10, 40])
    def test_truncated(self, cut):
        buf = checkpoint_bytes(init_mlp([3, 4, 2], np.random.default_rng(0)), 1)
        with pytest.raises(CheckpointError):
            parse_checkpoint(buf[:-cut])

    def test_corrupt(self):
        buf = bytearray(checkpoint_bytes(init_mlp([3, 2], np.random.default_rng(0)), 1))
        buf[30] ^= 0xFF
        with pytest.raises(CheckpointError, match="checksum"):
            parse_checkpoint(bytes(buf))

    def test_manifest_mismatch(self):
        import struct
        import zlib

        body = bytearray(checkpoint_bytes(init_mlp([3, 2], np.random.default_rng(0)), 1)[:-4])
        body[20:28] = struct.pack("<II", 2, 4)  # claims fan_in 4
        buf = bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))
        with pytest.raises(CheckpointError, match="manifest"):
            parse_checkpoint(buf)
