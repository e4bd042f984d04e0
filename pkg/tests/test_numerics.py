import numpy as np
import pytest

from selfbc.numerics import (
    AdamState,
    InvalidInputError,
    MlpParams,
    adam_step,
    backward,
    finite_diff_grad,
    forward,
    init_mlp,
    loss_gradient,
    mlp_forward,
    param_count,
    soft_update,
)
from selfbc.rng import STREAM_OFFSETS, make_stream

from conftest import rel_err


def naive_forward(params: MlpParams, x):
    """Per-element loops; an independent reference for the vectorized pass."""
    h = [float(v) for v in x]
    for li in range(params.n_layers):
        W, b = params.weights[li], params.biases[li]
        z = []
        for j in range(W.shape[1]):
            acc = 0.0
            for i in range(W.shape[0]):
                acc += h[i] * W[i, j]
            z.append(acc + b[j])
        last = li == params.n_layers - 1
        if not last:
            if params.uses_layer_norm:
                mu = sum(z) / len(z)
                var = sum((v - mu) ** 2 for v in z) / len(z)
                g, beta = params.ln_gains[li], params.ln_biases[li]
                z = [(v - mu) / np.sqrt(var + 1e-5) * g[k] + beta[k] for k, v in enumerate(z)]
            h = [max(v, 0.0) for v in z]
        elif params.output_activation == "tanh":
            h = [params.action_scale * np.tanh(v) for v in z]
        else:
            h = z
    return np.array(h)


def zero_net(sizes, activation="identity"):
    return MlpParams(tuple(sizes), np.zeros(param_count(sizes)), activation)


class TestMlpForward:
    def test_zero_network_identity_output(self):
        assert np.array_equal(mlp_forward(zero_net((3, 5, 2)), np.ones(3)), np.zeros(2))

    def test_zero_network_tanh_output(self):
        assert np.array_equal(mlp_forward(zero_net((3, 5, 2), "tanh"), np.ones(3)), np.zeros(2))

    @pytest.mark.parametrize("layer_norm", [False, True])
    def test_matches_naive_oracle(self, layer_norm):
        rng = np.random.default_rng(0)
        params = init_mlp((4, 7, 6, 3), make_stream(11, "init"), "tanh", 2.0, layer_norm)
        for _ in range(5):
            x = rng.normal(size=4)
            np.testing.assert_allclose(mlp_forward(params, x), naive_forward(params, x), rtol=0, atol=1e-12)

    def test_tanh_output_bounded(self):
        params = init_mlp((2, 8, 2), make_stream(0, "init"), "tanh", 0.5)
        out = mlp_forward(params, np.random.default_rng(1).normal(scale=100.0, size=(200, 2)))
        assert np.all(np.abs(out) <= 0.5)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            mlp_forward(zero_net((3, 2)), np.ones(4))

    def test_batch_and_vector_agree(self):
        params = init_mlp((3, 5, 2), make_stream(1, "init"))
        x = np.random.default_rng(2).normal(size=(4, 3))
        batched = mlp_forward(params, x)
        for i in range(4):
            # BLAS picks different kernels for matrix and vector shapes
            np.testing.assert_allclose(batched[i], mlp_forward(params, x[i]), rtol=0, atol=1e-15)


class TestParams:
    def test_param_count_formula(self):
        assert param_count((4, 8, 8, 2)) == 5 * 8 + 9 * 8 + 9 * 2
        assert param_count((6, 8, 8, 1), True) == 7 * 8 + 9 * 8 + 9 * 1 + 2 * 8 * 2

    def test_views_share_storage(self):
        params = init_mlp((3, 4, 2), make_stream(0, "init"))
        params.flat[0] = 123.0
        assert params.weights[0][0, 0] == 123.0

    def test_bad_action_scale(self):
        with pytest.raises(InvalidInputError):
            init_mlp((2, 3, 1), make_stream(0, "init"), "tanh", 0.0)

    def test_init_bounds(self):
        params = init_mlp((16, 32, 1), make_stream(0, "init"))
        assert np.max(np.abs(params.weights[0])) <= 1 / np.sqrt(16)
        assert np.max(np.abs(params.weights[1])) <= 1 / np.sqrt(32)


class TestLossGradient:
    def test_linear_policy_closed_form(self):
        # 1-D linear policy pi(s) = w s + b, loss (pi(s) - a)^2
        params = MlpParams((1, 1), np.array([0.7, -0.2]), "identity")
        s, a = 1.5, 0.3

        def objective(p):
            out, cache = forward(p, np.array([[s]]), keep_cache=True)
            diff = out - a
            grad, _ = backward(p, cache, 2.0 * diff, input_grad=False)
            return float(diff[0, 0] ** 2), grad

        resid = 0.7 * s - 0.2 - a
        np.testing.assert_allclose(loss_gradient(objective, params), [2 * resid * s, 2 * resid], atol=1e-15)

    def test_zero_at_symmetric_critical_point(self):
        params = MlpParams((1, 1), np.array([0.0, 0.0]), "identity")
        x = np.array([[-1.0], [1.0]])

        def objective(p):
            out, cache = forward(p, x, keep_cache=True)
            grad, _ = backward(p, cache, out / x.shape[0], input_grad=False)
            return float(np.mean(out**2) / 2), grad

        assert np.array_equal(loss_gradient(objective, params), np.zeros(2))

    def test_rejects_non_objective(self):
        params = zero_net((1, 1))
        with pytest.raises(TypeError):
            loss_gradient(lambda p: 1.0, params)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        params = init_mlp((3, 6, 5, 2), make_stream(seed, "init"), "tanh", 1.0, bool(seed % 2))
        x = rng.normal(size=(7, 3))
        t = rng.uniform(-1, 1, size=(7, 2))

        def objective(p):
            out, cache = forward(p, x, keep_cache=True)
            diff = out - t
            grad, _ = backward(p, cache, 2 * diff / 7, input_grad=False)
            return float(np.mean(np.sum(diff**2, axis=1))), grad

        assert rel_err(loss_gradient(objective, params), finite_diff_grad(objective, params)) < 1e-4

    def test_input_gradient(self):
        params = init_mlp((3, 5, 1), make_stream(4, "init"), uses_layer_norm=True)
        x = np.random.default_rng(4).normal(size=(2, 3))
        out, cache = forward(params, x, keep_cache=True)
        _, gx = backward(params, cache, np.ones((2, 1)))
        h = 1e-6
        fd = np.zeros_like(x)
        for i in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd[i] = (mlp_forward(params, xp).sum() - mlp_forward(params, xm).sum()) / (2 * h)
        assert rel_err(gx, fd) < 1e-6


class TestFiniteDiff:
    def test_quadratic(self):
        params = MlpParams((1, 1), np.array([3.0, 0.0]), "identity")
        g = finite_diff_grad(lambda p: p.flat[0] ** 2, params, 1e-6)
        assert abs(g[0] - 6.0) < 1e-6 and g[1] == 0.0

    def test_constant(self):
        params = MlpParams((1, 1), np.array([3.0, 1.0]), "identity")
        assert np.array_equal(finite_diff_grad(lambda p: 5.0, params), np.zeros(2))

    def test_bad_step(self):
        with pytest.raises(InvalidInputError):
            finite_diff_grad(lambda p: 0.0, zero_net((1, 1)), 0.0)


def adam_oracle(x, grad_fn, lr, n, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, n + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        x = x - lr * mhat / (np.sqrt(vhat) + eps)
    return x


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = init_mlp((2, 3, 1), make_stream(0, "init"))
        new, state = adam_step(params, np.zeros_like(params.flat), AdamState.zeros_like(params))
        assert np.array_equal(new.flat, params.flat)
        assert state.step_count == 1

    def test_first_step_magnitude_is_lr(self):
        params = MlpParams((1, 1), np.array([0.5, 0.0]), "identity")
        new, _ = adam_step(params, np.array([-3.7, 0.0]), AdamState.zeros_like(params, lr=0.01))
        assert abs(abs(new.flat[0] - 0.5) - 0.01) < 1e-9

    def test_quadratic_matches_oracle(self):
        params = MlpParams((1, 1), np.array([1.0, 0.0]), "identity")
        state = AdamState.zeros_like(params, lr=0.1)
        for _ in range(3):
            params, state = adam_step(params, np.array([2 * params.flat[0], 0.0]), state)
        assert abs(params.flat[0] - adam_oracle(1.0, lambda x: 2 * x, 0.1, 3)) < 1e-12
        assert state.step_count == 3

    def test_shape_mismatch(self):
        params = zero_net((1, 1))
        with pytest.raises(InvalidInputError):
            adam_step(params, np.zeros(3), AdamState.zeros_like(params))


class TestSoftUpdate:
    def test_scalar_example(self):
        t = MlpParams((1, 1), np.zeros(2), "identity")
        s = MlpParams((1, 1), np.ones(2), "identity")
        np.testing.assert_allclose(soft_update(t, s, 0.005).flat, 0.005, rtol=0, atol=1e-18)

    def test_extremes(self):
        a = init_mlp((2, 3, 1), make_stream(0, "init"))
        b = init_mlp((2, 3, 1), make_stream(1, "init"))
        assert np.array_equal(soft_update(a, b, 1.0).flat, b.flat)
        assert np.array_equal(soft_update(a, b, 0.0).flat, a.flat)

    def test_composition_is_affine(self):
        a = init_mlp((2, 3, 1), make_stream(0, "init"))
        b = init_mlp((2, 3, 1), make_stream(1, "init"))
        t1, t2 = 0.3, 0.05
        twice = soft_update(soft_update(a, b, t1), b, t2)
        once = soft_update(a, b, 1 - (1 - t1) * (1 - t2))
        np.testing.assert_allclose(twice.flat, once.flat, rtol=0, atol=1e-12)

    def test_rejects_bad_tau(self):
        a = zero_net((1, 1))
        with pytest.raises(InvalidInputError):
            soft_update(a, a, 1.5)

    def test_rejects_architecture_mismatch(self):
        with pytest.raises(InvalidInputError):
            soft_update(zero_net((1, 1)), zero_net((2, 1)), 0.1)


class TestStreams:
    def test_streams_are_reproducible_and_distinct(self):
        a = make_stream(5, "noise", 2).standard_normal(4)
        assert np.array_equal(a, make_stream(5, "noise", 2).standard_normal(4))
        others = [make_stream(5, name).standard_normal(4) for name in STREAM_OFFSETS]
        others.append(make_stream(5, "noise", 3).standard_normal(4))
        others.append(make_stream(6, "noise", 2).standard_normal(4))
        assert all(not np.array_equal(a, o) for o in others)

    def test_unknown_stream(self):
        with pytest.raises(KeyError):
            make_stream(0, "bogus")
