import math

import numpy as np
import pytest

from bsdlab.numerics import (adam_state, entropy, finite_diff_grad, kl_div,
                             one_hot, optimizer_step, sgd_state, softmax,
                             soft_cross_entropy)


def random_simplex(rng, n, k):
    return rng.dirichlet(np.ones(k), size=n)


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5], atol=1e-15)

    def test_direct_evaluation(self):
        # e^{ln 2} / (e^{ln 2} + 1) = 2/3
        np.testing.assert_allclose(softmax([math.log(2.0), 0.0]),
                                   [2.0 / 3.0, 1.0 / 3.0], atol=1e-15)

    def test_shift_invariance_large_logits(self):
        np.testing.assert_allclose(softmax([1000.0, 1000.0, 999.0]),
                                   softmax([1.0, 1.0, 0.0]), atol=1e-12)

    def test_rows_on_simplex(self):
        rng = np.random.default_rng(0)
        z = rng.normal(0, 50, size=(200, 7))
        p = softmax(z)
        assert np.all(p >= 0.0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite logits"):
            softmax([np.inf, 0.0])
        with pytest.raises(ValueError, match="non-finite logits"):
            softmax([np.nan, 0.0])


class TestKlDiv:
    def test_identity_is_zero(self):
        assert kl_div([0.3, 0.7], [0.3, 0.7]) == 0.0

    def test_onehot_vs_uniform(self):
        np.testing.assert_allclose(kl_div([1.0, 0.0], [0.5, 0.5], floor=1e-12),
                                   math.log(2.0), rtol=1e-12)

    def test_hand_evaluation(self):
        expected = 0.25 * math.log(1.0 / 3.0) + 0.75 * math.log(3.0)
        np.testing.assert_allclose(kl_div([0.25, 0.75], [0.75, 0.25]), expected, rtol=1e-12)

    def test_nonnegative_property(self):
        rng = np.random.default_rng(1)
        for k in (2, 3, 10):
            p = random_simplex(rng, 500, k)
            q = random_simplex(rng, 500, k)
            assert np.all(kl_div(p, q) >= 0.0)
            np.testing.assert_allclose(kl_div(p, p), 0.0, atol=1e-12)


class TestSoftCrossEntropy:
    def test_perfect_onehot(self):
        # the floor only touches the zero-target term, which contributes 0
        assert soft_cross_entropy([1.0, 0.0], [1.0, 0.0]) == 0.0

    def test_onehot_half(self):
        np.testing.assert_allclose(soft_cross_entropy([1.0, 0.0], [0.5, 0.5]),
                                   math.log(2.0), rtol=1e-12)

    def test_uniform_entropy(self):
        np.testing.assert_allclose(soft_cross_entropy([0.5, 0.5], [0.5, 0.5]),
                                   math.log(2.0), rtol=1e-12)

    def test_decomposition_identity(self):
        rng = np.random.default_rng(2)
        for k in (2, 5):
            t = random_simplex(rng, 300, k)
            p = random_simplex(rng, 300, k)
            lhs = soft_cross_entropy(t, p) - kl_div(t, p)
            np.testing.assert_allclose(lhs, entropy(t), atol=1e-9)


class TestOptimizerStep:
    def test_plain_sgd_step(self):
        params = {"w": np.array([1.0])}
        grads = {"w": np.array([2.0])}
        optimizer_step(params, grads, sgd_state(lr=0.1))
        np.testing.assert_allclose(params["w"], [0.8], rtol=1e-15)

    def test_adam_first_step_magnitude(self):
        # bias-corrected first step moves by lr / (1 + eps) for unit gradient
        params = {"w": np.array([0.5])}
        grads = {"w": np.array([1.0])}
        optimizer_step(params, grads, adam_state(lr=0.001))
        np.testing.assert_allclose(params["w"], [0.5 - 0.001], atol=1e-9)

    def test_zero_gradient_no_move(self):
        params = {"w": np.array([1.0, -2.0])}
        optimizer_step(params, {"w": np.zeros(2)}, sgd_state(lr=0.5))
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])

    def test_bit_identical_determinism(self):
        rng = np.random.default_rng(3)
        p0 = {"w": rng.normal(size=(4, 3)), "b": rng.normal(size=3)}
        g = {"w": rng.normal(size=(4, 3)), "b": rng.normal(size=3)}
        runs = []
        for _ in range(2):
            params = {k: v.copy() for k, v in p0.items()}
            state = adam_state(lr=0.01)
            for _ in range(5):
                optimizer_step(params, {k: v.copy() for k, v in g.items()}, state)
            runs.append(params)
        for key in p0:
            np.testing.assert_array_equal(runs[0][key], runs[1][key])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape mismatch.*'w'"):
            optimizer_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, sgd_state(lr=0.1))

    def test_non_finite_gradient_names_block(self):
        with pytest.raises(ValueError, match="non-finite gradient.*'bad'"):
            optimizer_step({"bad": np.zeros(2)}, {"bad": np.array([np.nan, 0.0])},
                           sgd_state(lr=0.1))

    def test_momentum_accumulates(self):
        params = {"w": np.array([0.0])}
        state = sgd_state(lr=1.0, momentum=0.5)
        optimizer_step(params, {"w": np.array([1.0])}, state)  # buf=1, w=-1
        optimizer_step(params, {"w": np.array([1.0])}, state)  # buf=1.5, w=-2.5
        np.testing.assert_allclose(params["w"], [-2.5], rtol=1e-15)


class TestFiniteDiffGrad:
    def test_quadratic(self):
        grad = finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]), h=1e-5)
        np.testing.assert_allclose(grad, [6.0], atol=1e-6)

    def test_linear_sum(self):
        x = np.array([0.3, -1.2, 4.0])
        grad = finite_diff_grad(lambda v: float(v.sum()), x, h=1e-5)
        np.testing.assert_allclose(grad, np.ones(3), atol=1e-9)

    def test_ce_through_softmax_matches_analytic(self):
        target = np.array([0.2, 0.5, 0.3])
        x = np.array([0.2, -0.1, 0.4])

        def f(v):
            return float(soft_cross_entropy(target, softmax(v)))

        analytic = softmax(x) - target
        np.testing.assert_allclose(finite_diff_grad(f, x, h=1e-5), analytic, atol=1e-6)


def test_one_hot_rows():
    out = one_hot(np.array([2, 0]), 4)
    np.testing.assert_array_equal(out, [[0, 0, 1, 0], [1, 0, 0, 0]])
