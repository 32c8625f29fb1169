import math

import numpy as np
import pytest

from src.errors import ConfigError, DimensionError, NonFiniteError
from src.nn import (
    LOG_CLAMP,
    DenseLayer,
    adam_state_for,
    adam_step,
    assign_flat,
    binary_cross_entropy,
    binary_cross_entropy_grad,
    dense_backward,
    dense_forward,
    dense_forward_cached,
    flatten_params,
    grad_check,
    log_softmax,
    new_dense,
    sigmoid,
    softmax,
)


class TestActivations:
    def test_sigmoid_saturates_without_overflow(self):
        assert sigmoid(0.0) == 0.5
        assert sigmoid(1000.0) == 1.0
        assert sigmoid(-1000.0) == 0.0

    def test_softmax_rows_sum_to_one(self, rng):
        p = softmax(rng.normal(size=(5, 3)) * 50)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_softmax_shift_invariant(self):
        np.testing.assert_allclose(softmax([1.0, 2.0, 3.0]), softmax([1001.0, 1002.0, 1003.0]), atol=1e-15)

    def test_log_softmax_matches_log_of_softmax(self, rng):
        z = rng.normal(size=(4, 2))
        np.testing.assert_allclose(log_softmax(z), np.log(softmax(z)), atol=1e-12)

    def test_empty_softmax_rejected(self):
        with pytest.raises(DimensionError):
            softmax(np.zeros((2, 0)))

    def test_known_values(self):
        np.testing.assert_allclose(softmax([math.log(2.0), 0.0]), [2.0 / 3.0, 1.0 / 3.0], atol=1e-15)
        assert sigmoid(math.log(3.0)) == pytest.approx(0.75, abs=1e-15)


class TestDenseLayer:
    def test_matches_loop_oracle(self, rng):
        layer = new_dense(rng, 4, 3, "relu")
        x = rng.normal(size=(6, 4))
        out = dense_forward(x, layer)
        for i in range(6):
            for j in range(3):
                pre = sum(x[i, k] * layer.weight[j, k] for k in range(4)) + layer.bias[j]
                assert abs(out[i, j] - max(pre, 0.0)) < 1e-12

    @pytest.mark.parametrize("n, fan_in, fan_out", [(1, 1, 1), (3, 7, 2), (32, 32, 32)])
    def test_identity_layer_matches_loop_oracle_across_shapes(self, rng, n, fan_in, fan_out):
        layer = new_dense(rng, fan_in, fan_out, "identity")
        layer.bias[...] = rng.normal(size=fan_out)
        x = rng.normal(size=(n, fan_in))
        out = dense_forward(x, layer)
        assert out.shape == (n, fan_out)
        for i in range(n):
            for j in range(fan_out):
                pre = sum(x[i, k] * layer.weight[j, k] for k in range(fan_in)) + layer.bias[j]
                assert abs(out[i, j] - pre) < 1e-12

    def test_shape_mismatch(self, rng):
        layer = new_dense(rng, 4, 3, "identity")
        with pytest.raises(DimensionError):
            dense_forward(np.zeros((2, 5)), layer)

    def test_bias_shape_checked(self):
        with pytest.raises(DimensionError):
            DenseLayer(np.zeros((3, 2)), np.zeros(2), "identity")

    @pytest.mark.parametrize("activation", ["identity", "relu", "sigmoid", "softmax"])
    def test_backward_passes_grad_check(self, rng, activation):
        layer = new_dense(rng, 3, 4, activation)
        x = rng.normal(size=(5, 3))
        target = rng.normal(size=(5, 4))
        params = layer.parameters("layer")

        def loss_and_grad(vector):
            assign_flat(params, vector)
            out, cache = dense_forward_cached(x, layer)
            grad_out = 2.0 * (out - target) / out.size
            _, gw, gb = dense_backward(layer, cache, grad_out)
            return float(np.mean((out - target) ** 2)), np.concatenate([gw.ravel(), gb.ravel()])

        assert grad_check(loss_and_grad, flatten_params(params)) < 1e-6


class TestCrossEntropy:
    def test_half_everywhere_is_ln2(self):
        assert binary_cross_entropy([0.5, 0.5, 0.5], [1, 0, 1]) == pytest.approx(math.log(2.0), abs=1e-15)

    def test_exact_predictions_near_zero(self):
        assert binary_cross_entropy([1.0, 0.0], [1, 0]) < 1e-10

    def test_clamp_keeps_loss_finite(self):
        assert binary_cross_entropy([0.0], [1.0]) == pytest.approx(-math.log(LOG_CLAMP))

    def test_gradient_matches_finite_differences(self, rng):
        p = rng.uniform(0.1, 0.9, size=7)
        t = (rng.random(7) < 0.5).astype(float)
        numeric = np.array([
            (binary_cross_entropy(p + e, t) - binary_cross_entropy(p - e, t)) / 2e-6
            for e in np.eye(7) * 1e-6
        ])
        np.testing.assert_allclose(binary_cross_entropy_grad(p, t), numeric, atol=1e-7)

    def test_empty_batch(self):
        with pytest.raises(DimensionError):
            binary_cross_entropy([], [])


class TestAdam:
    def test_first_step_moves_by_lr(self):
        params = {"w": np.array([1.0, -1.0])}
        state = adam_state_for(params, lr=0.1)
        adam_step(params, {"w": np.array([3.0, -0.5])}, state)
        # bias-corrected first step is lr * sign(g)
        np.testing.assert_allclose(params["w"], [0.9, -0.9], atol=1e-7)
        assert state.step == 1

    def test_minimises_a_quadratic(self):
        params = {"w": np.array([5.0])}
        state = adam_state_for(params, lr=0.1)
        for _ in range(500):
            adam_step(params, {"w": 2.0 * params["w"]}, state)
        assert abs(params["w"][0]) < 0.05

    def test_zero_gradient_is_a_fixed_point(self):
        params = {"w": np.array([0.3, -2.0, 7.5])}
        state = adam_state_for(params, lr=0.5)
        for _ in range(3):
            adam_step(params, {"w": np.zeros(3)}, state)
        np.testing.assert_array_equal(params["w"], [0.3, -2.0, 7.5])

    def test_two_steps_with_a_constant_gradient(self):
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        g = np.array([0.5, -4.0])
        params = {"w": np.array([1.0, 1.0])}
        state = adam_state_for(params, lr=lr, beta1=b1, beta2=b2, eps=eps)
        adam_step(params, {"w": g}, state)
        adam_step(params, {"w": g}, state)

        w, m, v = np.array([1.0, 1.0]), np.zeros(2), np.zeros(2)
        for t in (1, 2):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w = w - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        np.testing.assert_allclose(params["w"], w, rtol=0, atol=1e-12)
        # both bias-corrected steps reduce to lr * g / (|g| + eps)
        np.testing.assert_allclose(params["w"], 1.0 - 2 * lr * g / (np.abs(g) + eps), atol=1e-12)
        assert state.step == 2

    def test_mismatched_names(self):
        params = {"w": np.zeros(2)}
        with pytest.raises(DimensionError):
            adam_step(params, {"v": np.zeros(2)}, adam_state_for(params))


class TestGradCheck:
    def test_exact_gradient_of_a_quadratic(self):
        def loss_and_grad(x):
            return float(np.sum(x ** 2)), 2.0 * x
        assert grad_check(loss_and_grad, np.array([1.0, 2.0])) < 1e-8

    def test_exact_gradient_of_a_linear_loss(self):
        c = np.array([3.0, -1.0, 0.5])

        def loss_and_grad(x):
            return float(c @ x), c.copy()
        assert grad_check(loss_and_grad, np.array([0.5, -0.25, 0.125])) < 1e-10

    def test_detects_a_wrong_gradient(self):
        def loss_and_grad(x):
            return float(np.sum(x ** 2)), 3.0 * x
        assert grad_check(loss_and_grad, np.array([1.0, 2.0])) > 0.1

    def test_eps_range(self):
        with pytest.raises(ConfigError):
            grad_check(lambda x: (0.0, x), np.zeros(1), eps=1e-2)

    def test_non_finite_loss(self):
        with pytest.raises(NonFiniteError):
            grad_check(lambda x: (float("nan"), x), np.zeros(1))
