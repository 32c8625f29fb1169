import math

import numpy as np
import pytest

from src.errors import ConfigError, DimensionError
from src.migrator import (
    KDConfig,
    KDProjection,
    kd_total,
    logit_distill_grads,
    logit_distill_loss,
    middle_distill_grads,
    middle_distill_loss,
    new_projection,
)
from src.nn import grad_check


class TestMiddleDistillation:
    def test_identical_representations(self, rng):
        e = rng.normal(size=(4, 3))
        assert middle_distill_loss(e, e) == 0.0

    def test_unit_offset(self):
        assert middle_distill_loss(np.ones((2, 3)), np.zeros((2, 3))) == 1.0

    def test_matches_loop_oracle(self, rng):
        e_s, e_t = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
        w = rng.normal(size=(2, 3))
        total = 0.0
        for i in range(5):
            for j in range(2):
                projected = sum(w[j, k] * e_s[i, k] for k in range(3))
                total += (projected - e_t[i, j]) ** 2
        assert abs(middle_distill_loss(e_s, e_t, w) - total / 10) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            middle_distill_loss(np.zeros((2, 3)), np.zeros((2, 4)))

    def test_gradients_pass_grad_check(self, rng):
        e_s, e_t = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
        w = rng.normal(size=(2, 3))
        sizes = [e_s.size, e_t.size]

        def loss_and_grad(vector):
            a = vector[:sizes[0]].reshape(e_s.shape)
            b = vector[sizes[0]:sizes[0] + sizes[1]].reshape(e_t.shape)
            m = vector[sizes[0] + sizes[1]:].reshape(w.shape)
            ga, gb, gm = middle_distill_grads(a, b, m)
            return middle_distill_loss(a, b, m), np.concatenate([ga.ravel(), gb.ravel(), gm.ravel()])

        assert grad_check(loss_and_grad, np.concatenate([e_s.ravel(), e_t.ravel(), w.ravel()])) < 1e-6


class TestLogitDistillation:
    def test_known_value(self):
        z_s = np.array([[math.log(2.0), 0.0]])
        z_t = np.zeros((1, 2))
        expected = 2 / 3 * math.log(4 / 3) + 1 / 3 * math.log(2 / 3)
        assert logit_distill_loss(z_s, z_t, 1.0) == pytest.approx(expected, abs=1e-12)

    def test_equal_logits(self, rng):
        z = rng.normal(size=(6, 2))
        assert abs(logit_distill_loss(z, z, 10.0)) < 1e-15

    def test_non_negative(self, rng):
        for _ in range(20):
            assert logit_distill_loss(rng.normal(size=(5, 2)) * 5, rng.normal(size=(5, 2)) * 5, 3.0) >= -1e-15

    def test_high_temperature_flattens(self, rng):
        z_s, z_t = rng.normal(size=(5, 2)) * 3, rng.normal(size=(5, 2)) * 3
        assert logit_distill_loss(z_s, z_t, 50.0) < logit_distill_loss(z_s, z_t, 1.0)

    def test_matches_loop_oracle(self, rng):
        z_s, z_t, tau = rng.normal(size=(4, 2)), rng.normal(size=(4, 2)), 2.5
        total = 0.0
        for i in range(4):
            ps = np.exp(z_s[i] / tau) / np.sum(np.exp(z_s[i] / tau))
            pt = np.exp(z_t[i] / tau) / np.sum(np.exp(z_t[i] / tau))
            total += sum(ps[c] * (math.log(ps[c]) - math.log(pt[c])) for c in range(2))
        assert abs(logit_distill_loss(z_s, z_t, tau) - total / 4) < 1e-12

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_temperature_must_be_positive(self, tau):
        with pytest.raises(ConfigError):
            logit_distill_loss(np.zeros((1, 2)), np.zeros((1, 2)), tau)

    def test_gradients_pass_grad_check(self, rng):
        z_s, z_t, tau = rng.normal(size=(5, 2)), rng.normal(size=(5, 2)), 3.0

        def loss_and_grad(vector):
            a, b = vector[:10].reshape(5, 2), vector[10:].reshape(5, 2)
            ga, gb = logit_distill_grads(a, b, tau)
            return logit_distill_loss(a, b, tau), np.concatenate([ga.ravel(), gb.ravel()])

        assert grad_check(loss_and_grad, np.concatenate([z_s.ravel(), z_t.ravel()])) < 1e-6


class TestProjection:
    def test_identity_when_widths_match(self, rng):
        projection = new_projection(rng, [6, 4], [8, 4], 1)
        assert projection.weights == [None]
        assert projection.parameters() == {}

    def test_learned_when_widths_differ(self, rng):
        projection = new_projection(rng, [6, 5], [6, 4], 2)
        assert projection.weights[0].shape == (4, 5)
        assert projection.weights[1] is None
        assert list(projection.parameters()) == ["kd.0.weight"]

    def test_kd_config_validates(self):
        with pytest.raises(ConfigError):
            KDConfig(tau=0.0, beta1=0.1, beta2=0.1, num_spots=1, projection=KDProjection([None]))
        with pytest.raises(ConfigError):
            KDConfig(tau=1.0, beta1=0.1, beta2=0.1, num_spots=2, projection=KDProjection([None]))


def test_kd_total_weights_components():
    assert kd_total([0.5], 0.1, 1.0, 10.0) == pytest.approx(1.5)
    assert kd_total([], 0.2, 1.0, 0.0) == 0.0
