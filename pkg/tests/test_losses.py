"""Objective-function tests: Pearson term, SNR term, combination, gradients."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bayesrppg import autodiff as ad
from bayesrppg.errors import ConfigError, TrainingError
from bayesrppg.losses import LossConfig, pearson_loss, snr_term, total_loss


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


class TestPearsonLoss:
    def test_perfect_prediction_is_zero(self):
        y = rand((3, 64))
        assert float(pearson_loss(y, y)) == pytest.approx(0.0, abs=1e-6)

    def test_anticorrelated_is_two(self):
        y = rand((3, 64), seed=1)
        assert float(pearson_loss(-y, y)) == pytest.approx(2.0, abs=1e-6)

    def test_scale_shift_invariance(self):
        y = rand((2, 64), seed=2)
        assert float(pearson_loss(2.0 * y + 3.0, y)) == pytest.approx(0.0, abs=1e-6)

    def test_constant_target_contributes_one_with_warning(self):
        pred = rand((2, 32), seed=3)
        target = pred.copy()
        target[1] = 5.0  # constant row
        with pytest.warns(UserWarning, match="constant target"):
            val = float(pearson_loss(pred, target))
        assert val == pytest.approx(0.5, abs=1e-5)  # (0 + 1)/2

    def test_constant_prediction_contributes_one(self):
        target = rand((1, 32), seed=4)
        pred = np.zeros_like(target)
        assert float(pearson_loss(pred, target)) == pytest.approx(1.0, abs=1e-5)

    @given(
        hnp.arrays(np.float64, (2, 16), elements=st.floats(-5, 5)),
        hnp.arrays(np.float64, (2, 16), elements=st.floats(-5, 5)),
    )
    @settings(max_examples=60, deadline=None)
    def test_bounded_in_zero_two(self, pred, target):
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # constant rows may occur by construction
            val = float(pearson_loss(pred.astype(np.float32), target.astype(np.float32)))
        assert -1e-6 <= val <= 2.0 + 1e-6

    def test_gradient_matches_finite_differences(self):
        pred = ad.Tensor(rand((2, 16), seed=5), requires_grad=True, dtype=np.float64)
        target = rand((2, 16), seed=6).astype(np.float64)
        rep = ad.grad_check(lambda p: pearson_loss(p, target), [pred])
        assert rep.max_rel_err < 1e-6


class TestSnrTerm:
    def test_perfect_prediction_clips_at_max(self):
        y = rand((2, 32), seed=0)
        assert float(snr_term(y, y)) == pytest.approx(20.0)

    def test_double_amplitude_prediction(self):
        # pred = 2y: signal 4||y||^2, noise ||y||^2 -> 10 log10 4
        y = rand((1, 128), seed=1)
        val = float(snr_term(2.0 * y, y))
        assert val == pytest.approx(10 * math.log10(4.0), abs=1e-3)

    def test_orthogonal_equal_norm_prediction(self):
        # noise power = 2 ||y||^2 -> -3.010 dB
        t = np.arange(128)
        y = np.sin(2 * np.pi * 8 * t / 128).astype(np.float32)[None]
        p = np.cos(2 * np.pi * 8 * t / 128).astype(np.float32)[None]
        val = float(snr_term(p, y))
        assert val == pytest.approx(10 * math.log10(0.5), abs=1e-2)

    def test_bounded_by_clip(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            p = rng.standard_normal((2, 16)).astype(np.float32) * rng.uniform(0.01, 100)
            y = rng.standard_normal((2, 16)).astype(np.float32)
            assert -20.0 <= float(snr_term(p, y)) <= 20.0

    def test_monotone_in_noise_power(self):
        y = rand((1, 64), seed=3)
        vals = [float(snr_term(y + eps * rand((1, 64), seed=9), y)) for eps in (0.01, 0.1, 0.3, 1.0)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_gradient_matches_finite_differences(self):
        # keep samples away from the clip boundary so the kink is not hit
        pred = ad.Tensor(rand((2, 16), seed=7) * 0.9, requires_grad=True, dtype=np.float64)
        target = rand((2, 16), seed=8).astype(np.float64)
        rep = ad.grad_check(lambda p: snr_term(p, target), [pred])
        assert rep.max_rel_err < 1e-6


class TestTotalLoss:
    def test_reduces_to_pearson_when_weights_zero(self):
        p, y = rand((2, 32), seed=0), rand((2, 32), seed=1)
        cfg = LossConfig(lambda_=0.0, beta=0.0)
        loss, parts = total_loss(p, y, 3.0, cfg)
        assert float(loss) == pytest.approx(float(pearson_loss(p, y)), abs=1e-6)
        assert parts["kl_term"] == 0.0

    def test_perfect_prediction_with_snr_weight(self):
        y = rand((2, 32), seed=2)
        cfg = LossConfig(lambda_=0.1, beta=0.0)
        loss, _ = total_loss(y, y, 0.0, cfg)
        assert float(loss) == pytest.approx(-0.1 * cfg.snr_clip_db, abs=1e-5)

    def test_kl_normalization_contribution(self):
        p, y = rand((1, 16), seed=3), rand((1, 16), seed=4)
        cfg = LossConfig(lambda_=0.0, beta=1.0, kl_normalization=1.0 / 10.0)
        _, parts = total_loss(p, y, 5.0, cfg)
        assert parts["kl_term"] == pytest.approx(0.5)

    def test_batch_order_invariance(self):
        p, y = rand((4, 32), seed=5), rand((4, 32), seed=6)
        loss1, _ = total_loss(p, y, 1.0, LossConfig())
        perm = [2, 0, 3, 1]
        loss2, _ = total_loss(p[perm], y[perm], 1.0, LossConfig())
        assert float(loss1) == pytest.approx(float(loss2), rel=1e-6)

    def test_negative_kl_rejected(self):
        p, y = rand((1, 16)), rand((1, 16), seed=1)
        with pytest.raises(TrainingError, match="KL"):
            total_loss(p, y, -1.0, LossConfig())

    def test_non_finite_component_identified(self):
        p, y = rand((1, 16)), rand((1, 16), seed=1)
        with pytest.raises(TrainingError, match="kl_term"):
            total_loss(p, y, float("inf"), LossConfig())

    def test_gradient_of_combined_objective(self):
        target = rand((2, 16), seed=9).astype(np.float64)
        pred = ad.Tensor(rand((2, 16), seed=10) * 0.9, requires_grad=True, dtype=np.float64)
        cfg = LossConfig(lambda_=0.05, beta=1.0, kl_normalization=0.1)

        def f(p):
            loss, _ = total_loss(p, target, 2.0, cfg)
            return loss

        rep = ad.grad_check(f, [pred])
        assert rep.max_rel_err < 1e-4

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            LossConfig(lambda_=-0.1)
        with pytest.raises(ConfigError):
            LossConfig(snr_eps=0.0)
