"""Tests for variational layers: reparameterization, closed-form KL, freeze mode.

The KL oracle is a plain Monte-Carlo estimate of E_q[log q(w) - log p(w)]
computed from normal log-densities, independent of the closed form it checks.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayesrppg import autodiff as ad
from bayesrppg import bayes
from bayesrppg.bayes import BayesConv3d, PriorSpec, VariationalParameter, kl_to_prior, sample_weights
from bayesrppg.errors import ConfigError


def mc_kl_normal(mu, sigma, prior_mean, prior_std, n=1_000_000, seed=0):
    """Monte-Carlo KL(N(mu, sigma^2) || N(m, s^2)) from log-density differences."""
    rng = np.random.default_rng(seed)
    w = mu + sigma * rng.standard_normal(n)
    log_q = -0.5 * ((w - mu) / sigma) ** 2 - math.log(sigma) - 0.5 * math.log(2 * math.pi)
    log_p = -0.5 * ((w - prior_mean) / prior_std) ** 2 - math.log(prior_std) - 0.5 * math.log(2 * math.pi)
    return float(np.mean(log_q - log_p))


class _ZeroRng:
    """Stand-in rng that forces eps = 0."""

    def standard_normal(self, shape):
        return np.zeros(shape)


class TestSampleWeights:
    def test_eps_zero_gives_mu(self):
        vp = VariationalParameter(np.array([1.0, -2.0, 0.5]), np.zeros(3))
        w = sample_weights(vp, _ZeroRng())
        np.testing.assert_array_equal(w.data, vp.mu.data)

    def test_degenerate_scale_collapses_to_mu(self):
        vp = VariationalParameter(np.array([3.0, -1.0]), np.full(2, -40.0))
        w = sample_weights(vp, np.random.default_rng(0))
        assert np.abs(w.data - vp.mu.data).max() < 1e-12

    def test_moments_match_mu_and_softplus_rho(self):
        # mu=1, rho=0 -> sigma = ln 2; 1e6 draws pin mean and std to +-0.003
        vp = VariationalParameter(np.full(1_000_000, 1.0), np.zeros(1_000_000))
        w = sample_weights(vp, np.random.default_rng(42)).data
        assert abs(w.mean() - 1.0) < 0.003
        assert abs(w.std() - math.log(2.0)) < 0.003

    def test_gradient_coefficients_mu_and_rho(self):
        # d loss/d mu == d loss/d w; d loss/d rho == (d loss/d w) * eps * sigmoid(rho)
        rng = np.random.default_rng(1)
        mu = ad.Tensor(rng.standard_normal(6), requires_grad=True, dtype=np.float64)
        rho = ad.Tensor(rng.standard_normal(6), requires_grad=True, dtype=np.float64)
        eps = rng.standard_normal(6)
        coeff = rng.standard_normal(6)  # fixed downstream weights

        w = bayes.reparameterize(mu, rho, eps)
        loss = (w * ad.Tensor(coeff, dtype=np.float64)).sum()
        loss.backward()
        dloss_dw = coeff
        np.testing.assert_allclose(mu.grad, dloss_dw, rtol=1e-12)
        sigmoid = 1.0 / (1.0 + np.exp(-rho.data))
        np.testing.assert_allclose(rho.grad, dloss_dw * eps * sigmoid, rtol=1e-10)

    def test_gradient_matches_finite_differences_with_eps_fixed(self):
        rng = np.random.default_rng(2)
        eps = rng.standard_normal(8)
        mu = ad.Tensor(rng.standard_normal(8), requires_grad=True, dtype=np.float64)
        rho = ad.Tensor(rng.standard_normal(8), requires_grad=True, dtype=np.float64)
        rep = ad.grad_check(lambda m, r: bayes.reparameterize(m, r, eps) ** 2.0, [mu, rho])
        assert rep.max_rel_err < 1e-6


class TestKlToPrior:
    def test_equal_distributions_zero(self):
        vp = VariationalParameter(np.zeros(4), np.full(4, bayes.rho_for_sigma(1.0)))
        kl = kl_to_prior(vp, PriorSpec(mean=0.0, std=1.0))
        assert abs(float(kl)) < 1e-10

    def test_unit_mean_shift(self):
        # KL(N(1,1) || N(0,1)) = 1/2
        vp = VariationalParameter(np.array([1.0]), np.array([bayes.rho_for_sigma(1.0)]))
        kl = kl_to_prior(vp, PriorSpec(0.0, 1.0))
        assert abs(float(kl) - 0.5) < 1e-6

    def test_half_sigma_closed_form_and_mc(self):
        # KL(N(0, 0.5^2) || N(0,1)) = ln 2 + 0.125 - 0.5
        expected = math.log(2.0) + 0.125 - 0.5
        vp = VariationalParameter(np.array([0.0]), np.array([bayes.rho_for_sigma(0.5)]))
        kl = float(kl_to_prior(vp, PriorSpec(0.0, 1.0)))
        assert abs(kl - expected) < 1e-6
        mc = mc_kl_normal(0.0, 0.5, 0.0, 1.0)
        assert abs(kl - mc) / expected < 0.01

    def test_closed_form_matches_mc_on_random_triples(self):
        rng = np.random.default_rng(3)
        for i in range(5):
            mu = float(rng.uniform(-2, 2))
            sigma = float(rng.uniform(0.2, 2.0))
            pm = float(rng.uniform(-1, 1))
            ps = float(rng.uniform(0.3, 2.0))
            vp = VariationalParameter(np.array([mu], dtype=np.float64), np.array([bayes.rho_for_sigma(sigma)], dtype=np.float64))
            kl = float(kl_to_prior(vp, PriorSpec(pm, ps)))
            mc = mc_kl_normal(mu, sigma, pm, ps, n=200_000, seed=100 + i)
            assert abs(kl - mc) <= 0.01 * max(abs(kl), 1.0)

    @given(
        mu=st.floats(-3, 3),
        sigma=st.floats(0.05, 3.0),
        pm=st.floats(-2, 2),
        ps=st.floats(0.05, 3.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_always_nonnegative(self, mu, sigma, pm, ps):
        vp = VariationalParameter(np.array([mu], dtype=np.float64), np.array([bayes.rho_for_sigma(sigma)], dtype=np.float64))
        assert float(kl_to_prior(vp, PriorSpec(pm, ps))) >= -1e-9

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        mu = ad.Tensor(rng.standard_normal(6), requires_grad=True, dtype=np.float64)
        rho = ad.Tensor(rng.standard_normal(6), requires_grad=True, dtype=np.float64)
        prior = PriorSpec(0.0, 0.1)

        def f(m, r):
            sigma = ad.softplus(r)
            centered = m - prior.mean
            s2 = prior.std**2
            return (math.log(prior.std) - ad.log(sigma)) + (sigma * sigma + centered * centered) * (0.5 / s2) - 0.5

        rep = ad.grad_check(f, [mu, rho])
        assert rep.max_rel_err < 1e-6

    def test_invalid_prior_rejected(self):
        with pytest.raises(ConfigError):
            PriorSpec(0.0, 0.0)


class TestBayesConvForward:
    def _layer(self, frozen=False):
        return BayesConv3d(1, 2, (1, 1, 1), rng=np.random.default_rng(7), frozen=frozen)

    def test_frozen_layer_is_bitwise_repeatable(self):
        layer = self._layer(frozen=True)
        x = ad.Tensor(np.random.default_rng(8).random((1, 1, 3, 4, 4)).astype(np.float32))
        y1 = layer(x)
        y2 = layer(x)
        np.testing.assert_array_equal(y1.data, y2.data)

    def test_sampling_passes_differ(self):
        layer = self._layer()
        x = ad.Tensor(np.ones((1, 1, 2, 2, 2), dtype=np.float32))
        y1 = layer(x, rng=np.random.default_rng(1))
        y2 = layer(x, rng=np.random.default_rng(2))
        assert np.abs(y1.data - y2.data).max() > 0.0

    def test_fixed_seed_is_deterministic(self):
        layer = self._layer()
        x = ad.Tensor(np.ones((1, 1, 2, 2, 2), dtype=np.float32))
        y1 = layer(x, rng=np.random.default_rng(99))
        y2 = layer(x, rng=np.random.default_rng(99))
        np.testing.assert_array_equal(y1.data, y2.data)

    def test_sampling_without_rng_raises(self):
        with pytest.raises(ConfigError, match="rng"):
            self._layer()(ad.Tensor(np.ones((1, 1, 1, 1, 1), dtype=np.float32)))

    def test_frozen_forward_uses_mu_exactly(self):
        layer = self._layer(frozen=True)
        x = np.random.default_rng(9).random((1, 1, 2, 3, 3)).astype(np.float32)
        y = layer(ad.Tensor(x))
        ref = ad.conv3d(ad.Tensor(x), layer.weight.mu, layer.bias.mu)
        np.testing.assert_array_equal(y.data, ref.data)
