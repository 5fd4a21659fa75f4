"""Variational Gaussian weight layers.

Each Bayesian layer keeps a factorized Gaussian posterior per weight,
parameterized as N(mu, softplus(rho)^2). Forward passes draw one weight
sample via the reparameterization w = mu + sigma * eps so that gradients
reach mu directly and rho through eps * sigmoid(rho). The KL divergence to
an isotropic Gaussian prior has the usual closed form and acts as the
regularizer of the training objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError


@dataclass(frozen=True)
class PriorSpec:
    """Isotropic Gaussian prior over weights."""

    mean: float = 0.0
    std: float = 0.1

    def __post_init__(self):
        if not self.std > 0:
            raise ConfigError(f"prior std must be > 0, got {self.std}")


def rho_for_sigma(sigma: float) -> float:
    """Inverse softplus: the rho that makes softplus(rho) == sigma."""
    if not sigma > 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    return math.log(math.expm1(sigma)) if sigma < 30 else sigma


class VariationalParameter:
    """Per-weight Gaussian posterior: trainable mu and rho, sigma = softplus(rho)."""

    def __init__(self, mu: np.ndarray, rho: np.ndarray):
        mu = np.asarray(mu)
        rho = np.asarray(rho)
        dtype = np.float64 if mu.dtype == np.float64 else np.float32
        mu = mu.astype(dtype, copy=False)
        rho = rho.astype(dtype, copy=False)
        if mu.shape != rho.shape:
            raise ConfigError(f"mu shape {mu.shape} != rho shape {rho.shape}")
        self.mu = Tensor(mu, requires_grad=True)
        self.rho = Tensor(rho, requires_grad=True)

    @property
    def shape(self):
        return self.mu.data.shape

    def sigma(self) -> Tensor:
        return ad.softplus(self.rho)

    @classmethod
    def initialized(cls, shape, rng: np.random.Generator, mu_std: float = 0.05, sigma0: float = 0.05, fan_in: int | None = None):
        """Fresh posterior: mu ~ N(0, (mu_std/sqrt(fan_in))^2), sigma fixed at sigma0."""
        scale = mu_std / math.sqrt(fan_in) if fan_in else mu_std
        mu = (scale * rng.standard_normal(shape)).astype(np.float32)
        rho = np.full(shape, rho_for_sigma(sigma0), dtype=np.float32)
        return cls(mu, rho)


def reparameterize(mu: Tensor, rho: Tensor, eps: np.ndarray) -> Tensor:
    """w = mu + softplus(rho) * eps; gradients reach mu with coefficient 1
    and rho with coefficient eps * sigmoid(rho)."""
    return mu + ad.softplus(rho) * Tensor(np.asarray(eps, dtype=mu.data.dtype))


def sample_weights(vp: VariationalParameter, rng: np.random.Generator) -> Tensor:
    """Draw one weight tensor w = mu + softplus(rho) * eps with eps ~ N(0, I).

    The same eps multiplies the whole tensor draw, so within one forward
    pass every batch element sees the same weights.
    """
    eps = rng.standard_normal(vp.shape).astype(vp.mu.data.dtype)
    return reparameterize(vp.mu, vp.rho, eps)


def kl_to_prior(vp: VariationalParameter, prior: PriorSpec) -> Tensor:
    """Closed-form KL(N(mu, sigma^2) || N(m, s^2)) summed over all weights.

    Per weight: ln(s/sigma) + (sigma^2 + (mu - m)^2) / (2 s^2) - 1/2.
    Always >= 0, zero iff posterior equals prior. Returns a scalar tensor
    so the value stays differentiable w.r.t. mu and rho.
    """
    sigma = vp.sigma()
    s2 = float(prior.std) ** 2
    log_s = math.log(prior.std)
    centered = vp.mu - float(prior.mean)
    per_weight = (log_s - ad.log(sigma)) + (sigma * sigma + centered * centered) * (0.5 / s2) - 0.5
    return per_weight.sum()


class _VariationalConvBase:
    """Shared machinery of Bayesian (transposed) 3D convolutions."""

    transposed = False

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel,
        stride=(1, 1, 1),
        padding=(0, 0, 0),
        prior: PriorSpec = PriorSpec(),
        sigma0: float = 0.05,
        mu_std: float = 0.05,
        rng: np.random.Generator | None = None,
        frozen: bool = False,
    ):
        rng = rng if rng is not None else np.random.default_rng()
        kernel = tuple(kernel)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = tuple(stride)
        self.padding = tuple(padding)
        self.prior = prior
        self.frozen = frozen
        fan_in = in_channels * int(np.prod(kernel))
        wshape = (
            (in_channels, out_channels, *kernel) if self.transposed else (out_channels, in_channels, *kernel)
        )
        self.weight = VariationalParameter.initialized(wshape, rng, mu_std=mu_std, sigma0=sigma0, fan_in=fan_in)
        self.bias = VariationalParameter(
            np.zeros(out_channels, dtype=np.float32),
            np.full(out_channels, rho_for_sigma(sigma0), dtype=np.float32),
        )

    def _conv(self, x, w, b):
        if self.transposed:
            return ad.conv_transpose3d(x, w, b, stride=self.stride, padding=self.padding)
        return ad.conv3d(x, w, b, stride=self.stride, padding=self.padding)

    def forward(self, x, rng: np.random.Generator | None = None, frozen: bool | None = None) -> Tensor:
        """One forward pass; samples fresh weights unless frozen.

        Frozen evaluation uses the posterior means exactly. A sampling pass
        needs an rng; each call consumes fresh draws (weights are never
        cached across passes).
        """
        frozen = self.frozen if frozen is None else (frozen or self.frozen)
        if frozen:
            return self._conv(x, self.weight.mu, self.bias.mu)
        if rng is None:
            raise ConfigError("sampling forward pass requires an rng; freeze the layer for deterministic use")
        w = sample_weights(self.weight, rng)
        b = sample_weights(self.bias, rng)
        return self._conv(x, w, b)

    __call__ = forward

    def kl(self) -> Tensor:
        """KL of weight and bias posteriors to this layer's prior."""
        return kl_to_prior(self.weight, self.prior) + kl_to_prior(self.bias, self.prior)

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}.weight.mu", self.weight.mu, True
        yield f"{prefix}.weight.rho", self.weight.rho, False
        yield f"{prefix}.bias.mu", self.bias.mu, True
        yield f"{prefix}.bias.rho", self.bias.rho, False


class BayesConv3d(_VariationalConvBase):
    """3D convolution with a variational Gaussian posterior over kernel and bias."""

    transposed = False


class BayesConvTranspose3d(_VariationalConvBase):
    """Transposed 3D convolution with a variational Gaussian posterior."""

    transposed = True
