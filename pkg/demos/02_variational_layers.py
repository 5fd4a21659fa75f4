"""Variational Gaussian convolutions: sampling, KL, freezing.

Run: python demos/02_variational_layers.py
"""

import numpy as np

from bayesrppg import autodiff as ad
from bayesrppg.bayes import BayesConv3d, PriorSpec, VariationalParameter, kl_to_prior, rho_for_sigma, sample_weights

rng = np.random.default_rng(0)

# ---------------------------------------------------------------------------
# A variational parameter keeps a Gaussian posterior per weight. Sampling is
# reparameterized (w = mu + softplus(rho) * eps) so gradients pass through.
# ---------------------------------------------------------------------------
vp = VariationalParameter(mu=np.full(5, 0.8), rho=np.full(5, rho_for_sigma(0.1)))
for draw in range(3):
    w = sample_weights(vp, np.random.default_rng(draw))
    print(f"draw {draw}: {np.array2string(w.data, precision=3)}")

# The KL to the prior has a closed form and is the Bayesian regularizer.
prior = PriorSpec(mean=0.0, std=0.1)
print(f"KL(q || prior) = {float(kl_to_prior(vp, prior)):.3f}")

tight = VariationalParameter(mu=np.zeros(5), rho=np.full(5, rho_for_sigma(0.1)))
print(f"KL at the prior itself = {float(kl_to_prior(tight, prior)):.3e}")

# ---------------------------------------------------------------------------
# A Bayesian convolution draws fresh weights every forward pass; freezing it
# evaluates the posterior mean and makes the layer deterministic.
# ---------------------------------------------------------------------------
layer = BayesConv3d(in_channels=1, out_channels=2, kernel=(3, 3, 3), padding=(1, 1, 1), rng=rng)
x = ad.Tensor(rng.random((1, 1, 4, 6, 6)).astype(np.float32))

a = layer(x, rng=np.random.default_rng(1)).data
b = layer(x, rng=np.random.default_rng(2)).data
print(f"two sampling passes differ by up to {np.abs(a - b).max():.4f}")

layer.frozen = True
c = layer(x).data
d = layer(x).data
print(f"frozen passes identical: {np.array_equal(c, d)}")
print(f"layer KL (weights + bias): {float(layer.kl()):.2f}")
