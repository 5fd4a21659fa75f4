"""Tour of the autodiff engine: video ops, backward passes, gradient checking.

Run: python demos/01_autodiff_and_gradients.py
"""

import numpy as np

from bayesrppg import autodiff as ad

rng = np.random.default_rng(0)

# ---------------------------------------------------------------------------
# Tensors record the operations applied to them; backward() fills .grad.
# ---------------------------------------------------------------------------
x = ad.Tensor(rng.standard_normal((1, 3, 8, 6, 6)), requires_grad=True, dtype=np.float64)
w = ad.Tensor(0.2 * rng.standard_normal((4, 3, 3, 3, 3)), requires_grad=True, dtype=np.float64)
b = ad.Tensor(np.zeros(4), requires_grad=True, dtype=np.float64)

y = ad.conv3d(x, w, b, stride=(1, 1, 1), padding=(1, 1, 1))
print("conv3d:", x.shape, "->", y.shape)

loss = (y * y).mean()
loss.backward()
print("gradient shapes:", x.grad.shape, w.grad.shape, b.grad.shape)

# ---------------------------------------------------------------------------
# Every differentiable op can be checked against central finite differences.
# grad_check projects the output with a fixed random vector, so one backward
# pass is compared against 2*numel forward evaluations.
# ---------------------------------------------------------------------------
report = ad.grad_check(
    lambda a, ww: ad.conv3d(a, ww, padding=(1, 1, 1)),
    [
        ad.Tensor(rng.standard_normal((1, 2, 4, 5, 5)), dtype=np.float64),
        ad.Tensor(0.3 * rng.standard_normal((3, 2, 3, 3, 3)), dtype=np.float64),
    ],
)
print(f"conv3d finite differences: max rel err {report.max_rel_err:.2e} (pass={report.passed})")

# Non-differentiable points are excluded explicitly and counted.
vals = np.array([0.0, -1.5, 2.0, -0.3])
report = ad.grad_check(lambda a: ad.elu(a), [ad.Tensor(vals, dtype=np.float64)], skip=[np.abs(vals) < 1e-9])
print(f"elu with kink skipped: checked {report.n_checked}, skipped {report.n_skipped}")

# ---------------------------------------------------------------------------
# Pooling, normalization, and the transposed convolution that restores the
# temporal resolution in the decoder.
# ---------------------------------------------------------------------------
clip = ad.Tensor(rng.random((2, 16, 8, 8, 8)).astype(np.float32))
pooled = ad.maxpool3d(clip, (1, 2, 2))
print("maxpool3d (1,2,2):", clip.shape, "->", pooled.shape)

up = ad.conv_transpose3d(
    ad.Tensor(rng.random((1, 8, 4, 4, 4)).astype(np.float32)),
    ad.Tensor(0.1 * rng.standard_normal((8, 4, 4, 1, 1)).astype(np.float32)),
    stride=(2, 1, 1),
    padding=(1, 0, 0),
)
print("conv_transpose3d doubles T:", up.shape)

with ad.no_grad():  # inference mode: no graph, no backward bookkeeping
    frozen = ad.conv3d(clip, ad.Tensor(rng.standard_normal((4, 16, 1, 1, 1)).astype(np.float32)))
print("no_grad output requires_grad:", frozen.requires_grad)
