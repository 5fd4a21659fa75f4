"""Small end-to-end run: train the network, then benchmark its uncertainty.

Uses a reduced spatial size so the whole script finishes in a few minutes;
the full desk-scale pipeline is the same code with the default NetConfig.

Run: python demos/04_train_and_quantify_uncertainty.py
"""

import numpy as np

from bayesrppg.losses import LossConfig
from bayesrppg.network import NetConfig, build_network
from bayesrppg.synth import SynthSpec, generate_clip
from bayesrppg.trainer import TrainConfig, train
from bayesrppg.uncertainty import mc_predict, run_uncertainty_benchmark


def make_records(n, seed0, frames=128, hw=12):
    rng = np.random.default_rng(seed0)
    recs = []
    for i in range(n):
        hr = float(rng.uniform(55.0, 145.0))
        spec = SynthSpec(hr_bpm=hr, frames=frames, height=hw, width=hw, seed=seed0 * 1000 + i)
        recs.append(generate_clip(spec))
    return recs


train_recs = make_records(24, seed0=1)
test_recs = make_records(8, seed0=2)

cfg = TrainConfig(epochs=8, batch_size=4, seed=0, loss=LossConfig(beta=0.05))
net = build_network(NetConfig(input_shape=(3, 128, 12, 12)), seed=cfg.seed)
print(f"parameters: {net.parameter_count()} "
      f"(bayesian layers: {sorted(dict(net.bayesian_layer_items()))})")

print("training 8 epochs on 24 clips ...")
train(net, train_recs, cfg, metrics_path="/tmp/demo_metrics.csv")

# Per-clip Monte-Carlo prediction: 20 stochastic passes -> mean and variance.
clip, bvp = test_recs[0]
pred = mc_predict(net, clip, t_mc=20, seed=3)
from bayesrppg.signal import estimate_hr

print(f"\none clip: true {estimate_hr(bvp):.1f} bpm, "
      f"predicted {pred.hr_mean:.1f} +- {1.96 * pred.hr_std:.1f} bpm (95% CI)")

# The benchmark sweeps noise levels and reports the three uncertainty views.
print("\nnoise sweep (this is the report the eval command writes):")
report = run_uncertainty_benchmark(net, test_recs, noise_levels=[0.0, 0.05], t_mc=20, seed=4)
print(report.format_text())
