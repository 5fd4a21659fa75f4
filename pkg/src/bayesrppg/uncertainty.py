"""Monte-Carlo predictive statistics and the uncertainty benchmark suite.

A prediction for one clip is the set of heart rates extracted from T_mc
stochastic forward passes; their mean is the point estimate and their
population variance (divisor T_mc) the uncertainty scalar. The benchmark
sweeps input-noise levels and reports accuracy metrics, the Spearman rank
correlation between uncertainty and absolute error, and normal-quantile
confidence-interval coverage/width per level.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import stdtr

from . import autodiff as ad
from .errors import ConfigError, UndefinedCorrelationError
from .network import RfBayesPhysNet
from .signal import BandSpec, BvpTrace, add_noise, butterworth_bandpass, estimate_hr

# z quantiles for the supported two-sided confidence levels
Z_TABLE = {0.90: 1.6449, 0.95: 1.96, 0.99: 2.5758}

# rng stream tags for the benchmark's independent noise draws
_NOISE = 404


@dataclass
class McPrediction:
    """Monte-Carlo prediction for one clip."""

    per_pass_bvp: np.ndarray  # (t_mc, T) filtered waveforms
    per_pass_hr: np.ndarray  # (t_mc,) beats per minute
    hr_mean: float
    hr_variance: float  # population variance, divisor t_mc
    t_mc: int

    def __post_init__(self):
        if self.t_mc < 1:
            raise ConfigError(f"t_mc must be >= 1, got {self.t_mc}")
        if self.hr_variance < 0:
            raise ConfigError(f"hr_variance must be >= 0, got {self.hr_variance}")

    @property
    def hr_std(self) -> float:
        return math.sqrt(self.hr_variance)


@dataclass
class SpearmanResult:
    rho: float
    p_value: float
    n: int


@dataclass
class UncertaintyReport:
    """Benchmark results per noise level (parallel lists)."""

    noise_levels: list
    accuracy: list  # dicts: std, mae, rmse, mer, pearson_r
    spearman: list  # SpearmanResult or None when undefined
    coverage: list  # dicts: coverage_rate, mean_ci_width
    scatter: list = field(default_factory=list)  # (noise_level, sample_id, uncertainty, abs_error)

    def to_json_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None  # undefined metric (e.g. correlation of a constant)
            return v

        return {
            "noise_levels": self.noise_levels,
            "accuracy": [{k: clean(v) for k, v in acc.items()} for acc in self.accuracy],
            "spearman": [
                None if s is None else {"rho": s.rho, "p_value": s.p_value, "n": s.n} for s in self.spearman
            ],
            "coverage": self.coverage,
        }

    def format_text(self) -> str:
        lines = []
        lines.append("Accuracy per noise level")
        lines.append(f"{'noise':>7} {'Std':>9} {'MAE':>9} {'RMSE':>9} {'MER%':>9} {'r':>7}")
        for lvl, acc in zip(self.noise_levels, self.accuracy):
            lines.append(
                f"{lvl:>7.3g} {acc['std']:>9.4f} {acc['mae']:>9.4f} {acc['rmse']:>9.4f} "
                f"{acc['mer']:>9.4f} {acc['pearson_r']:>7.4f}"
            )
        lines.append("")
        lines.append("Uncertainty-error rank correlation")
        lines.append(f"{'noise':>7} {'spearman_rho':>13} {'p_value':>10}")
        for lvl, s in zip(self.noise_levels, self.spearman):
            if s is None:
                lines.append(f"{lvl:>7.3g} {'undefined':>13} {'-':>10}")
            else:
                lines.append(f"{lvl:>7.3g} {s.rho:>13.4f} {s.p_value:>10.4g}")
        lines.append("")
        lines.append("95% confidence intervals")
        lines.append(f"{'noise':>7} {'coverage':>9} {'width_bpm':>10}")
        for lvl, cov in zip(self.noise_levels, self.coverage):
            lines.append(f"{lvl:>7.3g} {cov['coverage_rate']:>9.4f} {cov['mean_ci_width']:>10.4f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(self.to_json_dict(), indent=2))
        (out_dir / "report.txt").write_text(self.format_text())
        with open(out_dir / "scatter.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["noise_level", "sample_id", "uncertainty", "abs_error_bpm"])
            writer.writerows(self.scatter)


def mc_predict(
    net: RfBayesPhysNet,
    clip: np.ndarray,
    t_mc: int = 20,
    seed: int = 0,
    band: BandSpec = BandSpec(),
    fs: float = 30.0,
) -> McPrediction:
    """Run t_mc stochastic forward passes on one clip and summarize the HRs.

    Pass k draws its weights from a stream keyed (seed, k), so results are
    independent of evaluation order and shared across clips evaluated with
    the same seed. Each output waveform is bandpass-filtered before HR
    extraction. Identical per-pass HRs short-circuit to variance exactly 0.
    """
    if t_mc < 1:
        raise ConfigError(f"t_mc must be >= 1, got {t_mc}")
    clip = np.asarray(clip, dtype=np.float32)
    traces = []
    hrs = np.empty(t_mc, dtype=np.float64)
    cache: dict = {}
    with ad.no_grad():
        for k in range(t_mc):
            rng = np.random.default_rng([seed, k])
            bvp = net.forward(clip, rng=rng, mode="sample", training=False, cache=cache).data[0]
            filtered = butterworth_bandpass(BvpTrace(bvp, fs), band)
            traces.append(filtered.samples)
            hrs[k] = estimate_hr(filtered, band)
    if np.all(hrs == hrs[0]):
        # degenerate (e.g. fully frozen) network: the estimator collapses exactly
        hr_mean, hr_var = float(hrs[0]), 0.0
    else:
        hr_mean = float(np.mean(hrs))
        hr_var = float(np.mean((hrs - hr_mean) ** 2))
    return McPrediction(
        per_pass_bvp=np.stack(traces),
        per_pass_hr=hrs,
        hr_mean=hr_mean,
        hr_variance=hr_var,
        t_mc=t_mc,
    )


def accuracy_metrics(pred_hr, true_hr) -> dict:
    """Std / MAE / RMSE / MER% / Pearson r of predicted vs true heart rates.

    Std is the n-1 standard deviation of the signed errors; MER is the mean
    of |error|/true in percent and requires all-nonzero truths.
    """
    pred = np.asarray(pred_hr, dtype=np.float64)
    true = np.asarray(true_hr, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ConfigError(f"pred/true must be equal-length vectors, got {pred.shape} and {true.shape}")
    if pred.size < 2:
        raise ConfigError("accuracy metrics need n >= 2")
    if np.any(true == 0):
        raise ConfigError("MER undefined: true heart rate contains 0")
    err = pred - true
    if np.ptp(pred) == 0 or np.ptp(true) == 0:
        r = float("nan")
    else:
        r = float(np.corrcoef(pred, true)[0, 1])
    return {
        "std": float(np.std(err, ddof=1)),
        "mae": float(np.mean(np.abs(err))),
        "rmse": float(np.sqrt(np.mean(err**2))),
        "mer": float(np.mean(np.abs(err) / true) * 100.0),
        "pearson_r": r,
    }


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the average of their positions."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(uncertainty, abs_error) -> SpearmanResult:
    """Spearman rank correlation with average-rank ties and a t-test p-value.

    rho is the Pearson correlation of the rank vectors (identical to the
    classic 1 - 6 sum d^2 / (n(n^2-1)) form when no ties occur); the
    two-sided p-value uses t = rho sqrt((n-2)/(1-rho^2)) against the
    Student-t distribution with n-2 degrees of freedom.
    """
    x = np.asarray(uncertainty, dtype=np.float64)
    y = np.asarray(abs_error, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ConfigError(f"inputs must be equal-length vectors, got {x.shape} and {y.shape}")
    n = x.size
    if n < 3:
        raise ConfigError(f"spearman needs n >= 3, got {n}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedCorrelationError("spearman undefined: an input vector is constant")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    if np.array_equal(rx, ry):
        rho = 1.0  # identical orderings: exactly +1 regardless of rounding
    elif np.array_equal(rx + ry, np.full(n, n + 1.0)):
        rho = -1.0  # exactly reversed orderings
    else:
        cx = rx - rx.mean()
        cy = ry - ry.mean()
        rho = float((cx * cy).sum() / math.sqrt((cx * cx).sum() * (cy * cy).sum()))
        rho = max(-1.0, min(1.0, rho))
    if abs(rho) == 1.0:
        p = 0.0
    else:
        t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
        p = 2.0 * float(stdtr(n - 2, -abs(t)))
    return SpearmanResult(rho=rho, p_value=p, n=n)


def ci_coverage(predictions, true_hr, confidence: float = 0.95):
    """Normal-quantile interval coverage and mean width over samples.

    Bounds are mean +- z * sqrt(variance); a truth exactly on a bound
    counts as covered. Only the tabulated confidence levels are supported.
    """
    if confidence not in Z_TABLE:
        raise ConfigError(f"unsupported confidence {confidence}; choose from {sorted(Z_TABLE)}")
    z = Z_TABLE[confidence]
    true = np.asarray(true_hr, dtype=np.float64)
    if len(predictions) != true.size or true.size < 1:
        raise ConfigError("need one true HR per prediction, n >= 1")
    means = np.array([p.hr_mean for p in predictions])
    stds = np.array([p.hr_std for p in predictions])
    lower = means - z * stds
    upper = means + z * stds
    covered = (lower <= true) & (true <= upper)
    return float(np.mean(covered)), float(np.mean(2.0 * z * stds))


def _true_hr_of(record, band: BandSpec) -> float:
    if getattr(record, "hr_bpm", None) is not None:
        return float(record.hr_bpm)
    bvp = record.load_bvp() if hasattr(record, "load_bvp") else record[1]
    return estimate_hr(bvp, band)


def run_uncertainty_benchmark(
    net: RfBayesPhysNet,
    records,
    noise_levels=(0.0, 0.01, 0.05, 0.1),
    t_mc: int = 20,
    seed: int = 0,
    confidence: float = 0.95,
    band: BandSpec = BandSpec(),
    threads: int = 1,
) -> UncertaintyReport:
    """Noise-robustness sweep over a test set.

    Per level: perturb each clip once (stream keyed by level and record),
    run mc_predict, then aggregate accuracy, the Spearman correlation of
    hr_variance against |hr_mean - true|, and interval coverage. A level
    where every variance is zero reports a null Spearman entry. Scatter
    rows (one per clip and level) feed the uncertainty-vs-error plot.
    """
    if not records:
        raise ConfigError("benchmark needs a non-empty test set")
    noise_levels = [float(v) for v in noise_levels]
    true = np.array([_true_hr_of(rec, band) for rec in records])
    accuracy, spearman_rows, coverage_rows, scatter = [], [], [], []

    def evaluate(args):
        li, ri, record = args
        clip = record.load_clip() if hasattr(record, "load_clip") else np.asarray(record[0])
        fs = getattr(record, "fs", 30.0)
        noisy = add_noise(clip, noise_levels[li], np.random.default_rng([seed, _NOISE, li, ri]))
        return mc_predict(net, noisy, t_mc=t_mc, seed=seed, band=band, fs=fs)

    for li, level in enumerate(noise_levels):
        tasks = [(li, ri, rec) for ri, rec in enumerate(records)]
        if threads > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=threads) as pool:
                preds = list(pool.map(evaluate, tasks))
        else:
            preds = [evaluate(t) for t in tasks]
        means = np.array([p.hr_mean for p in preds])
        variances = np.array([p.hr_variance for p in preds])
        abs_err = np.abs(means - true)
        accuracy.append(accuracy_metrics(means, true))
        if len(records) < 3:
            spearman_rows.append(None)  # rank correlation needs n >= 3
        else:
            try:
                spearman_rows.append(spearman(variances, abs_err))
            except UndefinedCorrelationError:
                spearman_rows.append(None)
        cov_rate, width = ci_coverage(preds, true, confidence)
        coverage_rows.append({"coverage_rate": cov_rate, "mean_ci_width": width})
        for ri, (p, e) in enumerate(zip(preds, abs_err)):
            scatter.append((level, ri, p.hr_variance, float(e)))

    return UncertaintyReport(
        noise_levels=noise_levels,
        accuracy=accuracy,
        spearman=spearman_rows,
        coverage=coverage_rows,
        scatter=scatter,
    )
