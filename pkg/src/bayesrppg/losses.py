"""Training objective: negative Pearson + SNR reward + weighted KL.

Per batch the loss is

    L = mean_i(1 - rho_i) - lambda * mean_i(SNR_i) + beta * norm * KL

where rho_i is the per-sample Pearson correlation between predicted and
true waveforms, SNR_i = 10 log10(||pred||^2 / ||pred - target||^2) clipped
to +-snr_clip_db, and norm is the minibatch ELBO weight (1/M for M batches
per epoch). High SNR is rewarded, i.e. subtracted from the minimized loss.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, TrainingError


@dataclass
class LossConfig:
    """Weights of the combined objective.

    ``lambda_`` scales the SNR reward and ``beta`` the KL regularizer
    (exposed as config keys ``loss.lambda`` and ``loss.beta``).
    ``kl_normalization`` defaults to 1/M once the trainer knows the batch
    count M.
    """

    lambda_: float = 0.05
    beta: float = 1.0
    kl_normalization: float = 1.0
    snr_clip_db: float = 20.0
    snr_eps: float = 1e-8

    def __post_init__(self):
        for name in ("lambda_", "beta", "kl_normalization", "snr_clip_db"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ConfigError(f"loss.{name} must be finite, got {v}")
        if self.lambda_ < 0 or self.beta < 0:
            raise ConfigError("loss weights lambda and beta must be >= 0")
        if not self.snr_eps > 0:
            raise ConfigError(f"snr_eps must be > 0, got {self.snr_eps}")


_VAR_FLOOR = 1e-8  # keeps the correlation denominator away from zero


def _as_2d(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.data.ndim != 2 or t.data.shape[1] < 2:
        raise ConfigError(f"expected (N, T) with T >= 2, got shape {t.data.shape}")
    return t


def pearson_loss(pred, target) -> Tensor:
    """(1/N) sum_i (1 - rho_i), rho_i the per-sample Pearson correlation.

    Scale/shift invariant in either argument; a constant prediction or
    target drives rho to 0 through the variance floor, so such samples
    contribute exactly 1.0 (constant targets additionally warn: they carry
    no supervision).
    """
    pred = _as_2d(pred)
    target = _as_2d(target)
    if pred.data.shape != target.data.shape:
        raise ConfigError(f"pred shape {pred.data.shape} != target shape {target.data.shape}")
    if np.any(np.ptp(target.data, axis=1) == 0):
        warnings.warn("constant target waveform in batch; sample contributes loss 1.0", stacklevel=2)

    pc = pred - pred.mean(axis=1, keepdims=True)
    tc = target - target.mean(axis=1, keepdims=True)
    num = (pc * tc).sum(axis=1)
    den = ad.sqrt((pc * pc).sum(axis=1) + _VAR_FLOOR) * ad.sqrt((tc * tc).sum(axis=1) + _VAR_FLOOR)
    rho = num / den
    return (1.0 - rho).mean()


def snr_term(pred, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """Batch-mean signal-to-noise ratio of the prediction, in dB, clipped.

    Per sample: 10 log10(||pred||^2 / (||pred - target||^2 + eps)), with
    the eps guard on both powers so silent predictions stay finite; values
    are clipped to [-snr_clip_db, +snr_clip_db].
    """
    pred = _as_2d(pred)
    target = _as_2d(target)
    if pred.data.shape != target.data.shape:
        raise ConfigError(f"pred shape {pred.data.shape} != target shape {target.data.shape}")
    signal_power = (pred * pred).sum(axis=1) + cfg.snr_eps
    err = pred - target
    noise_power = (err * err).sum(axis=1) + cfg.snr_eps
    snr_db = (ad.log(signal_power) - ad.log(noise_power)) * (10.0 / math.log(10.0))
    return ad.clamp(snr_db, -cfg.snr_clip_db, cfg.snr_clip_db).mean()


def total_loss(pred, target, model_kl, cfg: LossConfig = LossConfig()):
    """Combined objective and its components.

    Returns ``(loss, parts)`` where loss is a scalar tensor and parts maps
    component names to floats for logging. Raises with the offending
    component named if anything goes non-finite.
    """
    p_term = pearson_loss(pred, target)
    s_term = snr_term(pred, target, cfg)
    kl = model_kl if isinstance(model_kl, Tensor) else Tensor(np.asarray(model_kl, dtype=np.float32))
    if float(kl.data) < 0:
        raise TrainingError(f"model KL must be >= 0, got {float(kl.data)}")
    kl_term = kl * (cfg.beta * cfg.kl_normalization)
    loss = p_term - s_term * cfg.lambda_ + kl_term
    parts = {
        "pearson_term": float(p_term.data),
        "snr_term": float(s_term.data),
        "kl_term": float(kl_term.data),
        "loss": float(loss.data),
    }
    for name in ("pearson_term", "snr_term", "kl_term"):
        if not math.isfinite(parts[name]):
            raise TrainingError(f"loss component {name} is non-finite ({parts[name]})")
    return loss, parts
