"""Variational Bayesian toolkit for camera-based heart-rate estimation.

A numpy/scipy library built around four pieces: a small reverse-mode
autodiff engine with the 3D video operations a pulse-extraction network
needs, variational Gaussian convolution layers with closed-form KL
regularization, a dual-branch spatiotemporal network emitting one blood-
volume-pulse sample per frame, and a Monte-Carlo uncertainty benchmark
(rank correlation of uncertainty against error, interval coverage and
width under input noise).
"""

from . import autodiff, bayes, cli, losses, network, signal, synth, trainer, uncertainty
from .autodiff import Tensor, grad_check, no_grad
from .bayes import BayesConv3d, BayesConvTranspose3d, PriorSpec, VariationalParameter, kl_to_prior, sample_weights
from .losses import LossConfig, pearson_loss, snr_term, total_loss
from .network import NetConfig, RfBayesPhysNet, build_network, temporal_difference
from .signal import (
    BandSpec,
    BvpTrace,
    add_noise,
    butterworth_bandpass,
    cubic_spline_resample,
    estimate_hr,
    normalize_signal,
)
from .synth import DatasetRecord, SynthSpec, generate_clip, load_dataset, write_dataset
from .trainer import AdamW, Checkpoint, TrainConfig, adamw_step, cosine_lr, train
from .uncertainty import (
    McPrediction,
    SpearmanResult,
    UncertaintyReport,
    accuracy_metrics,
    ci_coverage,
    mc_predict,
    run_uncertainty_benchmark,
    spearman,
)

__version__ = "0.1.0"
