"""Dual-branch 3D U-Net for pulse extraction from facial-patch video.

A raw branch (stem) and a temporal-difference branch each produce
spatially pooled feature maps; their channel concatenation feeds a
temporally strided encoder whose resolution a transposed-conv decoder
restores, ending in a 1x1x1 head that spatially averages to one waveform
sample per input frame. Any convolution can be swapped for a variational
Bayesian one by listing its name in the config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bayes import BayesConv3d, BayesConvTranspose3d, PriorSpec
from .errors import ConfigError, ShapeError

DEFAULT_BAYESIAN_LAYERS = frozenset({"enc2.conv", "dec1.tconv", "dec2.tconv", "head"})


@dataclass
class NetConfig:
    """Architecture description.

    ``encoder_channels[0]`` is the width of each branch before fusion (so
    the encoder input is twice that), and each later entry is one encoder
    stage's output width. The decoder mirrors the encoder's temporal
    strides so the output waveform length equals the input frame count.
    """

    input_shape: tuple = (3, 128, 32, 32)
    stem_channels: int = 16
    encoder_channels: tuple = (16, 32, 64)
    kernel: tuple = (3, 3, 3)
    bayesian_layers: frozenset = field(default_factory=lambda: DEFAULT_BAYESIAN_LAYERS)
    decoder_temporal_strides: tuple = (2, 2)
    prior: PriorSpec = field(default_factory=PriorSpec)
    sigma0: float = 0.05

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.encoder_channels = tuple(self.encoder_channels)
        self.kernel = tuple(self.kernel)
        self.decoder_temporal_strides = tuple(self.decoder_temporal_strides)
        self.bayesian_layers = frozenset(self.bayesian_layers)
        if len(self.input_shape) != 4 or self.input_shape[0] != 3:
            raise ConfigError(f"input_shape must be (3, T, H, W), got {self.input_shape}")
        if self.stem_channels != self.encoder_channels[0]:
            raise ConfigError(
                f"stem_channels ({self.stem_channels}) must equal encoder_channels[0] "
                f"({self.encoder_channels[0]}); both name the per-branch width"
            )
        if len(self.encoder_channels) - 1 != len(self.decoder_temporal_strides):
            raise ConfigError(
                f"{len(self.encoder_channels) - 1} encoder stages need exactly as many "
                f"decoder strides, got {len(self.decoder_temporal_strides)}"
            )
        _, t, h, w = self.input_shape
        t_factor = int(np.prod(self.decoder_temporal_strides))
        if t % t_factor != 0:
            raise ConfigError(f"T={t} must be divisible by the temporal stride product {t_factor}")
        if h % 2 or w % 2:
            raise ConfigError(f"spatial extents must be even for the stem pool, got {h}x{w}")
        unknown = self.bayesian_layers - set(self.layer_names())
        if unknown:
            raise ConfigError(f"unknown layer name(s) in bayesian_layers: {sorted(unknown)}")

    def layer_names(self) -> list:
        """Deterministic names of every convolutional layer, in forward order."""
        n_stages = len(self.encoder_channels) - 1
        names = ["stem.conv", "diff.stem.conv", "diff.block1.conv", "diff.block2.conv"]
        names += [f"enc{i + 1}.conv" for i in range(n_stages)]
        names += [f"dec{i + 1}.tconv" for i in range(n_stages)]
        names.append("head")
        return names


def temporal_difference(clip) -> Tensor:
    """Adjacent-frame differences along T, zero-padded to keep the length.

    D[t] = x[t+1] - x[t] for t < T-1 and D[T-1] = 0, so the per-pixel sum
    over t telescopes to x[T-1] - x[0].
    """
    x = clip if isinstance(clip, Tensor) else Tensor(clip)
    if x.data.ndim != 5:
        raise ShapeError(f"temporal_difference needs (N,C,T,H,W), got {x.data.shape}")
    t = x.data.shape[2]
    if t < 2:
        raise ShapeError(f"temporal_difference needs T >= 2, got T={t}")
    out = np.zeros_like(x.data)
    out[:, :, :-1] = x.data[:, :, 1:] - x.data[:, :, :-1]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :, : t - 1] -= g[:, :, : t - 1]
        gx[:, :, 1:t] += g[:, :, : t - 1]
        x._accumulate_owned(gx)

    return ad._make(out, (x,), backward)


def _init_weight(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    return (0.05 / math.sqrt(fan_in) * rng.standard_normal(shape)).astype(np.float32)


class Conv3d:
    """Deterministic 3D convolution layer."""

    def __init__(self, in_channels, out_channels, kernel, stride=(1, 1, 1), padding=(0, 0, 0), rng=None):
        rng = rng if rng is not None else np.random.default_rng()
        kernel = tuple(kernel)
        fan_in = in_channels * int(np.prod(kernel))
        self.weight = Tensor(_init_weight((out_channels, in_channels, *kernel), fan_in, rng), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=np.float32), requires_grad=True)
        self.stride = tuple(stride)
        self.padding = tuple(padding)

    def __call__(self, x, rng=None, frozen=None):
        return ad.conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def named_parameters(self, prefix=""):
        yield f"{prefix}.weight", self.weight, True
        yield f"{prefix}.bias", self.bias, True


class ConvTranspose3d:
    """Deterministic transposed 3D convolution layer."""

    def __init__(self, in_channels, out_channels, kernel, stride=(1, 1, 1), padding=(0, 0, 0), rng=None):
        rng = rng if rng is not None else np.random.default_rng()
        kernel = tuple(kernel)
        fan_in = in_channels * int(np.prod(kernel))
        self.weight = Tensor(_init_weight((in_channels, out_channels, *kernel), fan_in, rng), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=np.float32), requires_grad=True)
        self.stride = tuple(stride)
        self.padding = tuple(padding)

    def __call__(self, x, rng=None, frozen=None):
        return ad.conv_transpose3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def named_parameters(self, prefix=""):
        yield f"{prefix}.weight", self.weight, True
        yield f"{prefix}.bias", self.bias, True


class BatchNorm3d:
    """Per-channel batch normalization with running statistics."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x, training: bool):
        return ad.batch_norm3d(
            x,
            self.gamma,
            self.beta,
            eps=self.eps,
            training=training,
            running_mean=self.running_mean,
            running_var=self.running_var,
            momentum=self.momentum,
        )

    def named_parameters(self, prefix=""):
        yield f"{prefix}.gamma", self.gamma, False
        yield f"{prefix}.beta", self.beta, False

    def named_buffers(self, prefix=""):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


def _make_conv(name, cfg: NetConfig, in_ch, out_ch, kernel, stride, padding, rng, transposed=False):
    if name in cfg.bayesian_layers:
        cls = BayesConvTranspose3d if transposed else BayesConv3d
        return cls(in_ch, out_ch, kernel, stride=stride, padding=padding, prior=cfg.prior, sigma0=cfg.sigma0, rng=rng)
    cls = ConvTranspose3d if transposed else Conv3d
    return cls(in_ch, out_ch, kernel, stride=stride, padding=padding, rng=rng)


class RfBayesPhysNet:
    """Dual-branch spatiotemporal network emitting one BVP sample per frame."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        self.cfg = cfg
        k = cfg.kernel
        pad = tuple(kk // 2 for kk in k)
        ch = cfg.encoder_channels[0]

        self.stem_conv = _make_conv("stem.conv", cfg, 3, ch, k, (1, 1, 1), pad, rng)
        self.stem_bn = BatchNorm3d(ch)
        self.diff_stem_conv = _make_conv("diff.stem.conv", cfg, 3, ch, k, (1, 1, 1), pad, rng)
        self.diff_stem_bn = BatchNorm3d(ch)
        self.diff_blocks = []
        for i in (1, 2):
            conv = _make_conv(f"diff.block{i}.conv", cfg, ch, ch, k, (1, 1, 1), pad, rng)
            self.diff_blocks.append((conv, BatchNorm3d(ch)))

        self.enc = []
        in_ch = 2 * ch  # fusion concatenates the two branches
        for i, out_ch in enumerate(cfg.encoder_channels[1:]):
            ts = cfg.decoder_temporal_strides[len(cfg.decoder_temporal_strides) - 1 - i]
            conv = _make_conv(f"enc{i + 1}.conv", cfg, in_ch, out_ch, k, (ts, 1, 1), pad, rng)
            self.enc.append((conv, BatchNorm3d(out_ch)))
            in_ch = out_ch

        self.dec = []
        dec_channels = list(reversed(cfg.encoder_channels[:-1]))
        for i, (out_ch, ts) in enumerate(zip(dec_channels, cfg.decoder_temporal_strides)):
            # kernel (2s,1,1) with padding (s//2,0,0) upsamples T by exactly s
            tconv = _make_conv(
                f"dec{i + 1}.tconv", cfg, in_ch, out_ch, (2 * ts, 1, 1), (ts, 1, 1), (ts // 2, 0, 0), rng, transposed=True
            )
            self.dec.append((tconv, BatchNorm3d(out_ch)))
            in_ch = out_ch

        self.head = _make_conv("head", cfg, in_ch, 1, (1, 1, 1), (1, 1, 1), (0, 0, 0), rng)

        self._conv_layers = {"stem.conv": self.stem_conv, "diff.stem.conv": self.diff_stem_conv}
        for i, (conv, _) in enumerate(self.diff_blocks):
            self._conv_layers[f"diff.block{i + 1}.conv"] = conv
        for i, (conv, _) in enumerate(self.enc):
            self._conv_layers[f"enc{i + 1}.conv"] = conv
        for i, (tconv, _) in enumerate(self.dec):
            self._conv_layers[f"dec{i + 1}.tconv"] = tconv
        self._conv_layers["head"] = self.head

        self._bn_layers = {
            "stem.bn": self.stem_bn,
            "diff.stem.bn": self.diff_stem_bn,
            "diff.block1.bn": self.diff_blocks[0][1],
            "diff.block2.bn": self.diff_blocks[1][1],
        }
        for i, (_, bn) in enumerate(self.enc):
            self._bn_layers[f"enc{i + 1}.bn"] = bn
        for i, (_, bn) in enumerate(self.dec):
            self._bn_layers[f"dec{i + 1}.bn"] = bn

    # -- forward ------------------------------------------------------------

    def _is_stochastic(self, name: str, mode: str) -> bool:
        layer = self._conv_layers[name]
        return (
            mode == "sample"
            and isinstance(layer, (BayesConv3d, BayesConvTranspose3d))
            and not layer.frozen
        )

    def forward(
        self,
        clip,
        rng: np.random.Generator | None = None,
        mode: str = "sample",
        training: bool = False,
        cache: dict | None = None,
    ) -> Tensor:
        """Map a clip batch to BVP waveforms of shape (N, T).

        ``mode="sample"`` draws fresh weights for every unfrozen Bayesian
        layer (requires an rng); ``mode="frozen"`` evaluates every layer at
        its posterior mean, making the pass deterministic.

        ``cache`` (a caller-owned dict, one per fixed input clip) memoizes
        the deterministic prefix of the network across repeated inference
        passes: stages before the first sampling layer are bitwise
        identical every pass, so Monte-Carlo loops only recompute the
        stochastic tail. Only honored outside of training and with graph
        recording off.
        """
        if mode not in ("sample", "frozen"):
            raise ConfigError(f"forward mode must be 'sample' or 'frozen', got {mode!r}")
        x = clip if isinstance(clip, Tensor) else Tensor(clip)
        if x.data.ndim == 4:
            x = ad.reshape(x, (1, *x.data.shape))
        if x.data.ndim != 5 or tuple(x.data.shape[1:]) != self.cfg.input_shape:
            raise ShapeError(f"clip shape {x.data.shape} does not match configured input {self.cfg.input_shape}")
        frozen = mode == "frozen"
        use_cache = cache is not None and not training and not ad._grad_enabled and not x.requires_grad

        def conv(layer, h):
            return layer(h, rng=rng, frozen=True) if frozen else layer(h, rng=rng)

        deterministic_so_far = True

        def stage(key, layer_names, compute):
            nonlocal deterministic_so_far
            deterministic_so_far = deterministic_so_far and not any(
                self._is_stochastic(n, mode) for n in layer_names
            )
            if use_cache and deterministic_so_far:
                if key not in cache:
                    cache[key] = compute()
                return cache[key]
            return compute()

        def stem_stage():
            s = conv(self.stem_conv, x)
            s = ad.elu(self.stem_bn(s, training))
            return ad.maxpool3d(s, (1, 2, 2))

        def diff_stage():
            d = temporal_difference(x)
            d = conv(self.diff_stem_conv, d)
            d = ad.elu(self.diff_stem_bn(d, training))
            d = ad.maxpool3d(d, (1, 2, 2))
            for conv_layer, bn in self.diff_blocks:
                d = d + ad.elu(bn(conv(conv_layer, d), training))  # residual link
            return d

        s = stage("stem", ["stem.conv"], stem_stage)
        d = stage("diff", ["diff.stem.conv", "diff.block1.conv", "diff.block2.conv"], diff_stage)
        h = ad.concat([s, d], axis=1)
        for i, (conv_layer, bn) in enumerate(self.enc):
            h = stage(
                f"enc{i + 1}",
                [f"enc{i + 1}.conv"],
                lambda conv_layer=conv_layer, bn=bn, h=h: ad.elu(bn(conv(conv_layer, h), training)),
            )
        for i, (tconv, bn) in enumerate(self.dec):
            h = stage(
                f"dec{i + 1}",
                [f"dec{i + 1}.tconv"],
                lambda tconv=tconv, bn=bn, h=h: ad.elu(bn(conv(tconv, h), training)),
            )
        y = stage("head", ["head"], lambda h=h: conv(self.head, h))  # (N, 1, T, H', W')
        y = y.mean(axis=(3, 4))  # spatial global average
        return ad.reshape(y, (y.data.shape[0], y.data.shape[2]))

    __call__ = forward

    # -- parameter plumbing ----------------------------------------------------

    def named_parameters(self):
        """Yield (name, tensor, decay) for every trainable array."""
        for name, layer in self._conv_layers.items():
            yield from layer.named_parameters(prefix=name)
        for name, bn in self._bn_layers.items():
            yield from bn.named_parameters(prefix=name)

    def named_buffers(self):
        for name, bn in self._bn_layers.items():
            yield from bn.named_buffers(prefix=name)

    def parameter_count(self) -> int:
        return sum(t.data.size for _, t, _ in self.named_parameters())

    def bayesian_layer_items(self):
        for name, layer in self._conv_layers.items():
            if isinstance(layer, (BayesConv3d, BayesConvTranspose3d)):
                yield name, layer

    def freeze(self, frozen: bool = True):
        """Set every Bayesian layer's frozen flag; frozen layers forward mu."""
        for _, layer in self.bayesian_layer_items():
            layer.frozen = frozen

    def kl_divergence(self, include_frozen: bool = False) -> Tensor:
        """Summed KL of the Bayesian layers' posteriors to their priors.

        Frozen layers contribute nothing unless ``include_frozen`` is set
        (the "frozen-excluded" accounting mode).
        """
        total = None
        for _, layer in self.bayesian_layer_items():
            if layer.frozen and not include_frozen:
                continue
            term = layer.kl()
            total = term if total is None else total + term
        return total if total is not None else Tensor(np.float32(0.0))

    def zero_grad(self):
        for _, t, _ in self.named_parameters():
            t.grad = None


def build_network(cfg: NetConfig, seed: int | np.random.Generator = 0) -> RfBayesPhysNet:
    """Instantiate the network with deterministic, seeded initialization."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return RfBayesPhysNet(cfg, rng)
