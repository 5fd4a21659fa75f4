"""Training loop: AdamW with decoupled decay, cosine schedule, checkpointing.

Every random choice (shuffling, flip augmentation, weight sampling) is
drawn from a generator keyed by (seed, purpose, epoch, step), so a run is
bitwise reproducible and a checkpoint resume continues the exact same
trajectory in reference mode.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptDatasetError, TrainingError
from .losses import LossConfig, total_loss
from .network import NetConfig, RfBayesPhysNet, build_network
from .bayes import PriorSpec
from .signal import BvpTrace

CHECKPOINT_MAGIC = b"RFBP"
CHECKPOINT_VERSION = 1

# rng stream tags; distinct purposes must never share a stream
_SHUFFLE, _FLIP, _WEIGHTS = 101, 202, 303


@dataclass
class TrainConfig:
    """Optimization recipe (defaults follow the training protocol)."""

    lr: float = 2e-4
    weight_decay: float = 5e-5
    batch_size: int = 4
    epochs: int = 50
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    """lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def adamw_step(params, grads, state, lr_t, *, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8, decay_mask=None):
    """One AdamW update, in place.

    Decoupled decay shrinks each decaying parameter by lr_t*weight_decay
    before the bias-corrected Adam step. ``state`` holds "step" plus "m"
    and "v" moment lists aligned with ``params``; it is created on first
    use. Raises on non-finite gradients.
    """
    if decay_mask is None:
        decay_mask = [True] * len(params)
    if not state:
        state["step"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    state["step"] += 1
    t = state["step"]
    b1, b2 = betas
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {i}; aborting step")
        if decay_mask[i] and weight_decay != 0.0:
            p *= 1.0 - lr_t * weight_decay
        m, v = state["m"][i], state["v"][i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params


class AdamW:
    """Optimizer bound to a network's named parameters."""

    def __init__(self, named_params, lr: float, weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.entries = [(name, tensor, decay) for name, tensor, decay in named_params]
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state: dict = {}

    def step(self, lr_t: float):
        params, grads, mask, names = [], [], [], []
        for name, tensor, decay in self.entries:
            params.append(tensor.data)
            grads.append(tensor.grad)
            mask.append(decay)
            names.append(name)
        for name, g in zip(names, grads):
            if g is not None and not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in parameter '{name}'; aborting step")
        adamw_step(
            params, grads, self.state, lr_t, weight_decay=self.weight_decay, betas=self.betas, eps=self.eps, decay_mask=mask
        )

    # moment access for checkpointing, keyed by parameter name
    def moments(self):
        if not self.state:
            return {}, {}, 0
        m = {name: self.state["m"][i] for i, (name, _, _) in enumerate(self.entries)}
        v = {name: self.state["v"][i] for i, (name, _, _) in enumerate(self.entries)}
        return m, v, self.state["step"]

    def load_moments(self, m: dict, v: dict, step: int):
        self.state = {
            "step": step,
            "m": [m[name].copy() for name, _, _ in self.entries],
            "v": [v[name].copy() for name, _, _ in self.entries],
        }


# -- config (de)serialization ------------------------------------------------------


def net_config_to_dict(cfg: NetConfig) -> dict:
    return {
        "input_shape": list(cfg.input_shape),
        "stem_channels": cfg.stem_channels,
        "encoder_channels": list(cfg.encoder_channels),
        "kernel": list(cfg.kernel),
        "bayesian_layers": sorted(cfg.bayesian_layers),
        "decoder_temporal_strides": list(cfg.decoder_temporal_strides),
        "prior": {"mean": cfg.prior.mean, "std": cfg.prior.std},
        "sigma0": cfg.sigma0,
    }


def net_config_from_dict(d: dict) -> NetConfig:
    d = dict(d)
    prior = d.pop("prior", None)
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    if "bayesian_layers" in kwargs:
        kwargs["bayesian_layers"] = frozenset(kwargs["bayesian_layers"])
    if prior is not None:
        kwargs["prior"] = PriorSpec(**prior)
    return NetConfig(**kwargs)


def loss_config_to_dict(cfg: LossConfig) -> dict:
    return {
        "lambda": cfg.lambda_,
        "beta": cfg.beta,
        "kl_normalization": cfg.kl_normalization,
        "snr_clip_db": cfg.snr_clip_db,
        "snr_eps": cfg.snr_eps,
    }


def loss_config_from_dict(d: dict) -> LossConfig:
    d = dict(d)
    if "lambda" in d:
        d["lambda_"] = d.pop("lambda")
    return LossConfig(**d)


def train_config_to_dict(cfg: TrainConfig) -> dict:
    return {
        "lr": cfg.lr,
        "weight_decay": cfg.weight_decay,
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
        "betas": list(cfg.betas),
        "adam_eps": cfg.adam_eps,
        "seed": cfg.seed,
        "loss": loss_config_to_dict(cfg.loss),
    }


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if "loss" in d:
        d["loss"] = loss_config_from_dict(d["loss"])
    if "betas" in d:
        d["betas"] = tuple(d["betas"])
    return TrainConfig(**d)


# -- checkpoint file format -----------------------------------------------------------
#
# magic "RFBP" | u32 version | u64 json length | json metadata | raw
# little-endian float32 payloads in the order the metadata declares.


@dataclass
class Checkpoint:
    """Full training state: parameters, norm stats, optimizer moments, position."""

    net_config: NetConfig
    train_config: TrainConfig
    epoch: int  # next epoch to run
    global_step: int
    adam_step: int
    params: dict  # name -> float32 array
    buffers: dict  # name -> float32 array (norm running stats)
    opt_m: dict
    opt_v: dict

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        sections = (
            [("param", k, v) for k, v in self.params.items()]
            + [("buffer", k, v) for k, v in self.buffers.items()]
            + [("opt_m", k, v) for k, v in self.opt_m.items()]
            + [("opt_v", k, v) for k, v in self.opt_v.items()]
        )
        meta = {
            "epoch": self.epoch,
            "global_step": self.global_step,
            "adam_step": self.adam_step,
            "net_config": net_config_to_dict(self.net_config),
            "train_config": train_config_to_dict(self.train_config),
            "tensors": [{"kind": kind, "name": name, "shape": list(arr.shape)} for kind, name, arr in sections],
        }
        blob = json.dumps(meta).encode("utf-8")
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", CHECKPOINT_VERSION))
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            for _, _, arr in sections:
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint: {path}")
        raw = path.read_bytes()
        if raw[:4] != CHECKPOINT_MAGIC:
            raise CorruptDatasetError(f"{path}: bad checkpoint magic {raw[:4]!r}")
        (version,) = struct.unpack("<I", raw[4:8])
        if version != CHECKPOINT_VERSION:
            raise CorruptDatasetError(f"{path}: unsupported checkpoint version {version}")
        (jlen,) = struct.unpack("<Q", raw[8:16])
        meta = json.loads(raw[16 : 16 + jlen].decode("utf-8"))
        offset = 16 + jlen
        stores = {"param": {}, "buffer": {}, "opt_m": {}, "opt_v": {}}
        for entry in meta["tensors"]:
            n = int(np.prod(entry["shape"])) if entry["shape"] else 1
            end = offset + 4 * n
            if end > len(raw):
                raise CorruptDatasetError(f"{path}: truncated checkpoint payload")
            arr = np.frombuffer(raw[offset:end], dtype="<f4").reshape(entry["shape"]).copy()
            stores[entry["kind"]][entry["name"]] = arr
            offset = end
        if offset != len(raw):
            raise CorruptDatasetError(f"{path}: {len(raw) - offset} trailing bytes after declared payload")
        return cls(
            net_config=net_config_from_dict(meta["net_config"]),
            train_config=train_config_from_dict(meta["train_config"]),
            epoch=meta["epoch"],
            global_step=meta["global_step"],
            adam_step=meta["adam_step"],
            params=stores["param"],
            buffers=stores["buffer"],
            opt_m=stores["opt_m"],
            opt_v=stores["opt_v"],
        )

    def to_network(self) -> RfBayesPhysNet:
        """Materialize the network with this checkpoint's parameters."""
        net = build_network(self.net_config, seed=self.train_config.seed)
        restore_parameters(net, self.params, self.buffers)
        return net


def snapshot_parameters(net: RfBayesPhysNet):
    params = {name: t.data.copy() for name, t, _ in net.named_parameters()}
    buffers = {name: buf.copy() for name, buf in net.named_buffers()}
    return params, buffers


def restore_parameters(net: RfBayesPhysNet, params: dict, buffers: dict):
    for name, t, _ in net.named_parameters():
        if name not in params:
            raise CorruptDatasetError(f"checkpoint missing parameter '{name}'")
        if params[name].shape != t.data.shape:
            raise CorruptDatasetError(f"checkpoint parameter '{name}' has shape {params[name].shape}, expected {t.data.shape}")
        t.data[...] = params[name]
    for name, buf in net.named_buffers():
        if name not in buffers:
            raise CorruptDatasetError(f"checkpoint missing buffer '{name}'")
        buf[...] = buffers[name]


# -- data plumbing -----------------------------------------------------------------


def _materialize(records):
    """Accept DatasetRecord objects or (clip, bvp) pairs; return arrays."""
    clips, targets = [], []
    for rec in records:
        if hasattr(rec, "load_clip"):
            clip = rec.load_clip()
            bvp = rec.load_bvp()
        else:
            clip, bvp = rec
        clips.append(np.asarray(clip, dtype=np.float32))
        samples = bvp.samples if isinstance(bvp, BvpTrace) else np.asarray(bvp)
        targets.append(samples.astype(np.float32))
    return clips, targets


def train(
    net: RfBayesPhysNet,
    records,
    cfg: TrainConfig,
    *,
    ckpt_path=None,
    metrics_path=None,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
):
    """Run the epoch loop; returns the final Checkpoint.

    Writes a checkpoint after every epoch (so an aborted run keeps its last
    good state) and appends one metrics row per optimization step. With
    ``resume``, continues from the checkpoint's stored epoch; the caller
    must pass the checkpoint's own network. ``stop_after`` ends the run
    early after that absolute epoch index (schedule and seeding still
    follow ``cfg.epochs``), which is how an interrupted run is simulated
    or a long run split across invocations.
    """
    if not records:
        raise ConfigError("training needs a non-empty dataset")
    clips, targets = _materialize(records)
    n = len(clips)
    bs = cfg.batch_size
    m_batches = (n + bs - 1) // bs
    total_steps = cfg.epochs * m_batches
    loss_cfg = dataclasses.replace(cfg.loss, kl_normalization=1.0 / m_batches)

    opt = AdamW([(a, b, c) for a, b, c in net.named_parameters()], cfg.lr, cfg.weight_decay, cfg.betas, cfg.adam_eps)
    start_epoch = 0
    global_step = 0
    if resume is not None:
        start_epoch = resume.epoch
        global_step = resume.global_step
        if resume.opt_m:
            opt.load_moments(resume.opt_m, resume.opt_v, resume.adam_step)
    if start_epoch >= cfg.epochs:
        raise ConfigError(f"checkpoint already at epoch {start_epoch} of {cfg.epochs}")
    end_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)

    metrics_file = None
    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        new_file = not metrics_path.exists() or start_epoch == 0
        metrics_file = open(metrics_path, "w" if new_file else "a")
        if new_file:
            metrics_file.write("epoch,step,lr,loss,pearson_term,snr_term,kl_term\n")

    ckpt = None
    try:
        for epoch in range(start_epoch, end_epoch):
            order = np.random.default_rng([cfg.seed, _SHUFFLE, epoch]).permutation(n)
            flips = np.random.default_rng([cfg.seed, _FLIP, epoch]).random(n) < 0.5
            for b in range(m_batches):
                idx = order[b * bs : (b + 1) * bs]
                batch = np.stack([clips[i][:, :, :, ::-1] if flips[i] else clips[i] for i in idx])
                target = np.stack([targets[i] for i in idx])
                rng = np.random.default_rng([cfg.seed, _WEIGHTS, epoch, b])
                pred = net.forward(batch, rng=rng, mode="sample", training=True)
                kl = net.kl_divergence()
                try:
                    loss, parts = total_loss(pred, target, kl, loss_cfg)
                except TrainingError as exc:
                    raise TrainingError(f"epoch {epoch} step {global_step}: {exc}") from exc
                net.zero_grad()
                loss.backward()
                lr_t = cosine_lr(global_step, total_steps, cfg.lr)
                opt.step(lr_t)
                if metrics_file is not None:
                    metrics_file.write(
                        f"{epoch},{global_step},{lr_t:.8g},{parts['loss']:.8g},"
                        f"{parts['pearson_term']:.8g},{parts['snr_term']:.8g},{parts['kl_term']:.8g}\n"
                    )
                global_step += 1
            params, buffers = snapshot_parameters(net)
            m, v, adam_step = opt.moments()
            ckpt = Checkpoint(
                net_config=net.cfg,
                train_config=cfg,
                epoch=epoch + 1,
                global_step=global_step,
                adam_step=adam_step,
                params=params,
                buffers=buffers,
                opt_m={k: a.copy() for k, a in m.items()},
                opt_v={k: a.copy() for k, a in v.items()},
            )
            if ckpt_path is not None:
                ckpt.save(ckpt_path)
            if metrics_file is not None:
                metrics_file.flush()
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return ckpt
