"""Command-line pipeline: synthesize data, train, predict, benchmark.

Configuration is a strict JSON document (unknown keys are rejected) with
four optional sections: "net", "train", "loss", "eval". Command-line
flags override config values, and every command echoes the fully resolved
configuration into its output directory as effective_config.json.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import BayesRppgError, ConfigError
from .losses import LossConfig
from .network import NetConfig, build_network
from .synth import SynthSpec, generate_clip, load_dataset, write_dataset
from .trainer import (
    Checkpoint,
    TrainConfig,
    loss_config_from_dict,
    net_config_from_dict,
    net_config_to_dict,
    train,
    train_config_to_dict,
)
from .uncertainty import mc_predict, run_uncertainty_benchmark

_ALLOWED_KEYS = {
    "net": {
        "input_shape",
        "stem_channels",
        "encoder_channels",
        "kernel",
        "bayesian_layers",
        "decoder_temporal_strides",
        "prior",
        "sigma0",
    },
    "train": {"lr", "weight_decay", "batch_size", "epochs", "betas", "adam_eps", "seed"},
    "loss": {"lambda", "beta", "kl_normalization", "snr_clip_db", "snr_eps"},
    "eval": {"noise_levels", "t_mc", "seed", "confidence", "threads"},
}

_EVAL_DEFAULTS = {"noise_levels": [0.0, 0.01, 0.05, 0.1], "t_mc": 20, "seed": 0, "confidence": 0.95, "threads": 1}


class UsageError(Exception):
    """Raised for problems the user must fix in arguments or config (exit 2)."""


def load_run_config(path: str | None) -> dict:
    """Read and strictly validate the JSON config document."""
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config root must be a JSON object, got {type(doc).__name__}")
    unknown_sections = set(doc) - set(_ALLOWED_KEYS)
    if unknown_sections:
        raise UsageError(f"unknown config section(s): {sorted(unknown_sections)}")
    for section, payload in doc.items():
        if not isinstance(payload, dict):
            raise UsageError(f"config section '{section}' must be an object")
        unknown = set(payload) - _ALLOWED_KEYS[section]
        if unknown:
            raise UsageError(f"unknown key(s) in config section '{section}': {sorted(unknown)}")
        if section == "net" and "prior" in payload:
            extra = set(payload["prior"]) - {"mean", "std"}
            if extra:
                raise UsageError(f"unknown key(s) in config section 'net.prior': {sorted(extra)}")
    return doc


def resolve_configs(doc: dict):
    """Build typed configs from the validated document."""
    try:
        net_cfg = net_config_from_dict(doc.get("net", {})) if doc.get("net") else NetConfig()
        loss_cfg = loss_config_from_dict(doc.get("loss", {})) if doc.get("loss") else LossConfig()
        train_kwargs = dict(doc.get("train", {}))
        if "betas" in train_kwargs:
            train_kwargs["betas"] = tuple(train_kwargs["betas"])
        train_cfg = TrainConfig(loss=loss_cfg, **train_kwargs)
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    eval_cfg = dict(_EVAL_DEFAULTS)
    eval_cfg.update(doc.get("eval", {}))
    return net_cfg, train_cfg, eval_cfg


def effective_config_dict(net_cfg: NetConfig, train_cfg: TrainConfig, eval_cfg: dict) -> dict:
    d = train_config_to_dict(train_cfg)
    loss = d.pop("loss")
    return {"net": net_config_to_dict(net_cfg), "train": d, "loss": loss, "eval": eval_cfg}


def write_effective_config(out_dir: Path, net_cfg, train_cfg, eval_cfg):
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = effective_config_dict(net_cfg, train_cfg, eval_cfg)
    (out_dir / "effective_config.json").write_text(json.dumps(payload, indent=2))


# -- subcommands --------------------------------------------------------------


def cmd_synth(args) -> int:
    try:
        lo, hi = (float(v) for v in args.hr_range.split(":"))
    except ValueError:
        raise UsageError(f"--hr-range must be LO:HI, got {args.hr_range!r}")
    if not (40.0 <= lo <= hi <= 180.0):
        raise UsageError(f"--hr-range must satisfy 40 <= LO <= HI <= 180, got {lo}:{hi}")
    try:
        h, w = (int(v) for v in args.size.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size must be HxW, got {args.size!r}")

    rng = np.random.default_rng(args.seed)
    n = args.clips
    order = rng.permutation(n)
    n_train = int(round(0.7 * n))
    split = {int(i): ("train" if k < n_train else "test") for k, i in enumerate(order)}
    records = []
    for i in range(n):
        hr = float(rng.uniform(lo, hi)) if hi > lo else lo
        spec = SynthSpec(hr_bpm=hr, frames=args.frames, height=h, width=w, seed=args.seed * 100_000 + i)
        clip, bvp = generate_clip(spec)
        records.append((f"rec{i:04d}", clip, bvp, {"hr_bpm": hr, "split": split[i]}))
    write_dataset(records, args.out)
    print(f"wrote {n} records ({n_train} train / {n - n_train} test) to {args.out}")
    return 0


def cmd_train(args) -> int:
    doc = load_run_config(args.config)
    if args.from_ckpt:
        resume = Checkpoint.load(args.from_ckpt)
        net_cfg, train_cfg = resume.net_config, resume.train_config
        if args.config:
            print("note: resuming uses the checkpoint's stored configuration", file=sys.stderr)
        net = resume.to_network()
    else:
        resume = None
        net_cfg, train_cfg, _ = resolve_configs(doc)
        net = build_network(net_cfg, seed=train_cfg.seed)
    if args.epochs is not None:
        import dataclasses

        train_cfg = dataclasses.replace(train_cfg, epochs=args.epochs)
    records = [r for r in load_dataset(args.data) if r.split == "train"]
    if not records:
        raise ConfigError(f"dataset {args.data} has no train-split records")

    out = Path(args.out)
    out_dir = out.parent if out.suffix else out
    write_effective_config(out_dir, net_cfg, train_cfg, dict(_EVAL_DEFAULTS))
    metrics_path = args.metrics or (out_dir / "metrics.csv")
    ck = train(net, records, train_cfg, ckpt_path=out, metrics_path=metrics_path, resume=resume)
    last_epoch_rows = [
        line for line in Path(metrics_path).read_text().splitlines()[1:] if line.split(",")[0] == str(ck.epoch - 1)
    ]
    parts = last_epoch_rows[-1].split(",")
    print(
        f"finished epoch {ck.epoch - 1}: loss={float(parts[3]):.4f} "
        f"pearson={float(parts[4]):.4f} snr={float(parts[5]):.4f} kl={float(parts[6]):.4f}"
    )
    print(f"checkpoint: {out}")
    return 0


def cmd_eval(args) -> int:
    doc = load_run_config(args.config)
    net_cfg_doc, train_cfg_doc, eval_cfg = resolve_configs(doc)
    ck = Checkpoint.load(args.ckpt)
    net = ck.to_network()
    if args.noise is not None:
        eval_cfg["noise_levels"] = [float(v) for v in args.noise.split(",")]
    if args.mc is not None:
        eval_cfg["t_mc"] = args.mc
    if args.seed is not None:
        eval_cfg["seed"] = args.seed
    if args.threads is not None:
        eval_cfg["threads"] = args.threads
    if eval_cfg["t_mc"] < 2:
        print("warning: --mc 1 makes every variance 0; coverage degenerates", file=sys.stderr)
    records = [r for r in load_dataset(args.data) if r.split == "test"]
    if not records:
        raise ConfigError(f"dataset {args.data} has no test-split records")
    report = run_uncertainty_benchmark(
        net,
        records,
        noise_levels=eval_cfg["noise_levels"],
        t_mc=eval_cfg["t_mc"],
        seed=eval_cfg["seed"],
        confidence=eval_cfg["confidence"],
        threads=eval_cfg["threads"],
    )
    out_dir = Path(args.out)
    report.write(out_dir)
    write_effective_config(out_dir, ck.net_config, ck.train_config, eval_cfg)
    print(report.format_text())
    print(f"report written to {out_dir}")
    return 0


def cmd_predict(args) -> int:
    ck = Checkpoint.load(args.ckpt)
    net = ck.to_network()
    records = load_dataset(args.data)
    if args.split:
        records = [r for r in records if r.split == args.split]
    if not records:
        raise ConfigError(f"dataset {args.data} has no records for split {args.split!r}")
    print(f"{'record':>10} {'hr_mean':>9} {'hr_std':>8} {'true':>7}")
    for rec in records:
        pred = mc_predict(net, rec.load_clip(), t_mc=args.mc, seed=args.seed, fs=rec.fs)
        true = f"{rec.hr_bpm:.1f}" if rec.hr_bpm is not None else "-"
        print(f"{rec.record_id:>10} {pred.hr_mean:>9.2f} {pred.hr_std:>8.3f} {true:>7}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bayesrppg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic clip dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--clips", type=int, default=16)
    p.add_argument("--hr-range", default="50:150", help="heart-rate range LO:HI in bpm")
    p.add_argument("--frames", type=int, default=128)
    p.add_argument("--size", default="32x32", help="spatial extent HxW")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset's train split")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="JSON run configuration")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--from", dest="from_ckpt", default=None, help="resume from checkpoint")
    p.add_argument("--metrics", default=None, help="metrics CSV path (default: next to checkpoint)")
    p.add_argument("--epochs", type=int, default=None, help="override epoch count")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="run the accuracy/uncertainty benchmark on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--noise", default=None, help="comma-separated noise levels")
    p.add_argument("--mc", type=int, default=None, help="Monte-Carlo passes per clip")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None, help="per-clip evaluation parallelism (1 = reference)")
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="print MC heart-rate predictions per record")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--mc", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except BayesRppgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
