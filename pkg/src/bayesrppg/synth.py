"""Synthetic facial-patch clip generator and bit-exact dataset I/O.

Each clip embeds a known pulse waveform into pixel intensities: a
normalized fundamental-plus-second-harmonic BVP modulates the baseline
skin color through per-channel weights (green strongest), on top of a slow
illumination drift and frame-level motion jitter. Storage is raw float32
plus a JSON header; video codecs would destroy the milli-intensity pulse.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptDatasetError
from .signal import BvpTrace, normalize_signal

# Pulse visibility per color channel; green carries most of the
# blood-volume signal in skin reflectance.
DEFAULT_CHANNEL_WEIGHTS = (0.5, 1.0, 0.3)

DRIFT_FREQ_HZ = 0.05  # slow illumination wobble, far below the pulse band


@dataclass
class SynthSpec:
    """Recipe for one synthetic clip."""

    hr_bpm: float
    fs: float = 30.0
    frames: int = 128
    height: int = 32
    width: int = 32
    pulse_amplitude: float = 0.02
    baseline_rgb: tuple = (0.7, 0.55, 0.45)
    drift_amplitude: float = 0.01
    jitter_amplitude: float = 0.005
    channel_weights: tuple = DEFAULT_CHANNEL_WEIGHTS
    seed: int = 0

    def __post_init__(self):
        if not 40.0 <= self.hr_bpm <= 180.0:
            raise ConfigError(f"hr_bpm must lie in [40, 180], got {self.hr_bpm}")
        if self.hr_bpm / 60.0 >= self.fs / 2:
            raise ConfigError(f"pulse frequency {self.hr_bpm / 60.0} Hz is not below Nyquist")
        for name in ("pulse_amplitude", "drift_amplitude", "jitter_amplitude"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.frames < 2 or self.height < 1 or self.width < 1:
            raise ConfigError("clip extents must be positive (frames >= 2)")


@dataclass
class DatasetRecord:
    """One stored clip with its aligned ground truth."""

    record_id: str
    clip_path: Path
    bvp_path: Path
    fs: float
    hr_bpm: float | None = None
    split: str = "train"
    shape: tuple = field(default=None)

    def load_clip(self) -> np.ndarray:
        return _read_clip(self.clip_path)

    def load_bvp(self) -> BvpTrace:
        data = np.loadtxt(self.bvp_path, delimiter=",", skiprows=1)
        return BvpTrace(data[:, 1], self.fs)


def generate_clip(spec: SynthSpec) -> tuple[np.ndarray, BvpTrace]:
    """Build one clip (3, T, H, W) in [0, 1] and its aligned BVP in [-1, 1].

    BVP is the normalized sum of sin(2 pi f t) and a 0.3-amplitude second
    harmonic, f = hr_bpm / 60. Pixels are baseline + pulse_amplitude * BVP *
    channel weight + drift + per-frame jitter, clipped to [0, 1].
    """
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.frames) / spec.fs
    f = spec.hr_bpm / 60.0
    raw = np.sin(2 * np.pi * f * t) + 0.3 * np.sin(2 * np.pi * 2.0 * f * t)
    bvp = normalize_signal(raw)

    drift = spec.drift_amplitude * np.sin(2 * np.pi * DRIFT_FREQ_HZ * t)
    jitter = spec.jitter_amplitude * rng.standard_normal(spec.frames)
    temporal = bvp * spec.pulse_amplitude  # (T,)

    clip = np.empty((3, spec.frames, spec.height, spec.width), dtype=np.float32)
    for c in range(3):
        frame_value = spec.baseline_rgb[c] + spec.channel_weights[c] * temporal + drift + jitter
        clip[c] = frame_value[:, None, None]
    np.clip(clip, 0.0, 1.0, out=clip)
    return clip, BvpTrace(bvp, spec.fs)


# -- dataset storage -------------------------------------------------------------
#
# Layout: <root>/<record_id>/clip.f32 (raw little-endian float32, C-order
# [C,T,H,W]), clip.json header, bvp.csv (t_seconds,value), plus
# <root>/manifest.json listing record ids and their train/test split.


def _read_clip(path: Path) -> np.ndarray:
    path = Path(path)
    header_path = path.with_suffix(".json")
    if not path.exists():
        raise FileNotFoundError(f"missing clip payload: {path}")
    if not header_path.exists():
        raise FileNotFoundError(f"missing clip header: {header_path}")
    header = json.loads(header_path.read_text())
    shape = tuple(header["shape"])
    if header.get("dtype") != "f32":
        raise CorruptDatasetError(f"{header_path}: unsupported dtype {header.get('dtype')!r}")
    expected = int(np.prod(shape)) * 4
    payload = path.read_bytes()
    if len(payload) != expected:
        raise CorruptDatasetError(f"{path}: payload is {len(payload)} bytes, header declares {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def write_dataset(records: list[tuple[str, np.ndarray, BvpTrace, dict]], root) -> None:
    """Store (record_id, clip, bvp, metadata) tuples under ``root``.

    Metadata may carry ``hr_bpm`` and ``split``; everything else is copied
    into the clip header verbatim.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"records": []}
    for record_id, clip, bvp, meta in records:
        meta = dict(meta)
        rec_dir = root / record_id
        rec_dir.mkdir(parents=True, exist_ok=True)
        clip = np.ascontiguousarray(clip, dtype="<f4")
        (rec_dir / "clip.f32").write_bytes(clip.tobytes())
        header = {"shape": list(clip.shape), "dtype": "f32", "fs": bvp.fs}
        if "hr_bpm" in meta:
            header["hr_bpm"] = meta["hr_bpm"]
        (rec_dir / "clip.json").write_text(json.dumps(header))
        times = bvp.times()
        lines = ["t_seconds,value"]
        lines += [f"{ti:.9g},{vi:.9g}" for ti, vi in zip(times, bvp.samples)]
        (rec_dir / "bvp.csv").write_text("\n".join(lines) + "\n")
        manifest["records"].append(
            {"id": record_id, "split": meta.get("split", "train"), "hr_bpm": meta.get("hr_bpm")}
        )
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(root) -> list[DatasetRecord]:
    """Read the manifest and validate every record's header against its payload."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing dataset manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    records = []
    for entry in manifest["records"]:
        rec_dir = root / entry["id"]
        clip_path = rec_dir / "clip.f32"
        header_path = rec_dir / "clip.json"
        bvp_path = rec_dir / "bvp.csv"
        for p in (clip_path, header_path, bvp_path):
            if not p.exists():
                raise FileNotFoundError(f"missing dataset file: {p}")
        header = json.loads(header_path.read_text())
        shape = tuple(header["shape"])
        expected = int(np.prod(shape)) * 4
        actual = clip_path.stat().st_size
        if actual != expected:
            raise CorruptDatasetError(f"{clip_path}: payload is {actual} bytes, header declares {expected}")
        records.append(
            DatasetRecord(
                record_id=entry["id"],
                clip_path=clip_path,
                bvp_path=bvp_path,
                fs=float(header["fs"]),
                hr_bpm=entry.get("hr_bpm", header.get("hr_bpm")),
                split=entry.get("split", "train"),
                shape=shape,
            )
        )
    return records
