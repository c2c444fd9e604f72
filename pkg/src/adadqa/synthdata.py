"""Synthetic clips with labelled distortions and a known MOS oracle."""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import QualityRecord, VideoClip
from .metrics import srcc

DISTORTION_KINDS = ("compression_blockiness", "gaussian_blur", "motion_blur", "additive_noise")
BASE_PATTERNS = ("moving_gradient", "textured_noise_field", "checker_pan")
# order in which make_dataset stacks distortions; noise goes last so blur cannot hide it
_STACK_ORDER = ("compression_blockiness", "gaussian_blur", "motion_blur", "additive_noise")

BLOCK = 8
CLIP_MAGIC = b"ADQACLIP"
MANIFEST = "manifest.tsv"
SPLIT_FILE = "split.txt"


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    degree: float

    def __post_init__(self):
        if self.kind not in DISTORTION_KINDS:
            raise ValueError(f"unknown distortion kind {self.kind!r}")
        if not 0.0 <= self.degree <= 1.0:
            raise ValueError(f"degree must be in [0, 1], got {self.degree}")


@dataclass(frozen=True)
class SynthClipSpec:
    base_pattern: str = "textured_noise_field"
    motion_speed: float = 1.0
    distortions: tuple = ()
    t: int = 32
    h: int = 48
    w: int = 48
    seed: int = 0

    def __post_init__(self):
        if self.base_pattern not in BASE_PATTERNS:
            raise ValueError(f"unknown base pattern {self.base_pattern!r}")
        object.__setattr__(self, "distortions", tuple(self.distortions))

    @property
    def source_id(self) -> str:
        return f"synth-{self.base_pattern}-{self.seed}"


# -- base patterns --------------------------------------------------------------

# Luminance contrast is fixed per pattern (only the hue jitters): without a
# reference, blur and noise are only measurable against a known content contrast.

def _hue(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-0.03, 0.03, size=3)


def _render_checker(spec: SynthClipSpec, rng: np.random.Generator) -> np.ndarray:
    size = int(rng.integers(5, 8))  # off the 8-px codec grid
    c0 = 0.3 + _hue(rng)
    c1 = 0.7 + _hue(rng)
    ys = np.arange(spec.h)[:, None]
    xs = np.arange(spec.w)[None, :]
    frames = np.empty((spec.t, spec.h, spec.w, 3))
    for k in range(spec.t):
        xk = np.mod(xs - spec.motion_speed * k, spec.w)
        parity = (np.floor(ys / size) + np.floor(xk / size)) % 2
        frames[k] = np.where(parity[..., None] > 0, c1, c0)
    return frames


def _render_gradient(spec: SynthClipSpec, rng: np.random.Generator) -> np.ndarray:
    theta = rng.uniform(0, 2 * math.pi)
    wavelength = rng.uniform(8, 16)
    ys, xs = np.mgrid[0:spec.h, 0:spec.w].astype(np.float64)
    proj = xs * math.cos(theta) + ys * math.sin(theta)
    frames = np.empty((spec.t, spec.h, spec.w, 3))
    for k in range(spec.t):
        v = 0.5 + 0.35 * np.sin(2 * math.pi * (proj - spec.motion_speed * k) / wavelength)
        frames[k] = v[..., None]
    return frames


def _render_texture(spec: SynthClipSpec, rng: np.random.Generator) -> np.ndarray:
    base = ndimage.gaussian_filter(rng.standard_normal((spec.h, spec.w)), 1.5, mode="wrap")
    chroma = ndimage.gaussian_filter(rng.standard_normal((spec.h, spec.w, 3)), (3, 3, 0), mode="wrap")
    base = (base - base.mean()) / base.std()
    chroma = (chroma - chroma.mean()) / chroma.std()
    field0 = 0.5 + 0.14 * (base[..., None] + 0.3 * chroma) + _hue(rng)
    drift = rng.uniform(-0.5, 0.5)
    frames = np.empty((spec.t, spec.h, spec.w, 3))
    for k in range(spec.t):
        dx = int(round(spec.motion_speed * k))
        dy = int(round(drift * spec.motion_speed * k))
        frames[k] = np.roll(field0, (dy, dx), axis=(0, 1))
    return frames


_RENDERERS = {
    "checker_pan": _render_checker,
    "moving_gradient": _render_gradient,
    "textured_noise_field": _render_texture,
}


def generate_clip(spec: SynthClipSpec) -> VideoClip:
    """Render the base pattern and apply ``spec.distortions`` in order."""
    if spec.t < 1 or spec.h < 32 or spec.w < 32:
        raise ValueError(f"cannot render a {spec.t}x{spec.h}x{spec.w} clip (need t>=1, h,w>=32)")
    rng = np.random.default_rng(spec.seed)
    frames = _RENDERERS[spec.base_pattern](spec, rng)
    clip = VideoClip(np.clip(frames, 0.0, 1.0).astype(np.float32), source_id=spec.source_id)
    for i, dist in enumerate(spec.distortions):
        clip = apply_distortion(clip, dist, seed=(spec.seed, i))
    return clip


# -- distortions ----------------------------------------------------------------

def _block_means(frames: np.ndarray, block: int = BLOCK) -> np.ndarray:
    t, h, w, c = frames.shape
    out = np.empty_like(frames)
    for y0 in range(0, h, block):
        for x0 in range(0, w, block):
            tile = frames[:, y0:y0 + block, x0:x0 + block, :]
            out[:, y0:y0 + block, x0:x0 + block, :] = tile.mean(axis=(1, 2), keepdims=True)
    return out


def _noise_seed(clip: VideoClip) -> int:
    return zlib.crc32(clip.source_id.encode())


def apply_distortion(clip: VideoClip, d: DistortionSpec, seed=None) -> VideoClip:
    """Apply one distortion; degree 0 returns the clip unchanged.

    Additive noise draws from ``seed`` (default: a hash of the clip's
    source id), so the same clip gets the same noise field at every degree.
    """
    if d.degree == 0.0:
        return clip
    x = clip.frames.astype(np.float64)
    if d.kind == "compression_blockiness":
        out = x + d.degree * (_block_means(x) - x)
    elif d.kind == "gaussian_blur":
        sigma = 4.0 * d.degree
        out = ndimage.gaussian_filter(x, sigma=(0, sigma, sigma, 0), mode="reflect")
    elif d.kind == "motion_blur":
        window = 1 + int(math.floor(6.0 * d.degree))
        out = ndimage.uniform_filter1d(x, size=window, axis=0, mode="nearest") if window > 1 else x
    elif d.kind == "additive_noise":
        rng = np.random.default_rng(_noise_seed(clip) if seed is None else seed)
        out = x + rng.normal(0.0, 0.2 * d.degree, size=x.shape)
    else:  # guarded by DistortionSpec
        raise ValueError(d.kind)
    return clip.with_frames(np.clip(out, 0.0, 1.0).astype(np.float32))


def synth_mos(distortions: Iterable[DistortionSpec]) -> float:
    """Ground-truth MOS: 1 + 4 * prod(1 - 0.85 * degree)."""
    keep = 1.0
    for d in distortions:
        keep *= 1.0 - 0.85 * d.degree
    return 1.0 + 4.0 * keep


# -- datasets -------------------------------------------------------------------

@dataclass
class SynthDataset:
    clips: list
    records: list
    train_idx: np.ndarray
    test_idx: np.ndarray
    dataset_id: str = "synthetic"
    specs: list = field(default_factory=list)
    split_seed: int = 0

    def __len__(self) -> int:
        return len(self.clips)

    def subset(self, idx: Sequence[int]) -> list:
        return [(self.clips[i], self.records[i]) for i in idx]

    @property
    def train(self) -> list:
        return self.subset(self.train_idx)

    @property
    def test(self) -> list:
        return self.subset(self.test_idx)

    def resplit(self, seed: int) -> "SynthDataset":
        train_idx, test_idx = split_indices(len(self), seed)
        return SynthDataset(self.clips, self.records, train_idx, test_idx, self.dataset_id, self.specs, seed)


def split_indices(n: int, seed: int, train_frac: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_train = math.ceil(train_frac * n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def _random_spec(rng: np.random.Generator, i: int, seed: int, t: int, h: int, w: int) -> SynthClipSpec:
    """Uniform pattern, 0-4 distinct distortions, each at a degree in [0.1, 1]."""
    pattern = BASE_PATTERNS[int(rng.integers(len(BASE_PATTERNS)))]
    speed = float(rng.uniform(1.0, 3.0))
    n_dist = int(rng.integers(0, len(DISTORTION_KINDS) + 1))
    picked = {DISTORTION_KINDS[j] for j in rng.choice(len(DISTORTION_KINDS), size=n_dist, replace=False)}
    dists = [DistortionSpec(kind, float(rng.uniform(0.1, 1.0))) for kind in _STACK_ORDER if kind in picked]
    return SynthClipSpec(pattern, speed, tuple(dists), t, h, w, seed=seed * 100_003 + i)


def _mixed_spec(rng: np.random.Generator, i: int, seed: int, t: int, h: int, w: int) -> SynthClipSpec:
    pattern = BASE_PATTERNS[int(rng.integers(len(BASE_PATTERNS)))]
    speed = float(rng.uniform(1.5, 3.0))
    kind = "compression_blockiness" if i % 2 == 0 else "motion_blur"
    dist = DistortionSpec(kind, float(rng.uniform(0.1, 1.0)))
    return SynthClipSpec(pattern, speed, (dist,), t, h, w, seed=seed * 100_003 + i)


def make_dataset(n: int, seed: int, mode: str = "random", t: int = 32, h: int = 48, w: int = 48) -> SynthDataset:
    """Generate ``n`` labelled clips and a seeded 80/20 split.

    ``mode="mixed"`` alternates blockiness-only and motion-blur-only clips,
    which is the setting used to probe gating adaptivity.
    """
    if n < 10:
        raise ValueError("make_dataset needs n >= 10")
    if mode not in ("random", "mixed"):
        raise ValueError(f"unknown dataset mode {mode!r}")
    make_spec = _random_spec if mode == "random" else _mixed_spec
    clips, records, specs = [], [], []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        spec = make_spec(rng, i, seed, t, h, w)
        clip = generate_clip(spec)
        source_id = f"clip{i:05d}"
        clip = VideoClip(clip.frames, clip.frame_rate, source_id)
        mos = synth_mos(spec.distortions)
        truth = {d.kind: d.degree for d in spec.distortions}
        clips.append(clip)
        records.append(QualityRecord(source_id, mos, mos, (1.0, 5.0), truth))
        specs.append(spec)
    train_idx, test_idx = split_indices(n, seed)
    return SynthDataset(clips, records, train_idx, test_idx, f"synthetic-{mode}-{n}-{seed}", specs, seed)


def dominant_distortion(record: QualityRecord) -> Optional[str]:
    if not record.synth_truth:
        return None
    return max(record.synth_truth.items(), key=lambda kv: kv[1])[0]


# -- distortion response curves --------------------------------------------------

def probe_clip(seed: int = 3) -> VideoClip:
    """Fixed pristine clip used for distortion-response curves."""
    return generate_clip(SynthClipSpec("textured_noise_field", 1.0, (), t=16, h=48, w=48, seed=seed))


def distortion_response_curve(extractor, kind: str, degrees: Sequence[float], clip: VideoClip | None = None) -> float:
    """SRCC between distortion degree and the extractor's scalar response."""
    degrees = [float(x) for x in degrees]
    if len(set(degrees)) < 3:
        raise ValueError("need at least 3 distinct degrees")
    clip = probe_clip() if clip is None else clip
    responses = [extractor.response(apply_distortion(clip, DistortionSpec(kind, deg))) for deg in degrees]
    return srcc(degrees, responses)


# -- on-disk format -------------------------------------------------------------

def write_clip_file(path: str | Path, clip: VideoClip) -> None:
    t, h, w, c = clip.shape
    with open(path, "wb") as fh:
        fh.write(CLIP_MAGIC)
        fh.write(struct.pack("<4i", t, h, w, c))
        fh.write(np.ascontiguousarray(clip.frames, dtype="<f4").tobytes())


def read_clip_file(path: str | Path, source_id: str = "", frame_rate: float = 25.0) -> VideoClip:
    data = Path(path).read_bytes()
    if data[:8] != CLIP_MAGIC:
        raise ValueError(f"{path}: not a clip file")
    t, h, w, c = struct.unpack("<4i", data[8:24])
    body = data[24:]
    expected = t * h * w * c * 4
    if len(body) != expected:
        raise ValueError(f"{path}: truncated clip body ({len(body)} of {expected} bytes)")
    frames = np.frombuffer(body, dtype="<f4").reshape(t, h, w, c).astype(np.float32)
    return VideoClip(frames, frame_rate, source_id or Path(path).stem)


def _format_truth(truth: Optional[dict]) -> str:
    if not truth:
        return "-"
    return ";".join(f"{k}={v!r}" for k, v in truth.items())


def _parse_truth(text: str) -> Optional[dict]:
    if text == "-":
        return None
    out = {}
    for item in text.split(";"):
        k, v = item.split("=")
        out[k] = float(v)
    return out


def save_dataset(ds: SynthDataset, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["# source_id\tmos\traw_mos\traw_lo\traw_hi\ttruth"]
    for clip, rec in zip(ds.clips, ds.records):
        write_clip_file(directory / f"{rec.source_id}.clip", clip)
        lo, hi = rec.raw_range
        lines.append(f"{rec.source_id}\t{rec.mos!r}\t{rec.raw_mos!r}\t{lo!r}\t{hi!r}\t{_format_truth(rec.synth_truth)}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")
    (directory / SPLIT_FILE).write_text(
        f"seed: {ds.split_seed}\n"
        "train: " + " ".join(map(str, ds.train_idx)) + "\n" + "test: " + " ".join(map(str, ds.test_idx)) + "\n"
    )
    (directory / "dataset_id").write_text(ds.dataset_id + "\n")
    return directory


def load_dataset(directory: str | Path, split_seed: int | None = None) -> SynthDataset:
    """Load a dataset directory (synthetic or external MOS data).

    Manifest rows need ``source_id``, ``raw_mos``, ``raw_lo`` and ``raw_hi``;
    MOS is normalized onto [1, 5] from the raw range. Without a split file
    (or when ``split_seed`` is given) a fresh 80/20 split is drawn.
    """
    from .core import normalize_mos

    directory = Path(directory)
    clips, records = [], []
    for line in (directory / MANIFEST).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) < 5:
            raise ValueError(f"malformed manifest line: {line!r}")
        source_id = cols[0]
        raw, lo, hi = float(cols[2]), float(cols[3]), float(cols[4])
        mos = normalize_mos(raw, (lo, hi))
        truth = _parse_truth(cols[5]) if len(cols) > 5 else None
        records.append(QualityRecord(source_id, mos, raw, (lo, hi), truth))
        clips.append(read_clip_file(directory / f"{source_id}.clip", source_id))
    id_file = directory / "dataset_id"
    dataset_id = id_file.read_text().strip() if id_file.exists() else directory.name
    split_file = directory / SPLIT_FILE
    if split_seed is None and split_file.exists():
        parts = dict(line.split(":", 1) for line in split_file.read_text().splitlines() if ":" in line)
        train_idx = np.array([int(v) for v in parts["train"].split()], dtype=np.int64)
        test_idx = np.array([int(v) for v in parts["test"].split()], dtype=np.int64)
        split_seed = int(parts.get("seed", "0"))
    else:
        split_seed = split_seed or 0
        train_idx, test_idx = split_indices(len(clips), split_seed)
    return SynthDataset(clips, records, train_idx, test_idx, dataset_id, split_seed=split_seed)
