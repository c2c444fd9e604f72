"""Frozen feature extractors: contract, toy bank and feature cache."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .core import VideoClip

FRAME_WISE = "frame_wise"
CLIP_WISE = "clip_wise"

CACHE_MAGIC = b"ADQAFEAT"
CACHE_VERSION = 1


class ExtractionError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExtractorDescriptor:
    name: str
    modality: str
    out_dim: int
    sensitivity: str = "content"

    def __post_init__(self):
        if self.modality not in (FRAME_WISE, CLIP_WISE):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.out_dim < 1:
            raise ValueError("out_dim must be >= 1")


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    extractor_name: str

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(values)):
            raise ValueError(f"{self.extractor_name}: non-finite feature values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.size


class Extractor:
    """Base class. Subclasses implement ``frame_feature`` or ``clip_feature``.

    ``response_channel`` and ``response_sign`` define the scalar response used
    for distortion-response curves: ``sign * features[channel]``.
    """

    descriptor: ExtractorDescriptor
    response_channel: int = 0
    response_sign: float = 1.0
    matched_distortion: str | None = None
    min_frames: int = 1

    @property
    def name(self) -> str:
        return self.descriptor.name

    @property
    def out_dim(self) -> int:
        return self.descriptor.out_dim

    @property
    def modality(self) -> str:
        return self.descriptor.modality

    def frame_feature(self, frame: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def clip_feature(self, frames: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def response(self, clip: VideoClip) -> float:
        return float(self.response_sign * extract(self, clip).values[self.response_channel])

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"


def extract(extractor: Extractor, clip: VideoClip) -> FeatureVector:
    """Frame-wise extractors average per-frame features; clip-wise ones see the whole clip."""
    frames = np.asarray(clip.frames, dtype=np.float64)
    if extractor.modality == FRAME_WISE:
        feats = np.stack([np.asarray(extractor.frame_feature(f), dtype=np.float64) for f in frames])
        values = feats.mean(axis=0)
    else:
        if frames.shape[0] < extractor.min_frames:
            raise ExtractionError(
                f"{extractor.name}: clip has {frames.shape[0]} frames, needs at least {extractor.min_frames}"
            )
        values = np.asarray(extractor.clip_feature(frames), dtype=np.float64)
    if values.size != extractor.out_dim:
        raise ExtractionError(f"{extractor.name}: produced {values.size} values, declared {extractor.out_dim}")
    return FeatureVector(values, extractor.name)


# -- toy bank -------------------------------------------------------------------

_EPS = 1e-12


def _luma(frame: np.ndarray) -> np.ndarray:
    return frame @ np.array([0.299, 0.587, 0.114])


def _axis_phase_profile(diffs: np.ndarray, axis: int, block: int) -> np.ndarray:
    """Mean |difference| grouped by position modulo ``block`` along ``axis``."""
    mags = np.abs(diffs).mean(axis=1 - axis)
    phases = np.arange(mags.size) % block
    return np.array([mags[phases == p].mean() for p in range(block)])


class BlockinessMeter(Extractor):
    """Excess |difference| on the strongest 8-pixel grid phase versus the other phases.

    Scored as (peak - rest) / (peak + rest) per axis, so the grid phase is
    found even when the crop is not aligned to the codec grid.
    """

    descriptor = ExtractorDescriptor("blockiness-meter", FRAME_WISE, 1, "distortion")
    matched_distortion = "compression_blockiness"
    block = 8

    def frame_feature(self, frame):
        y = _luma(frame)
        score = 0.0
        for axis in (0, 1):
            prof = _axis_phase_profile(np.diff(y, axis=axis), axis, self.block)
            p = int(np.argmax(prof))
            peak, rest = prof[p], np.delete(prof, p).mean()
            score += (peak - rest) / (peak + rest + _EPS)
        return np.array([score / 2])


def _sobel_mag(y: np.ndarray) -> np.ndarray:
    return np.hypot(ndimage.sobel(y, axis=0, mode="reflect"), ndimage.sobel(y, axis=1, mode="reflect")) / 8.0


class SharpnessMeter(Extractor):
    """Re-blur sharpness index and mean gradient magnitude.

    The index is the share of gradient energy removed by a sigma=1 re-blur:
    already-blurred frames lose little, so it falls as blur grows.
    """

    descriptor = ExtractorDescriptor("sharpness-meter", FRAME_WISE, 2, "distortion")
    matched_distortion = "gaussian_blur"
    response_sign = -1.0

    def frame_feature(self, frame):
        y = _luma(frame)
        g = _sobel_mag(y)
        energy = float(np.sum(g ** 2))
        if energy < _EPS:
            return np.array([0.0, 0.0])
        reblur = _sobel_mag(ndimage.gaussian_filter(y, 1.0, mode="reflect"))
        return np.array([1.0 - float(np.sum(reblur ** 2)) / energy, 10.0 * g.mean()])


class NoiseMeter(Extractor):
    """Median-filter residual energy, as a share of gradient energy and in absolute terms."""

    descriptor = ExtractorDescriptor("noise-meter", FRAME_WISE, 3, "distortion")
    matched_distortion = "additive_noise"

    def frame_feature(self, frame):
        y = _luma(frame)
        resid = y - ndimage.median_filter(y, size=3, mode="reflect")
        e_res = float(np.mean(resid ** 2))
        e_grad = float(np.mean(_sobel_mag(y) ** 2))
        chroma = frame - y[..., None]
        cres = chroma - ndimage.median_filter(chroma, size=(3, 3, 1), mode="reflect")
        return np.array([e_res / (e_res + e_grad + _EPS), 100.0 * e_res, 100.0 * float(np.mean(cres ** 2))])


class LuminanceContent(Extractor):
    """8-bin luma histogram (fractions); the darkest bin is the response channel."""

    descriptor = ExtractorDescriptor("luminance-content", FRAME_WISE, 8, "content")
    matched_distortion = "additive_noise"
    bins = 8

    def frame_feature(self, frame):
        y = np.clip(_luma(frame), 0.0, 1.0)
        hist, _ = np.histogram(y, bins=self.bins, range=(0.0, 1.0))
        return hist / y.size


class ColorStats(Extractor):
    """Per-channel mean and variance of the 8x8-block thumbnail (coarse colour layout)."""

    descriptor = ExtractorDescriptor("color-stats", FRAME_WISE, 6, "content")
    matched_distortion = "gaussian_blur"
    response_channel = 3
    response_sign = -1.0
    block = 8

    def frame_feature(self, frame):
        b = self.block
        h, w = (frame.shape[0] // b) * b, (frame.shape[1] // b) * b
        thumb = frame[:h, :w].reshape(h // b, b, w // b, b, 3).mean(axis=(1, 3)).reshape(-1, 3)
        return np.concatenate([thumb.mean(axis=0), 10.0 * thumb.var(axis=0)])


class MotionEnergy(Extractor):
    """Mean absolute temporal difference and apparent speed (temporal over spatial change)."""

    descriptor = ExtractorDescriptor("motion-energy", CLIP_WISE, 2, "motion")
    matched_distortion = "motion_blur"
    response_channel = 1
    response_sign = -1.0
    min_frames = 2

    def clip_feature(self, frames):
        y = frames @ np.array([0.299, 0.587, 0.114])
        temporal = float(np.abs(np.diff(y, axis=0)).mean())
        spatial = float(np.mean([_sobel_mag(f).mean() for f in y]))
        speed = temporal / spatial if spatial > _EPS else 0.0
        return np.array([10.0 * temporal, speed])


class TemporalFlicker(Extractor):
    """Variance over time of the per-frame mean brightness."""

    descriptor = ExtractorDescriptor("temporal-flicker", CLIP_WISE, 1, "motion")
    matched_distortion = "additive_noise"
    min_frames = 2

    def clip_feature(self, frames):
        means = frames.mean(axis=(1, 2, 3))
        return np.array([1e4 * means.var()])


TOY_EXTRACTORS = (
    BlockinessMeter, SharpnessMeter, NoiseMeter, LuminanceContent, ColorStats, MotionEnergy, TemporalFlicker,
)


class ExtractorPool:
    """Ordered, immutable collection of extractors; index i is gating weight i."""

    def __init__(self, extractors: Iterable[Extractor]):
        extractors = tuple(extractors)
        if not extractors:
            raise ValueError("an extractor pool needs at least one extractor")
        names = [e.name for e in extractors]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate extractor names in pool: {names}")
        self._extractors = extractors

    def __len__(self) -> int:
        return len(self._extractors)

    def __iter__(self):
        return iter(self._extractors)

    def __getitem__(self, i):
        return self._extractors[i]

    @property
    def names(self) -> list[str]:
        return [e.name for e in self._extractors]

    @property
    def dims(self) -> list[int]:
        return [e.out_dim for e in self._extractors]

    def subset(self, names_or_idx: Sequence) -> "ExtractorPool":
        picked = []
        for key in names_or_idx:
            if isinstance(key, str):
                picked.append(self._extractors[self.names.index(key)])
            else:
                picked.append(self._extractors[int(key)])
        return ExtractorPool(picked)

    def __repr__(self) -> str:
        return f"ExtractorPool({self.names})"


def build_toy_bank() -> ExtractorPool:
    return ExtractorPool(cls() for cls in TOY_EXTRACTORS)


def extract_all(pool: ExtractorPool, clip: VideoClip) -> list[FeatureVector]:
    out = []
    for ex in pool:
        try:
            out.append(extract(ex, clip))
        except Exception as exc:
            raise ExtractionError(f"extractor {ex.name!r} failed: {exc}") from exc
    return out


# -- feature cache --------------------------------------------------------------

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(f"{self.path}: truncated feature cache")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


class FeatureCache:
    """Features addressable by (clip_id, extractor_name)."""

    def __init__(self, extractor_names: Sequence[str], dims: Sequence[int]):
        if len(extractor_names) != len(dims):
            raise ValueError("extractor names and dims differ in length")
        self.extractor_names = list(extractor_names)
        self.dims = [int(d) for d in dims]
        self.records: dict[str, list[np.ndarray]] = {}

    def add(self, clip_id: str, features: Sequence) -> None:
        if len(features) != len(self.dims):
            raise ValueError(f"{clip_id}: expected {len(self.dims)} feature vectors, got {len(features)}")
        vecs = []
        for name, dim, f in zip(self.extractor_names, self.dims, features):
            v = np.asarray(f.values if isinstance(f, FeatureVector) else f, dtype=np.float32).ravel()
            if v.size != dim:
                raise ValueError(f"{clip_id}/{name}: dimension mismatch ({v.size} != {dim})")
            vecs.append(v)
        self.records[clip_id] = vecs

    def get(self, clip_id: str, extractor_name: str) -> np.ndarray:
        return self.records[clip_id][self.extractor_names.index(extractor_name)]

    def features(self, clip_id: str) -> list[FeatureVector]:
        return [FeatureVector(v, n) for n, v in zip(self.extractor_names, self.records[clip_id])]

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, clip_id) -> bool:
        return clip_id in self.records


def save_feature_cache(path: str | Path, features_per_clip: Mapping[str, Sequence] | FeatureCache,
                       extractor_names: Sequence[str] | None = None) -> None:
    if isinstance(features_per_clip, FeatureCache):
        cache = features_per_clip
    else:
        items = list(features_per_clip.items())
        if not items:
            raise ValueError("nothing to cache")
        first = items[0][1]
        if extractor_names is None:
            extractor_names = [f.extractor_name for f in first]
        dims = [np.asarray(f.values if isinstance(f, FeatureVector) else f).size for f in first]
        cache = FeatureCache(extractor_names, dims)
        for clip_id, feats in items:
            cache.add(clip_id, feats)

    parts = [CACHE_MAGIC, struct.pack("<I", CACHE_VERSION), struct.pack("<I", len(cache.dims))]
    for name, dim in zip(cache.extractor_names, cache.dims):
        parts += [_pack_str(name), struct.pack("<I", dim)]
    parts.append(struct.pack("<I", len(cache.records)))
    for clip_id, vecs in cache.records.items():
        parts.append(_pack_str(clip_id))
        for v in vecs:
            parts.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_feature_cache(path: str | Path) -> FeatureCache:
    data = Path(path).read_bytes()
    if data[:8] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a feature cache")
    r = _Reader(data, path)
    r.take(8)
    version = r.u32()
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported feature cache version {version}")
    n_ext = r.u32()
    names, dims = [], []
    for _ in range(n_ext):
        names.append(r.string())
        dims.append(r.u32())
    cache = FeatureCache(names, dims)
    for _ in range(r.u32()):
        clip_id = r.string()
        vecs = [np.frombuffer(r.take(4 * d), dtype="<f4").astype(np.float32) for d in dims]
        cache.records[clip_id] = vecs
    if r.pos != len(data):
        raise ValueError(f"{path}: trailing bytes after feature records")
    return cache
