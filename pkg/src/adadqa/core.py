"""Shared domain types, training configuration and MOS normalization."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

MOS_LO = 1.0
MOS_HI = 5.0

DISTILL_KINDS = ("L2", "L1", "JS", "L2_squared")
BLOCK_ORDERS = ("fc_fc_norm_gelu", "fc_norm_gelu_fc")
OFFSET_MODES = ("random", "fixed")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class VideoClip:
    """T x H x W x C frames with values in [0, 1]."""

    frames: np.ndarray
    frame_rate: float = 25.0
    source_id: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 4:
            raise ValueError(f"frames must be T x H x W x C, got shape {frames.shape}")
        t, h, w, c = frames.shape
        if t < 1:
            raise ValueError("clip needs at least one frame")
        if h < 32 or w < 32:
            raise ValueError(f"frames must be at least 32x32, got {h}x{w}")
        if c != 3:
            raise ValueError(f"expected 3 channels, got {c}")
        if frames.size and (frames.min() < 0.0 or frames.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def shape(self) -> tuple:
        return self.frames.shape

    @property
    def t(self) -> int:
        return self.frames.shape[0]

    def with_frames(self, frames: np.ndarray) -> "VideoClip":
        return VideoClip(frames, frame_rate=self.frame_rate, source_id=self.source_id)


@dataclass(frozen=True)
class QualityRecord:
    source_id: str
    mos: float
    raw_mos: float
    raw_range: tuple = (MOS_LO, MOS_HI)
    synth_truth: Optional[dict] = None

    def __post_init__(self):
        lo, hi = self.raw_range
        if not lo < hi:
            raise ValueError(f"raw_range must satisfy lo < hi, got {self.raw_range}")
        if not MOS_LO <= self.mos <= MOS_HI:
            raise ValueError(f"normalized mos {self.mos} outside [1, 5]")


@dataclass(frozen=True)
class EvalResult:
    srcc: float
    plcc: float
    mean: float
    split_seed: int = 0
    dataset_id: str = ""

    def __post_init__(self):
        for name in ("srcc", "plcc"):
            v = getattr(self, name)
            if not -1.0 - 1e-12 <= v <= 1.0 + 1e-12:
                raise ValueError(f"{name}={v} outside [-1, 1]")
        if abs(self.mean - 0.5 * (self.srcc + self.plcc)) > 1e-12:
            raise ValueError("mean must equal (srcc + plcc) / 2")

    @classmethod
    def from_metrics(cls, srcc: float, plcc: float, split_seed: int = 0, dataset_id: str = "") -> "EvalResult":
        return cls(srcc, plcc, 0.5 * (srcc + plcc), split_seed, dataset_id)


@dataclass(frozen=True)
class TrainConfig:
    # Full-scale defaults; see desk() for the small synthetic setting.
    n_extractors: int = 7
    d: int = 32
    gamma: float = 0.1
    lambda_: float = 0.8
    epochs: int = 60
    warmup_epochs: int = 2
    lr_init: float = 1e-3
    weight_decay: float = 2e-2
    batch_size: int = 1
    frame_count: int = 16
    frame_interval: int = 2
    crop_size: int = 224
    seed: int = 0
    sparsity_enabled: bool = True
    distill_loss_kind: str = "L2"
    block_order: str = "fc_fc_norm_gelu"
    student_widths: tuple = (16, 32, 64)
    offset_mode: str = "random"
    n_clips: int = 4
    n_crops: int = 5
    scale_short_side: int = 256

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small geometry used with the synthetic 48x48 clips."""
        base = dict(frame_count=8, frame_interval=2, crop_size=32, scale_short_side=48)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @property
    def effective_lambda(self) -> float:
        return self.lambda_ if self.sparsity_enabled else 0.0

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["student_widths"] = list(self.student_widths)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        data = dict(data)
        if "student_widths" in data:
            data["student_widths"] = tuple(int(w) for w in data["student_widths"])
        return cls(**data)


def validate_config(cfg: TrainConfig | dict | None = None) -> TrainConfig:
    """Return a checked TrainConfig; missing fields take their defaults."""
    if cfg is None:
        cfg = TrainConfig()
    elif isinstance(cfg, dict):
        cfg = TrainConfig.from_dict(cfg)

    problems = []
    if cfg.gamma < 0:
        problems.append("gamma must be ≥ 0")
    if cfg.lambda_ < 0:
        problems.append("lambda_ must be ≥ 0")
    if cfg.d < 1:
        problems.append("d must be ≥ 1")
    if cfg.n_extractors < 1:
        problems.append("n_extractors must be ≥ 1")
    if cfg.frame_count < 1:
        problems.append("frame_count must be ≥ 1")
    if cfg.frame_interval < 1:
        problems.append("frame_interval must be ≥ 1")
    if cfg.crop_size < 32:
        problems.append("crop_size must be ≥ 32")
    if cfg.epochs < 1:
        problems.append("epochs must be ≥ 1")
    if cfg.warmup_epochs < 0:
        problems.append("warmup_epochs must be ≥ 0")
    elif cfg.warmup_epochs >= cfg.epochs:
        problems.append("warmup_epochs must be < epochs")
    if cfg.lr_init <= 0:
        problems.append("lr_init must be > 0")
    if cfg.weight_decay < 0:
        problems.append("weight_decay must be ≥ 0")
    if cfg.batch_size < 1:
        problems.append("batch_size must be ≥ 1")
    if cfg.distill_loss_kind not in DISTILL_KINDS:
        problems.append(f"distill_loss_kind must be one of {DISTILL_KINDS}")
    if cfg.block_order not in BLOCK_ORDERS:
        problems.append(f"block_order must be one of {BLOCK_ORDERS}")
    if cfg.offset_mode not in OFFSET_MODES:
        problems.append(f"offset_mode must be one of {OFFSET_MODES}")
    if not cfg.student_widths or min(cfg.student_widths) < 1:
        problems.append("student_widths must be non-empty positive ints")
    if cfg.n_clips < 1:
        problems.append("n_clips must be ≥ 1")
    if cfg.n_crops not in (1, 5):
        problems.append("n_crops must be 1 or 5")
    if cfg.scale_short_side < cfg.crop_size:
        problems.append("scale_short_side must be ≥ crop_size")
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


def normalize_mos(raw: float, raw_range: tuple) -> float:
    """Affine map of a raw score onto the [1, 5] MOS scale."""
    lo, hi = raw_range
    if not lo < hi:
        raise ValueError(f"invalid raw range {raw_range}")
    if not lo <= raw <= hi:
        raise ValueError(f"raw score {raw} outside range [{lo}, {hi}]")
    return MOS_LO + (MOS_HI - MOS_LO) * (raw - lo) / (hi - lo)


# -- config file io -----------------------------------------------------------

_SECTIONS = {
    "model": ("n_extractors", "d", "gamma", "lambda_", "sparsity_enabled", "distill_loss_kind",
              "block_order", "student_widths"),
    "optim": ("epochs", "warmup_epochs", "lr_init", "weight_decay", "batch_size", "seed"),
    "data": ("frame_count", "frame_interval", "crop_size", "offset_mode"),
    "eval": ("n_clips", "n_crops", "scale_short_side"),
}


def _parse_value(name: str, text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {text!r}") from exc
    return text


def read_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    """Read a ``key = value`` config file with bracketed sections.

    Keys outside any section are allowed; unknown keys raise ConfigError.
    """
    base = base or TrainConfig.desk()
    text = Path(path).read_text()
    parser = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[__top__]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    defaults = base.to_dict()
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in defaults:
                raise ConfigError(f"{path}: unknown key {key!r} in section [{section}]")
            default = getattr(base, key)
            values[key] = _parse_value(key, raw, default)
    return validate_config(base.replace(**values))


def write_config(cfg: TrainConfig, path: str | Path) -> None:
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = getattr(cfg, key)
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        lines.append("")
    Path(path).write_text("\n".join(lines))


def _check_sections_cover_fields():
    listed = {k for keys in _SECTIONS.values() for k in keys}
    missing = {f.name for f in dataclasses.fields(TrainConfig)} - listed
    assert not missing, missing


_check_sections_cover_fields()
