"""Multi-view evaluation, repeated splits, ablation runners and report emission."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import EvalResult, QualityRecord, TrainConfig, VideoClip
from .distill import StudentModel
from .extractors import ExtractorPool, build_toy_bank
from .metrics import UndefinedCorrelation, aggregate_repeats, evaluate_scores
from .pipeline import AdaDQA, SamplingPlan, Trainer, features_tensor, prepare_clip, sample_frames
from .synthdata import (DISTORTION_KINDS, SynthDataset, distortion_response_curve, dominant_distortion,
                        make_dataset, probe_clip)

log = logging.getLogger(__name__)

TABLE_IDS = ("extractor_count", "single_extractor", "distill_loss", "gamma_sweep", "lambda_sweep", "gating_stats")

# Published full-scale numbers, kept for side-by-side display only.
REFERENCE_VALUES = {
    "extractor_count": {"7+sparsity SRCC (KoNViD-1k)": 0.8651},
    "single_extractor": {"w/o SRCC (KoNViD-1k)": 0.8316},
    "gamma_sweep": {"best gamma": 0.1, "SRCC at best": 0.8651},
    "lambda_sweep": {"best lambda": 0.8},
    "gating_stats": {"ir-CSN-152 alpha_LQ": 0.8690, "EfficientNet-b7 alpha_HQ": 0.7208},
    "fig3": {"ConvNext-base compression SRCC": 0.968, "EfficientNet-b7 compression SRCC": 0.038},
}


# -- multi-view inference -------------------------------------------------------

@dataclass(frozen=True)
class ViewPlan:
    n_clips: int = 4
    n_crops: int = 5
    scale_short_side: int = 256
    crop_size: int = 224

    def __post_init__(self):
        if self.n_clips < 1 or self.n_crops not in (1, 5):
            raise ValueError("n_clips must be >= 1 and n_crops 1 or 5")
        if self.scale_short_side < self.crop_size:
            raise ValueError("scale_short_side must be >= crop_size")

    @property
    def n_views(self) -> int:
        return self.n_clips * self.n_crops

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "ViewPlan":
        return cls(cfg.n_clips, cfg.n_crops, cfg.scale_short_side, cfg.crop_size)


def crop_anchors(h: int, w: int, size: int) -> list[tuple[int, int]]:
    """Top-left corners: four corners then center."""
    if h < size or w < size:
        raise ValueError(f"frame {h}x{w} smaller than crop size {size}")
    return [(0, 0), (0, w - size), (h - size, 0), (h - size, w - size), ((h - size) // 2, (w - size) // 2)]


def five_crop(frame: np.ndarray, crop_size: int) -> list[np.ndarray]:
    """Five ``crop_size`` windows of an (H, W, ...) frame or a (T, H, W, C) clip."""
    spatial = 0 if frame.ndim <= 3 else 1
    h, w = frame.shape[spatial], frame.shape[spatial + 1]
    out = []
    for y, x in crop_anchors(h, w, crop_size):
        if spatial == 0:
            out.append(frame[y:y + crop_size, x:x + crop_size])
        else:
            out.append(frame[:, y:y + crop_size, x:x + crop_size])
    return out


def scale_short_side(frames: np.ndarray, short: int) -> np.ndarray:
    """Bilinear resize of (T, H, W, C) so min(H, W) == ``short``; no-op if already there."""
    t, h, w, c = frames.shape
    if min(h, w) == short:
        return frames
    if h <= w:
        nh, nw = short, max(short, int(round(w * short / h)))
    else:
        nh, nw = max(short, int(round(h * short / w))), short
    x = torch.from_numpy(np.array(frames, dtype=np.float32)).permute(0, 3, 1, 2)
    y = F.interpolate(x, size=(nh, nw), mode="bilinear", align_corners=False)
    return y.permute(0, 2, 3, 1).clamp(0.0, 1.0).numpy()


def temporal_offsets(n_frames: int, span: int, n_clips: int) -> list[int]:
    """Start of each of ``n_clips`` windows, centered in equal temporal segments."""
    room = n_frames - span + 1
    if room <= 0:
        return [0] * n_clips
    step = room / n_clips
    return [int(step / 2 + i * step) for i in range(n_clips)]


def view_clips(video: VideoClip, sampling: SamplingPlan, plan: ViewPlan) -> list[np.ndarray]:
    views = []
    for off in temporal_offsets(video.t, sampling.span, plan.n_clips):
        frames = scale_short_side(sample_frames(video, sampling, off).frames, plan.scale_short_side)
        if plan.n_crops == 5:
            views.extend(five_crop(frames, plan.crop_size))
        else:
            h, w = frames.shape[1:3]
            y, x = crop_anchors(h, w, plan.crop_size)[4]
            views.append(frames[:, y:y + plan.crop_size, x:x + plan.crop_size])
    return views


@torch.no_grad()
def multi_view_inference(model: StudentModel, video: VideoClip, plan: ViewPlan,
                         sampling: Optional[SamplingPlan] = None) -> float:
    """Mean student score over ``plan.n_views`` views; one student forward per view."""
    if sampling is None:
        t, size, _ = model.input_geometry
        sampling = SamplingPlan(t, 2, "center", size)
    if sampling.crop_size != plan.crop_size:
        raise ValueError("sampling and view plans disagree on crop size")
    dtype = next(model.parameters()).dtype
    scores = []
    for view in view_clips(video, sampling, plan):
        x = torch.from_numpy(np.array(view, dtype=np.float32)).to(dtype).unsqueeze(0)
        scores.append(float(model(x)[1][0]))
    return float(np.mean(scores))


def _student_of(model) -> StudentModel:
    return model.student if isinstance(model, AdaDQA) else model


def predict(model, videos: Sequence[VideoClip], plan: ViewPlan, sampling: Optional[SamplingPlan] = None) -> np.ndarray:
    student = _student_of(model)
    was_training = student.training
    student.eval()
    try:
        return np.array([multi_view_inference(student, v, plan, sampling) for v in videos])
    finally:
        student.train(was_training)


def evaluate(model, test_split, plan: ViewPlan, sampling: Optional[SamplingPlan] = None,
             split_seed: int = 0, dataset_id: str = "") -> EvalResult:
    """Score every (clip, record) in ``test_split`` and correlate with MOS."""
    items = list(test_split)
    if not items:
        raise ValueError("test split is empty")
    preds = predict(model, [c for c, _ in items], plan, sampling)
    labels = np.array([r.mos for _, r in items])
    return evaluate_scores(preds, labels, split_seed=split_seed, dataset_id=dataset_id)


def evaluate_config(model, items, cfg: TrainConfig, dataset_id: str = "", split_seed: int = 0) -> EvalResult:
    return evaluate(model, items, ViewPlan.from_config(cfg), SamplingPlan.from_config(cfg),
                    split_seed=split_seed, dataset_id=dataset_id)


# -- single runs and repeats ----------------------------------------------------

@dataclass
class RunOutcome:
    result: EvalResult
    trainer: Trainer


def train_and_evaluate(cfg: TrainConfig, dataset: SynthDataset, pool: ExtractorPool,
                       log_fn: Optional[Callable[[dict], None]] = None) -> RunOutcome:
    trainer = Trainer(cfg, pool, dataset.train, log_fn)
    trainer.run()
    res = evaluate_config(trainer.model, dataset.test, trainer.cfg, dataset.dataset_id, dataset.split_seed)
    return RunOutcome(res, trainer)


@dataclass(frozen=True)
class DatasetSpec:
    n: int = 200
    seed: int = 0
    mode: str = "random"

    def build(self) -> SynthDataset:
        return make_dataset(self.n, seed=self.seed, mode=self.mode)


def run_repeated(cfg: TrainConfig, dataset_spec, n_repeats: int, pool: Optional[ExtractorPool] = None,
                 master_seed: int = 0) -> dict:
    """Fresh 80/20 split and fresh training per repeat; returns aggregate plus per-run results."""
    if n_repeats < 1:
        raise ValueError("n_repeats must be >= 1")
    pool = pool if pool is not None else build_toy_bank()
    base = dataset_spec.build() if isinstance(dataset_spec, DatasetSpec) else dataset_spec
    seeds = np.random.default_rng(master_seed).choice(2**31 - 1, size=n_repeats, replace=False)
    results = []
    for i, s in enumerate(seeds):
        try:
            ds = base.resplit(int(s))
            run_cfg = cfg.replace(seed=int(s) % (2**31))
            results.append(train_and_evaluate(run_cfg, ds, pool).result)
        except Exception as exc:
            raise RuntimeError(f"repeat {i} failed: {exc}") from exc
    summary = aggregate_repeats(results)
    summary["runs"] = [r.__dict__.copy() for r in results]
    return summary


# -- ablations ------------------------------------------------------------------

@dataclass
class AblationReport:
    table_id: str
    rows: list = field(default_factory=list)
    reference: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.table_id not in TABLE_IDS:
            raise ValueError(f"unknown table id {self.table_id!r}")

    def add(self, **row) -> None:
        self.rows.append(row)

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"table_id": self.table_id, **r}) + "\n" for r in self.rows)

    def render(self) -> str:
        if not self.rows:
            return f"{self.table_id}: (no rows)\n"
        cols = list(self.rows[0])

        def fmt(v):
            if v is None:
                return "-"
            if isinstance(v, float):
                return "nan" if math.isnan(v) else f"{v:.4f}"
            return str(v)

        cells = [[fmt(r.get(c)) for c in cols] for r in self.rows]
        widths = [max(len(c), *(len(row[j]) for row in cells)) for j, c in enumerate(cols)]
        lines = [" | ".join(c.ljust(w) for c, w in zip(cols, widths)),
                 "-+-".join("-" * w for w in widths)]
        lines += [" | ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
        if self.reference:
            lines.append("reference (published, not reproduced): " +
                         ", ".join(f"{k}={v}" for k, v in self.reference.items()))
        return "\n".join(lines) + "\n"

    def write(self, directory: str | Path, stem: Optional[str] = None) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        stem = stem or self.table_id
        (d / f"{stem}.jsonl").write_text(self.to_jsonl())
        (d / f"{stem}.txt").write_text(self.render())


def _run_row(cfg, dataset, pool) -> EvalResult:
    return train_and_evaluate(cfg, dataset, pool).result


def ablate_extractor_count(cfg: TrainConfig, counts: Sequence[int], sparsity_on: bool,
                           dataset: Optional[SynthDataset] = None, pool: Optional[ExtractorPool] = None,
                           report: Optional[AblationReport] = None) -> AblationReport:
    pool = pool if pool is not None else build_toy_bank()
    dataset = dataset if dataset is not None else make_dataset(200, seed=cfg.seed)
    report = report or AblationReport("extractor_count", reference=REFERENCE_VALUES["extractor_count"])
    for count in counts:
        if not 1 <= count <= len(pool):
            raise ValueError(f"count {count} outside [1, {len(pool)}]")
    for count in counts:
        sub = select_subset(pool, count, cfg.seed)
        run_cfg = cfg.replace(n_extractors=count, sparsity_enabled=sparsity_on)
        res = _run_row(run_cfg, dataset, sub)
        report.add(count=count, sparsity=sparsity_on, extractors=",".join(sub.names), srcc=res.srcc, plcc=res.plcc)
    return report


def select_subset(pool: ExtractorPool, count: int, seed: int) -> ExtractorPool:
    """Seeded random subset of ``count`` extractors, kept in pool order."""
    if count == len(pool):
        return pool
    keep = np.sort(np.random.default_rng([seed, count]).choice(len(pool), size=count, replace=False))
    return pool.subset([pool.names[i] for i in keep])


def ablate_single_extractor(cfg: TrainConfig, dataset: Optional[SynthDataset] = None,
                            pool: Optional[ExtractorPool] = None) -> AblationReport:
    pool = pool if pool is not None else build_toy_bank()
    dataset = dataset if dataset is not None else make_dataset(200, seed=cfg.seed)
    report = AblationReport("single_extractor", reference=REFERENCE_VALUES["single_extractor"])
    for name in pool.names:
        res = _run_row(cfg.replace(n_extractors=1), dataset, pool.subset([name]))
        report.add(extractor=name, srcc=res.srcc, plcc=res.plcc)
    res = _run_row(cfg.replace(gamma=0.0), dataset, pool)
    report.add(extractor="w/o", srcc=res.srcc, plcc=res.plcc)
    return report


def ablate_distill_loss(cfg: TrainConfig, dataset: Optional[SynthDataset] = None,
                        pool: Optional[ExtractorPool] = None, kinds: Sequence[str] = ("L2", "L1", "JS")) -> AblationReport:
    pool = pool if pool is not None else build_toy_bank()
    dataset = dataset if dataset is not None else make_dataset(200, seed=cfg.seed)
    report = AblationReport("distill_loss")
    for kind in kinds:
        res = _run_row(cfg.replace(distill_loss_kind=kind), dataset, pool)
        report.add(loss=kind, srcc=res.srcc, plcc=res.plcc)
    return report


def ablate_hyperparams(cfg: TrainConfig, gammas: Sequence[float] = (0.1, 0.2, 0.5, 1.0),
                       lambdas: Sequence[float] = (0.2, 0.5, 0.8, 1.0), dataset: Optional[SynthDataset] = None,
                       pool: Optional[ExtractorPool] = None) -> tuple[AblationReport, AblationReport]:
    """Gamma sweep at the config's lambda, then lambda sweep at the config's gamma."""
    pool = pool if pool is not None else build_toy_bank()
    dataset = dataset if dataset is not None else make_dataset(200, seed=cfg.seed)
    g_rep = AblationReport("gamma_sweep", reference=REFERENCE_VALUES["gamma_sweep"])
    for g in gammas:
        res = _run_row(cfg.replace(gamma=float(g)), dataset, pool)
        g_rep.add(gamma=float(g), srcc=res.srcc, plcc=res.plcc)
    l_rep = AblationReport("lambda_sweep", reference=REFERENCE_VALUES["lambda_sweep"])
    for lam in lambdas:
        res = _run_row(cfg.replace(lambda_=float(lam)), dataset, pool)
        l_rep.add(**{"lambda": float(lam), "srcc": res.srcc, "plcc": res.plcc})
    return g_rep, l_rep


# -- gating statistics ----------------------------------------------------------

@torch.no_grad()
def gating_weights(model: AdaDQA, pool: ExtractorPool, items, sampling: SamplingPlan) -> np.ndarray:
    """alpha for every (clip, record), shape (n_items, n_extractors), on the centered training view."""
    rows = []
    for video, _ in items:
        off = max(0, (video.t - sampling.span) // 2)
        clip = prepare_clip(video, sampling, off)
        rows.append(model.qam.gate(features_tensor(pool, clip))[0].numpy())
    return np.array(rows, dtype=np.float64).reshape(len(rows), len(pool))


def gating_stats(model: AdaDQA, dataset, mos_threshold: float = 3.5, pool: Optional[ExtractorPool] = None,
                 cfg: Optional[TrainConfig] = None) -> AblationReport:
    """Mean alpha per extractor over low-quality (MOS < threshold) and high-quality groups."""
    pool = pool if pool is not None else build_toy_bank()
    cfg = cfg or TrainConfig.desk()
    items = list(dataset) if not isinstance(dataset, SynthDataset) else [
        (dataset.clips[i], dataset.records[i]) for i in range(len(dataset.clips))]
    alpha = gating_weights(model, pool, items, SamplingPlan.from_config(cfg))
    mos = np.array([r.mos for _, r in items])
    lq, hq = mos < mos_threshold, mos > mos_threshold
    report = AblationReport("gating_stats", reference=REFERENCE_VALUES["gating_stats"])
    for j, name in enumerate(pool.names):
        report.add(extractor=name,
                   alpha_lq=float(alpha[lq, j].mean()) if lq.any() else None,
                   alpha_hq=float(alpha[hq, j].mean()) if hq.any() else None)
    return report


def group_alpha(model: AdaDQA, pool: ExtractorPool, items, cfg: TrainConfig) -> dict:
    """Mean alpha per extractor grouped by each item's dominant distortion."""
    alpha = gating_weights(model, pool, items, SamplingPlan.from_config(cfg))
    groups = np.array([dominant_distortion(r) or "none" for _, r in items])
    out = {}
    for g in sorted(set(groups)):
        mask = groups == g
        out[g] = {name: float(alpha[mask, j].mean()) for j, name in enumerate(pool.names)}
    return out


# -- distortion response analysis -----------------------------------------------

def fig3_analysis(pool: ExtractorPool, kinds: Sequence[str] = DISTORTION_KINDS,
                  degrees: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
                  clip: Optional[VideoClip] = None, plot_dir: Optional[str | Path] = None) -> dict:
    """SRCC between distortion degree and each extractor's response, per (extractor, kind)."""
    from .synthdata import apply_distortion, DistortionSpec  # local: only needed for plotting curves

    clip = clip if clip is not None else probe_clip()
    matrix = np.full((len(pool), len(kinds)), np.nan)
    for i, ext in enumerate(pool):
        for j, kind in enumerate(kinds):
            try:
                matrix[i, j] = distortion_response_curve(ext, kind, degrees, clip)
            except UndefinedCorrelation:
                pass
    plots = []
    if plot_dir is not None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        d = Path(plot_dir)
        d.mkdir(parents=True, exist_ok=True)
        for kind in kinds:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for ext in pool:
                resp = [ext.response(apply_distortion(clip, DistortionSpec(kind, float(x)))) for x in degrees]
                resp = np.asarray(resp, dtype=float)
                span = np.ptp(resp)
                ax.plot(degrees, (resp - resp.min()) / span if span > 0 else resp * 0, marker="o",
                        label=ext.descriptor.name)
            ax.set_xlabel("degree")
            ax.set_ylabel("normalized response")
            ax.set_title(kind)
            ax.legend(fontsize=6)
            fig.tight_layout()
            path = d / f"fig3_{kind}.png"
            fig.savefig(path, dpi=100)
            plt.close(fig)
            plots.append(str(path))
    return {"extractors": pool.names, "kinds": list(kinds), "degrees": list(degrees),
            "srcc": matrix, "plots": plots, "reference": REFERENCE_VALUES["fig3"]}


def render_matrix(analysis: dict) -> str:
    kinds = analysis["kinds"]
    w = max(len(n) for n in analysis["extractors"])
    lines = [" " * w + " | " + " | ".join(k[:12].rjust(12) for k in kinds)]
    for name, row in zip(analysis["extractors"], analysis["srcc"]):
        lines.append(name.ljust(w) + " | " + " | ".join(f"{v:12.3f}" for v in row))
    return "\n".join(lines) + "\n"
