"""Training orchestration: sampling, schedule, optimizer, training loop, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .core import TrainConfig, VideoClip, validate_config
from .distill import StudentModel, clip_tensor, combine_losses, kd_loss, smooth_l1
from .extractors import ExtractorPool, extract_all
from .qam import QAM, sparsity_loss

log = logging.getLogger(__name__)

CKPT_MAGIC = b"ADQACKPT"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    pass


# -- sampling -------------------------------------------------------------------

@dataclass(frozen=True)
class SamplingPlan:
    frame_count: int = 16
    frame_interval: int = 2
    crop: str = "center"
    crop_size: int = 224

    @property
    def span(self) -> int:
        return (self.frame_count - 1) * self.frame_interval + 1

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "SamplingPlan":
        return cls(cfg.frame_count, cfg.frame_interval, "center", cfg.crop_size)


def frame_indices(n_frames: int, plan: SamplingPlan, offset: int) -> np.ndarray:
    if n_frames < 1:
        raise ValueError("cannot sample from an empty video")
    if offset < 0:
        raise ValueError("offset must be >= 0")
    return (offset + plan.frame_interval * np.arange(plan.frame_count)) % n_frames


def sample_frames(video: VideoClip, plan: SamplingPlan, offset: int = 0) -> VideoClip:
    """Fixed-stride frames starting at ``offset``; indices wrap past the end."""
    idx = frame_indices(video.t, plan, offset)
    return video.with_frames(video.frames[idx])


def center_crop(clip: VideoClip, size: int) -> VideoClip:
    _, h, w, _ = clip.shape
    if h < size or w < size:
        raise ValueError(f"frame {h}x{w} smaller than crop size {size}")
    y0, x0 = (h - size) // 2, (w - size) // 2
    return clip.with_frames(clip.frames[:, y0:y0 + size, x0:x0 + size])


def prepare_clip(video: VideoClip, plan: SamplingPlan, offset: int = 0) -> VideoClip:
    clip = sample_frames(video, plan, offset)
    return center_crop(clip, plan.crop_size) if plan.crop == "center" else clip


# -- schedule and optimizer -----------------------------------------------------

def lr_at(step: int, total_steps: int, warmup_steps: int, lr_init: float) -> float:
    """Linear warmup from 0, then half-cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps >= total_steps:
        raise ValueError("warmup_steps must be < total_steps")
    if step < warmup_steps:
        return lr_init * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_init * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 2e-2


@torch.no_grad()
def optimizer_step(state: OptimizerState, params: dict, grads: dict, lr: float) -> None:
    """One AdamW update, in place on ``params``; decay is decoupled from the gradient.

    Parameters whose gradient is ``None`` are left untouched.
    """
    active = {name: g for name, g in grads.items() if g is not None}
    for name, g in active.items():
        if not torch.all(torch.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, g in active.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"{name}: gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        v = state.v[name]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        m_hat = m / bc1 if bc1 > 0 else m
        v_hat = v / bc2 if bc2 > 0 else v
        update = m_hat / (v_hat.sqrt() + state.eps) + state.weight_decay * p
        p.sub_(lr * update)


# -- model ----------------------------------------------------------------------

class AdaDQA(nn.Module):
    """Teacher (QAM + head) and student trained together."""

    def __init__(self, in_dims: Sequence[int], cfg: TrainConfig):
        super().__init__()
        self.qam = QAM(in_dims, cfg.d, cfg.block_order)
        self.student = StudentModel(cfg.d, cfg.student_widths, cfg.frame_count, cfg.crop_size)

    def set_output_bias(self, value: float) -> None:
        """Start the student head at ``value``.

        The teacher head keeps its zero bias: it then has to express the score
        level through g early on, which keeps the gates from closing before the
        teacher has learned anything worth distilling.
        """
        with torch.no_grad():
            self.student.head.bias.fill_(value)

    def losses(self, x: torch.Tensor, features: Sequence[torch.Tensor], y: torch.Tensor, cfg: TrainConfig) -> dict:
        teacher = self.qam(features)
        h, y_s = self.student(x)
        out = {
            "reg_s": smooth_l1(y, y_s).mean(),
            "reg_t": smooth_l1(y, teacher["y_t"]).mean(),
            "kd": kd_loss(teacher["g"], h, cfg.distill_loss_kind).mean(),
            "sparse": sparsity_loss(teacher["alpha"]).mean(),
            "alpha": teacher["alpha"],
        }
        out["total"] = combine_losses(out["reg_s"], out["reg_t"], out["kd"], out["sparse"],
                                      cfg.gamma, cfg.effective_lambda)
        return out


def features_tensor(pool: ExtractorPool, clip: VideoClip, dtype=torch.float32) -> list[torch.Tensor]:
    return [torch.from_numpy(f.values.copy()).to(dtype).unsqueeze(0) for f in extract_all(pool, clip)]


# -- checkpoint -----------------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    tensors: dict              # model parameters, name -> tensor
    optim_m: dict
    optim_v: dict
    optim_step: int
    step: int
    extractor_names: list
    extractor_dims: list
    rng_state: dict
    trainer_state: dict = field(default_factory=dict)

    def build_model(self) -> AdaDQA:
        model = AdaDQA(self.extractor_dims, self.config)
        model.load_state_dict({k: v.clone() for k, v in self.tensors.items()})
        return model


def _pack_tensor_table(prefix_tensors: Iterable[tuple[str, torch.Tensor]]) -> bytes:
    items = list(prefix_tensors)
    parts = [struct.pack("<I", len(items))]
    for name, t in items:
        raw = name.encode()
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Binary layout: magic, version, JSON header, named fp32 tensor table."""
    header = {
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "optim_step": ckpt.optim_step,
        "extractor_names": list(ckpt.extractor_names),
        "extractor_dims": list(ckpt.extractor_dims),
        "rng_state": ckpt.rng_state,
        "trainer_state": ckpt.trainer_state,
    }
    hdr = json.dumps(header).encode()
    tensors = [(f"param/{k}", v) for k, v in ckpt.tensors.items()]
    tensors += [(f"optim.m/{k}", v) for k, v in ckpt.optim_m.items()]
    tensors += [(f"optim.v/{k}", v) for k, v in ckpt.optim_v.items()]
    blob = CKPT_MAGIC + struct.pack("<I", CKPT_VERSION) + struct.pack("<I", len(hdr)) + hdr + _pack_tensor_table(tensors)
    Path(path).write_bytes(blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version = struct.unpack("<I", take(4))[0]
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    header = json.loads(take(struct.unpack("<I", take(4))[0]).decode())
    groups = {"param": {}, "optim.m": {}, "optim.v": {}}
    for _ in range(struct.unpack("<I", take(4))[0]):
        name = take(struct.unpack("<H", take(2))[0]).decode()
        ndim = struct.unpack("<B", take(1))[0]
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        group, key = name.split("/", 1)
        groups[group][key] = torch.from_numpy(arr)
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return Checkpoint(
        config=validate_config(TrainConfig.from_dict(header["config"])),
        tensors=groups["param"],
        optim_m=groups["optim.m"],
        optim_v=groups["optim.v"],
        optim_step=header["optim_step"],
        step=header["step"],
        extractor_names=header["extractor_names"],
        extractor_dims=header["extractor_dims"],
        rng_state=header["rng_state"],
        trainer_state=header["trainer_state"],
    )


# -- training loop --------------------------------------------------------------

class Trainer:
    """Single-writer training loop over (clip, record) pairs.

    Every iteration samples and crops a clip, runs the frozen pool, the QAM
    and the student, combines the losses and applies one AdamW update.
    """

    def __init__(self, cfg: TrainConfig, pool: ExtractorPool, train_items: Sequence,
                 log_fn: Optional[Callable[[dict], None]] = None):
        self.cfg = validate_config(cfg)
        if not train_items:
            raise ValueError("training split is empty")
        if len(pool) != self.cfg.n_extractors:
            self.cfg = self.cfg.replace(n_extractors=len(pool))
        self.pool = pool
        self.items = list(train_items)
        self.plan = SamplingPlan.from_config(self.cfg)
        self.log_fn = log_fn

        torch.manual_seed(self.cfg.seed)
        self.model = AdaDQA(pool.dims, self.cfg)
        self.model.set_output_bias(float(np.mean([rec.mos for _, rec in self.items])))
        self.optim = OptimizerState(weight_decay=self.cfg.weight_decay)
        self.rng = np.random.default_rng(self.cfg.seed)

        n = len(self.items)
        self.steps_per_epoch = math.ceil(n / self.cfg.batch_size)
        self.total_steps = self.cfg.epochs * self.steps_per_epoch
        self.warmup_steps = self.cfg.warmup_epochs * self.steps_per_epoch
        self.step = 0
        self.order: Optional[np.ndarray] = None
        self.pos = 0
        self.logs: list[dict] = []

    @property
    def done(self) -> bool:
        return self.step >= self.total_steps

    def _next_batch(self) -> np.ndarray:
        if self.order is None or self.pos >= len(self.order):
            self.order = self.rng.permutation(len(self.items))
            self.pos = 0
        batch = self.order[self.pos:self.pos + self.cfg.batch_size]
        self.pos += len(batch)
        return batch

    def _offset(self, video: VideoClip) -> int:
        if self.cfg.offset_mode == "fixed":
            return 0
        room = video.t - self.plan.span
        return int(self.rng.integers(0, room + 1)) if room > 0 else 0

    def train_step(self) -> dict:
        if self.done:
            raise TrainingError("training already finished")
        batch = self._next_batch()
        params = dict(self.model.named_parameters())
        self.model.zero_grad(set_to_none=True)
        sums = {"reg_s": 0.0, "reg_t": 0.0, "kd": 0.0, "sparse": 0.0, "total": 0.0}
        for i in batch:
            video, rec = self.items[int(i)]
            clip = prepare_clip(video, self.plan, self._offset(video))
            feats = features_tensor(self.pool, clip)
            y = torch.tensor([rec.mos], dtype=torch.float32)
            out = self.model.losses(clip_tensor(clip), feats, y, self.cfg)
            loss = out["total"] / len(batch)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at iteration {self.step + 1} (clip {rec.source_id})")
            loss.backward()
            for k in sums:
                sums[k] += float(out[k].detach()) / len(batch)
        self.step += 1
        lr = lr_at(self.step, self.total_steps, self.warmup_steps, self.cfg.lr_init)
        grads = {name: p.grad for name, p in params.items()}
        optimizer_step(self.optim, params, grads, lr)
        record = {"step": self.step, **sums, "lr": lr}
        self.logs.append(record)
        if self.log_fn is not None:
            self.log_fn(record)
        return record

    def run(self, max_steps: Optional[int] = None) -> list[dict]:
        taken = 0
        while not self.done and (max_steps is None or taken < max_steps):
            rec = self.train_step()
            taken += 1
            if rec["step"] % self.steps_per_epoch == 0:
                epoch = rec["step"] // self.steps_per_epoch
                recent = self.logs[-self.steps_per_epoch:]
                log.info("epoch %d/%d mean loss %.4f", epoch, self.cfg.epochs,
                         np.mean([r["total"] for r in recent]))
        return self.logs

    def epoch_losses(self) -> list[float]:
        k = self.steps_per_epoch
        return [float(np.mean([r["total"] for r in self.logs[i:i + k]])) for i in range(0, len(self.logs), k)]

    # checkpoint round trip

    def checkpoint(self) -> Checkpoint:
        names = [n for n, _ in self.model.named_parameters()]
        return Checkpoint(
            config=self.cfg,
            tensors={k: v.detach().clone() for k, v in self.model.state_dict().items()},
            optim_m={k: self.optim.m[k].clone() for k in names if k in self.optim.m},
            optim_v={k: self.optim.v[k].clone() for k in names if k in self.optim.v},
            optim_step=self.optim.step,
            step=self.step,
            extractor_names=self.pool.names,
            extractor_dims=self.pool.dims,
            rng_state=self.rng.bit_generator.state,
            trainer_state={
                "pos": self.pos,
                "order": None if self.order is None else [int(i) for i in self.order],
                "n_items": len(self.items),
            },
        )

    @classmethod
    def resume(cls, ckpt: Checkpoint, pool: ExtractorPool, train_items: Sequence,
               log_fn: Optional[Callable[[dict], None]] = None) -> "Trainer":
        if pool.names != list(ckpt.extractor_names):
            raise ValueError(f"pool {pool.names} does not match checkpoint {ckpt.extractor_names}")
        if len(train_items) != ckpt.trainer_state.get("n_items", len(train_items)):
            raise ValueError("training split size differs from the checkpointed run")
        tr = cls(ckpt.config, pool, train_items, log_fn)
        tr.model.load_state_dict({k: v.clone() for k, v in ckpt.tensors.items()})
        tr.optim.m = {k: v.clone() for k, v in ckpt.optim_m.items()}
        tr.optim.v = {k: v.clone() for k, v in ckpt.optim_v.items()}
        tr.optim.step = ckpt.optim_step
        tr.step = ckpt.step
        tr.rng.bit_generator.state = ckpt.rng_state
        order = ckpt.trainer_state.get("order")
        tr.order = None if order is None else np.asarray(order, dtype=np.int64)
        tr.pos = ckpt.trainer_state.get("pos", 0)
        return tr


@dataclass
class TrainResult:
    model: AdaDQA
    checkpoint: Checkpoint
    logs: list
    epoch_losses: list


def train(cfg: TrainConfig, dataset, pool: ExtractorPool,
          log_fn: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train on ``dataset`` (a SynthDataset or a list of (clip, record)); returns the last checkpoint."""
    items = dataset.train if hasattr(dataset, "train") else list(dataset)
    trainer = Trainer(cfg, pool, items, log_fn)
    trainer.run()
    return TrainResult(trainer.model, trainer.checkpoint(), trainer.logs, trainer.epoch_losses())
