"""Student model and the training losses (regression, distillation, combined objective)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import VideoClip
from .qam import init_linear


class Student3D(nn.Module):
    """Small 3D CNN backbone: strided conv stages with GroupNorm and GELU, global average pool to ``d``.

    A fixed, parameter-free front end appends a spatial high-pass residual and a
    temporal frame difference to the RGB input; those are where blur, noise and
    motion show up, and a tiny network trained on a few hundred clips learns much
    faster from them than from raw pixels.
    """

    highpass_gain = 4.0

    def __init__(self, widths: Sequence[int] = (16, 32, 64), d: int = 32):
        super().__init__()
        chans = [9, *widths, d]
        layers = []
        for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
            stride = (1, 2, 2) if i == 0 else (2, 2, 2)
            layers.append(nn.Conv3d(cin, cout, kernel_size=3, stride=stride, padding=1))
            if i < len(chans) - 2:
                layers.append(nn.GroupNorm(1, cout))
            layers.append(nn.GELU())
        self.features = nn.Sequential(*layers)
        self.d = d

    def front_end(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, T, H, W, C) in [0, 1] -> (B, 9, T, H, W)
        x = (x.permute(0, 4, 1, 2, 3) - 0.5) / 0.25
        local_mean = F.avg_pool3d(x, (1, 3, 3), stride=1, padding=(0, 1, 1), count_include_pad=False)
        temporal = torch.cat([torch.zeros_like(x[:, :, :1]), x[:, :, 1:] - x[:, :, :-1]], dim=2)
        return torch.cat([x, self.highpass_gain * (x - local_mean), temporal], dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(self.front_end(x)).mean(dim=(2, 3, 4))


class StudentModel(nn.Module):
    """Backbone producing ``h`` plus a single linear regression head for ``y_s``."""

    def __init__(self, d: int = 32, widths: Sequence[int] = (16, 32, 64), frame_count: int = 8, crop_size: int = 32):
        super().__init__()
        self.backbone = Student3D(widths, d)
        self.head = init_linear(nn.Linear(d, 1))
        self.d = d
        self.input_geometry = (frame_count, crop_size, crop_size)
        self.forward_count = 0

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self.forward_count += x.shape[0]
        h = self.backbone(x)
        return h, self.head(h).squeeze(-1)


def clip_tensor(clip: VideoClip, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.array(clip.frames, dtype=np.float32)).to(dtype).unsqueeze(0)


def student_forward(model: StudentModel, clip: VideoClip) -> tuple[torch.Tensor, torch.Tensor]:
    t, h, w, _ = clip.shape
    if (t, h, w) != model.input_geometry:
        raise ValueError(f"clip geometry {(t, h, w)} does not match student input {model.input_geometry}")
    dtype = next(model.parameters()).dtype
    h_vec, y_s = model(clip_tensor(clip, dtype))
    return h_vec[0], y_s[0]


# -- losses ---------------------------------------------------------------------

def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def smooth_l1(y, y_hat) -> torch.Tensor:
    """0.5 r^2 for |r| < 1, |r| - 0.5 otherwise."""
    r = _t(y) - _t(y_hat)
    a = r.abs()
    return torch.where(a < 1.0, 0.5 * r * r, a - 0.5)


def _euclidean(diff: torch.Tensor) -> torch.Tensor:
    sq = (diff * diff).sum(dim=-1)
    nonzero = sq > 0
    # zero subgradient where g == h
    return torch.where(nonzero, torch.sqrt(torch.where(nonzero, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def js_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Jensen-Shannon divergence (natural log) between distributions on the last axis."""
    m = 0.5 * (p + q)

    def kl(a, b):
        return torch.where(a > 0, a * (torch.log(a) - torch.log(b)), torch.zeros_like(a)).sum(dim=-1)

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def kd_loss(g, h, kind: str = "L2") -> torch.Tensor:
    g, h = _t(g), _t(h)
    if g.shape != h.shape:
        raise ValueError(f"kd_loss length mismatch: {tuple(g.shape)} vs {tuple(h.shape)}")
    if kind == "L2":
        return _euclidean(g - h)
    if kind == "L2_squared":
        return ((g - h) ** 2).sum(dim=-1)
    if kind == "L1":
        return (g - h).abs().sum(dim=-1)
    if kind == "JS":
        return js_divergence(F.softmax(g, dim=-1), F.softmax(h, dim=-1))
    raise ValueError(f"unknown distillation loss kind {kind!r}")


@dataclass(frozen=True)
class LossBreakdown:
    reg_s: float
    reg_t: float
    kd: float
    sparse: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def combine_losses(reg_s, reg_t, kd, sparse, gamma: float, lambda_: float):
    """reg_s + gamma * (reg_t + kd) + lambda * sparse; zero-weighted terms are left out of the graph."""
    total = reg_s
    if gamma != 0:
        total = total + gamma * (reg_t + kd)
    if lambda_ != 0:
        total = total + lambda_ * sparse
    return total


def total_loss(reg_s, reg_t, kd, sparse, gamma: float = 0.1, lambda_: float = 0.8) -> LossBreakdown:
    parts = {"reg_s": reg_s, "reg_t": reg_t, "kd": kd, "sparse": sparse}
    values = {}
    for name, v in parts.items():
        v = float(v)
        if not math.isfinite(v) or v < 0:
            raise ValueError(f"loss component {name}={v} must be finite and >= 0")
        values[name] = v
    total = combine_losses(values["reg_s"], values["reg_t"], values["kd"], values["sparse"], gamma, lambda_)
    return LossBreakdown(total=float(total), **values)
