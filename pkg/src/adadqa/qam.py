"""Quality-aware acquisition: per-extractor transforms, sigmoid gating, weighted sum."""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn

from .core import BLOCK_ORDERS


def init_linear(layer: nn.Linear) -> nn.Linear:
    bound = 1.0 / math.sqrt(layer.in_features)
    nn.init.uniform_(layer.weight, -bound, bound)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


class TransformBlock(nn.Module):
    """Maps one extractor's feature to the shared width ``d``.

    Default order is FC -> FC -> LayerNorm -> GELU; ``fc_norm_gelu_fc`` gives
    the (FC -> Norm -> GELU) -> FC reading instead.
    """

    def __init__(self, in_dim: int, d: int, order: str = "fc_fc_norm_gelu"):
        super().__init__()
        if order not in BLOCK_ORDERS:
            raise ValueError(f"unknown block order {order!r}")
        self.in_dim = in_dim
        self.d = d
        self.order = order
        self.fc1 = init_linear(nn.Linear(in_dim, d))
        self.fc2 = init_linear(nn.Linear(d, d))
        self.norm = nn.LayerNorm(d)
        self.act = nn.GELU()

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if self.order == "fc_fc_norm_gelu":
            return self.act(self.norm(self.fc2(self.fc1(f))))
        return self.fc2(self.act(self.norm(self.fc1(f))))


class GatingNetwork(nn.Module):
    """Single linear layer over the concatenated raw features, then sigmoid."""

    def __init__(self, in_dims: Sequence[int]):
        super().__init__()
        self.in_dims = list(in_dims)
        self.fc = init_linear(nn.Linear(sum(self.in_dims), len(self.in_dims)))

    def logits(self, features: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.fc(torch.cat(list(features), dim=-1))

    def forward(self, features: Sequence[torch.Tensor]) -> torch.Tensor:
        return torch.sigmoid(self.logits(features))


class TeacherHead(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.fc = init_linear(nn.Linear(d, 1))

    def forward(self, g: torch.Tensor) -> torch.Tensor:
        return self.fc(g).squeeze(-1)


def _check_dim(t: torch.Tensor, expected: int, what: str) -> None:
    if t.shape[-1] != expected:
        raise ValueError(f"{what}: expected last dimension {expected}, got {t.shape[-1]}")


def transform(block: TransformBlock, f: torch.Tensor) -> torch.Tensor:
    _check_dim(f, block.in_dim, "transform input")
    return block(f)


def gate(net: GatingNetwork, features: Sequence[torch.Tensor]) -> torch.Tensor:
    if len(features) != len(net.in_dims):
        raise ValueError(f"gate expects {len(net.in_dims)} features, got {len(features)}")
    for i, (f, dim) in enumerate(zip(features, net.in_dims)):
        _check_dim(f, dim, f"gate feature {i}")
    return net(features)


def aggregate(transformed, alpha: torch.Tensor) -> torch.Tensor:
    """g = sum_i alpha_i * f'_i (no renormalization of alpha).

    ``transformed`` is a list of (..., d) tensors or a stacked (..., n, d) tensor.
    """
    if isinstance(transformed, (list, tuple)):
        transformed = torch.stack(list(transformed), dim=-2)
    if transformed.shape[-2] != alpha.shape[-1]:
        raise ValueError(f"{transformed.shape[-2]} transformed features but {alpha.shape[-1]} gating weights")
    return (alpha.unsqueeze(-1) * transformed).sum(dim=-2)


def sparsity_loss(alpha: torch.Tensor) -> torch.Tensor:
    return alpha.abs().sum(dim=-1)


def teacher_predict(head: TeacherHead, g: torch.Tensor) -> torch.Tensor:
    _check_dim(g, head.fc.in_features, "teacher head input")
    return head(g)


class QAM(nn.Module):
    """Transforms, gating network and teacher regression head for one extractor pool."""

    def __init__(self, in_dims: Sequence[int], d: int = 32, block_order: str = "fc_fc_norm_gelu"):
        super().__init__()
        self.in_dims = list(in_dims)
        self.d = d
        self.blocks = nn.ModuleList(TransformBlock(k, d, block_order) for k in self.in_dims)
        self.gate = GatingNetwork(self.in_dims)
        self.head = TeacherHead(d)

    def forward(self, features: Sequence[torch.Tensor]) -> dict:
        if len(features) != len(self.blocks):
            raise ValueError(f"QAM built for {len(self.blocks)} extractors, got {len(features)} features")
        f_prime = [transform(b, f) for b, f in zip(self.blocks, features)]
        alpha = gate(self.gate, features)
        g = aggregate(f_prime, alpha)
        return {"f_prime": f_prime, "alpha": alpha, "g": g, "y_t": teacher_predict(self.head, g)}
