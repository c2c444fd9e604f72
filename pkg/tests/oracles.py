"""Independent reference implementations used as test oracles."""

import math

import numpy as np
import torch


def average_ranks(values):
    """1-based ranks, ties get the mean of the positions they span (explicit O(n^2) loop)."""
    values = list(values)
    ranks = []
    for v in values:
        below = sum(1 for u in values if u < v)
        equal = sum(1 for u in values if u == v)
        ranks.append(below + (equal + 1) / 2.0)
    return ranks


def pearson_direct(x, y):
    n = len(x)
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def spearman_direct(x, y):
    return pearson_direct(average_ranks(x), average_ranks(y))


def central_diff_grad(fn, params, eps=1e-5):
    """Central finite differences of scalar ``fn()`` w.r.t. each tensor in ``params`` (in place perturbation)."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(fn())
                flat[i] = orig - eps
                down = float(fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def rel_error(a: torch.Tensor, b: torch.Tensor, floor=1e-10) -> float:
    return float((a - b).norm() / max(a.norm().item(), b.norm().item(), floor))


def gelu_exact(x):
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))
