"""SRCC / PLCC and repeat aggregation."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .core import EvalResult


class UndefinedCorrelation(ValueError):
    pass


def _as_pairs(predicted, labels) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(predicted, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} predictions vs {y.size} labels")
    if x.size < 2:
        raise ValueError("need at least two score pairs")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("scores must be finite")
    return x, y


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(np.dot(xc, xc))
    syy = float(np.dot(yc, yc))
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("undefined correlation: constant input vector")
    r = float(np.dot(xc, yc)) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def plcc(predicted, labels) -> float:
    """Pearson linear correlation; no logistic remapping is applied."""
    return _pearson(*_as_pairs(predicted, labels))


def srcc(predicted, labels) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x, y = _as_pairs(predicted, labels)
    return _pearson(rankdata(x), rankdata(y))


def mean_metric(srcc_value: float, plcc_value: float) -> float:
    return 0.5 * (srcc_value + plcc_value)


def evaluate_scores(predicted, labels, split_seed: int = 0, dataset_id: str = "") -> EvalResult:
    s = srcc(predicted, labels)
    p = plcc(predicted, labels)
    return EvalResult(s, p, mean_metric(s, p), split_seed, dataset_id)


def aggregate_repeats(results: Sequence[EvalResult]) -> dict:
    """Sample mean and (n-1) standard deviation of SRCC and PLCC."""
    if not results:
        raise ValueError("cannot aggregate an empty list of results")
    s = np.array([r.srcc for r in results], dtype=np.float64)
    p = np.array([r.plcc for r in results], dtype=np.float64)
    ddof = 1 if len(results) > 1 else 0
    return {
        "n": len(results),
        "mean_srcc": float(s.mean()),
        "std_srcc": float(s.std(ddof=ddof)),
        "mean_plcc": float(p.mean()),
        "std_plcc": float(p.std(ddof=ddof)),
    }
