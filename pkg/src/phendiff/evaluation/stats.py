"""Reconstruction error, condition-mean correlations and group tests."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
from scipy import stats

from .features import FEATURE_NAMES, feature_matrix


@dataclass(frozen=True)
class ReconstructionLoss:
    sum: float
    """Sum of squared pixel differences."""
    mean: float
    """Mean squared pixel difference."""


def reconstruction_loss(x, x_rec) -> ReconstructionLoss:
    x = torch.as_tensor(x).to(torch.float64)
    x_rec = torch.as_tensor(x_rec).to(torch.float64)
    if x.shape != x_rec.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    sq = (x - x_rec).pow(2)
    return ReconstructionLoss(float(sq.sum()), float(sq.mean()))


def pearson(a: Sequence[float], b: Sequence[float]) -> float | None:
    """Pearson r of two equal-length vectors; ``None`` when either side is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("pearson needs two 1-D vectors of equal length")
    if a.size < 2:
        raise ValueError("pearson needs at least two points")
    da, db = a - a.mean(), b - b.mean()
    na, nb = math.sqrt(float(da @ da)), math.sqrt(float(db @ db))
    scale = max(np.abs(a).max(), np.abs(b).max(), 1.0)
    if na <= 1e-12 * scale or nb <= 1e-12 * scale:
        return None
    return float(np.clip((da @ db) / (na * nb), -1.0, 1.0))


@dataclass
class CorrelationResult:
    treatment: str
    conditions: list[int]
    real_means: dict[str, list[float]]
    gen_means: dict[str, list[float]]
    r: dict[str, float | None]
    """Feature -> Pearson r, ``None`` where undefined (zero variance)."""


def _condition_means(sets: Mapping[int, object], cond: int, cache: dict) -> np.ndarray:
    if cond not in cache:
        imgs = sets[cond]
        if len(imgs) < 2:
            raise ValueError(f"condition {cond} has {len(imgs)} images; need at least 2")
        cache[cond] = feature_matrix(imgs).mean(axis=0)
    return cache[cond]


def condition_mean_correlation(
    real_sets: Mapping[int, object],
    gen_sets: Mapping[int, object],
    treatment_grouping: Mapping[str, Sequence[int]],
    features: Sequence[str] = FEATURE_NAMES,
) -> dict[str, CorrelationResult]:
    """Per treatment and feature, correlate real vs generated per-condition means.

    ``treatment_grouping`` maps a treatment to its condition indices in
    concentration order; every treatment needs at least 3 conditions present
    on both sides.
    """
    real_cache: dict = {}
    gen_cache: dict = {}
    index = {name: FEATURE_NAMES.index(name) for name in features}
    out = {}
    for treatment, conds in treatment_grouping.items():
        conds = [int(c) for c in conds]
        missing = [c for c in conds if c not in real_sets or c not in gen_sets]
        if missing:
            raise ValueError(f"treatment {treatment!r}: conditions {missing} missing on one side")
        if len(conds) < 3:
            raise ValueError(f"treatment {treatment!r} has {len(conds)} conditions; need at least 3")
        real = np.stack([_condition_means(real_sets, c, real_cache) for c in conds])
        gen = np.stack([_condition_means(gen_sets, c, gen_cache) for c in conds])
        res = CorrelationResult(treatment, conds, {}, {}, {})
        for name, j in index.items():
            res.real_means[name] = real[:, j].tolist()
            res.gen_means[name] = gen[:, j].tolist()
            res.r[name] = pearson(real[:, j], gen[:, j])
        out[treatment] = res
    return out


def correlation_histogram(results: Mapping[str, CorrelationResult], bins: int = 20) -> dict[str, dict]:
    """Histogram of defined r values per treatment over ``[-1, 1]``."""
    edges = np.linspace(-1.0, 1.0, bins + 1)
    hist = {}
    for treatment, res in results.items():
        values = [v for v in res.r.values() if v is not None]
        counts, _ = np.histogram(values, bins=edges)
        hist[treatment] = {"edges": edges.tolist(), "counts": counts.tolist(), "undefined": sum(v is None for v in res.r.values())}
    return hist


@dataclass(frozen=True)
class TTestResult:
    statistic: float
    p_value: float
    mean_a: float
    mean_b: float


def two_sided_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Student's two-sample t-test (pooled variance), two-sided."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    res = stats.ttest_ind(a, b, equal_var=True)
    return TTestResult(float(res.statistic), float(res.pvalue), float(a.mean()), float(b.mean()))
