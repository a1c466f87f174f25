"""Rank correlation and distribution-fit statistics used for validation."""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, DomainError


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ContractError(f"need a non-empty vector, got shape {v.shape}")
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(a, b) -> float:
    """Spearman rank correlation with average ranks for ties."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ContractError(f"need two equal-length vectors of size >= 2, "
                            f"got {a.shape} and {b.shape}")
    ra, rb = average_ranks(a), average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if denom == 0.0:
        raise DomainError("rank correlation undefined: a vector is constant")
    return float(ra @ rb) / denom


def ks_statistic(samples, cdf) -> float:
    """sup-norm distance between the empirical CDF and ``cdf``."""
    s = np.sort(np.asarray(samples, dtype=np.float64))
    if s.size == 0:
        raise ContractError("need at least one sample")
    n = s.size
    f = np.array([cdf(v) for v in s])
    upper = np.abs(np.arange(1, n + 1) / n - f).max()
    lower = np.abs(f - np.arange(0, n) / n).max()
    return float(max(upper, lower))


def ks_threshold(n: int, alpha: float = 0.01) -> float:
    """Asymptotic one-sample Kolmogorov-Smirnov critical value c(alpha)/sqrt(n)."""
    if n < 1 or not 0.0 < alpha < 1.0:
        raise ContractError(f"bad KS threshold arguments n={n}, alpha={alpha}")
    return math.sqrt(-0.5 * math.log(alpha / 2.0)) / math.sqrt(n)
