"""Kruskal-Wallis H test and Nemenyi-type pairwise comparison on mean ranks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaincc
from scipy.stats import rankdata, studentized_range


def _check_groups(groups) -> list[np.ndarray]:
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(groups) < 2:
        raise ValueError("need at least 2 groups")
    if any(g.size == 0 for g in groups):
        raise ValueError("every group must be non-empty")
    return groups


def kruskal_wallis(groups) -> tuple[float, float]:
    """Tie-corrected H statistic and its chi-square (df = k - 1) p-value."""
    groups = _check_groups(groups)
    pooled = np.concatenate(groups)
    n = pooled.size
    ranks = rankdata(pooled)  # mid-ranks for ties
    _, tie_counts = np.unique(pooled, return_counts=True)
    correction = 1.0 - float(np.sum(tie_counts.astype(np.float64) ** 3 - tie_counts)) / (n ** 3 - n)
    if correction <= 0.0:
        return 0.0, 1.0
    h = 0.0
    start = 0
    for g in groups:
        r = ranks[start:start + g.size].sum()
        h += r * r / g.size
        start += g.size
    h = (12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)) / correction
    h = max(h, 0.0)
    df = len(groups) - 1
    return float(h), float(gammaincc(df / 2.0, h / 2.0))


@dataclass(frozen=True)
class PairComparison:
    i: int
    j: int
    difference: float
    critical_value: float
    significant: bool

    def to_dict(self) -> dict:
        return {
            "i": self.i, "j": self.j, "difference": self.difference,
            "critical_value": self.critical_value, "significant": self.significant,
        }


def pairwise_posthoc(groups, alpha: float = 0.05) -> list[list[PairComparison | None]]:
    """Nemenyi comparison of mean ranks.

    Pair (i, j) differs when ``|Rbar_i - Rbar_j|`` exceeds
    ``q(alpha, k, inf) / sqrt(2) * sqrt(N (N + 1) / 12 * (1/n_i + 1/n_j))``.
    Returns a symmetric k x k matrix with ``None`` on the diagonal.
    """
    groups = _check_groups(groups)
    k = len(groups)
    pooled = np.concatenate(groups)
    n = pooled.size
    ranks = rankdata(pooled)
    sizes = [g.size for g in groups]
    offsets = np.cumsum([0] + sizes)
    mean_ranks = [ranks[offsets[i]:offsets[i + 1]].mean() for i in range(k)]
    q = float(studentized_range.ppf(1.0 - alpha, k, np.inf))
    out: list[list[PairComparison | None]] = [[None] * k for _ in range(k)]
    for i in range(k):
        for j in range(i + 1, k):
            diff = abs(mean_ranks[i] - mean_ranks[j])
            crit = q / math.sqrt(2.0) * math.sqrt(n * (n + 1) / 12.0 * (1.0 / sizes[i] + 1.0 / sizes[j]))
            sig = diff > crit
            out[i][j] = PairComparison(i, j, float(diff), crit, bool(sig))
            out[j][i] = PairComparison(j, i, float(diff), crit, bool(sig))
    return out
