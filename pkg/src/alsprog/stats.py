"""Rank correlation, multiple-testing adjustment and contingency tests.

Tail probabilities go through the regularized incomplete beta and gamma
functions from :mod:`scipy.special`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import special, stats

MIN_SPEARMAN_N = 5


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions (column-wise for 2-D)."""
    return stats.rankdata(np.asarray(x, dtype=float), method="average", axis=0)


def t_two_sided_p(t: float, dof: float) -> float:
    """Two-sided tail probability of Student's t with ``dof`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    x = dof / (dof + t * t)
    return float(special.betainc(0.5 * dof, 0.5, x))


def chi2_sf(stat: float, dof: int) -> float:
    """Upper-tail chi-square probability, Q(dof/2, stat/2)."""
    if dof <= 0:
        return 1.0
    return float(special.gammaincc(0.5 * dof, 0.5 * stat))


@dataclass(frozen=True)
class SpearmanResult:
    rho: Optional[float]
    p_value: Optional[float]
    n: int
    reason: str = "ok"

    @property
    def testable(self) -> bool:
        return self.reason == "ok"


def spearman_columns(X, y) -> list[SpearmanResult]:
    """Spearman test of every column of ``X`` against ``y`` (no missing values)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, m = X.shape
    if n < MIN_SPEARMAN_N:
        return [SpearmanResult(None, None, n, "too_few_observations")] * m
    rx = average_ranks(X)
    ry = average_ranks(y)
    dx = rx - rx.mean(axis=0)
    dy = ry - ry.mean()
    sxx = np.einsum("ij,ij->j", dx, dx)
    syy = float(dy @ dy)
    if syy == 0.0:
        return [SpearmanResult(None, None, n, "zero_variance")] * m
    out = []
    cov = dx.T @ dy
    for j in range(m):
        if sxx[j] == 0.0:
            out.append(SpearmanResult(None, None, n, "zero_variance"))
            continue
        rho = min(1.0, max(-1.0, float(cov[j]) / math.sqrt(float(sxx[j]) * syy)))
        if abs(rho) >= 1.0 - 1e-15:
            out.append(SpearmanResult(rho, 0.0, n))
            continue
        t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
        out.append(SpearmanResult(rho, t_two_sided_p(t, n - 2), n))
    return out


def spearman_test(x, y) -> SpearmanResult:
    """Spearman rank correlation with a t-approximation p-value.

    Pairs with a NaN on either side are discarded first. Fewer than five
    complete pairs, or a constant side, yield an untestable result
    (``rho`` and ``p_value`` are None and ``reason`` says why).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = ~(np.isnan(x) | np.isnan(y))
    return spearman_columns(x[ok][:, None], y[ok])[0]


def by_adjust(p_values: Sequence[float]) -> np.ndarray:
    """Benjamini-Yekutieli adjusted p-values, returned in input order."""
    p = np.asarray(p_values, dtype=float)
    m = p.size
    if m == 0:
        return p.copy()
    c_m = math.fsum(1.0 / j for j in range(1, m + 1))
    order = np.argsort(p, kind="mergesort")
    scaled = p[order] * m * c_m / np.arange(1, m + 1)
    adjusted_sorted = np.minimum.accumulate(scaled[::-1])[::-1]
    adjusted_sorted = np.minimum(adjusted_sorted, 1.0)
    out = np.empty(m)
    out[order] = adjusted_sorted
    # guard the p_adj >= p invariant against rounding in the product
    return np.maximum(out, p)


@dataclass(frozen=True)
class Chi2Result:
    statistic: float
    dof: int
    p_value: float
    min_expected: float


def chi2_same_distribution(sample_a: Sequence[int], sample_b: Sequence[int]) -> Chi2Result:
    """Pearson chi-squared homogeneity test for two samples of categorical scores.

    No continuity correction. Categories that occur in neither sample are
    left out of the table.
    """
    a = np.asarray(sample_a)
    b = np.asarray(sample_b)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    cats = np.union1d(a, b)
    table = np.array(
        [[np.count_nonzero(a == c) for c in cats], [np.count_nonzero(b == c) for c in cats]],
        dtype=float,
    )
    table = table[:, table.sum(axis=0) > 0]
    dof = table.shape[1] - 1
    if dof == 0:
        return Chi2Result(0.0, 0, 1.0, float(table.sum(axis=1).min()))
    expected = np.outer(table.sum(axis=1), table.sum(axis=0)) / table.sum()
    stat = float(np.sum((table - expected) ** 2 / expected))
    return Chi2Result(stat, dof, chi2_sf(stat, dof), float(expected.min()))
