"""Chi-squared contingency, Kruskal-Wallis and Welch t tests with authored p-values."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .metrics import midranks
from .special import chi2_sf, t_sf_two_sided


@dataclass(frozen=True)
class TestResult:
    name: str
    statistic: float
    dof: float
    pvalue: float


def chi2_contingency(table) -> TestResult:
    """Pearson chi-squared test of independence on an r x c table of counts.

    All-zero rows and columns are dropped before the expected counts are formed.
    """
    t = np.asarray(table, dtype=np.float64)
    if t.ndim != 2 or t.size == 0:
        raise ValueError("contingency table must be a nonempty 2-D array")
    if (t < 0).any():
        raise ValueError("contingency counts must be non-negative")
    t = t[t.sum(axis=1) > 0][:, t.sum(axis=0) > 0]
    if t.size == 0:
        raise ValueError("contingency table has no counts")
    r, c = t.shape
    dof = (r - 1) * (c - 1)
    if dof == 0:
        return TestResult("chi-squared", 0.0, 0.0, 1.0)
    expected = np.outer(t.sum(axis=1), t.sum(axis=0)) / t.sum()
    stat = float(((t - expected) ** 2 / expected).sum())
    return TestResult("chi-squared", float(stat), float(dof), chi2_sf(stat, dof))


def kruskal_wallis(groups: Sequence[Sequence[float]]) -> TestResult:
    """H statistic with the standard tie correction and a chi-squared(k-1) p-value."""
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(groups) < 2:
        raise ValueError("Kruskal-Wallis needs at least two groups")
    if any(g.size == 0 for g in groups):
        raise ValueError("Kruskal-Wallis groups must be nonempty")
    pooled = np.concatenate(groups)
    n = pooled.size
    ranks = midranks(pooled)
    h = 0.0
    start = 0
    for g in groups:
        r = ranks[start:start + g.size]
        h += r.sum() ** 2 / g.size
        start += g.size
    h = 12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)
    _, counts = np.unique(pooled, return_counts=True)
    correction = 1.0 - float((counts ** 3 - counts).sum()) / (n ** 3 - n)
    dof = len(groups) - 1
    if correction == 0:
        # every value tied: no evidence against equal distributions
        return TestResult("kruskal-wallis", 0.0, float(dof), 1.0)
    h = max(h / correction, 0.0)
    return TestResult("kruskal-wallis", float(h), float(dof), chi2_sf(h, dof))


def welch_t(a: Sequence[float], b: Sequence[float]) -> TestResult:
    """Two-sided Welch unequal-variance t test with Welch-Satterthwaite degrees of freedom."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("t test needs at least two observations per group")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    se2 = va + vb
    if se2 == 0:
        raise ValueError("t test is undefined when both groups have zero variance")
    t = float((a.mean() - b.mean()) / math.sqrt(se2))
    dof = se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    return TestResult("welch-t", float(t), float(dof), t_sf_two_sided(t, dof))
