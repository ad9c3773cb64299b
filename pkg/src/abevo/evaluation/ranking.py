"""Score aggregation, ranked-hit curves and known-binder matching."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..seqcore import edit_distance

# identities are ratios of small integers; this absorbs float rounding at the threshold
_IDENTITY_SLACK = 1e-12


def trimmed_mean(values: Sequence[float], trim_fraction: float = 0.1) -> float:
    """Mean after dropping floor(trim_fraction * n) values from each tail."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("trimmed_mean needs at least one value")
    if not 0.0 <= trim_fraction < 0.5:
        raise ValueError("trim_fraction must lie in [0, 0.5)")
    k = int(math.floor(trim_fraction * v.size))
    kept = v[k:v.size - k]
    if kept.size == 0:
        raise ValueError("every value was trimmed")
    return float(kept.mean())


@dataclass(frozen=True)
class Curve:
    x: np.ndarray
    y: np.ndarray
    baseline: np.ndarray

    def at(self, rank: int) -> tuple[float, float]:
        """(curve, baseline) after ``rank`` items (rank counted from 1)."""
        return float(self.y[rank - 1]), float(self.baseline[rank - 1])


def cumulative_match_curve(ranked_hits: Sequence[bool]) -> Curve:
    """Running hit count down a ranking, with the random-order expectation as baseline."""
    h = np.asarray(ranked_hits, dtype=np.int64)
    n = h.size
    x = np.arange(1, n + 1, dtype=np.float64)
    y = np.cumsum(h).astype(np.float64)
    total = float(y[-1]) if n else 0.0
    baseline = x * (total / n) if n else x.copy()
    return Curve(x, y, baseline)


@dataclass(frozen=True)
class HitRow:
    prob_threshold: float
    identity_threshold: float
    total: int
    hits: int

    @property
    def hit_rate(self) -> float:
        """Percentage of above-threshold predictions that hit; 0 when nothing passes."""
        return 100.0 * self.hits / self.total if self.total else 0.0

    def as_dict(self) -> dict:
        return {"prob_threshold": self.prob_threshold, "identity_threshold": self.identity_threshold,
                "total": self.total, "hits": self.hits, "hit_rate": self.hit_rate}


@dataclass(frozen=True)
class Match:
    query: str
    target: str
    identity: float


class BinderIndex:
    """Known-binder CDR-H3 set with memoized best-match lookups.

    A target can only reach identity t against query q if |len(q) - len(target)| <= (1 - t) * len(q),
    so targets are bucketed by length and only the feasible buckets are scanned.
    """

    def __init__(self, db: Sequence[str]):
        if not db:
            raise ValueError("binder database is empty")
        self.entries = sorted(set(db))
        self.exact = set(self.entries)
        self.by_len: dict[int, list[str]] = {}
        for s in self.entries:
            self.by_len.setdefault(len(s), []).append(s)
        self._cache: dict[tuple[str, float], Match] = {}

    def best(self, query: str, identity_threshold: float) -> Match:
        """Closest entry among those that could reach ``identity_threshold``; identity 0 if none can."""
        key = (query, identity_threshold)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        if query in self.exact:
            m = Match(query, query, 1.0)
        else:
            q = len(query)
            slack = int(math.floor((1.0 - identity_threshold) * q + _IDENTITY_SLACK))
            best_d, best_t = None, ""
            for length in range(max(1, q - slack), q + slack + 1):
                for t in self.by_len.get(length, ()):
                    d = edit_distance(query, t)
                    if best_d is None or d < best_d:
                        best_d, best_t = d, t
            m = Match(query, best_t, 0.0 if best_d is None else max(0.0, 1.0 - best_d / q))
        self._cache[key] = m
        return m

    def is_hit(self, query: str, identity_threshold: float) -> bool:
        return self.best(query, identity_threshold).identity >= identity_threshold - _IDENTITY_SLACK


def binder_match(predicted: Sequence[tuple[str, float]], db: Sequence[str] | BinderIndex,
                 prob_threshold: float, identity_threshold: float = 0.85) -> tuple[HitRow, list[Match]]:
    """Hit-rate row for (cdr3, score) predictions whose score exceeds ``prob_threshold``."""
    if not (0.0 <= prob_threshold <= 1.0 and 0.0 <= identity_threshold <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    index = db if isinstance(db, BinderIndex) else BinderIndex(db)
    total = hits = 0
    matches = []
    for cdr3, score in predicted:
        if not score > prob_threshold:
            continue
        total += 1
        if cdr3 and index.is_hit(cdr3, identity_threshold):
            hits += 1
            matches.append(index.best(cdr3, identity_threshold))
    return HitRow(prob_threshold, identity_threshold, total, hits), matches
