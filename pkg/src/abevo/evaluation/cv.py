"""Grouped k-fold splits."""

from __future__ import annotations

import random
from typing import Optional, Sequence

import numpy as np

from ..seqcore import AntibodyRecord

GROUPINGS = ("sequence", "profile")


def group_keys(records: Sequence[AntibodyRecord], grouping: str) -> list[str]:
    if grouping == "sequence":
        # identical antibody strings must land in the same fold
        return [r.antibody for r in records]
    if grouping == "profile":
        missing = [r.id for r in records if r.profile_id is None]
        if missing:
            raise ValueError(f"profile grouping needs profile_id on every record (missing on {missing[0]})")
        return [r.profile_id for r in records]
    raise ValueError(f"unknown grouping {grouping!r}; expected one of {GROUPINGS}")


def kfold_groups(keys: Sequence[str], k: int = 10, seed: int = 0,
                 strata: Optional[Sequence] = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """(train, valid) index arrays; groups are shuffled then dealt into k near-equal folds by count.

    With ``strata`` (one value per key, constant within a group) each stratum's groups are
    shuffled and dealt round-robin, so every fold sees the same class balance.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    groups: dict[str, list[int]] = {}
    for i, key in enumerate(keys):
        groups.setdefault(key, []).append(i)
    if len(groups) < k:
        raise ValueError(f"{len(groups)} groups cannot fill {k} folds")
    rng = random.Random(seed)
    if strata is None:
        names = sorted(groups)
        rng.shuffle(names)
        bounds = [round(f * len(names) / k) for f in range(k + 1)]
        members = [names[bounds[f]:bounds[f + 1]] for f in range(k)]
    else:
        if len(strata) != len(keys):
            raise ValueError("strata must align with keys")
        by_stratum: dict = {}
        for g, idx in groups.items():
            values = {strata[i] for i in idx}
            if len(values) != 1:
                raise ValueError(f"group {g!r} spans several strata")
            by_stratum.setdefault(values.pop(), []).append(g)
        dealt: list[str] = []
        for s in sorted(by_stratum, key=str):
            names = sorted(by_stratum[s])
            rng.shuffle(names)
            dealt.extend(names)
        members = [dealt[f::k] for f in range(k)]
    n = len(keys)
    splits = []
    for f in range(k):
        valid = np.sort(np.array([i for g in members[f] for i in groups[g]], dtype=np.int64))
        mask = np.ones(n, dtype=bool)
        mask[valid] = False
        splits.append((np.flatnonzero(mask), valid))
    return splits


def kfold(records: Sequence[AntibodyRecord], k: int = 10, grouping: str = "sequence",
          seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    return kfold_groups(group_keys(records, grouping), k, seed)
