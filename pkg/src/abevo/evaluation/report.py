"""Evaluation reports with deterministic JSON and CSV serialization."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..seqcore import AntibodyRecord
from .ranking import Curve, HitRow
from .stats import TestResult, chi2_contingency, kruskal_wallis, welch_t


def _plain(x):
    """JSON-safe copy with floats rounded to 12 significant digits for stable output."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        v = float(x)
        if v != v or v in (float("inf"), float("-inf")):
            return None
        return float(f"{v:.12g}")
    return x


@dataclass
class EvalReport:
    task: str
    acc: Optional[float] = None
    auc: Optional[float] = None
    f1: Optional[float] = None
    mcc: Optional[float] = None
    folds: list[dict] = field(default_factory=list)
    confusion: Optional[np.ndarray] = None
    class_names: list[str] = field(default_factory=list)
    curves: dict[str, Curve] = field(default_factory=dict)
    hit_table: list[HitRow] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.auc is not None and not 0.0 <= self.auc <= 1.0:
            raise ValueError(f"auc {self.auc} outside [0, 1]")
        if self.mcc is not None and not -1.0 - 1e-12 <= self.mcc <= 1.0 + 1e-12:
            raise ValueError(f"mcc {self.mcc} outside [-1, 1]")
        if self.confusion is not None:
            sums = self.confusion.sum(axis=1)
            bad = (sums > 0) & (np.abs(sums - 1.0) > 1e-9)
            if bad.any():
                raise ValueError("confusion rows must sum to 1")

    def to_dict(self) -> dict:
        return _plain({
            "task": self.task,
            "acc": self.acc,
            "auc": self.auc,
            "f1": self.f1,
            "mcc": self.mcc,
            "folds": self.folds,
            "confusion": self.confusion,
            "class_names": self.class_names,
            "curves": {k: {"x": c.x, "y": c.y, "baseline": c.baseline} for k, c in sorted(self.curves.items())},
            "hit_table": [r.as_dict() for r in self.hit_table],
            "errors": self.errors,
            "meta": self.meta,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def write(self, out_dir: str | Path, stem: str = "report") -> list[Path]:
        """``<stem>.json`` plus one ``<stem>.curve.<name>.csv`` per curve."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"{stem}.json"]
        paths[0].write_text(self.to_json())
        for name, c in sorted(self.curves.items()):
            p = out / f"{stem}.curve.{name}.csv"
            write_curve_csv(c, p)
            paths.append(p)
        return paths


def write_curve_csv(curve: Curve, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "baseline"])
        for x, y, b in zip(curve.x, curve.y, curve.baseline):
            w.writerow([f"{x:.12g}", f"{y:.12g}", f"{b:.12g}"])


def read_curve_csv(path: str | Path) -> Curve:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    col = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
    return Curve(col("x"), col("y"), col("baseline"))


@dataclass
class SpecificityReport:
    germline_usage: TestResult
    mutation_count: TestResult

    @property
    def germline_usage_pvalue(self) -> float:
        return self.germline_usage.pvalue

    @property
    def mutation_count_pvalue(self) -> float:
        return self.mutation_count.pvalue

    def level(self, alpha: float = 0.05) -> str:
        """high / medium / low by how many of the two features differ significantly."""
        n = int(self.germline_usage_pvalue < alpha) + int(self.mutation_count_pvalue < alpha)
        return ("low", "medium", "high")[n]

    def to_dict(self) -> dict:
        return _plain({
            "germline_usage": vars(self.germline_usage),
            "mutation_count": vars(self.mutation_count),
            "level": self.level(),
        })


def task_specificity(records: Sequence[AntibodyRecord], labels: Sequence, mutation_test: str = "kruskal") -> SpecificityReport:
    """Do V-gene usage and mutation counts differ between label groups?

    Usage is a labels x V-gene chi-squared test; mutation counts use Kruskal-Wallis across the
    groups, or a Welch t test when ``mutation_test="welch"`` (two groups only).
    """
    if len(records) != len(labels) or not records:
        raise ValueError("records and labels must be aligned and nonempty")
    missing = [r.id for r in records if r.v_gene is None]
    if missing:
        raise ValueError(f"germline usage needs v_gene on every record (missing on {missing[0]})")
    classes = sorted(set(labels), key=str)
    genes = sorted({r.v_gene for r in records})
    ci = {c: i for i, c in enumerate(classes)}
    gi = {g: i for i, g in enumerate(genes)}
    table = np.zeros((len(classes), len(genes)), dtype=np.int64)
    counts: dict = {c: [] for c in classes}
    for r, y in zip(records, labels):
        table[ci[y], gi[r.v_gene]] += 1
        counts[y].append(len(r.mutation_positions))
    usage = chi2_contingency(table)
    groups = [counts[c] for c in classes]
    if mutation_test == "kruskal":
        mut = kruskal_wallis(groups)
    elif mutation_test == "welch":
        if len(groups) != 2:
            raise ValueError("the Welch test compares exactly two groups")
        mut = welch_t(*groups)
    else:
        raise ValueError(f"unknown mutation test {mutation_test!r}")
    return SpecificityReport(usage, mut)
