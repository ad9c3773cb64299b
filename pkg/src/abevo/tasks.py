"""Benchmark task runners: antigen binding, paratope labeling, B-cell stage and antibody discovery.

Each runner finetunes a copy of the given encoder per split and returns an ``EvalReport``.
Any runner can instead consume precomputed per-sequence scores (external-score mode).
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .evaluation import (BinderIndex, EvalReport, UndefinedMetricError, accuracy, auc, binder_match,
                         confusion_matrix, cumulative_match_curve, f1_binary, f1_weighted, group_keys,
                         kfold_groups, mcc, row_normalize, trimmed_mean)
from .model import Transformer
from .seqcore import AntibodyRecord
from .simgen import STAGES
from .train import TrainConfig, finetune, predict

log = logging.getLogger(__name__)

TASK_KINDS = ("binding", "paratope", "bcell", "discovery")
FIXED_SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    head_kind: str
    grouping: str
    metrics: tuple[str, ...]
    class_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind == "bcell" and set(self.class_names) != set(STAGES):
            raise ValueError("the B-cell task classifies exactly the six maturation stages")
        if self.kind == "discovery" and self.grouping != "profile":
            raise ValueError("discovery folds are grouped by profile")


TASKS = {
    "binding": TaskSpec("binding", "binary-seq", "sequence", ("auc", "f1", "mcc")),
    "paratope": TaskSpec("paratope", "token-label", "sequence", ("auc", "f1", "mcc")),
    "bcell": TaskSpec("bcell", "multiclass-seq", "sequence", ("acc", "f1"), STAGES),
    "discovery": TaskSpec("discovery", "binary-seq", "profile", ("auc", "f1", "mcc")),
}


@dataclass
class TaskConfig:
    """Protocol knobs shared by the runners; ``finetune`` holds the optimizer settings."""

    folds: int = 10
    seed: int = 0
    holdout_fraction: float = 0.1
    threshold: float = 0.5
    trim: float = 0.1
    top_redundancy: int = 100
    identity_thresholds: tuple[float, ...] = (0.85, 0.90)
    prob_thresholds: tuple[float, ...] = (0.5, 0.7, 0.8, 0.9)
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(phase="finetune", epochs=10, lr=3e-4,
                                                                       warmup=20, patience=3))


# --- shared plumbing ---------------------------------------------------------

def _safe(report: EvalReport, name: str, fn: Callable[[], float]) -> Optional[float]:
    """Evaluate one metric; an undefined value is recorded under ``report.errors``."""
    try:
        return fn()
    except UndefinedMetricError as exc:
        report.errors[name] = str(exc)
        return None


def _binary_scores(report: EvalReport, scores, labels, threshold: float) -> dict[str, Optional[float]]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pred = (scores > threshold).astype(np.int64)
    return {
        "acc": accuracy(pred, labels),
        "auc": _safe(report, "auc", lambda: auc(scores, labels)),
        "f1": _safe(report, "f1", lambda: f1_binary(pred, labels)),
        "mcc": _safe(report, "mcc", lambda: mcc(pred, labels)),
    }


def _mean_over_folds(report: EvalReport, names: Sequence[str]) -> None:
    for name in names:
        vals = [f.get(name) for f in report.folds]
        if report.folds and all(v is not None for v in vals):
            setattr(report, name, float(np.mean(vals)))


def _holdout(records: Sequence[AntibodyRecord], idx: np.ndarray, grouping: str, fraction: float,
             seed: int, stratify: bool = False) -> tuple[list[AntibodyRecord], list[AntibodyRecord]]:
    """Split a training fold into (fit, early-stopping) parts along group boundaries.

    ``stratify`` holds out the same fraction of groups from every label.
    """
    subset = [records[i] for i in idx]
    if fraction <= 0:
        return subset, []
    keys = group_keys(subset, grouping)
    rng = random.Random(seed)
    pools: dict = {}
    for r, k in zip(subset, keys):
        pools.setdefault(r.label if stratify else None, set()).add(k)
    held: set = set()
    for label in sorted(pools, key=str):
        names = sorted(pools[label])
        rng.shuffle(names)
        n_hold = min(len(names) - 1, max(1, math.ceil(fraction * len(names))))
        held.update(names[:n_hold])
    return [r for r, k in zip(subset, keys) if k not in held], [r for r, k in zip(subset, keys) if k in held]


def _assert_disjoint(records, train_idx, valid_idx, grouping: str) -> None:
    keys = group_keys(records, grouping)
    if {keys[i] for i in train_idx} & {keys[i] for i in valid_idx}:
        raise AssertionError("fold leakage: a group appears in both train and validation")


def _folds(records, spec: TaskSpec, cfg: TaskConfig):
    splits = kfold_groups(group_keys(records, spec.grouping), cfg.folds, cfg.seed)
    for tr, va in splits:
        _assert_disjoint(records, tr, va, spec.grouping)
    return splits


def _fit(model: Transformer, records, train_idx, spec: TaskSpec, cfg: TaskConfig, fold: int,
         n_classes: int = 2, label_fn=None, stratify: bool = False):
    fit, hold = _holdout(records, train_idx, spec.grouping, cfg.holdout_fraction, cfg.seed + fold, stratify)
    ft = TrainConfig(**{**vars(cfg.finetune), "phase": "finetune", "seed": cfg.finetune.seed + fold})
    return finetune(model, fit, hold, spec.head_kind, ft, n_classes=n_classes, label_fn=label_fn)


def _external(records: Sequence[AntibodyRecord], scores: dict[str, float]) -> np.ndarray:
    missing = [r.id for r in records if r.id not in scores]
    if missing:
        raise ValueError(f"no external score for {len(missing)} records (first: {missing[0]})")
    return np.array([scores[r.id] for r in records], dtype=np.float64)


def _require_binary(records: Sequence[AntibodyRecord]) -> None:
    for r in records:
        if r.label not in (0, 1):
            raise ValueError(f"record {r.id} needs a 0/1 label, got {r.label!r}")


# --- antigen binding -----------------------------------------------------------

def run_binding(records: Sequence[AntibodyRecord], model: Optional[Transformer], cfg: TaskConfig,
                scores: Optional[dict[str, float]] = None) -> EvalReport:
    """Binary sequence classification; a complete train/valid/test split column is used verbatim."""
    _require_binary(records)
    report = EvalReport("binding", meta={"grouping": "sequence"})
    fixed = all(r.split in FIXED_SPLITS for r in records) and any(r.split == "test" for r in records)
    if fixed:
        parts = {s: [r for r in records if r.split == s] for s in FIXED_SPLITS}
        report.meta["split"] = "fixed"
        report.meta["split_sizes"] = {s: len(v) for s, v in parts.items()}
        if scores is not None:
            s = _external(parts["test"], scores)
        else:
            ft = TrainConfig(**{**vars(cfg.finetune), "phase": "finetune"})
            res = finetune(model, parts["train"], parts["valid"], "binary-seq", ft)
            s = predict(res, parts["test"])
        fold = _binary_scores(report, s, [r.label for r in parts["test"]], cfg.threshold)
        report.folds.append({"fold": 0, "n_valid": len(parts["test"]), **fold})
    else:
        report.meta["split"] = f"{cfg.folds}-fold"
        spec = TASKS["binding"]
        for f, (tr, va) in enumerate(_folds(records, spec, cfg)):
            valid = [records[i] for i in va]
            if scores is not None:
                s = _external(valid, scores)
            else:
                s = predict(_fit(model, records, tr, spec, cfg, f), valid)
            fold = _binary_scores(report, s, [r.label for r in valid], cfg.threshold)
            report.folds.append({"fold": f, "n_valid": len(valid), **fold})
    _mean_over_folds(report, ("acc", "auc", "f1", "mcc"))
    report.validate()
    return report


# --- paratope -----------------------------------------------------------------

def cdr_mask(rec: AntibodyRecord) -> np.ndarray:
    mask = np.zeros(len(rec.antibody), dtype=bool)
    for span in rec.cdr_spans:
        if span is not None:
            mask[span[0]:span[1]] = True
    return mask


def _check_paratope(records: Sequence[AntibodyRecord]) -> None:
    for r in records:
        if r.token_labels is None:
            raise ValueError(f"record {r.id} has no per-residue labels")
        mask = cdr_mask(r)
        if not mask.any():
            raise ValueError(f"record {r.id} has no CDR spans")
        if any(y and not m for y, m in zip(r.token_labels, mask)):
            raise ValueError(f"record {r.id} has a positive label outside its CDR spans")


def run_paratope(records: Sequence[AntibodyRecord], model: Optional[Transformer], cfg: TaskConfig,
                 scores: Optional[dict[str, Sequence[float]]] = None) -> EvalReport:
    """Per-residue binding labels on CDR positions; metrics pool all CDR tokens of a fold.

    External scores map a record id to one score per antibody residue.
    """
    _check_paratope(records)
    spec = TASKS["paratope"]
    report = EvalReport("paratope", meta={"grouping": "sequence", "token_auc": "micro-pooled over CDR tokens",
                                          "split": f"{cfg.folds}-fold"})
    for f, (tr, va) in enumerate(_folds(records, spec, cfg)):
        valid = [records[i] for i in va]
        if scores is not None:
            per_rec = [np.asarray(scores[r.id], dtype=np.float64) for r in valid]
        else:
            per_rec = predict(_fit(model, records, tr, spec, cfg, f), valid)
        s, y = [], []
        for r, p in zip(valid, per_rec):
            mask = cdr_mask(r)
            s.append(np.asarray(p)[mask])
            y.append(np.asarray(r.token_labels)[mask])
        fold = _binary_scores(report, np.concatenate(s), np.concatenate(y), cfg.threshold)
        report.folds.append({"fold": f, "n_valid": len(valid), **fold})
    _mean_over_folds(report, ("acc", "auc", "f1", "mcc"))
    report.validate()
    return report


# --- B-cell maturation --------------------------------------------------------

def stage_index(rec: AntibodyRecord) -> int:
    if rec.stage not in STAGES:
        raise ValueError(f"record {rec.id} has unknown stage {rec.stage!r}")
    return STAGES.index(rec.stage)


def adjacency_fraction(predictions, labels) -> Optional[float]:
    """Share of errors that land on a neighbouring stage in maturation order; None without errors."""
    p = np.asarray(predictions)
    y = np.asarray(labels)
    wrong = p != y
    if not wrong.any():
        return None
    return float((np.abs(p[wrong] - y[wrong]) == 1).mean())


def run_bcell(records: Sequence[AntibodyRecord], model: Optional[Transformer], cfg: TaskConfig,
              scores: Optional[dict[str, Sequence[float]]] = None) -> EvalReport:
    """Six-way stage classification with a pooled row-normalized confusion matrix.

    External scores map a record id to six class probabilities in stage order.
    """
    y_all = np.array([stage_index(r) for r in records])
    spec = TASKS["bcell"]
    report = EvalReport("bcell", class_names=list(STAGES), meta={"grouping": "sequence", "split": f"{cfg.folds}-fold"})
    preds = np.full(len(records), -1)
    for f, (tr, va) in enumerate(_folds(records, spec, cfg)):
        valid = [records[i] for i in va]
        if scores is not None:
            probs = np.array([scores[r.id] for r in valid], dtype=np.float64)
        else:
            res = _fit(model, records, tr, spec, cfg, f, n_classes=len(STAGES), label_fn=stage_index)
            probs = predict(res, valid)
        p = probs.argmax(axis=1)
        preds[va] = p
        report.folds.append({"fold": f, "n_valid": len(valid), "acc": accuracy(p, y_all[va]),
                             "f1": f1_weighted(p, y_all[va])})
    _mean_over_folds(report, ("acc", "f1"))
    report.mcc = _safe(report, "mcc", lambda: mcc(preds, y_all))
    report.confusion = row_normalize(confusion_matrix(preds, y_all, len(STAGES)))
    report.meta["adjacent_error_fraction"] = adjacency_fraction(preds, y_all)
    report.validate()
    return report


# --- antibody discovery -------------------------------------------------------

@dataclass
class DiscoveryResult:
    report: EvalReport
    ranked: list[tuple[str, str, float]]  # (record id, CDR-H3, score), best first
    sequence_scores: dict[str, float]


def top_redundancy(records: Sequence[AntibodyRecord], k: int) -> tuple[list[AntibodyRecord], bool]:
    """The ``k`` most redundant records per profile when every record carries a count."""
    if not records or any(r.redundancy is None for r in records):
        return list(records), False
    by_profile: dict[str, list[AntibodyRecord]] = {}
    for r in records:
        by_profile.setdefault(r.profile_id, []).append(r)
    keep = set()
    for rs in by_profile.values():
        keep.update(r.id for r in sorted(rs, key=lambda r: (-r.redundancy, r.id))[:k])
    return [r for r in records if r.id in keep], True


def run_discovery(records: Sequence[AntibodyRecord], model: Optional[Transformer], binder_db: Sequence[str],
                  cfg: TaskConfig, scores: Optional[dict[str, float]] = None) -> DiscoveryResult:
    """Noisy-label sequence classifier, trimmed-mean individual scores and known-binder matching.

    Every sequence inherits its profile's label. Out-of-fold scores come from profile-grouped
    cross-validation; the report's headline metrics are individual (profile) level, and the
    sequence-level metrics sit under ``meta["sequence_level"]``.
    """
    _require_binary(records)
    if not binder_db:
        raise ValueError("binder database is empty")
    profiles: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        if r.profile_id is None:
            raise ValueError(f"record {r.id} has no profile_id")
        profiles.setdefault(r.profile_id, []).append(i)
    for pid, idx in profiles.items():
        if len({records[i].label for i in idx}) != 1:
            raise ValueError(f"profile {pid} mixes labels")

    spec = TASKS["discovery"]
    report = EvalReport("discovery", meta={"grouping": "profile", "trim": cfg.trim, "split": f"{cfg.folds}-fold"})
    seq_scores = np.full(len(records), np.nan)
    if scores is not None:
        seq_scores[:] = _external(records, scores)
        report.meta["scores"] = "external"
    else:
        # label-stratified so that every training fold keeps the cohort's class balance
        splits = kfold_groups([r.profile_id for r in records], cfg.folds, cfg.seed, [r.label for r in records])
        used_counts = None
        for f, (tr, va) in enumerate(splits):
            _assert_disjoint(records, tr, va, "profile")
            train_recs, used = top_redundancy([records[i] for i in tr], cfg.top_redundancy)
            used_counts = used
            pos = {r.id: j for j, r in enumerate(records)}
            tr_idx = np.array([pos[r.id] for r in train_recs])
            res = _fit(model, records, tr_idx, spec, cfg, f, stratify=True)
            seq_scores[va] = predict(res, [records[i] for i in va])
            log.info("discovery fold %d/%d done", f + 1, len(splits))
        report.meta["redundancy_filter"] = (f"top {cfg.top_redundancy} per profile" if used_counts
                                            else "not applied: records carry no redundancy counts")
    labels = np.array([r.label for r in records])

    seq_report = EvalReport("discovery-sequence")
    report.meta["sequence_level"] = _binary_scores(seq_report, seq_scores, labels, cfg.threshold)
    report.meta["sequence_level_errors"] = seq_report.errors

    pids = sorted(profiles)
    ind_scores = np.array([trimmed_mean(seq_scores[profiles[p]], cfg.trim) for p in pids])
    ind_labels = np.array([records[profiles[p][0]].label for p in pids])
    ind = _binary_scores(report, ind_scores, ind_labels, cfg.threshold)
    report.acc, report.auc, report.f1, report.mcc = ind["acc"], ind["auc"], ind["f1"], ind["mcc"]
    report.meta["individual_scores"] = {p: float(s) for p, s in zip(pids, ind_scores)}

    # rank positive-profile sequences; ties broken by id for a stable order
    pos_idx = [i for i in range(len(records)) if records[i].label == 1]
    pos_idx.sort(key=lambda i: (-seq_scores[i], records[i].id))
    ranked = [(records[i].id, records[i].cdr3 or "", float(seq_scores[i])) for i in pos_idx]
    index = BinderIndex(binder_db)
    for it in cfg.identity_thresholds:
        for pt in cfg.prob_thresholds:
            row, _ = binder_match([(c, s) for _, c, s in ranked], index, pt, it)
            report.hit_table.append(row)
        hits = [bool(c) and index.is_hit(c, it) for _, c, _ in ranked]
        report.curves[f"identity_{it:.2f}"] = cumulative_match_curve(hits)
    report.validate()
    return DiscoveryResult(report, ranked, {records[i].id: float(seq_scores[i]) for i in range(len(records))})
