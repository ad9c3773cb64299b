"""Metrics, grouped cross-validation, ranking curves, binder matching and significance tests."""

from .cv import GROUPINGS, group_keys, kfold, kfold_groups
from .metrics import (UndefinedMetricError, accuracy, auc, binary_metrics, confusion_matrix, f1_binary,
                      f1_weighted, mcc, midranks, multiclass_metrics, row_normalize)
from .ranking import (BinderIndex, Curve, HitRow, Match, binder_match, cumulative_match_curve,
                      trimmed_mean)
from .report import EvalReport, SpecificityReport, read_curve_csv, task_specificity, write_curve_csv
from .stats import TestResult, chi2_contingency, kruskal_wallis, welch_t

__all__ = [
    "GROUPINGS", "group_keys", "kfold", "kfold_groups",
    "UndefinedMetricError", "accuracy", "auc", "binary_metrics", "confusion_matrix", "f1_binary",
    "f1_weighted", "mcc", "midranks", "multiclass_metrics", "row_normalize",
    "BinderIndex", "Curve", "HitRow", "Match", "binder_match", "cumulative_match_curve", "trimmed_mean",
    "EvalReport", "SpecificityReport", "read_curve_csv", "task_specificity", "write_curve_csv",
    "TestResult", "chi2_contingency", "kruskal_wallis", "welch_t",
]
