"""ROC / PR areas, one-vs-rest macro averages and case-level bootstrap CIs."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, DataError, UndefinedMetricError
from .numerics import RngStream

log = logging.getLogger(__name__)


@dataclass
class ScoredLabels:
    """Per-sample class scores with true labels; ``groups`` are case ids."""

    scores: np.ndarray
    labels: np.ndarray
    groups: Optional[np.ndarray] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.ndim != 2 or self.labels.shape != (self.scores.shape[0],):
            raise DataError("scores must be (n, C) and labels (n,)")
        if not np.allclose(self.scores.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise DataError("score rows must sum to 1")
        if np.any(self.labels < 0) or np.any(self.labels >= self.scores.shape[1]):
            raise DataError("label index out of range")
        if self.groups is not None:
            self.groups = np.asarray(self.groups)
            if self.groups.shape != self.labels.shape:
                raise DataError("groups must align with labels")

    @property
    def n_classes(self):
        return self.scores.shape[1]

    def take(self, idx) -> ScoredLabels:
        obj = object.__new__(ScoredLabels)
        obj.scores, obj.labels = self.scores[idx], self.labels[idx]
        obj.groups = None if self.groups is None else self.groups[idx]
        return obj


def roc_auc_binary(scores, binary_labels) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(binary_labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC needs at least one positive and one negative")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc_binary(scores, binary_labels) -> float:
    """Average precision: step integral of precision over recall.

    Tied scores form one threshold, so every positive in a tie block gets
    the precision of the whole block.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(binary_labels).astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[ends]
    precision = tp / (ends + 1)
    d_recall = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(d_recall * precision))


def _macro_roc(scores, labels):
    n, c = scores.shape
    onehot = labels[:, None] == np.arange(c)[None, :]
    n_pos = onehot.sum(axis=0)
    n_neg = n - n_pos
    ok = (n_pos > 0) & (n_neg > 0)
    ranks = rankdata(scores, axis=0)
    u = (ranks * onehot).sum(axis=0) - n_pos * (n_pos + 1) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        per_class = np.where(ok, u / (n_pos * n_neg), np.nan)
    return per_class


def _macro_pr(scores, labels):
    c = scores.shape[1]
    out = np.full(c, np.nan)
    for k in range(c):
        y = labels == k
        if y.any():
            out[k] = pr_auc_binary(scores[:, k], y)
    return out


def per_class_auc(scored: ScoredLabels, kind: str = "roc") -> np.ndarray:
    """One-vs-rest AUC per class; NaN marks an undefined class."""
    if kind == "roc":
        return _macro_roc(scored.scores, scored.labels)
    if kind == "pr":
        return _macro_pr(scored.scores, scored.labels)
    raise ConfigError(f"metric kind must be roc or pr, got {kind!r}")


def macro_auc(scored: ScoredLabels, kind: str = "roc", return_skipped: bool = False):
    """Unweighted mean of defined per-class AUCs.

    Classes with no support (or, for ROC, no negatives) are skipped and
    reported.
    """
    if scored.n_classes < 2:
        raise ConfigError("macro AUC needs at least two classes")
    per = per_class_auc(scored, kind)
    skipped = [int(k) for k in np.flatnonzero(np.isnan(per))]
    if len(skipped) == per.size:
        raise UndefinedMetricError("no class has a defined AUC")
    if skipped:
        log.debug("macro %s AUC skipped classes %s", kind, skipped)
    value = float(np.mean(per[~np.isnan(per)]))
    return (value, skipped) if return_skipped else value


@dataclass
class CiResult:
    point: float
    lo: float
    hi: float
    n_resamples: int
    level: float = 0.95
    n_undefined: int = 0
    skipped_classes: list = field(default_factory=list)


Metric = Union[str, Callable[[ScoredLabels], float]]


def _metric_fn(metric: Metric):
    if callable(metric):
        return metric
    if metric in ("roc", "pr"):
        return lambda sc: macro_auc(sc, metric)
    raise ConfigError(f"unknown metric {metric!r}")


def bootstrap_ci(scored: ScoredLabels, metric: Metric = "roc", n_resamples: int = 1000,
                 level: float = 0.95, seed: int = 0) -> CiResult:
    """Percentile bootstrap over cases (all slides of a drawn case come along).

    Resample ``b`` draws from ``RngStream(seed).child(b)`` so the interval
    does not depend on evaluation order. Without ``groups`` each sample is
    its own case.
    """
    if n_resamples < 100:
        raise ConfigError("bootstrap needs n_resamples >= 100")
    if not 0 < level < 1:
        raise ConfigError("confidence level must lie in (0, 1)")
    fn = _metric_fn(metric)
    if isinstance(metric, str):
        point, skipped = macro_auc(scored, metric, return_skipped=True)
    else:
        point, skipped = fn(scored), []

    groups = scored.groups if scored.groups is not None else np.arange(scored.labels.size)
    uniq, inverse = np.unique(groups, return_inverse=True)
    order = np.argsort(inverse, kind="mergesort")
    bounds = np.r_[0, np.cumsum(np.bincount(inverse, minlength=uniq.size))]
    members = [order[bounds[i]:bounds[i + 1]] for i in range(uniq.size)]

    root = RngStream(seed).child("bootstrap")
    values = []
    undefined = 0
    for b in range(n_resamples):
        pick = root.child(b).generator().integers(0, uniq.size, size=uniq.size)
        idx = np.concatenate([members[i] for i in pick])
        try:
            v = fn(scored.take(idx))
        except UndefinedMetricError:
            undefined += 1
            continue
        values.append(v)
    if undefined > n_resamples / 2:
        raise UndefinedMetricError(f"metric undefined on {undefined}/{n_resamples} resamples")
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [tail, 100.0 - tail])
    return CiResult(float(point), float(lo), float(hi), n_resamples, level, undefined, skipped)


# -- reports ----------------------------------------------------------------

EVAL_COLUMNS = ("dataset", "config", "task", "metric", "point", "ci_lo", "ci_hi",
                "n_resamples", "skipped_classes")


@dataclass
class EvalRow:
    dataset: str
    config: str
    task: str
    metric: str
    point: float
    ci_lo: float
    ci_hi: float
    n_resamples: int
    skipped_classes: str = ""

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in EVAL_COLUMNS}


def write_eval_csv(rows: Sequence[EvalRow], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            d = r.as_dict()
            for k in ("point", "ci_lo", "ci_hi"):
                d[k] = repr(float(d[k]))
            w.writerow(d)


def read_eval_csv(path) -> list:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != EVAL_COLUMNS:
            raise DataError(f"{path}: unexpected eval CSV header {reader.fieldnames}")
        for d in reader:
            rows.append(EvalRow(d["dataset"], d["config"], d["task"], d["metric"], float(d["point"]),
                                float(d["ci_lo"]), float(d["ci_hi"]), int(d["n_resamples"]),
                                d["skipped_classes"]))
    return rows
