"""Binary classification metrics: MCC, balanced accuracy, ROC AUC."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import UndefinedMetricError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError(f"negative confusion count in {self}")

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred, labels) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    labels = np.asarray(labels).astype(bool)
    return ConfusionCounts(
        tp=int(np.sum(pred & labels)),
        fp=int(np.sum(pred & ~labels)),
        tn=int(np.sum(~pred & ~labels)),
        fn=int(np.sum(~pred & labels)),
    )


def mcc(c: ConfusionCounts) -> float:
    """Matthews correlation; 0.0 whenever a marginal is empty."""
    if c.total == 0:
        raise UndefinedMetricError("MCC of an empty confusion matrix")
    denom = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if denom == 0:
        return 0.0
    # integer numerator and denominator keep the result exact up to one rounding
    return (c.tp * c.tn - c.fp * c.fn) / math.sqrt(denom)


def balanced_accuracy(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0 or c.tn + c.fp == 0:
        raise UndefinedMetricError("balanced accuracy needs both classes present")
    return 0.5 * (c.tp / (c.tp + c.fn) + c.tn / (c.tn + c.fp))


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(len(s))
    # midranks over tie groups
    bounds = np.flatnonzero(np.diff(s)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [len(s)]])
    for a, b in zip(starts, ends):
        ranks[a:b] = 0.5 * (a + b - 1) + 1
    r = np.empty(len(s))
    r[order] = ranks
    # exact in integers/halves: rank sums are multiples of 0.5
    u = r[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


@dataclass
class MetricsReport:
    mcc: float
    balanced_accuracy: float | None
    roc_auc: float | None
    confusion: ConfusionCounts
    n_epochs_trained: int = 0
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = asdict(self.confusion)
        if not d["extra"]:
            d.pop("extra")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["confusion"] = ConfusionCounts(**d["confusion"])
        return cls(**d)


def report(probs, labels, threshold=0.5, n_epochs_trained=0, seed=None) -> MetricsReport:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    c = confusion(probs >= threshold, labels)
    try:
        bacc = balanced_accuracy(c)
        auc = roc_auc(probs, labels)
    except UndefinedMetricError:
        bacc = auc = None
    return MetricsReport(mcc(c), bacc, auc, c, n_epochs_trained, seed)
