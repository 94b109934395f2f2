"""Confusion counts, threshold metrics, ROC curve and AUC."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True, eq=False)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # thresholds[0] is +inf, the (0, 0) point


def _check(scores, truth) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(truth)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-d and of equal length")
    if s.size == 0:
        raise ValueError("empty input")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be binary")
    return s, y.astype(bool)


def confusion(scores, truth, threshold: float = 0.5) -> ConfusionCounts:
    s, y = _check(scores, truth)
    pred = s >= threshold
    return ConfusionCounts(
        tp=int(np.sum(pred & y)),
        fp=int(np.sum(pred & ~y)),
        tn=int(np.sum(~pred & ~y)),
        fn=int(np.sum(~pred & y)),
    )


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def derived(c: ConfusionCounts) -> dict[str, Optional[float]]:
    """Rates from a confusion table; ``None`` marks an undefined 0/0 ratio."""
    sens = _ratio(c.tp, c.tp + c.fn)
    prec = _ratio(c.tp, c.tp + c.fp)
    f1 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    return {
        "sensitivity": sens,
        "specificity": _ratio(c.tn, c.tn + c.fp),
        "precision": prec,
        "f1": f1,
        "accuracy": _ratio(c.tp + c.tn, c.total),
    }


def roc_auc(scores, truth) -> tuple[RocCurve, float]:
    """ROC points at every distinct score, and the trapezoidal area.

    Tied scores move along the diagonal of their block, which makes the
    area equal to the Mann-Whitney statistic with ties counted as half.
    """
    s, y = _check(scores, truth)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: need at least one positive and one negative")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    tp = np.r_[0, tps]
    fp = np.r_[0, fps]
    # exact integer trapezoids: sum (fp_i - fp_{i-1}) * (tp_i + tp_{i-1}) / 2
    twice_area = int(np.sum(np.diff(fp).astype(np.int64) * (tp[1:] + tp[:-1]).astype(np.int64)))
    auc = twice_area / (2.0 * n_pos * n_neg)
    curve = RocCurve(fp / n_neg, tp / n_pos, np.r_[np.inf, s[last]])
    return curve, auc


def write_roc_csv(curve: RocCurve, path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr", "threshold"])
        for f, t, th in zip(curve.fpr, curve.tpr, curve.thresholds):
            w.writerow([repr(float(f)), repr(float(t)), "inf" if np.isinf(th) else repr(float(th))])


def evaluate(scores, truth, threshold: float = 0.5) -> dict:
    """Flat metrics dict: counts, rates at ``threshold``, and AUC when defined."""
    c = confusion(scores, truth, threshold)
    out: dict = {"n": c.total, "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn, "threshold": threshold}
    out.update(derived(c))
    try:
        out["auc"] = roc_auc(scores, truth)[1]
    except ValueError:
        out["auc"] = None
    return out
