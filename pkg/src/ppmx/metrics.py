"""Evaluation measures: confusion counts, ROC/AUROC, equal-error threshold,
clustering sums of squares and surrogate fidelity R².

Decision rule throughout: an instance is predicted positive iff its score is
``>= tau``. The positive class is the regular (non push-to-front) flow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

__all__ = [
    "ConfusionMatrix",
    "ClassificationMeasures",
    "RocCurve",
    "ClusterSS",
    "confusion_at_threshold",
    "classification_measures",
    "roc_and_auroc",
    "select_equal_error_threshold",
    "threshold_candidates",
    "clustering_ss",
    "fidelity_r2",
    "DegenerateScoresError",
]


class DegenerateScoresError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ClassificationMeasures:
    accuracy: float
    precision: float
    recall: float
    specificity: float
    mcc: float
    f1: float
    fnr: float
    fpr: float
    undefined: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        d = asdict(self)
        d["undefined"] = list(self.undefined)
        return d


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if len(scores) != len(labels):
        raise ValueError("scores and labels differ in length")
    if len(scores) == 0:
        raise ValueError("empty input")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0/1")
    return scores, labels.astype(int)


def confusion_at_threshold(scores, labels, tau: float) -> ConfusionMatrix:
    scores, labels = _check_binary(scores, labels)
    pred = scores >= tau
    pos = labels == 1
    return ConfusionMatrix(tp=int(np.sum(pred & pos)), fp=int(np.sum(pred & ~pos)),
                           fn=int(np.sum(~pred & pos)), tn=int(np.sum(~pred & ~pos)))


def classification_measures(cm: ConfusionMatrix) -> ClassificationMeasures:
    """Standard binary measures. A 0/0 ratio is reported as 0 and named in ``undefined``."""
    if cm.total <= 0:
        raise ValueError("confusion matrix is empty")
    undefined = []

    def ratio(name, num, den):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    tp, fp, fn, tn = cm.tp, cm.fp, cm.fn, cm.tn
    recall = ratio("recall", tp, tp + fn)
    specificity = ratio("specificity", tn, tn + fp)
    fnr = ratio("fnr", fn, fn + tp)
    fpr = ratio("fpr", fp, tn + fp)
    # exact complements even when floats would round differently
    if tp + fn:
        fnr = 1.0 - recall
    if tn + fp:
        fpr = 1.0 - specificity
    mcc_den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = ratio("mcc", tp * tn - fp * fn, math.sqrt(mcc_den)) if mcc_den else ratio("mcc", 0, 0)
    return ClassificationMeasures(
        accuracy=(tp + tn) / cm.total,
        precision=ratio("precision", tp, tp + fp),
        recall=recall,
        specificity=specificity,
        mcc=mcc,
        f1=ratio("f1", 2 * tp, 2 * tp + fp + fn),
        fnr=fnr,
        fpr=fpr,
        undefined=tuple(undefined),
    )


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auroc: float

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist()))


def roc_and_auroc(scores, labels) -> RocCurve:
    """ROC from descending unique-score thresholds; AUROC by the trapezoid rule.

    Equal scores form one threshold step, which gives tied positive/negative
    pairs half credit, i.e. the Mann-Whitney statistic.
    """
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes present")
    order = np.argsort(-scores, kind="mergesort")
    s, l = scores[order], labels[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tps = np.cumsum(l)[last_of_group]
    fps = (last_of_group + 1) - tps
    tp_counts = np.r_[0, tps]
    fp_counts = np.r_[0, fps]
    # integer trapezoid sum avoids rounding before the final division
    area2 = int(np.sum((fp_counts[1:] - fp_counts[:-1]) * (tp_counts[1:] + tp_counts[:-1])))
    auroc = area2 / (2.0 * n_pos * n_neg)
    return RocCurve(fpr=fp_counts / n_neg, tpr=tp_counts / n_pos,
                    thresholds=np.r_[np.inf, s[last_of_group]], auroc=auroc)


def threshold_candidates(scores) -> np.ndarray:
    """Midpoints between consecutive unique scores plus one sentinel below and above."""
    u = np.unique(np.asarray(scores, dtype=float))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.r_[u[0] - 1.0, mids, u[-1] + 1.0]


def select_equal_error_threshold(scores, labels) -> tuple[float, ConfusionMatrix]:
    """Threshold where false-negative and false-positive rates are closest.

    Ties are broken by the smaller of ``max(FNR, FPR)`` and then by the
    smaller threshold. Rates are compared as exact integer cross-products.
    """
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("threshold selection needs both classes present")
    cands = threshold_candidates(scores)
    order = np.argsort(scores, kind="mergesort")
    s, l = scores[order], labels[order]
    # instances strictly below the candidate are predicted negative
    below = np.searchsorted(s, cands, side="left")
    cum_pos = np.r_[0, np.cumsum(l)]
    fn = cum_pos[below].astype(np.int64)
    tn = (below - cum_pos[below]).astype(np.int64)
    fp = n_neg - tn
    # FNR - FPR scaled by n_pos * n_neg
    a = fn * n_neg
    b = fp * n_pos
    diff = np.abs(a - b)
    worst = np.maximum(a, b)
    best = np.lexsort((cands, worst, diff))[0]
    tau = float(cands[best])
    cm = ConfusionMatrix(tp=int(n_pos - fn[best]), fp=int(fp[best]), fn=int(fn[best]), tn=int(tn[best]))
    return tau, cm


@dataclass
class ClusterSS:
    sswc: float
    ssbc: float
    total_ss: float
    explained_variance: float
    paper_ratio: float | None
    cluster_sizes: list[int]
    flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def clustering_ss(points, assignments, centroids=None) -> ClusterSS:
    """Within- and between-cluster sums of squares.

    ``sswc = sum_i ||x_i - c_{p(i)}||^2`` and ``ssbc = sum_j n_j ||c_j - mean||^2``.
    When ``centroids`` is omitted, cluster means are used, in which case
    ``sswc + ssbc`` equals the total sum of squares. ``paper_ratio`` is
    ``ssbc / sswc``; ``explained_variance`` is ``ssbc / (ssbc + sswc)``.
    """
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    assign = np.asarray(assignments, dtype=int)
    if len(assign) != len(X):
        raise ValueError("one assignment per point required")
    flags = []
    if centroids is None:
        k = int(assign.max()) + 1 if len(assign) else 0
        C = np.zeros((k, X.shape[1]))
        for j in range(k):
            members = X[assign == j]
            if len(members):
                C[j] = members.mean(axis=0)
    else:
        C = np.asarray(centroids, dtype=float).reshape(-1, X.shape[1])
        if len(assign) and (assign.min() < 0 or assign.max() >= len(C)):
            raise ValueError("assignment refers to a missing centroid")
    sizes = np.bincount(assign, minlength=len(C)) if len(assign) else np.zeros(len(C), int)
    empty = np.flatnonzero(sizes == 0)
    if len(empty):
        flags.append(f"empty clusters: {empty.tolist()}")
    grand = X.mean(axis=0)
    sswc = float(np.sum((X - C[assign]) ** 2))
    ssbc = float(np.sum(sizes * np.sum((C - grand) ** 2, axis=1)))
    tss = float(np.sum((X - grand) ** 2))
    denom = sswc + ssbc
    explained = ssbc / denom if denom > 0 else 0.0
    if denom == 0:
        flags.append("zero total sum of squares")
    if sswc > 0:
        paper_ratio = ssbc / sswc
    else:
        paper_ratio = None
        flags.append("sswc is zero; ssbc/sswc undefined")
    return ClusterSS(sswc, ssbc, tss, explained, paper_ratio, sizes.tolist(), flags)


def fidelity_r2(y, yhat, literal: bool = False) -> float:
    """R² of surrogate scores ``y`` against black-box scores ``yhat``.

    The denominator is the spread of the black-box scores around their mean.
    ``literal=True`` instead uses deviations of ``y`` from the black-box mean.
    """
    y = np.asarray(y, dtype=float).ravel()
    yhat = np.asarray(yhat, dtype=float).ravel()
    if len(y) != len(yhat):
        raise ValueError("y and yhat differ in length")
    if len(y) < 2:
        raise ValueError("fidelity needs at least 2 instances")
    ybar = yhat.mean()
    den = np.sum(((y if literal else yhat) - ybar) ** 2)
    # a constant score vector can leave rounding residue in the mean
    if den == 0 or np.all(yhat == yhat[0]):
        raise DegenerateScoresError("degenerate black-box scores")
    return float(1.0 - np.sum((y - yhat) ** 2) / den)
