"""
Evaluation: confusion counts, accuracy, per-class precision / recall / F1,
micro F1, AUC and the ROC polyline. Fake (1) is the positive class.
"""

import logging
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.stats import rankdata

from errors import ContractError
from fnr_model import REAL, FAKE, CLASS_NAMES, predict

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float


@dataclass
class Scores:
    accuracy: float
    fake: ClassMetrics
    real: ClassMetrics
    micro_f1: float
    flags: list = field(default_factory=list)  # metrics whose denominator was zero


@dataclass
class EvalReport:
    accuracy: float
    fake: ClassMetrics
    real: ClassMetrics
    micro_f1: float
    auc: float
    roc: list
    confusion: ConfusionMatrix
    flags: list = field(default_factory=list)

    @property
    def n(self):
        return self.confusion.total

    def to_dict(self):
        return {
            "n": self.n,
            "accuracy": self.accuracy,
            "auc": self.auc,
            "fake": asdict(self.fake),
            "real": asdict(self.real),
            "micro_f1": self.micro_f1,
            "confusion": asdict(self.confusion),
            "flags": list(self.flags),
            "roc": [[fpr, tpr] for fpr, tpr in self.roc],
        }


def _binary(values, what):
    values = np.asarray(values)
    if values.ndim != 1 or values.size == 0:
        raise ContractError(f"{what} must be a non-empty vector")
    if not np.isin(values, (REAL, FAKE)).all():
        raise ContractError(f"{what} must be 0 (real) or 1 (fake)")
    return values.astype(np.int64)


def confusion(labels, predictions):
    labels = _binary(labels, "labels")
    predictions = _binary(predictions, "predictions")
    if labels.size != predictions.size:
        raise ContractError(f"{labels.size} labels but {predictions.size} predictions")
    return ConfusionMatrix(
        tp=int(((labels == FAKE) & (predictions == FAKE)).sum()),
        fp=int(((labels == REAL) & (predictions == FAKE)).sum()),
        tn=int(((labels == REAL) & (predictions == REAL)).sum()),
        fn=int(((labels == FAKE) & (predictions == REAL)).sum()),
    )


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def _class_metrics(tp, fp, fn, name, flags):
    return ClassMetrics(
        precision=_ratio(tp, tp + fp, f"{name}_precision", flags),
        recall=_ratio(tp, tp + fn, f"{name}_recall", flags),
        f1=_ratio(2 * tp, 2 * tp + fp + fn, f"{name}_f1", flags),
    )


def prf1(cm):
    """
    Accuracy, per-class P/R/F1 and micro F1 (pooled over both classes).
    A zero denominator yields 0 and is listed in Scores.flags.
    """
    if cm.total < 1:
        raise ContractError("empty confusion matrix")
    flags = []
    fake = _class_metrics(cm.tp, cm.fp, cm.fn, CLASS_NAMES[FAKE], flags)
    # real as positive: its tp is tn, its fp is fn
    real = _class_metrics(cm.tn, cm.fn, cm.fp, CLASS_NAMES[REAL], flags)
    correct = cm.tp + cm.tn
    wrong = cm.fp + cm.fn
    return Scores(
        accuracy=correct / cm.total,
        fake=fake,
        real=real,
        micro_f1=(2 * correct) / (2 * correct + 2 * wrong),
        flags=flags,
    )


def roc_curve(labels, scores):
    """
    (fpr, tpr) vertices of the ROC polyline, sweeping the threshold down
    through the distinct scores. Tied scores form one vertex.
    """
    labels = _binary(labels, "labels")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != labels.shape:
        raise ContractError(f"{labels.size} labels but {scores.size} scores")
    if not np.isfinite(scores).all():
        raise ContractError("scores must be finite")
    n_pos = int((labels == FAKE).sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("ROC needs both classes")

    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    tp = np.cumsum(labels[order] == FAKE)
    fp = np.cumsum(labels[order] == REAL)
    # last index of every tie group
    ends = np.flatnonzero(np.append(np.diff(sorted_scores) != 0, True))

    points = [(0.0, 0.0)]
    points.extend((fp[i] / n_neg, tp[i] / n_pos) for i in ends)
    return [(float(x), float(y)) for x, y in points]


def trapezoid_area(points):
    x = np.array([p[0] for p in points])
    y = np.array([p[1] for p in points])
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def roc_auc(labels, scores):
    """
    AUC as the Mann-Whitney statistic: the probability that a random fake
    item outscores a random real one, ties counting one half.
    Returns (auc, roc points).
    """
    points = roc_curve(labels, scores)
    labels = np.asarray(labels)
    ranks = rankdata(np.asarray(scores, dtype=np.float64), method="average")
    n_pos = int((labels == FAKE).sum())
    n_neg = labels.size - n_pos
    u = ranks[labels == FAKE].sum() - n_pos * (n_pos + 1) / 2.0
    auc = float(u / (n_pos * n_neg))

    area = trapezoid_area(points)
    if abs(area - auc) > 1e-9:
        logger.warning(f"ROC trapezoid area {area:.12f} disagrees with rank AUC {auc:.12f}")
    return auc, points


def evaluate(labels, probs):
    """Full report from labels and [real, fake] probability rows."""
    probs = np.asarray(probs)
    if probs.ndim != 2 or probs.shape[1] != 2:
        raise ContractError(f"probs must be b x 2, got {probs.shape}")
    cm = confusion(labels, predict(probs))
    scores = prf1(cm)
    auc, roc = roc_auc(labels, probs[:, FAKE])
    return EvalReport(
        accuracy=scores.accuracy,
        fake=scores.fake,
        real=scores.real,
        micro_f1=scores.micro_f1,
        auc=auc,
        roc=roc,
        confusion=cm,
        flags=scores.flags,
    )
