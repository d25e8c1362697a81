"""Confusion-matrix scores: MCC, precision, recall and F1."""

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import LengthMismatch


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int = 0
    TN: int = 0
    FP: int = 0
    FN: int = 0

    @property
    def total(self):
        return self.TP + self.TN + self.FP + self.FN

    def flipped(self):
        """Counts seen from the negative class."""
        return ConfusionCounts(TP=self.TN, TN=self.TP, FP=self.FN, FN=self.FP)

    def to_dict(self):
        return asdict(self)


def confusion(probs, labels, threshold=0.5) -> ConfusionCounts:
    """Tally predictions ``p >= threshold`` against 0/1 labels."""
    probs = np.asarray(probs, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if probs.shape != labels.shape:
        raise LengthMismatch(f"{probs.size} probabilities vs {labels.size} labels")
    pred = probs >= threshold
    truth = labels == 1
    return ConfusionCounts(
        TP=int(np.sum(pred & truth)), TN=int(np.sum(~pred & ~truth)),
        FP=int(np.sum(pred & ~truth)), FN=int(np.sum(~pred & truth)))


def mcc(c: ConfusionCounts) -> float:
    """Matthews correlation coefficient; 0 when any marginal is empty."""
    den = (c.TP + c.FP) * (c.TP + c.FN) * (c.TN + c.FP) * (c.TN + c.FN)
    if den == 0:
        return 0.0
    # integer numerator and denominator keep the result exact up to the final sqrt
    return (c.TP * c.TN - c.FP * c.FN) / math.sqrt(den)


def precision_recall_f1(c: ConfusionCounts, positive=1):
    """Scores for class ``positive`` (1 = PD, 0 = non-PD)."""
    if positive == 0:
        c = c.flipped()
    precision = c.TP / (c.TP + c.FP) if c.TP + c.FP else 0.0
    recall = c.TP / (c.TP + c.FN) if c.TP + c.FN else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def classification_report(c: ConfusionCounts) -> dict:
    """Per-class and macro-averaged scores plus MCC."""
    rows = {}
    for key, cls in (("pd", 1), ("non_pd", 0)):
        p, r, f = precision_recall_f1(c, cls)
        rows[key] = {"precision": p, "recall": r, "f1": f}
    rows["overall"] = {k: (rows["pd"][k] + rows["non_pd"][k]) / 2
                       for k in ("precision", "recall", "f1")}
    rows["overall"]["mcc"] = mcc(c)
    rows["confusion"] = c.to_dict()
    return rows
