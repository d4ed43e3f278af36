"""Balanced accuracy, Cohen's kappa, weighted F1, AUROC and AUC-PR.

Undefined values (kappa with chance agreement 1, ranking metrics with a
single class present) come back as NaN with an :class:`UndefinedMetricWarning`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricWarning(RuntimeWarning):
    pass


@dataclass
class LabeledScores:
    y_true: np.ndarray  # (n,) int labels
    y_score: np.ndarray  # (n, K) probabilities or (n,) positive-class scores

    def __post_init__(self):
        self.y_true = np.asarray(self.y_true, dtype=np.int64)
        self.y_score = np.asarray(self.y_score, dtype=np.float64)
        if self.y_true.ndim != 1 or len(self.y_true) < 1:
            raise ValueError("y_true must be a non-empty 1-D array")
        if len(self.y_score) != len(self.y_true):
            raise ValueError("y_true and y_score lengths differ")
        if self.y_score.ndim == 2:
            k = self.y_score.shape[1]
            if self.y_true.min() < 0 or self.y_true.max() >= k:
                raise ValueError("label outside class range")
            if not np.allclose(self.y_score.sum(axis=1), 1.0, atol=1e-6):
                raise ValueError("score rows must sum to 1")

    @property
    def n_classes(self) -> int:
        return self.y_score.shape[1] if self.y_score.ndim == 2 else 2

    def predictions(self) -> np.ndarray:
        if self.y_score.ndim == 2:
            return np.argmax(self.y_score, axis=1)  # first maximum wins ties
        return (self.y_score > 0.5).astype(np.int64)

    def positive_scores(self) -> np.ndarray:
        return self.y_score[:, 1] if self.y_score.ndim == 2 else self.y_score


def confusion_matrix(y_true, y_pred, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def classification_metrics(ls: LabeledScores) -> dict[str, float]:
    """BA, kappa and weighted F1, each rounded once from exact rationals."""
    k = max(ls.n_classes, int(ls.y_true.max()) + 1)
    cm = confusion_matrix(ls.y_true, ls.predictions(), k)
    n = int(cm.sum())
    support = [int(v) for v in cm.sum(axis=1)]
    predicted = [int(v) for v in cm.sum(axis=0)]
    tp = [int(v) for v in np.diag(cm)]
    recalls = [Fraction(t, s) for t, s in zip(tp, support) if s > 0]
    ba = float(sum(recalls) / len(recalls))

    p_o = Fraction(sum(tp), n)
    p_e = Fraction(sum(s * q for s, q in zip(support, predicted)), n * n)
    if p_e == 1:
        warnings.warn("kappa undefined: chance agreement is 1", UndefinedMetricWarning, stacklevel=2)
        kappa = float("nan")
    else:
        kappa = float((p_o - p_e) / (1 - p_e))

    wf1 = Fraction(0)
    for t, s, q in zip(tp, support, predicted):
        if s + q:
            wf1 += Fraction(s * 2 * t, n * (s + q))  # 2tp + fp + fn = support + predicted
    return {"balanced_accuracy": ba, "cohens_kappa": kappa, "weighted_f1": float(wf1)}


def auroc(y_true, scores) -> float:
    """Mann-Whitney AUROC with ties counted one half."""
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        warnings.warn("AUROC undefined with one class", UndefinedMetricWarning, stacklevel=2)
        return float("nan")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(y_true, scores) -> float:
    """Sum of (R_i - R_{i-1}) P_i over descending distinct-score thresholds."""
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        warnings.warn("AUC-PR undefined with one class", UndefinedMetricWarning, stacklevel=2)
        return float("nan")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tps = np.cumsum(y_sorted)
    # keep the last index of each tied score block
    last = np.r_[np.flatnonzero(np.diff(s_sorted)), len(s_sorted) - 1]
    tp = tps[last].astype(np.float64)
    precision = tp / (last + 1)
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def ranking_metrics(ls: LabeledScores) -> dict[str, float]:
    pos = ls.positive_scores()
    return {"auc_pr": average_precision(ls.y_true, pos), "auroc": auroc(ls.y_true, pos)}


def binary_report(ls: LabeledScores) -> dict[str, float]:
    out = {"balanced_accuracy": classification_metrics(ls)["balanced_accuracy"]}
    out.update(ranking_metrics(ls))
    return out
