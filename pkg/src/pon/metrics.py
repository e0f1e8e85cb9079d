"""Evaluation metrics: Acc, macro F1, QWK, macro one-vs-rest AUC and
ROC operating points (Sen@Spec, Spec@Sen) on binarised scores."""

from __future__ import annotations

import warnings
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidInputError, UndefinedMetricError


def confusion_matrix(labels, predicted, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    labels = np.asarray(labels, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if labels.shape != predicted.shape:
        raise InvalidInputError("label and prediction lists differ in length")
    for arr in (labels, predicted):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise InvalidInputError(f"labels must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, predicted), 1)
    return cm


def _check_cm(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.sum() == 0:
        raise InvalidInputError("confusion matrix must be square and non-empty")
    return cm


def accuracy(cm) -> float:
    cm = _check_cm(cm)
    return float(np.trace(cm) / cm.sum())


def macro_f1(cm, warn: bool = True) -> float:
    """Unweighted mean of per-class F1; a class with 0/0 precision or recall scores 0."""
    cm = _check_cm(cm).astype(np.float64)
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    denom = predicted + actual
    zero = denom == 0
    if warn and np.any(zero):
        warnings.warn(f"F1 undefined (0/0) for classes {np.flatnonzero(zero).tolist()}; scored as 0", stacklevel=2)
    # 2PR/(P+R) == 2TP/(predicted + actual)
    f1 = np.where(zero, 0.0, 2.0 * tp / np.where(zero, 1.0, denom))
    return float(f1.mean())


def qwk(labels, predicted, num_classes: int) -> float:
    """Quadratic weighted kappa.

    The weight scale ``(K-1)^2`` and the ``1/n`` of the expected counts cancel,
    so both sums stay in integers and the result carries a single rounding.
    """
    observed = confusion_matrix(labels, predicted, num_classes)
    n = int(observed.sum())
    if n == 0:
        raise InvalidInputError("qwk needs at least one sample")
    idx = np.arange(num_classes)
    weights = (idx[:, None] - idx[None, :]) ** 2
    num = n * int(np.sum(weights * observed))
    den = int(np.sum(weights * np.outer(observed.sum(axis=1), observed.sum(axis=0))))
    if den == 0:
        # both marginals concentrated on the same single class
        if np.array_equal(np.asarray(labels), np.asarray(predicted)):
            return 1.0
        raise UndefinedMetricError("qwk undefined for degenerate marginals")
    return float(1 - Fraction(num, den))


def binary_auc(positive, scores) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    positive = np.asarray(positive, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative samples")
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auc(labels, probs, warn: bool = True) -> float:
    """Unweighted mean of one-vs-rest AUCs over classes present in ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise InvalidInputError("probs must be (n_samples, n_classes)")
    present = np.unique(labels)
    if len(present) < 2:
        raise UndefinedMetricError("macro AUC needs at least two classes in labels")
    absent = sorted(set(range(probs.shape[1])) - set(present.tolist()))
    if warn and absent:
        warnings.warn(f"classes {absent} absent from labels; excluded from macro AUC", stacklevel=2)
    return float(np.mean([binary_auc(labels == c, probs[:, c]) for c in present]))


def binarize_significant(pred, threshold_class: int):
    """Probability mass at or above ``threshold_class``."""
    pred = np.asarray(pred, dtype=np.float64)
    k = pred.shape[-1]
    if not 1 <= threshold_class < k:
        raise InvalidInputError(f"threshold_class must be in [1, {k}), got {threshold_class}")
    out = pred[..., threshold_class:].sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def _binary(labels, scores):
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise InvalidInputError("labels and scores differ in length")
    pos = labels.astype(bool)
    if pos.all() or not pos.any():
        raise UndefinedMetricError("operating points need both positive and negative samples")
    return pos, scores


def _roc_counts(labels, scores):
    # (tp, fp) for "positive iff score >= threshold", thresholds swept from
    # above the maximum score down to the minimum
    pos, scores = _binary(labels, scores)
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], pos[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]  # end of each tie block
    tp = np.r_[0, np.cumsum(p)[last]]
    fp = np.r_[0, np.cumsum(~p)[last]]
    return tp, fp, int(pos.sum()), int((~pos).sum())


def roc_points(labels, scores) -> list[tuple[float, float]]:
    """Empirical ROC step points ``(fpr, tpr)`` from (0, 0) to (1, 1)."""
    tp, fp, n_pos, n_neg = _roc_counts(labels, scores)
    return [(float(f / n_neg), float(t / n_pos)) for t, f in zip(tp, fp)]


def sen_at_spec(labels, scores, spec_target: float) -> float:
    """Highest sensitivity among operating points with specificity >= target."""
    if not 0 < spec_target < 1:
        raise InvalidInputError("spec_target must be in (0, 1)")
    tp, fp, n_pos, n_neg = _roc_counts(labels, scores)
    spec = (n_neg - fp) / n_neg
    ok = spec >= spec_target
    return float(np.max(tp[ok]) / n_pos)


def spec_at_sen(labels, scores, sen_target: float) -> float:
    """Highest specificity among operating points with sensitivity >= target."""
    if not 0 < sen_target < 1:
        raise InvalidInputError("sen_target must be in (0, 1)")
    tp, fp, n_pos, n_neg = _roc_counts(labels, scores)
    sen = tp / n_pos
    ok = sen >= sen_target
    return float(np.max(n_neg - fp[ok]) / n_neg)


@dataclass
class EvalReport:
    acc: float
    macro_auc: float | None
    qwk: float
    macro_f1: float
    primary: dict | None
    secondary: dict | None
    confusion_matrix: list = field(default_factory=list)
    roc: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "acc": self.acc,
            "macro_auc": self.macro_auc,
            "qwk": self.qwk,
            "macro_f1": self.macro_f1,
            "primary": self.primary,
            "secondary": self.secondary,
            "confusion_matrix": self.confusion_matrix,
            "roc": self.roc,
        }


def operating_points(binary_labels, scores) -> dict:
    return {
        "sen_at_spec80": sen_at_spec(binary_labels, scores, 0.8),
        "spec_at_sen80": spec_at_sen(binary_labels, scores, 0.8),
        "sen_at_spec90": sen_at_spec(binary_labels, scores, 0.9),
        "spec_at_sen90": spec_at_sen(binary_labels, scores, 0.9),
    }


def evaluate(labels, predicted, probs, num_classes: int, primary_threshold: int = 3, secondary_threshold: int = 2) -> EvalReport:
    """Full report; ``probs=None`` (ordinal-encoding head) leaves AUC and the
    binarised tasks absent."""
    labels = np.asarray(labels, dtype=np.int64)
    cm = confusion_matrix(labels, predicted, num_classes)
    report = EvalReport(
        acc=accuracy(cm),
        macro_auc=None,
        qwk=qwk(labels, predicted, num_classes),
        macro_f1=macro_f1(cm, warn=False),
        primary=None,
        secondary=None,
        confusion_matrix=cm.tolist(),
    )
    if probs is None:
        return report
    report.macro_auc = macro_auc(labels, probs, warn=False)
    for name, thr in (("primary", primary_threshold), ("secondary", secondary_threshold)):
        binary = labels >= thr
        scores = binarize_significant(probs, thr)
        setattr(report, name, operating_points(binary, scores))
        report.roc[name] = [list(p) for p in roc_points(binary, scores)]
    return report
