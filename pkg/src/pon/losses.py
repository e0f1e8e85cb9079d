"""Training objectives with analytic gradients.

Every loss returns a :class:`LossValue`.  ``grad_scores`` is the gradient
with respect to the log-scores fed to the softmax (the Poisson ``H`` vector
or plain logits).  When the Poisson ``rate`` is passed, ``gradient_wrt_rate``
is filled in by the chain rule through ``dH[k]/d rate = k / rate - 1``.

Inputs may carry a leading batch axis; values then come back per sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core_math
from .errors import InvalidInputError

_LOG_FLOOR = 1e-300

WEIGHT_MODES = ("clamp", "abs")


@dataclass
class LossValue:
    value: float | np.ndarray
    grad_scores: np.ndarray | None = None
    gradient_wrt_rate: float | np.ndarray | None = None
    grad_query: np.ndarray | None = None


def _pair(target, pred):
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if target.shape != pred.shape:
        raise InvalidInputError(f"class-count mismatch: target {target.shape} vs prediction {pred.shape}")
    return target, pred


def _out(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


def _pick(arr: np.ndarray, label: np.ndarray) -> np.ndarray:
    return np.take_along_axis(arr, label[..., None], axis=-1)[..., 0]


def _labels(label, num_classes: int) -> np.ndarray:
    return core_math._check_labels(label, num_classes)


def _softmax_backward(pred: np.ndarray, grad_pred: np.ndarray) -> np.ndarray:
    return pred * (grad_pred - np.sum(pred * grad_pred, axis=-1, keepdims=True))


def rate_gradient(grad_scores: np.ndarray, rate):
    """Chain ``dL/dH`` to ``dL/d rate`` for the Poisson head."""
    num_classes = grad_scores.shape[-1]
    dh = core_math.score_rate_derivative(rate, num_classes)
    return _out(np.sum(grad_scores * dh, axis=-1))


def _finish(value, grad_scores, rate) -> LossValue:
    grad_rate = None if rate is None else rate_gradient(grad_scores, rate)
    return LossValue(value=_out(value), grad_scores=grad_scores, gradient_wrt_rate=grad_rate)


def kl_divergence(target, pred):
    """Forward KL ``sum P log(P / P_hat)`` with ``0 log 0 = 0``."""
    target, pred = _pair(target, pred)
    logratio = np.log(np.where(target > 0, target, 1.0)) - np.log(np.maximum(pred, _LOG_FLOOR))
    terms = np.where(target > 0, target * logratio, 0.0)
    # clip rounding-level negatives; KL is non-negative
    return _out(np.maximum(terms.sum(axis=-1), 0.0))


def kl_loss(target, pred, rate=None) -> LossValue:
    """Unweighted ``KL(target || pred)``; equals cross-entropy for one-hot targets."""
    target, pred = _pair(target, pred)
    return _finish(kl_divergence(target, pred), pred - target, rate)


def _focal_weight(target, pred, label, gamma, weight_mode):
    diff = _pick(target, label) - _pick(pred, label)
    if weight_mode == "clamp":
        base = np.maximum(diff, 0.0)
        dbase = np.where(diff > 0, -1.0, 0.0)
    elif weight_mode == "abs":
        base = np.abs(diff)
        dbase = -np.sign(diff)
    else:
        raise InvalidInputError(f"weight_mode must be one of {WEIGHT_MODES}, got {weight_mode!r}")
    weight = base**gamma
    safe = np.where(base > 0, base, 1.0)
    dweight = np.where(base > 0, gamma * safe ** (gamma - 1.0), 0.0) * dbase  # d weight / d pred[y]
    return weight, dweight


def poisson_focal_loss(target, pred, label, gamma: float, rate=None, weight_mode: str = "clamp") -> LossValue:
    """``w^gamma * KL(target || pred)`` with ``w = max(target[y] - pred[y], 0)``.

    ``weight_mode="abs"`` uses ``|target[y] - pred[y]|`` instead of the clamp.
    """
    if not (np.isfinite(gamma) and gamma >= 0):
        raise InvalidInputError(f"gamma must be >= 0, got {gamma!r}")
    target, pred = _pair(target, pred)
    y = _labels(label, target.shape[-1])
    kl = np.asarray(kl_divergence(target, pred))
    weight, dweight = _focal_weight(target, pred, y, gamma, weight_mode)
    p_y = _pick(pred, y)
    onehot = core_math.one_hot_encode(y, target.shape[-1])
    grad = weight[..., None] * (pred - target) + (dweight * kl * p_y)[..., None] * (onehot - pred)
    return _finish(weight * kl, grad, rate)


def cross_entropy(label, pred, rate=None) -> LossValue:
    pred = np.asarray(pred, dtype=np.float64)
    y = _labels(label, pred.shape[-1])
    value = -np.log(np.maximum(_pick(pred, y), _LOG_FLOOR))
    return _finish(value, pred - core_math.one_hot_encode(y, pred.shape[-1]), rate)


def focal_loss(label, pred, gamma: float, rate=None) -> LossValue:
    """Vanilla focal loss ``-(1 - p_y)^gamma log p_y``."""
    if not (np.isfinite(gamma) and gamma >= 0):
        raise InvalidInputError(f"gamma must be >= 0, got {gamma!r}")
    pred = np.asarray(pred, dtype=np.float64)
    y = _labels(label, pred.shape[-1])
    p = _pick(pred, y)
    logp = np.log(np.maximum(p, _LOG_FLOOR))
    rest = 1.0 - p
    safe_rest = np.where(rest > 0, rest, 1.0)
    mod = rest**gamma
    dmod = np.where(rest > 0, gamma * safe_rest ** (gamma - 1.0), 0.0)
    # dL/dH = [gamma (1-p)^(gamma-1) p log p - (1-p)^gamma] (onehot - pred)
    coef = dmod * p * logp - mod
    onehot = core_math.one_hot_encode(y, pred.shape[-1])
    return _finish(-mod * logp, coef[..., None] * (onehot - pred), rate)


def squared_emd(target, pred, rate=None) -> LossValue:
    """Squared earth mover's distance between the two CDFs."""
    target, pred = _pair(target, pred)
    gap = np.cumsum(target, axis=-1) - np.cumsum(pred, axis=-1)
    value = np.sum(gap * gap, axis=-1)
    # dL/dpred[m] = -2 sum_{k >= m} gap[k]
    grad_pred = -2.0 * np.flip(np.cumsum(np.flip(gap, axis=-1), axis=-1), axis=-1)
    return _finish(value, _softmax_backward(pred, grad_pred), rate)


def ordinal_bce(logits, label) -> LossValue:
    """Summed binary cross-entropy against the cumulative threshold code.

    ``logits`` has ``K - 1`` entries; ``grad_scores`` is the gradient with
    respect to them.
    """
    logits = np.asarray(logits, dtype=np.float64)
    num_classes = logits.shape[-1] + 1
    code = core_math.ordinal_cumulative_encode(label, num_classes)
    # log(1 + e^z) - code * z, stable for either sign
    value = np.sum(np.logaddexp(0.0, logits) - code * logits, axis=-1)
    e = np.exp(-np.abs(logits))
    sig = np.where(logits >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return LossValue(value=_out(value), grad_scores=sig - code)


def ordinal_decode(logits) -> np.ndarray:
    """Predicted class = number of thresholds whose sigmoid exceeds 1/2."""
    return np.sum(np.asarray(logits) > 0, axis=-1)
