"""Truncated-Poisson probability machinery and label encodings.

Classes are indexed ``k = 0 .. K-1``; class ``k`` corresponds to ``k``
Poisson events, so the lowest class is the zero-event outcome.

Every function accepts either a single sample or a leading batch axis.
Rates and labels broadcast against the class axis, which is always last.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .errors import InvalidInputError

RATE_FLOOR = 1e-12
SOFTPLUS_LINEAR_THRESHOLD = 30.0


def _check_num_classes(num_classes: int) -> int:
    if int(num_classes) != num_classes or num_classes < 2:
        raise InvalidInputError(f"num_classes must be an integer >= 2, got {num_classes!r}")
    return int(num_classes)


def _as_float(x):
    arr = np.asarray(x, dtype=np.float64)
    return arr


def _maybe_scalar(arr: np.ndarray):
    return float(arr) if arr.ndim == 0 else arr


def softplus(z):
    """Overflow-safe ``log(1 + exp(z))`` floored at ``RATE_FLOOR``.

    Accepts a scalar or array; raises on non-finite input.
    """
    z = _as_float(z)
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("softplus input must be finite")
    big = z > SOFTPLUS_LINEAR_THRESHOLD
    out = np.where(
        big,
        z + np.log1p(np.exp(-np.abs(z))),
        np.log1p(np.exp(np.minimum(z, SOFTPLUS_LINEAR_THRESHOLD))),
    )
    return _maybe_scalar(np.maximum(out, RATE_FLOOR))


def softplus_grad(z):
    """Derivative of :func:`softplus` (the logistic sigmoid), zero where the floor is active."""
    z = _as_float(z)
    e = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    floored = np.log1p(np.exp(np.minimum(z, SOFTPLUS_LINEAR_THRESHOLD))) < RATE_FLOOR
    return _maybe_scalar(np.where(floored, 0.0, sig))


def check_rate(rate) -> np.ndarray:
    rate = _as_float(rate)
    if not np.all(np.isfinite(rate)) or np.any(rate <= 0):
        raise InvalidInputError("Poisson rate must be finite and strictly positive")
    return rate


@lru_cache(maxsize=64)
def _log_class_index(num_classes: int) -> np.ndarray:
    # log(j) for j = 1..K-1; index 0 is unused.
    out = np.zeros(num_classes)
    out[1:] = np.log(np.arange(1, num_classes, dtype=np.float64))
    out.setflags(write=False)
    return out


@lru_cache(maxsize=64)
def log_factorials(num_classes: int) -> np.ndarray:
    """``log(k!)`` for ``k = 0..K-1`` as a running sum of ``log(j)``."""
    out = np.cumsum(_log_class_index(num_classes))
    out.setflags(write=False)
    return out


def _log_pmf_unnormalized(mean: np.ndarray, num_classes: int) -> np.ndarray:
    # k*log(mean) - mean - log(k!) accumulated one event at a time:
    # step j adds log(mean) - log(j), which is exactly 0 when mean == j, so
    # integer rates give bit-exact ties between classes mean-1 and mean.
    steps = np.log(mean)[..., None] - _log_class_index(num_classes)[1:]
    head = -mean[..., None]
    return np.cumsum(np.concatenate([head, steps], axis=-1), axis=-1)


def poisson_log_scores(rate, num_classes: int):
    """Log-scores ``H[k] = k log(rate) - rate - log(k!)`` for ``k < num_classes``."""
    num_classes = _check_num_classes(num_classes)
    rate = check_rate(rate)
    return _log_pmf_unnormalized(rate, num_classes)


def score_rate_derivative(rate, num_classes: int) -> np.ndarray:
    """``dH[k]/d rate = k / rate - 1``."""
    rate = _as_float(rate)
    k = np.arange(num_classes, dtype=np.float64)
    return k / rate[..., None] - 1.0


def normalize_scores(scores) -> np.ndarray:
    """Softmax over the class axis with max-subtraction."""
    scores = _as_float(scores)
    if scores.shape[-1] < 2:
        raise InvalidInputError("need at least two classes")
    if not np.all(np.isfinite(scores)):
        raise InvalidInputError("log-scores must be finite")
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def poisson_probs(rate, num_classes: int) -> np.ndarray:
    """Predicted class distribution of the Poisson head for ``rate``."""
    return normalize_scores(poisson_log_scores(rate, num_classes))


def _check_labels(label, num_classes: int) -> np.ndarray:
    arr = np.asarray(label)
    if arr.dtype.kind not in "iu":
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise InvalidInputError(f"labels must be integers, got {label!r}")
        arr = arr.astype(np.int64)
    if np.any(arr < 0) or np.any(arr >= num_classes):
        raise InvalidInputError(f"labels must lie in [0, {num_classes}), got {label!r}")
    return arr.astype(np.int64)


def poisson_encode(label, num_classes: int, temperature: float) -> np.ndarray:
    """Encode labels as temperature-sharpened truncated Poisson distributions.

    ``P[k] ∝ (y^k e^{-y} / k!)^t``.  With ``0^0 = 1`` the label ``y = 0``
    encodes to the delta at class 0.
    """
    num_classes = _check_num_classes(num_classes)
    if not (np.isfinite(temperature) and temperature > 0):
        raise InvalidInputError(f"temperature must be > 0, got {temperature!r}")
    y = _check_labels(label, num_classes)
    safe_mean = np.where(y == 0, 1.0, y).astype(np.float64)
    logp = temperature * _log_pmf_unnormalized(safe_mean, num_classes)
    probs = normalize_scores(logp)
    delta = one_hot_encode(np.zeros_like(y), num_classes)
    return np.where((y == 0)[..., None], delta, probs)


def one_hot_encode(label, num_classes: int) -> np.ndarray:
    num_classes = _check_num_classes(num_classes)
    y = _check_labels(label, num_classes)
    return (np.arange(num_classes) == y[..., None]).astype(np.float64)


def ordinal_cumulative_encode(label, num_classes: int) -> np.ndarray:
    """Threshold code of length ``K-1``: entry ``j`` is 1 iff ``label > j``."""
    num_classes = _check_num_classes(num_classes)
    y = _check_labels(label, num_classes)
    return (y[..., None] > np.arange(num_classes - 1)).astype(np.float64)


def soft_label_encode(label, num_classes: int, sigma: float) -> np.ndarray:
    """Gaussian-kernel soft label ``P[k] ∝ exp(-(k - y)^2 / (2 sigma^2))``."""
    num_classes = _check_num_classes(num_classes)
    if not (np.isfinite(sigma) and sigma > 0):
        raise InvalidInputError(f"sigma must be > 0, got {sigma!r}")
    y = _check_labels(label, num_classes)
    k = np.arange(num_classes, dtype=np.float64)
    return normalize_scores(-((k - y[..., None]) ** 2) / (2.0 * sigma * sigma))


def check_prob_vector(p, atol: float = 1e-9) -> np.ndarray:
    p = _as_float(p)
    if p.shape[-1] < 2:
        raise InvalidInputError("probability vector needs at least two entries")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InvalidInputError("probability vector entries must be finite and non-negative")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > atol):
        raise InvalidInputError("probability vector must sum to 1")
    return p


def is_unimodal(p) -> bool:
    """True if ``p`` is non-decreasing up to some index, then non-increasing."""
    d = np.diff(np.asarray(p, dtype=np.float64))
    if d.size == 0:
        return True
    # once a strict decrease is seen, no strict increase may follow
    first_down = np.flatnonzero(d < 0)
    if first_down.size == 0:
        return True
    return not np.any(d[first_down[0]:] > 0)


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def poisson_mode(rate: float, num_classes: int) -> int:
    """Mode of the truncated distribution: ``min(floor(rate), K-1)``."""
    return min(int(math.floor(rate)), num_classes - 1)
