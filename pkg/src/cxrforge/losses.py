"""Class-weighted categorical cross-entropy and label smoothing.

The smoothed loss is the convex-combination form -sum_j q_j log p_j with
q the smoothed target row: true class 1-eps, everything else eps/(K-1).
Probabilities are clamped at 1e-12 before the log so a confidently wrong
prediction yields a large finite loss instead of -inf.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor

PROB_FLOOR = 1e-12
_ROW_SUM_TOL = 1e-3


def _check_rows(name: str, t: Tensor) -> None:
    if t.ndim != 2:
        raise T.ShapeError(f"{name} must be 2-d (N, K), got {t.shape}")
    sums = t.data.sum(axis=1)
    if not np.allclose(sums, 1.0, atol=_ROW_SUM_TOL):
        worst = float(np.abs(sums - 1.0).max())
        raise ValueError(f"{name} rows must sum to 1 (worst deviation {worst:.3g})")


def label_smooth(one_hot: Tensor, eps: float) -> Tensor:
    """Spread eps of each one-hot row across the K-1 wrong classes.

    True-class entry becomes 1-eps, every other entry eps/(K-1); rows still
    sum to 1. eps=0 returns the input values unchanged.
    """
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"smoothing must satisfy 0 <= eps < 1, got {eps}")
    if one_hot.ndim != 2 or one_hot.shape[1] < 2:
        raise T.ShapeError(f"labels must be (N, K) with K >= 2, got {one_hot.shape}")
    data = one_hot.data
    is_one = data == 1
    if not ((is_one.sum(axis=1) == 1).all() and np.isin(data, (0, 1)).all()):
        raise ValueError("label_smooth requires one-hot rows")
    k = one_hot.shape[1]
    e = data.dtype.type(eps)
    off = data.dtype.type(eps / (k - 1))
    return Tensor(data * (1 - e) + (1 - data) * off)


def _per_sample_weights(labels: Tensor, class_weights: Tensor | None) -> Tensor:
    n, k = labels.shape
    if class_weights is None:
        return Tensor(np.ones(n, dtype=labels.dtype))
    if class_weights.shape != (k,):
        raise T.ShapeError(
            f"class_weights shape {class_weights.shape} does not match {k} classes"
        )
    idx = labels.data.argmax(axis=1)
    return Tensor(class_weights.data[idx].astype(labels.dtype))


def cross_entropy(
    probs: Tensor,
    labels: Tensor,
    class_weights: Tensor | None = None,
    tape: Tape | None = None,
) -> Tensor:
    """Mean over samples of w_c(i) * (-sum_j t_ij log p_ij).

    The weight index c(i) is the argmax of the label row. Labels may be
    one-hot or smoothed; they are treated as constants by the backward pass
    of interest (gradients flow through ``probs``).
    """
    if probs.shape != labels.shape:
        raise T.ShapeError(f"probs shape {probs.shape} != labels shape {labels.shape}")
    _check_rows("probs", probs)
    _check_rows("labels", labels)
    w = _per_sample_weights(labels, class_weights)
    n = probs.shape[0]
    logp = T.log(T.clamp_min(probs, PROB_FLOOR, tape), tape)
    row_ce = T.reduce_sum(T.mul(labels, logp, tape), axis=1, tape=tape)
    total = T.reduce_sum(T.mul(w, row_ce, tape), axis=None, tape=tape)
    return T.scale(total, -1.0 / n, tape)


def smoothed_cross_entropy(
    probs: Tensor,
    one_hot: Tensor,
    eps: float,
    class_weights: Tensor | None = None,
    tape: Tape | None = None,
) -> Tensor:
    """Cross-entropy against label-smoothed targets; eps=0 is plain CE bitwise."""
    return cross_entropy(probs, label_smooth(one_hot, eps), class_weights, tape)


def per_sample_cross_entropy(probs: Tensor, labels: Tensor) -> np.ndarray:
    """Unweighted per-sample -sum_j t_ij log p_ij (forward-only diagnostics)."""
    if probs.shape != labels.shape:
        raise T.ShapeError(f"probs shape {probs.shape} != labels shape {labels.shape}")
    logp = np.log(np.maximum(probs.data, PROB_FLOOR))
    return -(labels.data * logp).sum(axis=1)
