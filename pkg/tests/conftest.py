"""Shared oracles and fixtures.

The oracle implementations here are deliberately naive (explicit loops,
direct formulas) and independent of the library code paths they check.
"""

from __future__ import annotations

import numpy as np
import pytest

from cxrforge import tensor as T
from cxrforge.losses import smoothed_cross_entropy
from cxrforge.tensor import Tape, Tensor


# ---------------------------------------------------------------------------
# naive forward oracles
# ---------------------------------------------------------------------------


def naive_conv2d(x, kernel, bias, stride=1, pads=(0, 0, 0, 0)):
    """Direct quadruple-loop cross-correlation."""
    n, c, h, w = x.shape
    f, _, k, _ = kernel.shape
    pt, pb, pl, pr = pads
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    oh = (xp.shape[2] - k) // stride + 1
    ow = (xp.shape[3] - k) // stride + 1
    out = np.zeros((n, f, oh, ow), dtype=np.float64)
    for b in range(n):
        for o in range(f):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for cc in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                acc += (
                                    xp[b, cc, i * stride + ki, j * stride + kj]
                                    * kernel[o, cc, ki, kj]
                                )
                    out[b, o, i, j] = acc + bias[o]
    return out.astype(x.dtype)


def naive_maxpool2d(x, window, stride):
    """Exhaustive per-window scan."""
    n, c, h, w = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for b in range(n):
        for cc in range(c):
            for i in range(oh):
                for j in range(ow):
                    out[b, cc, i, j] = x[
                        b, cc, i * stride : i * stride + window, j * stride : j * stride + window
                    ].max()
    return out


def naive_gap(x):
    """Flat-loop spatial mean."""
    n, c, h, w = x.shape
    out = np.zeros((n, c), dtype=np.float64)
    for b in range(n):
        for cc in range(c):
            s = 0.0
            for i in range(h):
                for j in range(w):
                    s += x[b, cc, i, j]
            out[b, cc] = s / (h * w)
    return out.astype(x.dtype)


def naive_matmul(a, b):
    """Triple-loop matrix product."""
    n, d = a.shape
    d2, m = b.shape
    assert d == d2
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(d):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out.astype(a.dtype)


def naive_bilinear_resize(img, oh, ow):
    """Per-pixel bilinear interpolation with half-pixel centers and edge
    replication, written as scalar loops."""
    c, h, w = img.shape
    out = np.zeros((c, oh, ow), dtype=np.float64)
    for ch in range(c):
        for y in range(oh):
            sy = (y + 0.5) * (h / oh) - 0.5
            y0 = int(np.floor(sy))
            ty = sy - y0
            y0c = min(max(y0, 0), h - 1)
            y1c = min(max(y0 + 1, 0), h - 1)
            for x in range(ow):
                sx = (x + 0.5) * (w / ow) - 0.5
                x0 = int(np.floor(sx))
                tx = sx - x0
                x0c = min(max(x0, 0), w - 1)
                x1c = min(max(x0 + 1, 0), w - 1)
                top = img[ch, y0c, x0c] * (1 - tx) + img[ch, y0c, x1c] * tx
                bot = img[ch, y1c, x0c] * (1 - tx) + img[ch, y1c, x1c] * tx
                out[ch, y, x] = top * (1 - ty) + bot * ty
    return out.astype(img.dtype)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_diff_grad(loss_fn, param: Tensor, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar loss w.r.t. one parameter."""
    flat = param.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = loss_fn()
        flat[i] = orig - h
        lm = loss_fn()
        flat[i] = orig
        grad[i] = (lp - lm) / (2.0 * h)
    return grad.reshape(param.shape)


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())


def fd_certified(loss_fn, params, h: float = 1e-3, budget: float = 2e-6):
    """Finite differences at ``h``, or None when fd cannot certify 1e-5 here.

    Central differences carry an O(h^2) truncation term; its size is
    estimated per coordinate by step halving (Richardson). Instantiations
    where the estimate exceeds ``budget`` relative to the gradient are
    outside the oracle's resolution at this h (kink nearby, or a first-order
    cancellation), so the caller should draw another seed. Uses only forward
    evaluations, never the autodiff path under test.
    """
    fds = {}
    for p in params:
        fd1 = finite_diff_grad(loss_fn, p, h=h)
        fd2 = finite_diff_grad(loss_fn, p, h=h / 2)
        trunc = np.abs(fd1 - fd2) * (4.0 / 3.0)
        denom = np.maximum(np.maximum(np.abs(fd1), np.abs(fd2)), 1e-8)
        if (trunc / denom).max() > budget:
            return None
        fds[p] = fd1
    return fds


class TinyConvNet:
    """conv(3ch -> 4) -> relu -> maxpool -> GAP + flatten -> concat -> dense
    -> softmax -> smoothed weighted CE, in 64-bit. The shape used by the
    gradient-verification harness."""

    def __init__(self, seed: int, hw: int = 6, k: int = 3, classes: int = 3):
        rng = np.random.default_rng(seed)
        self.x = Tensor(rng.random((1, 3, hw, hw)), dtype=np.float64)
        labels = np.zeros((1, classes))
        labels[0, rng.integers(0, classes)] = 1.0
        self.y = Tensor(labels, dtype=np.float64)
        self.class_weights = Tensor(rng.uniform(0.5, 2.0, classes), dtype=np.float64)
        self.kernel = Tensor(rng.normal(0, 0.3, (4, 3, k, k)), dtype=np.float64)
        self.kbias = Tensor(rng.normal(0, 0.05, 4), dtype=np.float64)
        conv_hw = hw - k + 1
        pooled = conv_hw // 2
        dim = 4 * pooled * pooled + 4
        self.weights = Tensor(rng.normal(0, 0.3, (dim, classes)), dtype=np.float64)
        self.dbias = Tensor(rng.normal(0, 0.05, classes), dtype=np.float64)
        self.params = [self.kernel, self.kbias, self.weights, self.dbias]

    def loss(self, tape: Tape | None = None) -> Tensor:
        h = T.conv2d(self.x, self.kernel, self.kbias, 1, "valid", tape)
        h = T.relu(h, tape)
        h = T.maxpool2d(h, 2, 2, tape)
        parts = [T.flatten(h, tape), T.global_avg_pool2d(h, tape)]
        z = T.dense(T.concat(parts, tape), self.weights, self.dbias, tape)
        p = T.softmax(z, tape)
        return smoothed_cross_entropy(p, self.y, 0.1, self.class_weights, tape)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)
