"""Dense tensors with reverse-mode automatic differentiation.

The compute core of the package: every layer object the classifier needs
(convolution, max pooling, global average pooling, dense, relu, softmax,
concat, flatten) plus the elementwise/reduction primitives the losses are
composed from.

All forward ops are pure functions of their inputs. Recording for the
backward pass is opt-in: pass a ``Tape`` and the op appends a backward
closure to it; pass ``tape=None`` (inference) and nothing is retained.
``backward`` replays the tape in exact reverse execution order and returns
one accumulated gradient per requested parameter.

Convolutions run as im2col + BLAS matmul so that desk-scale training stays
in vendor sgemm rather than Python loops.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

__all__ = [
    "DEFAULT_DTYPE",
    "ShapeError",
    "Tensor",
    "Tape",
    "backward",
    "conv2d",
    "conv_output_hw",
    "maxpool2d",
    "global_avg_pool2d",
    "dense",
    "relu",
    "softmax",
    "concat",
    "split_columns",
    "flatten",
    "add",
    "mul",
    "log",
    "clamp_min",
    "scale",
    "reduce_sum",
    "reduce_mean",
]


class ShapeError(ValueError):
    """An op was invoked with incompatible shapes or hyperparameters."""


class Tensor:
    """Dense n-dimensional array of 32- or 64-bit floats, row-major.

    Thin wrapper over a numpy array. Tensors are identity-hashed: optimizer
    state and gradient maps key on the tensor object itself, not its value.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.ascontiguousarray(arr, dtype=dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = np.ascontiguousarray(arr, dtype=DEFAULT_DTYPE)
        else:
            arr = np.ascontiguousarray(arr)
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() requires a scalar tensor, got shape {self.shape}")

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def all_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


_BackwardFn = Callable[[np.ndarray, dict], None]


class Tape:
    """Execution-ordered record of ops for one forward pass.

    Single-writer: one forward/backward pass owns a tape exclusively. Nodes
    hold strong references to their output tensors so id-keyed gradient
    lookup stays unambiguous for the life of the tape.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, _BackwardFn]] = []

    def record(self, out: Tensor, backward_fn: _BackwardFn) -> None:
        self._nodes.append((out, backward_fn))

    def __len__(self) -> int:
        return len(self._nodes)


def _accumulate(acc: dict, tensor: Tensor, grad: np.ndarray) -> None:
    # Never mutate a stored gradient in place: backward closures may hand out
    # views, and a second path into the same tensor must not corrupt them.
    key = id(tensor)
    prev = acc.get(key)
    acc[key] = grad if prev is None else prev + grad


def backward(
    tape: Tape, loss: Tensor, parameters: Sequence[Tensor]
) -> tuple[dict[Tensor, Tensor], list[Tensor]]:
    """Replay ``tape`` in reverse from ``loss``; return per-parameter gradients.

    Returns ``(grads, missing)`` where ``grads`` maps every requested
    parameter to its accumulated gradient and ``missing`` lists parameters
    that never appeared on the tape (their gradient is zero).
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    acc: dict = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for out, fn in reversed(tape._nodes):
        g = acc.pop(id(out), None)
        if g is None:
            continue  # branch that does not feed the loss
        fn(g, acc)
    grads: dict[Tensor, Tensor] = {}
    missing: list[Tensor] = []
    for p in parameters:
        g = acc.get(id(p))
        if g is None:
            missing.append(p)
            grads[p] = Tensor(np.zeros_like(p.data))
        else:
            grads[p] = Tensor(np.ascontiguousarray(np.broadcast_to(g, p.shape), dtype=p.dtype))
    return grads, missing


# ---------------------------------------------------------------------------
# convolution / pooling
# ---------------------------------------------------------------------------


def _same_pads(h: int, w: int, k: int, stride: int) -> tuple[int, int, int, int]:
    # "same": output ceil(extent/stride); zero padding split floor/ceil with
    # the extra row/column on the bottom/right.
    oh = -(-h // stride)
    ow = -(-w // stride)
    ph = max((oh - 1) * stride + k - h, 0)
    pw = max((ow - 1) * stride + k - w, 0)
    return ph // 2, ph - ph // 2, pw // 2, pw - pw // 2


def conv_output_hw(h: int, w: int, k: int, stride: int, padding: str) -> tuple[int, int]:
    """Spatial output extents for a k x k convolution."""
    if padding == "same":
        pt, pb, pl, pr = _same_pads(h, w, k, stride)
        h, w = h + pt + pb, w + pl + pr
    elif padding != "valid":
        raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")
    if h < k or w < k:
        raise ShapeError(f"kernel {k}x{k} exceeds (padded) input extent {h}x{w}")
    return (h - k) // stride + 1, (w - k) // stride + 1


def _gather_cols(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """im2col: (N, C, Hp, Wp) -> (N, C*k*k, oh*ow) patch tensor.

    The (N, C, k, k, oh, ow) buffer is C-contiguous, so the reshape is free;
    no transposes touch the big axis.
    """
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, oh, ow), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride]
    return cols.reshape(n, c * k * k, oh * ow)


def _scatter_cols(
    dcols: np.ndarray, xp_shape: tuple, k: int, stride: int, oh: int, ow: int
) -> np.ndarray:
    """col2im: accumulate (N, C*k*k, oh*ow) back into an (N, C, Hp, Wp) array."""
    n, c = xp_shape[:2]
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, k, k, oh, ow)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += d6[:, :, i, j]
    return dxp


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor,
    stride: int = 1,
    padding: str = "valid",
    tape: Tape | None = None,
) -> Tensor:
    """Cross-correlation of an NCHW batch with an FCkk kernel stack, plus bias."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d needs 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if kh != kw:
        raise ShapeError(f"conv2d kernels must be square, got {kernel.shape}")
    if ck != c:
        raise ShapeError(f"channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if bias.shape != (f,):
        raise ShapeError(f"bias shape {bias.shape} does not match {f} filters")
    if not (isinstance(stride, int) and stride >= 1):
        raise ValueError(f"stride must be a positive int, got {stride!r}")
    k = kh
    if padding == "same":
        pt, pb, pl, pr = _same_pads(h, w, k, stride)
    elif padding == "valid":
        if h < k or w < k:
            raise ShapeError(f"kernel {k}x{k} exceeds input extent {h}x{w} with 'valid' padding")
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if pt or pb or pl or pr else x.data
    oh = (xp.shape[2] - k) // stride + 1
    ow = (xp.shape[3] - k) // stride + 1
    cols = _gather_cols(xp, k, stride, oh, ow)  # (N, C*k*k, oh*ow)
    w_mat = kernel.data.reshape(f, c * k * k)
    out_3d = np.matmul(w_mat, cols)  # (N, F, oh*ow), one gemm per sample
    out_3d += bias.data[:, None]
    out = Tensor(out_3d.reshape(n, f, oh, ow))

    if tape is not None:
        xp_shape = xp.shape

        def bwd(g: np.ndarray, acc: dict) -> None:
            g3 = np.ascontiguousarray(g).reshape(n, f, oh * ow)
            _accumulate(
                acc, kernel, np.matmul(g3, cols.swapaxes(1, 2)).sum(axis=0).reshape(kernel.shape)
            )
            _accumulate(acc, bias, g3.sum(axis=(0, 2)))
            dxp = _scatter_cols(np.matmul(w_mat.T, g3), xp_shape, k, stride, oh, ow)
            if pt or pb or pl or pr:
                dxp = dxp[:, :, pt : pt + h, pl : pl + w]
            _accumulate(acc, x, dxp)

        tape.record(out, bwd)
    return out


def maxpool2d(x: Tensor, window: int, stride: int, tape: Tape | None = None) -> Tensor:
    """Max over window x window patches; gradient routes to each window's
    first (row-major) maximal element."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d needs a 4-d input, got {x.shape}")
    if not (isinstance(window, int) and window >= 1 and isinstance(stride, int) and stride >= 1):
        raise ValueError(f"window/stride must be positive ints, got {window!r}/{stride!r}")
    n, c, h, w = x.shape
    if h < window or w < window:
        raise ShapeError(f"pool window {window} exceeds input extent {h}x{w}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    win = np.empty((n, c, oh, ow, window * window), dtype=x.dtype)
    for i in range(window):
        for j in range(window):
            win[..., i * window + j] = x.data[
                :, :, i : i + oh * stride : stride, j : j + ow * stride : stride
            ]
    out = Tensor(win.max(axis=-1))

    if tape is not None:
        idx = win.argmax(axis=-1)  # first max, row-major within the window

        def bwd(g: np.ndarray, acc: dict) -> None:
            gw = np.zeros((n, c, oh, ow, window * window), dtype=g.dtype)
            np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
            dx = np.zeros((n, c, h, w), dtype=g.dtype)
            for i in range(window):
                for j in range(window):
                    dx[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += gw[
                        ..., i * window + j
                    ]
            _accumulate(acc, x, dx)

        tape.record(out, bwd)
    return out


def global_avg_pool2d(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Arithmetic mean over the spatial extent: (N,C,H,W) -> (N,C)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool2d needs a 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))
    if tape is not None:

        def bwd(g: np.ndarray, acc: dict) -> None:
            _accumulate(acc, x, np.broadcast_to((g / (h * w))[:, :, None, None], x.shape))

        tape.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# dense / activations / reshaping
# ---------------------------------------------------------------------------


def dense(x: Tensor, weights: Tensor, bias: Tensor, tape: Tape | None = None) -> Tensor:
    """Affine map x @ weights + bias for a (N, D) batch."""
    if x.ndim != 2 or weights.ndim != 2:
        raise ShapeError(f"dense needs 2-d input and weights, got {x.shape} and {weights.shape}")
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(f"inner dimensions disagree: input {x.shape} vs weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weights.shape[1]} units")
    out = Tensor(x.data @ weights.data + bias.data)
    if tape is not None:

        def bwd(g: np.ndarray, acc: dict) -> None:
            _accumulate(acc, x, g @ weights.data.T)
            _accumulate(acc, weights, x.data.T @ g)
            _accumulate(acc, bias, g.sum(axis=0))

        tape.record(out, bwd)
    return out


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    if tape is not None:
        mask = x.data > 0

        def bwd(g: np.ndarray, acc: dict) -> None:
            _accumulate(acc, x, g * mask)

        tape.record(out, bwd)
    return out


def softmax(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Row-wise softmax with max-subtraction for overflow safety."""
    if x.ndim != 2:
        raise ShapeError(f"softmax needs a 2-d input, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p)
    if tape is not None:

        def bwd(g: np.ndarray, acc: dict) -> None:
            _accumulate(acc, x, p * (g - (g * p).sum(axis=1, keepdims=True)))

        tape.record(out, bwd)
    return out


def concat(parts: Sequence[Tensor], tape: Tape | None = None) -> Tensor:
    """Column-wise concatenation of (N, D_i) tensors."""
    if len(parts) == 0:
        raise ShapeError("concat requires at least one part")
    lead = parts[0].shape[0] if parts[0].ndim == 2 else None
    for p in parts:
        if p.ndim != 2 or p.shape[0] != lead:
            raise ShapeError(
                f"concat parts must be 2-d with a shared leading extent, got "
                f"{[tuple(q.shape) for q in parts]}"
            )
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    if tape is not None:
        widths = [p.shape[1] for p in parts]

        def bwd(g: np.ndarray, acc: dict) -> None:
            offset = 0
            for p, d in zip(parts, widths):
                _accumulate(acc, p, g[:, offset : offset + d])
                offset += d

        tape.record(out, bwd)
    return out


def split_columns(x: Tensor, widths: Sequence[int]) -> list[Tensor]:
    """Inverse of concat at recorded offsets (forward-only helper)."""
    if sum(widths) != x.shape[1]:
        raise ShapeError(f"widths {list(widths)} do not tile {x.shape[1]} columns")
    parts, offset = [], 0
    for d in widths:
        parts.append(Tensor(x.data[:, offset : offset + d].copy()))
        offset += d
    return parts


def flatten(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Collapse all trailing axes row-major: (N, ...) -> (N, D)."""
    if x.ndim < 2:
        raise ShapeError(f"flatten needs at least 2 dimensions, got {x.shape}")
    n = x.shape[0]
    out = Tensor(x.data.reshape(n, -1))
    if tape is not None:

        def bwd(g: np.ndarray, acc: dict) -> None:
            _accumulate(acc, x, g.reshape(x.shape))

        tape.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# elementwise / reduction primitives (loss plumbing)
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape``, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(a.data + b.data)
    if tape is not None:

        def bwd(g: np.ndarray, acc: dict) -> None:
            _accumulate(acc, a, _unbroadcast(g, a.shape))
            _accumulate(acc, b, _unbroadcast(g, b.shape))

        tape.record(out, bwd)
    return out


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(a.data * b.data)
    if tape is not None:

        def bwd(g: np.ndarray, acc: dict) -> None:
            _accumulate(acc, a, _unbroadcast(g * b.data, a.shape))
            _accumulate(acc, b, _unbroadcast(g * a.data, b.shape))

        tape.record(out, bwd)
    return out


def log(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.log(x.data))
    if tape is not None:

        def bwd(g: np.ndarray, acc: dict) -> None:
            _accumulate(acc, x, g / x.data)

        tape.record(out, bwd)
    return out


def clamp_min(x: Tensor, floor: float, tape: Tape | None = None) -> Tensor:
    """Elementwise max(x, floor); gradient is blocked where the floor binds."""
    out = Tensor(np.maximum(x.data, floor))
    if tape is not None:
        mask = x.data > floor

        def bwd(g: np.ndarray, acc: dict) -> None:
            _accumulate(acc, x, g * mask)

        tape.record(out, bwd)
    return out


def scale(x: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    out = Tensor(x.data * x.dtype.type(c))
    if tape is not None:

        def bwd(g: np.ndarray, acc: dict) -> None:
            _accumulate(acc, x, g * x.dtype.type(c))

        tape.record(out, bwd)
    return out


def reduce_sum(x: Tensor, axis: int | None = None, tape: Tape | None = None) -> Tensor:
    out = Tensor(x.data.sum(axis=axis))
    if tape is not None:

        def bwd(g: np.ndarray, acc: dict) -> None:
            if axis is None:
                _accumulate(acc, x, np.broadcast_to(g, x.shape))
            else:
                _accumulate(acc, x, np.broadcast_to(np.expand_dims(g, axis), x.shape))

        tape.record(out, bwd)
    return out


def reduce_mean(x: Tensor, axis: int | None = None, tape: Tape | None = None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    out = Tensor(x.data.mean(axis=axis))
    if tape is not None:

        def bwd(g: np.ndarray, acc: dict) -> None:
            gg = g / count
            if axis is None:
                _accumulate(acc, x, np.broadcast_to(gg, x.shape))
            else:
                _accumulate(acc, x, np.broadcast_to(np.expand_dims(gg, axis), x.shape))

        tape.record(out, bwd)
    return out
