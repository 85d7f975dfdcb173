"""Dense tensors with taped reverse-mode differentiation.

Everything in the trainer runs through this module: a ``Tensor`` wrapping a
contiguous numpy buffer, a ``Tape`` that records backward rules in execution
order, the operator set needed by ResNet-9 (convolution, pooling, batchnorm,
activations, linear, smoothed cross-entropy), and a central-finite-difference
gradient checker used as the independent oracle for the whole engine.

The tape is single-threaded: one active tape per training thread. Kernels are
plain numpy and deterministic for a fixed input.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested op."""


class ConfigError(ValueError):
    """An op or module was configured with an invalid hyperparameter."""


class TapeError(RuntimeError):
    """Tape misuse: backward on a consumed tape, or no tape at all."""


_DTYPE_BY_PRECISION = {
    32: np.float32,
    64: np.float64,
    "32": np.float32,
    "64": np.float64,
    "float32": np.float32,
    "float64": np.float64,
}

_default_dtype = np.float32


def set_default_dtype(precision) -> None:
    """Select the element type (32 or 64 bit) for newly created tensors.

    Training runs in 32-bit for speed; the gradient-check suite switches to
    64-bit, without which finite-difference tolerances are unreachable.
    """
    global _default_dtype
    try:
        _default_dtype = _DTYPE_BY_PRECISION[precision]
    except KeyError:
        raise ConfigError(f"unsupported precision {precision!r}; use 32 or 64") from None


def default_dtype():
    return _default_dtype


class Tensor:
    """Dense n-dimensional array with an optional gradient slot.

    ``data`` is always a contiguous numpy array. ``grad`` is lazily allocated
    with the same shape during backward. ``tape`` links an op output back to
    the tape it was recorded on.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional["Tape"] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal: adopt an array without dtype conversion (op outputs).
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.tape = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul(other, -1.0))
        return add(self, -other)


class Tape:
    """Ordered record of op backward rules.

    Nodes are appended in forward execution order, so replaying them in
    reverse is a valid topological traversal. A tape can be consumed by
    ``backward`` exactly once.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._consumed = False

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._nodes.append((out, backward_fn))

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise TapeError("backward() called on an already-consumed tape")
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._nodes):
            if out.grad is not None:
                fn(out.grad)
        self._nodes.clear()


_active_tape: Optional[Tape] = None


@contextlib.contextmanager
def tape():
    """Context manager installing a fresh active tape on this thread."""
    global _active_tape
    prev = _active_tape
    t = Tape()
    _active_tape = t
    try:
        yield t
    finally:
        _active_tape = prev


def active_tape() -> Optional[Tape]:
    return _active_tape


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(tensor) into every requires_grad tensor on the tape."""
    if loss.tape is None:
        raise TapeError("loss was not produced under an active tape")
    loss.tape.backward(loss)


def _record(out: Tensor, inputs: tuple, backward_fn: Callable[[np.ndarray], None]) -> None:
    t = _active_tape
    if t is None:
        return
    if not any(i is not None and i.requires_grad for i in inputs):
        return
    out.requires_grad = True
    out.tape = t
    t.record(out, backward_fn)


# ---------------------------------------------------------------------------
# elementwise / reduction basics


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape and a.size != 1 and b.size != 1:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
        out = Tensor._wrap(a.data + b.data)

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g if a.size != 1 else np.sum(g).reshape(a.shape))
            if b.requires_grad:
                b._accumulate(g if b.size != 1 else np.sum(g).reshape(b.shape))

        _record(out, (a, b), bwd)
        return out

    out = Tensor._wrap(a.data + b)

    def bwd_s(g):
        if a.requires_grad:
            a._accumulate(g)

    _record(out, (a,), bwd_s)
    return out


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
        out = Tensor._wrap(a.data * b.data)

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate(g * a.data)

        _record(out, (a, b), bwd)
        return out

    out = Tensor._wrap(a.data * b)

    def bwd_s(g):
        if a.requires_grad:
            a._accumulate(g * b)

    _record(out, (a,), bwd_s)
    return out


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = Tensor._wrap(np.asarray(x.data.sum(), dtype=x.dtype))

    def bwd(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g, x.shape).astype(x.dtype, copy=False))

    _record(out, (x,), bwd)
    return out


def tmean(x: Tensor) -> Tensor:
    return mul(tsum(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# convolution

# Cap on the im2col scratch buffer; conv chunks the batch to stay under it.
_COL_BUDGET_BYTES = 1 << 26


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols6[:, :, i, j]
    if pad:
        return np.ascontiguousarray(xp[:, :, pad : pad + h, pad : pad + w])
    return xp


def _conv_chunk(c: int, k2: int, l: int, itemsize: int) -> int:
    per_image = c * k2 * l * itemsize
    return max(1, _COL_BUDGET_BYTES // max(1, per_image))


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation with zero padding, NCHW layout."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4D x and w, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, cw, kh, kw = w.shape
    if cin != cw:
        raise ShapeError(
            f"conv2d: x has {cin} input channels but w expects {cw} (x {x.shape}, w {w.shape})"
        )
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input {h + 2 * pad}x{wd + 2 * pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    l = ho * wo
    w2d = w.data.reshape(cout, cw * kh * kw)
    chunk = _conv_chunk(cin, kh * kw, l, x.data.dtype.itemsize)

    out = np.empty((n, cout, ho, wo), dtype=x.dtype)
    for n0 in range(0, n, chunk):
        cols = _im2col(x.data[n0 : n0 + chunk], kh, kw, stride, pad)
        out[n0 : n0 + chunk] = (w2d @ cols).reshape(-1, cout, ho, wo)
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
        out += b.data.reshape(1, cout, 1, 1)
    res = Tensor._wrap(out)

    def bwd(g):
        go = g.reshape(n, cout, l)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        need_x, need_w = x.requires_grad, w.requires_grad
        if not (need_x or need_w):
            return
        gw = np.zeros((cout, cw * kh * kw), dtype=w.dtype) if need_w else None
        gx = np.empty_like(x.data) if need_x else None
        for n0 in range(0, n, chunk):
            n1 = min(n0 + chunk, n)
            gc = go[n0:n1]
            if need_w:
                cols = _im2col(x.data[n0:n1], kh, kw, stride, pad)
                gw += np.matmul(gc, cols.transpose(0, 2, 1)).sum(axis=0)
            if need_x:
                gcols = np.matmul(w2d.T, gc)
                gx[n0:n1] = _col2im(gcols, (n1 - n0, cin, h, wd), kh, kw, stride, pad)
        if need_w:
            w._accumulate(gw.reshape(w.shape))
        if need_x:
            x._accumulate(gx)

    _record(res, (x, w, b), bwd)
    return res


# ---------------------------------------------------------------------------
# pooling


def maxpool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    """k x k max pooling; gradient flows to each window's first (row-major) argmax."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4D input, got {x.shape}")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"maxpool2d: window {k} exceeds input {h}x{w}")
    stride = stride or k
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    cols = _im2col(x.data, k, k, stride, 0).reshape(n, c, k * k, ho * wo)
    arg = cols.argmax(axis=2)
    out = np.take_along_axis(cols, arg[:, :, None, :], axis=2)[:, :, 0].reshape(n, c, ho, wo)
    res = Tensor._wrap(np.ascontiguousarray(out))

    def bwd(g):
        if not x.requires_grad:
            return
        gcols = np.zeros((n, c, k * k, ho * wo), dtype=x.dtype)
        np.put_along_axis(gcols, arg[:, :, None, :], g.reshape(n, c, 1, ho * wo), axis=2)
        x._accumulate(_col2im(gcols.reshape(n, c * k * k, ho * wo), x.shape, k, k, stride, 0))

    _record(res, (x,), bwd)
    return res


def global_maxpool(x: Tensor) -> Tensor:
    """Per-channel spatial max: [N,C,H,W] -> [N,C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_maxpool expects 4D input, got {x.shape}")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    arg = flat.argmax(axis=2)
    out = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]
    res = Tensor._wrap(np.ascontiguousarray(out))

    def bwd(g):
        if not x.requires_grad:
            return
        gflat = np.zeros((n, c, h * w), dtype=x.dtype)
        np.put_along_axis(gflat, arg[:, :, None], g[:, :, None], axis=2)
        x._accumulate(gflat.reshape(x.shape))

    _record(res, (x,), bwd)
    return res


# ---------------------------------------------------------------------------
# linear


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x[N,D] @ w[K,D]^T + b[K]."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"linear expects 2D x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: inner dims differ (x {x.shape}, w {w.shape})")
    out = x.data @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
        out = out + b.data
    res = Tensor._wrap(out)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g @ w.data)
        if w.requires_grad:
            w._accumulate(g.T @ x.data)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=0))

    _record(res, (x, w, b), bwd)
    return res


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    """Per-channel running statistics, updated only in train mode."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def create(cls, channels: int, dtype=None) -> "BatchNormState":
        dt = dtype or _default_dtype
        return cls(np.zeros(channels, dtype=dt), np.ones(channels, dtype=dt))

    def reset(self) -> None:
        self.running_mean[:] = 0.0
        self.running_var[:] = 1.0

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.running_mean.copy(), self.running_var.copy())


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Channel-wise batch normalization over (N, H, W).

    Train mode normalizes by batch statistics (biased variance) and folds them
    into the running stats with the given momentum; eval mode uses the running
    stats. With momentum=1 one train step makes eval reproduce train exactly.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects 4D input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({c},)")
    if mode not in ("train", "eval"):
        raise ConfigError(f"batchnorm2d: unknown mode {mode!r}")

    if mode == "train":
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.running_mean += momentum * (mean - state.running_mean)
        state.running_var += momentum * (var - state.running_var)
    else:
        mean = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    res = Tensor._wrap(out)

    def bwd(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        gs = g * gamma.data.reshape(1, c, 1, 1)
        if mode == "train":
            m = n * h * w
            mean_gs = gs.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            mean_gs_xhat = (gs * xhat).mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            gx = inv_std.reshape(1, c, 1, 1) * (gs - mean_gs - xhat * mean_gs_xhat)
            del m
        else:
            gx = gs * inv_std.reshape(1, c, 1, 1)
        x._accumulate(gx)

    _record(res, (x, gamma, beta), bwd)
    return res


# ---------------------------------------------------------------------------
# activations


def celu(x: Tensor, alpha: float) -> Tensor:
    """x for x >= 0, alpha * (exp(x/alpha) - 1) otherwise. Approaches ReLU as alpha -> 0."""
    if alpha <= 0:
        raise ConfigError(f"celu: alpha must be positive, got {alpha}")
    neg = np.expm1(np.minimum(x.data, 0.0) / alpha) * alpha
    out = np.where(x.data >= 0, x.data, neg)
    res = Tensor._wrap(out.astype(x.dtype, copy=False))

    def bwd(g):
        if x.requires_grad:
            slope = np.where(x.data >= 0, 1.0, np.exp(np.minimum(x.data, 0.0) / alpha))
            x._accumulate((g * slope).astype(x.dtype, copy=False))

    _record(res, (x,), bwd)
    return res


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    res = Tensor._wrap(out)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0))

    _record(res, (x,), bwd)
    return res


# ---------------------------------------------------------------------------
# loss


def smoothed_targets(labels: np.ndarray, alpha: float, num_classes: int) -> np.ndarray:
    """Blend one-hot targets with a uniform distribution: (1-alpha)*onehot + alpha/K."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"smoothing factor must be in [0,1], got {alpha}")
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = int(np.argmax((labels < 0) | (labels >= num_classes)))
        raise ValueError(f"label {labels[bad]} at index {bad} outside [0,{num_classes})")
    t = np.full((labels.shape[0], num_classes), alpha / num_classes, dtype=np.float64)
    t[np.arange(labels.shape[0]), labels] += 1.0 - alpha
    return t


def smoothed_cross_entropy(logits: Tensor, labels: np.ndarray, alpha: float, num_classes: int):
    """Mean cross-entropy against label-smoothed targets.

    Returns (scalar loss tensor, target distribution array). Softmax uses
    max-subtraction so the loss is finite for any finite logits.
    """
    if logits.ndim != 2 or logits.shape[1] != num_classes:
        raise ShapeError(f"logits must be [N,{num_classes}], got {logits.shape}")
    targets = smoothed_targets(labels, alpha, num_classes).astype(logits.dtype)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss_val = -(targets * logp).sum(axis=1).mean()
    res = Tensor._wrap(np.asarray(loss_val, dtype=logits.dtype))

    def bwd(g):
        if logits.requires_grad:
            softmax = np.exp(logp)
            logits._accumulate((softmax - targets) * (g / n))

    _record(res, (logits,), bwd)
    return res, targets


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    step: float
    coords_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    tol: float = 1e-6,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare taped gradients of a scalar function against central differences.

    Runs in float64 regardless of the input dtype. Relative error uses a 1e-6
    magnitude floor in the denominator so near-zero coordinates are compared
    absolutely. ``max_coords`` samples a coordinate subset for large inputs.
    """
    base = np.array(x.data, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    with tape():
        out = f(xt)
        if out.size != 1:
            raise ShapeError(f"grad_check needs a scalar-valued f, got shape {out.shape}")
        if not np.isfinite(out.data).all():
            raise ValueError("grad_check: f(x) is not finite")
        backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)
    analytic = analytic.reshape(-1)

    flat = base.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        gen = rng or np.random.default_rng(0)
        coords = gen.choice(flat.size, size=max_coords, replace=False)

    def value_at(arr: np.ndarray) -> float:
        return float(f(Tensor(arr, dtype=np.float64)).data)

    max_err = 0.0
    work = base.copy()
    wf = work.reshape(-1)
    for idx in coords:
        orig = wf[idx]
        wf[idx] = orig + step
        fp = value_at(work)
        wf[idx] = orig - step
        fm = value_at(work)
        wf[idx] = orig
        numeric = (fp - fm) / (2.0 * step)
        a = analytic[idx]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        max_err = max(max_err, err)
    return GradCheckReport(max_rel_error=max_err, tol=tol, step=step, coords_checked=len(coords))
