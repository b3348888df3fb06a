"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation runs eagerly on numpy arrays and, while
gradients are enabled, appends one record to a thread-local tape. The tape is
trivially in topological order (records are appended in execution order), so
``backward`` is a single reverse sweep that accumulates vector-Jacobian
products into ``Tensor.grad`` buffers and then clears the tape.

Training runs in float32; gradient checking switches the whole graph to
float64 by building float64 leaf tensors (ops inherit the dtype of their
inputs).
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """An n-dimensional float array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; everything routes through the taped ops below
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _TapeRecord:
    __slots__ = ("output", "inputs")

    def __init__(self, output: Tensor, inputs: list[tuple[Tensor, Callable[[np.ndarray], np.ndarray]]]):
        self.output = output
        self.inputs = inputs  # (tensor, vjp) pairs, vjp maps d(out) -> d(input)


class Tape:
    """Thread-confined record of operations, in execution order."""

    def __init__(self):
        self.records: list[_TapeRecord] = []

    def clear(self) -> None:
        self.records.clear()


class _ThreadState(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True


_STATE = _ThreadState()


def tape() -> Tape:
    return _STATE.tape


def clear_tape() -> None:
    _STATE.tape.clear()


class no_grad:
    """Context manager: run ops without recording them on the tape."""

    def __enter__(self):
        self._prev = _STATE.grad_enabled
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


def _record(output: Tensor, pairs: Iterable[tuple[Tensor, Callable]]) -> None:
    if not _STATE.grad_enabled:
        return
    inputs = [(t, vjp) for t, vjp in pairs if t.requires_grad]
    if inputs:
        _STATE.tape.records.append(_TapeRecord(output, inputs))


def _make_output(data: np.ndarray, inputs: Sequence[Tensor]) -> Tensor:
    requires = _STATE.grad_enabled and any(t.requires_grad for t in inputs)
    return Tensor(data, requires_grad=requires)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; fills .grad on the graph, clears the tape."""
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    records = _STATE.tape.records
    loss.grad = np.ones_like(loss.data)
    try:
        for rec in reversed(records):
            g = rec.output.grad
            if g is None:
                continue  # not on the path from the loss
            for t, vjp in rec.inputs:
                _accumulate(t, vjp(g))
    finally:
        _STATE.tape.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = _make_output(a.data + b.data, (a, b))
    _record(out, [(a, lambda g: _unbroadcast(g, a.shape)),
                  (b, lambda g: _unbroadcast(g, b.shape))])
    return out


def neg(a: Tensor) -> Tensor:
    out = _make_output(-a.data, (a,))
    _record(out, [(a, lambda g: -g)])
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _make_output(a.data * b.data, (a, b))
    _record(out, [(a, lambda g: _unbroadcast(g * b.data, a.shape)),
                  (b, lambda g: _unbroadcast(g * a.data, b.shape))])
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _make_output(a.data.reshape(shape), (a,))
    _record(out, [(a, lambda g: g.reshape(a.shape))])
    return out


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    out = _make_output(np.ascontiguousarray(a.data.transpose(axes)), (a,))
    _record(out, [(a, lambda g: g.transpose(inverse))])
    return out


def select(a: Tensor, axis: int, index: int) -> Tensor:
    """Single-index selection along one axis (the indexed axis is dropped)."""
    out = _make_output(np.take(a.data, index, axis=axis), (a,))

    def vjp(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return full

    _record(out, [(a, vjp)])
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _make_output(a.data.sum(axis=axis, keepdims=keepdims), (a,))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).astype(a.data.dtype)

    _record(out, [(a, vjp)])
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    out = _make_output(a.data.mean(axis=axis, keepdims=keepdims), (a,))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count).astype(a.data.dtype)

    _record(out, [(a, vjp)])
    return out


def take_per_row(a: Tensor, indices: np.ndarray) -> Tensor:
    """Pick one column per row of a 2-D tensor: out[i] = a[i, indices[i]]."""
    if a.ndim != 2:
        raise ShapeError(f"take_per_row expects a 2-D tensor, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != (a.shape[0],):
        raise ShapeError(f"indices shape {idx.shape} does not match rows {a.shape[0]}")
    rows = np.arange(a.shape[0])
    out = _make_output(a.data[rows, idx], (a,))

    def vjp(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        return full

    _record(out, [(a, vjp)])
    return out


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    out = _make_output(np.maximum(a.data, 0), (a,))
    # subgradient 0 at x == 0
    _record(out, [(a, lambda g: g * (a.data > 0))])
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(x.dtype)
    out = _make_output(s, (a,))
    _record(out, [(a, lambda g: g * s * (1.0 - s))])
    return out


def activations(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ShapeError(f"unknown activation kind {kind!r}")


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when p == 0 or in eval mode."""
    if not training or p <= 0.0:
        return a
    if not 0.0 < p < 1.0:
        raise ShapeError(f"dropout probability must be in [0, 1), got {p}")
    mask = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    out = _make_output(a.data * mask, (a,))
    _record(out, [(a, lambda g: g * mask)])
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul expects >=2-D operands, got {a.shape} @ {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims must match, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape[-1]} vs {b.shape[-2]}")
    out = _make_output(a.data @ b.data, (a, b))
    _record(out, [(a, lambda g: g @ b.data.swapaxes(-1, -2)),
                  (b, lambda g: a.data.swapaxes(-1, -2) @ g)])
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map on the trailing axis: y = x @ weight.T + bias."""
    if weight.ndim != 2:
        raise ShapeError(f"linear weight must be 2-D [out, in], got {weight.shape}")
    dout, din = weight.shape
    if x.shape[-1] != din:
        raise ShapeError(f"linear input trailing dim {x.shape[-1]} does not match weight in-dim {din}")
    if bias.shape != (dout,):
        raise ShapeError(f"linear bias shape {bias.shape} does not match out-dim {dout}")
    out = _make_output(x.data @ weight.data.T + bias.data, (x, weight, bias))

    def vjp_w(g):
        return g.reshape(-1, dout).T @ x.data.reshape(-1, din)

    _record(out, [(x, lambda g: g @ weight.data),
                  (weight, vjp_w),
                  (bias, lambda g: g.reshape(-1, dout).sum(axis=0))])
    return out


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def conv1d_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over the trailing axis of [B, Cin, L]."""
    if x.ndim != 3:
        raise ShapeError(f"conv1d input must be [B, Cin, L], got shape {x.shape}")
    if weight.ndim != 3:
        raise ShapeError(f"conv1d weight must be [Cout, Cin, K], got shape {weight.shape}")
    b_sz, cin, length = x.shape
    cout, cin_w, kernel = weight.shape
    if cin_w != cin:
        raise ShapeError(f"conv1d channel mismatch: input has {cin} channels, weight expects {cin_w}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv1d bias shape {bias.shape} does not match {cout} output channels")
    if stride < 1:
        raise ShapeError(f"conv1d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv1d padding must be >= 0, got {padding}")
    if kernel > length + 2 * padding:
        raise ShapeError(f"conv1d kernel {kernel} exceeds padded length {length + 2 * padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, kernel, axis=2)[:, :, ::stride, :]  # [B, Cin, Lout, K]
    lout = win.shape[2]
    out_data = np.tensordot(win, weight.data, axes=([1, 3], [1, 2]))  # [B, Lout, Cout]
    out_data = np.ascontiguousarray(out_data.transpose(0, 2, 1)) + bias.data[None, :, None]
    out = _make_output(out_data.astype(x.dtype, copy=False), (x, weight, bias))

    def vjp_x(g):
        gwin = np.tensordot(g, weight.data, axes=([1], [0]))  # [B, Lout, Cin, K]
        gwin = gwin.transpose(0, 2, 1, 3)  # [B, Cin, Lout, K]
        gxp = np.zeros_like(xp)
        for k in range(kernel):
            gxp[:, :, k : k + stride * lout : stride] += gwin[:, :, :, k]
        return gxp[:, :, padding : padding + length] if padding else gxp

    def vjp_w(g):
        return np.tensordot(g, win, axes=([0, 2], [0, 2]))  # [Cout, Cin, K]

    _record(out, [(x, vjp_x), (weight, vjp_w), (bias, lambda g: g.sum(axis=(0, 2)))])
    return out


def pool1d(x: Tensor, kind: str, k: int = 0, stride: int = 0) -> Tensor:
    """Windowed max/avg or global average over the trailing axis of [B, C, L]."""
    if x.ndim != 3:
        raise ShapeError(f"pool1d input must be [B, C, L], got shape {x.shape}")
    b_sz, ch, length = x.shape

    if kind == "global_avg":
        out = _make_output(x.data.mean(axis=2, keepdims=True), (x,))
        _record(out, [(x, lambda g: np.broadcast_to(g / length, x.shape).astype(x.dtype))])
        return out

    if kind not in ("max", "avg"):
        raise ShapeError(f"unknown pool kind {kind!r}")
    if k > length:
        raise ShapeError(f"pool window {k} exceeds input length {length}")
    if k < 1 or stride < 1:
        raise ShapeError(f"pool1d needs k >= 1 and stride >= 1, got k={k} stride={stride}")

    win = sliding_window_view(x.data, k, axis=2)[:, :, ::stride, :]  # [B, C, Lw, k]
    lw = win.shape[2]

    if kind == "max":
        arg = win.argmax(axis=3)  # first index on ties
        out = _make_output(win.max(axis=3), (x,))

        def vjp_max(g):
            gx = np.zeros_like(x.data)
            bi, ci, wi = np.indices(arg.shape)
            np.add.at(gx, (bi, ci, wi * stride + arg), g)
            return gx

        _record(out, [(x, vjp_max)])
        return out

    out = _make_output(win.mean(axis=3), (x,))

    def vjp_avg(g):
        gx = np.zeros_like(x.data)
        gk = g / k
        for j in range(k):
            gx[:, :, j : j + stride * lw : stride] += gk
        return gx

    _record(out, [(x, vjp_avg)])
    return out


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

class BatchNormState:
    """Running statistics for one batch-norm layer (eval-mode normalization)."""

    def __init__(self, channels: int, dtype=DEFAULT_DTYPE):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batch_norm_1d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                  training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Normalize [B, C, L] per channel over batch x length."""
    if eps <= 0:
        raise ShapeError(f"batch_norm eps must be > 0, got {eps}")
    if x.ndim != 3:
        raise ShapeError(f"batch_norm_1d input must be [B, C, L], got shape {x.shape}")
    ch = x.shape[1]
    if gamma.shape != (ch,) or beta.shape != (ch,):
        raise ShapeError(f"batch_norm gamma/beta must have shape ({ch},)")

    g3 = gamma.data[None, :, None]
    b3 = beta.data[None, :, None]

    if training:
        mu = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        n = x.shape[0] * x.shape[2]
        unbiased = var * n / (n - 1) if n > 1 else var
        state.mean[...] = (1.0 - momentum) * state.mean + momentum * mu
        state.var[...] = (1.0 - momentum) * state.var + momentum * unbiased
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None]) * inv[None, :, None]
        out = _make_output(g3 * xhat + b3, (x, gamma, beta))

        def vjp_x(g):
            dxhat = g * g3
            m1 = dxhat.mean(axis=(0, 2), keepdims=True)
            m2 = (dxhat * xhat).mean(axis=(0, 2), keepdims=True)
            return inv[None, :, None] * (dxhat - m1 - xhat * m2)

        _record(out, [(x, vjp_x),
                      (gamma, lambda g: (g * xhat).sum(axis=(0, 2))),
                      (beta, lambda g: g.sum(axis=(0, 2)))])
        return out

    inv = 1.0 / np.sqrt(state.var + eps)
    xhat = (x.data - state.mean[None, :, None]) * inv[None, :, None]
    out = _make_output(g3 * xhat + b3, (x, gamma, beta))
    _record(out, [(x, lambda g: g * g3 * inv[None, :, None]),
                  (gamma, lambda g: (g * xhat).sum(axis=(0, 2))),
                  (beta, lambda g: g.sum(axis=(0, 2)))])
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing axis."""
    if eps <= 0:
        raise ShapeError(f"layer_norm eps must be > 0, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm gamma/beta must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = _make_output(gamma.data * xhat + beta.data, (x, gamma, beta))

    lead_axes = tuple(range(x.ndim - 1))

    def vjp_x(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (dxhat - m1 - xhat * m2)

    _record(out, [(x, vjp_x),
                  (gamma, lambda g: (g * xhat).sum(axis=lead_axes)),
                  (beta, lambda g: g.sum(axis=lead_axes))])
    return out


# ---------------------------------------------------------------------------
# softmax family and attention
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _make_output(s, (x,))
    _record(out, [(x, lambda g: s * (g - (g * s).sum(axis=axis, keepdims=True)))])
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    out = _make_output(y, (x,))
    _record(out, [(x, lambda g: g - np.exp(y) * g.sum(axis=axis, keepdims=True))])
    return out


def softmax_logsoftmax(x: Tensor, kind: str) -> Tensor:
    if kind == "softmax":
        return softmax(x)
    if kind == "log_softmax":
        return log_softmax(x)
    raise ShapeError(f"unknown kind {kind!r}")


def attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """Scaled dot-product attention over [B, H, T, dk] tensors."""
    if not (q.shape == k.shape == v.shape) or q.ndim != 4:
        raise ShapeError(f"attention expects matching [B, H, T, dk] shapes, got {q.shape}, {k.shape}, {v.shape}")
    dk = q.shape[-1]
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), Tensor(np.asarray(1.0 / math.sqrt(dk), dtype=q.dtype)))
    weights = softmax(scores, axis=-1)
    out = matmul(weights, v)
    if return_weights:
        return out, weights
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[..., Tensor], points, h: float = 1e-4,
               coords_per_tensor: int = 8, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the given float64 tensors to a scalar Tensor. A random subset
    of coordinates per tensor is probed; the relative-error denominator is
    max(|analytic|, |numeric|, 1e-8).
    """
    if h <= 0:
        raise ValueError(f"grad_check: invalid step h={h}, must be > 0")
    if isinstance(points, Tensor):
        points = [points]
    points = list(points)
    for p in points:
        if p.dtype != np.float64:
            raise ValueError("grad_check requires float64 tensors (64-bit mode)")
        p.requires_grad = True

    clear_tape()
    for p in points:
        p.zero_grad()
    loss = f(*points)
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in points]

    rng = np.random.default_rng(seed)
    max_err = 0.0
    with no_grad():
        for p, a in zip(points, analytic):
            flat = p.data.reshape(-1)
            n_probe = min(coords_per_tensor, flat.size)
            idx = rng.choice(flat.size, size=n_probe, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                f_plus = f(*points).item()
                flat[i] = orig - h
                f_minus = f(*points).item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                ana = float(a.reshape(-1)[i])
                denom = max(abs(ana), abs(numeric), 1e-8)
                max_err = max(max_err, abs(ana - numeric) / denom)
    return max_err


def assert_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
