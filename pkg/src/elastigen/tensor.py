"""Dense tensor engine with reverse-mode autodiff over a fixed op set.

Tensors wrap row-major contiguous numpy arrays (float32 default, float64
for gradient testing). A thread-local tape records operations eagerly as
they execute; `backward` walks it once in reverse and frees it. The op
set is the closed collection needed by the generator, discriminator,
encoder and losses, plus two structural ops (narrow, reshape) without
which the weight-sharing slicing could not carry gradients.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

FLOAT32 = np.float32
FLOAT64 = np.float64
_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class TensorError(ValueError):
    """Shape, dtype or numeric precondition violation, naming the offender."""


class GradError(RuntimeError):
    """Backward called on a tensor with no live tape, or a consumed tape."""


_state = threading.local()


def _tls():
    if not hasattr(_state, "tape"):
        _state.tape = None
        _state.grad_enabled = True
    return _state


@contextmanager
def no_grad():
    """Disable tape recording inside the block (pure inference)."""
    tls = _tls()
    prev = tls.grad_enabled
    tls.grad_enabled = False
    try:
        yield
    finally:
        tls.grad_enabled = prev


def recording() -> bool:
    """True when ops would be taped (used for inference fast paths)."""
    return _tls().grad_enabled


class Tensor:
    """N-dimensional float array, optionally participating in a tape."""

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=FLOAT32 if dtype is None else dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            raise TensorError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        # ascontiguousarray would promote 0-d scalars to 1-d
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const_like(self, other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class TapeEntry:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Eagerly built record of one forward pass, consumed by backward."""

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.entries)


def _const_like(t: Tensor, value) -> Tensor:
    return Tensor(np.asarray(value, dtype=t.dtype))


def _coerce(a, dtype) -> Tensor:
    if isinstance(a, Tensor):
        return a
    return Tensor(np.asarray(a), dtype=FLOAT32 if dtype is None else dtype)


def _check_dtypes(op: str, *tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TensorError(f"{op}: mixed dtypes in one graph: {sorted(d.name for d in dtypes)}")


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.tape is not None


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
            backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype)
    tls = _tls()
    if tls.grad_enabled and any(_tracked(t) for t in inputs):
        tape = tls.tape
        if tape is None or tape.consumed:
            tape = Tape()
            tls.tape = tape
        out.tape = tape
        tape.entries.append(TapeEntry(op, inputs, out, backward_fn))
    return out


def _traverse(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep of the loss's tape; returns grads keyed by id(tensor)."""
    tape = loss.tape
    if tape is None or tape.consumed:
        raise GradError("backward: tensor has no live tape")
    if loss.data.size != 1:
        raise TensorError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    visited = 0
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        visited += 1
        assert visited <= len(tape.entries), "tape entry visited twice"
        in_grads = entry.backward_fn(g)
        for t, ig in zip(entry.inputs, in_grads):
            if ig is None or not _tracked(t):
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
                holders[key] = t
    grads["_holders"] = holders  # type: ignore[assignment]
    return grads


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from loss.

    Accumulation is additive (both across graph fan-out and across calls);
    the tape is freed afterwards and cannot be reused.
    """
    tape = loss.tape
    grads = _traverse(loss)
    holders: dict[int, Tensor] = grads.pop("_holders")  # type: ignore[arg-type]
    for key, g in grads.items():
        t = holders[key]
        if not t.requires_grad:
            continue
        if not np.all(np.isfinite(g)):
            raise TensorError("backward: non-finite gradient encountered")
        if t.grad is None:
            t.grad = Tensor(g.copy(), dtype=t.dtype)
        else:
            t.grad.data += g
    tape.entries.clear()
    tape.consumed = True
    tls = _tls()
    if tls.tape is tape:
        tls.tape = None


def grad_of(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradient query that neither mutates .grad nor consumes the tape.

    Used where a gradient is itself an input to further computation
    (discriminator gradient penalty); ordinary training uses `backward`.
    """
    grads = _traverse(loss)
    grads.pop("_holders")
    out = []
    for t in wrt:
        g = grads.get(id(t))
        out.append(np.zeros_like(t.data) if g is None else g)
    return out


# ---------------------------------------------------------------------------
# elementwise ops (numpy broadcasting; gradients reduced back to input shape)

def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", None))
    b = _coerce(b, a.dtype)
    _check_dtypes("add", a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, bwd)


def sub(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", None))
    b = _coerce(b, a.dtype)
    _check_dtypes("sub", a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), out, bwd)


def mul(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", None))
    b = _coerce(b, a.dtype)
    _check_dtypes("mul", a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _record("mul", (a, b), out, bwd)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data >= 0
    out = np.where(mask, x.data, x.data * x.dtype.type(slope))

    def bwd(g):
        return (np.where(mask, g, g * x.dtype.type(slope)),)

    return _record("leaky_relu", (x,), out, bwd)


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(np.array(0, dtype=x.dtype), x.data)

    def bwd(g):
        sig = np.empty_like(x.data)
        pos = x.data >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
        ex = np.exp(x.data[~pos])
        sig[~pos] = ex / (1.0 + ex)
        return (g * sig,)

    return _record("softplus", (x,), out, bwd)


def tsum(x: Tensor) -> Tensor:
    out = x.data.sum(dtype=x.dtype)

    def bwd(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _record("sum", (x,), np.asarray(out), bwd)


def tmean(x: Tensor) -> Tensor:
    n = x.dtype.type(x.data.size)
    out = x.data.mean(dtype=x.dtype)

    def bwd(g):
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return _record("mean", (x,), np.asarray(out), bwd)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error, composed from primitive ops."""
    d = sub(a, b)
    return tmean(mul(d, d))


def pixel_norm(x: Tensor, eps: float = 1e-8) -> Tensor:
    """x / sqrt(mean over channel axis of x^2 + eps); channel axis is 1."""
    if x.data.ndim < 2:
        raise TensorError(f"pixel_norm: need rank >= 2, got {x.shape}")
    m = (x.data * x.data).mean(axis=1, keepdims=True)
    r = 1.0 / np.sqrt(m + x.dtype.type(eps))
    out = x.data * r
    c = x.dtype.type(x.shape[1])

    def bwd(g):
        dot = (g * x.data).sum(axis=1, keepdims=True)
        return ((g * r - x.data * (r ** 3) * dot / c).astype(x.dtype),)

    return _record("pixel_norm", (x,), out, bwd)


def channel_norm(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Unit-normalize each location's channel vector: x / sqrt(sum_c x^2 + eps)."""
    if x.data.ndim < 2:
        raise TensorError(f"channel_norm: need rank >= 2, got {x.shape}")
    s = (x.data * x.data).sum(axis=1, keepdims=True)
    r = 1.0 / np.sqrt(s + x.dtype.type(eps))
    out = x.data * r

    def bwd(g):
        dot = (g * x.data).sum(axis=1, keepdims=True)
        return ((g * r - x.data * (r ** 3) * dot).astype(x.dtype),)

    return _record("channel_norm", (x,), out, bwd)


# ---------------------------------------------------------------------------
# structural ops

def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    if axis < 0 or axis >= x.data.ndim:
        raise TensorError(f"narrow: axis {axis} out of range for shape {x.shape}")
    if start < 0 or length <= 0 or start + length > x.shape[axis]:
        raise TensorError(
            f"narrow: slice [{start}:{start + length}] out of bounds for axis {axis} of {x.shape}")
    idx = tuple(slice(None) if i != axis else slice(start, start + length)
                for i in range(x.data.ndim))
    out = x.data[idx]

    def bwd(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _record("narrow", (x,), out, bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _record("reshape", (x,), out, bwd)


# ---------------------------------------------------------------------------
# dense / convolution

def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = flatten(x) @ w.T + b.  x: [N, ...], w: [out, in], b: [out]."""
    _check_dtypes("dense", *([x, w] + ([b] if b is not None else [])))
    n = x.shape[0]
    xf = x.data.reshape(n, -1)
    if w.data.ndim != 2 or w.shape[1] != xf.shape[1]:
        raise TensorError(
            f"dense: weight {w.shape} incompatible with input {x.shape} (flattened in={xf.shape[1]})")
    out = xf @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise TensorError(f"dense: bias {b.shape} != (out={w.shape[0]},)")
        out = out + b.data

    def bwd(g):
        dx = (g @ w.data).reshape(x.shape)
        dw = g.T @ xf
        db = g.sum(axis=0) if b is not None else None
        return (dx, dw, db) if b is not None else (dx, dw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _record("dense", inputs, out, bwd)


def _pad2d(x: np.ndarray, pad: int) -> np.ndarray:
    # np.pad's generic machinery is slow on the hot path
    if pad == 0:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    return xp


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    n, c, h, w = x.shape
    if k == 1 and pad == 0:
        xs = x[:, :, ::stride, ::stride]
        hp, wp = xs.shape[2], xs.shape[3]
        return xs.reshape(n, c, hp * wp), hp, wp
    xp = _pad2d(x, pad)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    hp, wp = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, hp * wp)
    return cols, hp, wp


def _col2im(dcols: np.ndarray, x_shape, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    hp = (h + 2 * pad - k) // stride + 1
    wp = (w + 2 * pad - k) // stride + 1
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    dgrid = dcols.reshape(n, c, k, k, hp, wp)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki:ki + stride * hp:stride, kj:kj + stride * wp:stride] += dgrid[:, :, ki, kj]
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def _conv_shape_check(op, x, w, stride, pad):
    if x.data.ndim != 4:
        raise TensorError(f"{op}: input must be [N,C,H,W], got {x.shape}")
    if w.data.ndim != 4:
        raise TensorError(f"{op}: weight must be [O,C,k,k], got {w.shape}")
    k = w.shape[2]
    if w.shape[3] != k:
        raise TensorError(f"{op}: kernel must be square, got {w.shape}")
    if k % 2 == 0:
        raise TensorError(f"{op}: kernel size must be odd, got {k}")
    if x.shape[1] != w.shape[1]:
        raise TensorError(f"{op}: input channels {x.shape[1]} != weight channels {w.shape[1]}")
    h, wd = x.shape[2], x.shape[3]
    if (h + 2 * pad - k) % stride or (wd + 2 * pad - k) % stride:
        raise TensorError(f"{op}: spatial dims {h}x{wd} with k={k} pad={pad} stride={stride} "
                          "do not tile evenly")
    hp = (h + 2 * pad - k) // stride + 1
    wp = (wd + 2 * pad - k) // stride + 1
    if hp <= 0 or wp <= 0:
        raise TensorError(f"{op}: non-positive output size {hp}x{wp}")
    return k, hp, wp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation. x: [N,C,H,W], w: [O,C,k,k], b: [O]."""
    _check_dtypes("conv2d", *([x, w] + ([b] if b is not None else [])))
    k, hp, wp = _conv_shape_check("conv2d", x, w, stride, pad)
    n, _, _, _ = x.shape
    o = w.shape[0]
    if b is not None and b.shape != (o,):
        raise TensorError(f"conv2d: bias {b.shape} != (out={o},)")
    cols, _, _ = _im2col(x.data, k, stride, pad)
    w2 = w.data.reshape(o, -1)
    y = np.matmul(w2[None], cols)
    if b is not None:
        y = y + b.data[None, :, None]
    out = y.reshape(n, o, hp, wp)

    def bwd(g):
        g2 = g.reshape(n, o, hp * wp)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        dcols = np.matmul(w2.T[None], g2)
        dx = _col2im(dcols, x.shape, k, stride, pad)
        if b is not None:
            return dx, dw, g2.sum(axis=(0, 2))
        return dx, dw

    inputs = (x, w, b) if b is not None else (x, w)
    return _record("conv2d", inputs, out, bwd)


def modulated_conv2d(x: Tensor, w: Tensor, style: Tensor, demodulate: bool = True,
                     eps: float = 1e-8) -> Tensor:
    """Style-modulated conv: per-sample weights w*style[n,c], optionally
    demodulated so each output channel's effective kernel has unit L2 norm.
    Same-resolution (stride 1, pad (k-1)/2)."""
    _check_dtypes("modulated_conv2d", x, w, style)
    if eps <= 0:
        raise TensorError(f"modulated_conv2d: eps must be > 0, got {eps}")
    if not np.all(np.isfinite(style.data)):
        raise TensorError("modulated_conv2d: non-finite style scale")
    k = w.shape[2]
    pad = (k - 1) // 2
    _conv_shape_check("modulated_conv2d", x, w, 1, pad)
    n, c, h, wd = x.shape
    o = w.shape[0]
    if style.shape != (n, c):
        raise TensorError(f"modulated_conv2d: style {style.shape} != (N={n}, C_in={c})")

    wf = w.data.reshape(1, o, c, k * k)
    w1 = wf * style.data.reshape(n, 1, c, 1)
    if demodulate:
        d = 1.0 / np.sqrt((w1 * w1).sum(axis=(2, 3)) + x.dtype.type(eps))  # [n, o]
        w2 = w1 * d[:, :, None, None]
    else:
        d = None
        w2 = w1
    cols, hp, wp = _im2col(x.data, k, 1, pad)
    w2flat = w2.reshape(n, o, c * k * k)
    y = np.matmul(w2flat, cols)
    out = y.reshape(n, o, hp, wp)

    def bwd(g):
        g2 = g.reshape(n, o, hp * wp)
        dw2 = np.matmul(g2, cols.transpose(0, 2, 1)).reshape(n, o, c, k * k)
        dcols = np.matmul(w2flat.transpose(0, 2, 1), g2)
        dx = _col2im(dcols, x.shape, k, 1, pad)
        if demodulate:
            inner = (dw2 * w1).sum(axis=(2, 3))  # [n, o]
            dw1 = dw2 * d[:, :, None, None] - w1 * (inner * d ** 3)[:, :, None, None]
        else:
            dw1 = dw2
        dw = np.einsum("nocq,nc->ocq", dw1, style.data).reshape(w.shape)
        dstyle = np.einsum("nocq,ocq->nc", dw1, w.data.reshape(o, c, k * k))
        return dx, dw, dstyle

    return _record("modulated_conv2d", (x, w, style), out, bwd)


# ---------------------------------------------------------------------------
# resampling

_bilinear_cache: dict[tuple, tuple] = {}


def _bilinear_axis(n: int, dtype):
    # output coordinate i maps to source (i + 0.5)/2 - 0.5, align-corners false
    key = (n, np.dtype(dtype).name)
    cached = _bilinear_cache.get(key)
    if cached is None:
        src = (np.arange(2 * n, dtype=np.float64) + 0.5) / 2.0 - 0.5
        src = np.clip(src, 0.0, n - 1.0)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n - 1)
        t = (src - i0).astype(dtype)
        cached = (i0, i1, t)
        _bilinear_cache[key] = cached
    return cached


def upsample2x(x: Tensor, mode: str = "nearest") -> Tensor:
    """Double both spatial dims. nearest replicates; bilinear uses the
    align-corners-false convention."""
    if x.data.ndim != 4:
        raise TensorError(f"upsample2x: input must be [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if mode == "nearest":
        out = x.data.repeat(2, axis=2).repeat(2, axis=3)

        def bwd(g):
            return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

        return _record("upsample2x", (x,), out, bwd)

    if mode != "bilinear":
        raise TensorError(f"upsample2x: unknown mode {mode!r}")

    r0, r1, tr = _bilinear_axis(h, x.dtype)
    c0, c1, tc = _bilinear_axis(w, x.dtype)
    rows = x.data[:, :, r0, :] * (1 - tr)[None, None, :, None] \
        + x.data[:, :, r1, :] * tr[None, None, :, None]
    out = rows[:, :, :, c0] * (1 - tc)[None, None, None, :] \
        + rows[:, :, :, c1] * tc[None, None, None, :]

    def bwd(g):
        drows = np.zeros((n, c, 2 * h, w), dtype=g.dtype)
        for j in range(2 * w):
            drows[:, :, :, c0[j]] += g[:, :, :, j] * (1 - tc[j])
            drows[:, :, :, c1[j]] += g[:, :, :, j] * tc[j]
        dx = np.zeros((n, c, h, w), dtype=g.dtype)
        for i in range(2 * h):
            dx[:, :, r0[i], :] += drows[:, :, i, :] * (1 - tr[i])
            dx[:, :, r1[i], :] += drows[:, :, i, :] * tr[i]
        return (dx,)

    return _record("upsample2x", (x,), out, bwd)


def downsample2x(x: Tensor) -> Tensor:
    """Halve both spatial dims by 2x2 area averaging."""
    if x.data.ndim != 4:
        raise TensorError(f"downsample2x: input must be [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise TensorError(f"downsample2x: spatial dims must be even, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    quarter = x.dtype.type(0.25)

    def bwd(g):
        return ((g * quarter).repeat(2, axis=2).repeat(2, axis=3),)

    return _record("downsample2x", (x,), out, bwd)


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(builder: Callable[[], tuple[list[Tensor], Callable[[], Tensor]]],
               coords_per_leaf: int = 20, h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between tape gradients and central finite differences.

    `builder` returns (leaves, forward) where forward() rebuilds the graph
    from the current leaf values and returns a scalar loss. Leaves must be
    float64; relative error is |analytic - numeric| / max(1, |numeric|).
    """
    leaves, forward = builder()
    for t in leaves:
        if t.dtype != np.dtype(FLOAT64):
            raise TensorError("grad_check: leaves must be float64")
        t.requires_grad = True
        t.zero_grad()
    loss = forward()
    if not np.isfinite(loss.data).all():
        raise TensorError("grad_check: non-finite loss")
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.data.copy() for t in leaves]

    rng = np.random.default_rng(seed)
    max_err = 0.0
    for t, an in zip(leaves, analytic):
        flat = t.data.reshape(-1)
        k = min(coords_per_leaf, flat.size)
        idx = rng.choice(flat.size, size=k, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = float(forward().data.reshape(())[()])
            flat[i] = orig - h
            with no_grad():
                fm = float(forward().data.reshape(())[()])
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            if not math.isfinite(numeric):
                raise TensorError("grad_check: non-finite numeric derivative")
            err = abs(an.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            max_err = max(max_err, err)
    return max_err
