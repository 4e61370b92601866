"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays. Every differentiable op returns a new
Tensor holding a backward closure; calling :func:`backward` on a scalar loss
walks the recorded graph once in reverse topological order and accumulates
gradients into ``.grad`` of every reachable tensor that requires them.

Convolutions follow the deep-learning convention (cross-correlation, no
kernel flip). Storage is dense row-major only; there are no strided views.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from .errors import ConfigError, ShapeError, UsageError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / timing paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense numpy-backed value in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._backward = None
        self._prev = ()

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

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        # grads are rebound, never mutated in place, so aliasing is safe
        if self.grad is None:
            self.grad = np.asarray(g, dtype=self.data.dtype)
        else:
            self.grad = self.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def backward(self):
        backward(self)


def tensor(data, requires_grad=False, dtype=None):
    arr = np.asarray(data, dtype=dtype if dtype is not None else None)
    if arr.dtype.kind not in "fc":
        arr = arr.astype(np.float64)
    return Tensor(arr, requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward_fn):
    """Wire a result tensor into the graph unless recording is off."""
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._prev = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bw(out):
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def bw(out):
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def bw(out):
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bw)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data / b.data

    def bw(out):
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), bw)


def power(a, p):
    a = _as_tensor(a)
    p = float(p)
    out_data = a.data**p

    def bw(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), bw)


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def bw(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad * out.data)

    return _make(out_data, (a,), bw)


def log(a):
    a = _as_tensor(a)
    out_data = np.log(a.data)

    def bw(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad / a.data)

    return _make(out_data, (a,), bw)


def clamp_min(a, lo):
    """max(a, lo) elementwise; subgradient 0 where clamped."""
    a = _as_tensor(a)
    mask = a.data >= lo
    out_data = np.where(mask, a.data, lo)

    def bw(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad * mask)

    return _make(out_data, (a,), bw)


def relu(a):
    return clamp_min(a, 0.0)


def sigmoid(a):
    a = _as_tensor(a)
    out_data = expit(a.data)

    def bw(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad * out.data * (1.0 - out.data))

    return _make(out_data, (a,), bw)


def tanh(a):
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def bw(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad * (1.0 - out.data * out.data))

    return _make(out_data, (a,), bw)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact (erf-form) GELU."""
    a = _as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out_data = a.data * cdf

    def bw(out):
        if a.requires_grad:
            pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
            a.accumulate_grad(out.grad * (cdf + a.data * pdf))

    return _make(out_data, (a,), bw)


def dropout(a, rate, rng):
    """Inverted dropout; identity when rate == 0."""
    if rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    a = _as_tensor(a)
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    out_data = a.data * keep

    def bw(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad * keep)

    return _make(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# reductions / shape


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(out):
        if a.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(g, a.shape))

    return _make(out_data, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / out_data.size

    def bw(out):
        if a.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(g, a.shape) / count)

    return _make(out_data, (a,), bw)


def reshape(a, shape):
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def bw(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad.reshape(a.shape))

    return _make(out_data, (a,), bw)


def transpose(a, axes=None):
    a = _as_tensor(a)
    out_data = np.transpose(a.data, axes)

    def bw(out):
        if a.requires_grad:
            inv = None if axes is None else np.argsort(axes)
            a.accumulate_grad(np.transpose(out.grad, inv))

    return _make(out_data, (a,), bw)


def getitem(a, key):
    a = _as_tensor(a)
    out_data = a.data[key]

    def bw(out):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[key] += out.grad
            a.accumulate_grad(g)

    return _make(out_data, (a,), bw)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(out):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(out.grad[tuple(idx)])

    return _make(out_data, tuple(tensors), bw)


def pad_spatial(a, pad_width):
    """Zero-pad; pad_width in np.pad format."""
    a = _as_tensor(a)
    out_data = np.pad(a.data, pad_width)

    def bw(out):
        if a.requires_grad:
            idx = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))
            a.accumulate_grad(out.grad[idx])

    return _make(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul expects >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents disagree: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def bw(out):
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape))

    return _make(out_data, (a, b), bw)


# ---------------------------------------------------------------------------
# softmax / layer norm


def softmax(a, axis=-1):
    """Numerically safe softmax (max-subtraction before exponentiation)."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(out):
        if a.requires_grad:
            y, g = out.data, out.grad
            a.accumulate_grad(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(out_data, (a,), bw)


def batch_norm(x, gamma, beta, axes, eps=1e-5):
    """Normalize over ``axes`` with per-channel affine; returns
    (y, mean_data, var_data) so callers can maintain running statistics.

    ``gamma``/``beta`` are flat (C,) tensors broadcast into x's channel axis
    (axis 1)."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    bshape = tuple(x.shape[1] if ax == 1 else 1 for ax in range(x.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gb = gamma.data.reshape(bshape)
    out_data = xhat * gb + beta.data.reshape(bshape)

    def bw(out):
        g = out.grad
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=axes).reshape(gamma.shape))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=axes).reshape(beta.shape))
        if x.requires_grad:
            gx = g * gb
            m1 = gx.mean(axis=axes, keepdims=True)
            m2 = (gx * xhat).mean(axis=axes, keepdims=True)
            x.accumulate_grad(inv * (gx - m1 - xhat * m2))

    out = _make(out_data, (x, gamma, beta), bw)
    return out, mu.reshape(-1), var.reshape(-1)


def layer_norm(x, gamma, beta, eps=1e-5, axis=-1):
    """Normalize to zero mean / unit variance along ``axis``, then affine."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    mu = x.data.mean(axis=axis, keepdims=True)
    var = x.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gamma.data + beta.data

    def bw(out):
        g = out.grad
        if gamma.requires_grad:
            gamma.accumulate_grad(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta.accumulate_grad(_unbroadcast(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=axis, keepdims=True)
            m2 = (gx * xhat).mean(axis=axis, keepdims=True)
            x.accumulate_grad(inv * (gx - m1 - xhat * m2))

    return _make(out_data, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# convolution and pooling


def _tuplize(v, n, name):
    if isinstance(v, int):
        return (v,) * n
    v = tuple(int(t) for t in v)
    if len(v) != n:
        raise ConfigError(f"{name} must have {n} entries, got {v}")
    return v


def _window_view(xp, kernel, stride):
    """(B, C, *Sp) -> (B, C, *Lout, *K) strided window view."""
    n = len(kernel)
    win = sliding_window_view(xp, kernel, axis=tuple(range(2, 2 + n)))
    sub = (slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)
    return win[sub]


def _conv_out_extents(spatial, kernel, stride, padding):
    out = []
    for d, k, s, p in zip(spatial, kernel, stride, padding):
        e = (d + 2 * p - k) // s + 1
        if d + 2 * p < k or e < 1:
            raise ConfigError(
                f"convolution produces non-positive output extent: "
                f"input {spatial}, kernel {kernel}, stride {stride}, padding {padding}"
            )
        out.append(e)
    return tuple(out)


def _conv_forward_data(xd, wd, stride, padding):
    """Raw im2col cross-correlation. Returns (y, cols)."""
    n = wd.ndim - 2
    b = xd.shape[0]
    pads = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    xp = np.pad(xd, pads)
    kernel = wd.shape[2:]
    win = _window_view(xp, kernel, stride)  # (B, C, *Lout, *K)
    lout = win.shape[2 : 2 + n]
    perm = (0,) + tuple(range(2, 2 + n)) + (1,) + tuple(range(2 + n, 2 + 2 * n))
    cols = win.transpose(perm).reshape(b * int(np.prod(lout)), -1)
    wmat = wd.reshape(wd.shape[0], -1)
    y = cols @ wmat.T
    y = y.reshape((b,) + lout + (wd.shape[0],))
    y = np.moveaxis(y, -1, 1)
    return np.ascontiguousarray(y), cols


def _dilate(yd, stride):
    """Insert stride-1 zeros between spatial elements."""
    if all(s == 1 for s in stride):
        return yd
    b, c = yd.shape[:2]
    lout = yd.shape[2:]
    dil = tuple((l - 1) * s + 1 for l, s in zip(lout, stride))
    out = np.zeros((b, c) + dil, dtype=yd.dtype)
    idx = (slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)
    out[idx] = yd
    return out


def conv_nd(x, w, stride=1, padding=0):
    """N-dimensional cross-correlation, N in {1, 2, 3}.

    ``x`` is (B, C_in, *spatial) or unbatched (C_in, *spatial); ``w`` is
    (C_out, C_in, *kernel). Differentiable w.r.t. both operands.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    n = w.ndim - 2
    if n not in (1, 2, 3):
        raise ConfigError(f"conv kernel must have 1-3 spatial dims, got weight shape {w.shape}")
    unbatched = x.ndim == n + 1
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != n + 2:
        raise ShapeError(f"conv input rank {x.ndim} incompatible with weight {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv channel mismatch: input {x.shape} vs weight {w.shape}")
    stride = _tuplize(stride, n, "stride")
    padding = _tuplize(padding, n, "padding")
    _conv_out_extents(x.shape[2:], w.shape[2:], stride, padding)

    out_data, cols = _conv_forward_data(x.data, w.data, stride, padding)
    kernel = w.shape[2:]
    spatial = x.shape[2:]

    def bw(out):
        g = out.grad
        if w.requires_grad:
            gmat = np.moveaxis(g, 1, -1).reshape(-1, w.shape[0])
            w.accumulate_grad((gmat.T @ cols).reshape(w.shape))
        if x.requires_grad:
            gd = _dilate(g, stride)
            wt = np.ascontiguousarray(np.flip(w.data, axis=tuple(range(2, 2 + n))).swapaxes(0, 1))
            core, _ = _conv_forward_data(gd, wt, (1,) * n, tuple(k - 1 for k in kernel))
            gx = np.zeros(x.shape, dtype=g.dtype)
            src = tuple(
                slice(p, min(p + s, c))
                for p, s, c in zip(padding, spatial, core.shape[2:])
            )
            dst = tuple(slice(0, sl.stop - sl.start) for sl in src)
            gx[(slice(None), slice(None)) + dst] = core[(slice(None), slice(None)) + src]
            x.accumulate_grad(gx)

    out = _make(out_data, (x, w), bw)
    return reshape(out, out.shape[1:]) if unbatched else out


def _pool_prepare(x, window, stride, padding, pad_value):
    n = x.ndim - 2
    window = _tuplize(window, n, "window")
    stride = _tuplize(stride if stride is not None else window, n, "stride")
    padding = _tuplize(padding, n, "padding")
    for d, k, p in zip(x.shape[2:], window, padding):
        if d + 2 * p < k:
            raise ConfigError(f"pool window {window} larger than padded input {x.shape}")
    pads = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    xp = np.pad(x.data, pads, constant_values=pad_value)
    win = _window_view(xp, window, stride)
    lout = win.shape[2 : 2 + n]
    flat = win.reshape(win.shape[:2] + (int(np.prod(lout)), int(np.prod(window))))
    # spatial flat-index map of each window member into the padded grid
    sp = xp.shape[2:]
    idx = sliding_window_view(np.arange(int(np.prod(sp))).reshape(sp), window)
    idx = idx[tuple(slice(None, None, s) for s in stride)].reshape(flat.shape[2:])
    return xp.shape, lout, flat, idx


def _pool_scatter(flat_idx, weights, padded_shape, spatial_src, padding):
    b, c = padded_shape[:2]
    sp_flat = int(np.prod(padded_shape[2:]))
    acc = np.bincount(flat_idx.ravel(), weights=weights.ravel(), minlength=b * c * sp_flat)
    acc = acc.reshape((b, c) + padded_shape[2:])
    crop = (slice(None), slice(None)) + tuple(
        slice(p, p + d) for p, d in zip(padding, spatial_src)
    )
    return acc[crop]


def max_pool_nd(x, window, stride=None, padding=0):
    x = _as_tensor(x)
    n = x.ndim - 2
    padding_t = _tuplize(padding, n, "padding")
    padded_shape, lout, flat, idx = _pool_prepare(x, window, stride, padding, -np.inf)
    am = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]
    out_data = out_data.reshape(x.shape[:2] + lout)

    def bw(out):
        if x.requires_grad:
            b, c = x.shape[:2]
            chosen = idx[np.arange(idx.shape[0]), am]  # (B, C, L)
            base = (np.arange(b * c) * int(np.prod(padded_shape[2:]))).reshape(b, c, 1)
            g = _pool_scatter(chosen + base, out.grad.reshape(b, c, -1), padded_shape, x.shape[2:], padding_t)
            x.accumulate_grad(g.astype(x.dtype, copy=False))

    return _make(out_data, (x,), bw)


def avg_pool_nd(x, window, stride=None, padding=0):
    x = _as_tensor(x)
    n = x.ndim - 2
    window_t = _tuplize(window, n, "window")
    padding_t = _tuplize(padding, n, "padding")
    padded_shape, lout, flat, idx = _pool_prepare(x, window, stride, padding, 0.0)
    kprod = int(np.prod(window_t))
    out_data = flat.mean(axis=-1).reshape(x.shape[:2] + lout)

    def bw(out):
        if x.requires_grad:
            b, c = x.shape[:2]
            base = (np.arange(b * c) * int(np.prod(padded_shape[2:]))).reshape(b, c, 1, 1)
            members = idx[None, None, :, :] + base  # (B, C, L, K)
            weights = np.repeat(out.grad.reshape(b, c, -1, 1) / kprod, kprod, axis=-1)
            g = _pool_scatter(members, weights, padded_shape, x.shape[2:], padding_t)
            x.accumulate_grad(g.astype(x.dtype, copy=False))

    return _make(out_data, (x,), bw)


def global_avg_pool(x):
    """Mean over all spatial axes: (B, C, *S) -> (B, C)."""
    x = _as_tensor(x)
    axes = tuple(range(2, x.ndim))
    return tmean(x, axis=axes)


def pool(x, kind, window=None, stride=None):
    """Pooling dispatcher: kind in {'max', 'avg', 'global-avg'}."""
    if kind == "global-avg":
        return global_avg_pool(x)
    if window is None:
        raise ConfigError(f"pool kind {kind!r} requires a window")
    if kind == "max":
        return max_pool_nd(x, window, stride)
    if kind == "avg":
        return avg_pool_nd(x, window, stride)
    raise ConfigError(f"unknown pool kind {kind!r}")


# ---------------------------------------------------------------------------
# backward pass


def backward(root):
    """Populate gradients of every reachable requires_grad tensor.

    Repeated calls without zeroing accumulate, matching sum-over-paths
    semantics for shared subexpressions.
    """
    if not isinstance(root, Tensor):
        raise UsageError("backward root must be a Tensor")
    if root.size != 1:
        raise UsageError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise UsageError("backward root does not require grad (graph not recorded)")

    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in visited:
                stack.append((p, False))

    root.accumulate_grad(np.ones_like(root.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node)
