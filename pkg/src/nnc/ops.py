"""Differentiable operations on Tensors.

Every op computes the forward value with numpy, then tapes a backward rule
via autograd.record.  Binary elementwise ops require identical shapes; the
few places that need broadcasting get dedicated ops (add_bias, expand_last,
matmul with leading batch dims) so gradient reduction stays explicit.

Convolutions take the direct route: sliding_window_view to expose patches,
einsum to contract them.  The input gradient of a correlation is again a
correlation, of the padded output gradient with the spatially flipped
kernel, which keeps the backward pass on the same einsum machinery.
"""

from __future__ import annotations

import warnings

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Tensor, record

# Test hook: when set, sabotage one backward rule so negative tests can
# prove the gradient checker actually detects broken derivatives.
CORRUPT_SIGMOID_BACKWARD = False


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    return record(out, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    return record(out, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    return record(out, (a, b), lambda g: (g * b.data, g * a.data))


def neg(a):
    a = as_tensor(a)
    out = Tensor(-a.data)
    return record(out, (a,), lambda g: (-g,))


def scale(a, s):
    """Multiply by a python scalar (not differentiable in s)."""
    a = as_tensor(a)
    s = float(s)
    out = Tensor(a.data * a.data.dtype.type(s))
    return record(out, (a,), lambda g: (g * s,))


def add_bias(x, b):
    """x + b broadcast over the trailing axis: x (..., F), b (F,)."""
    x, b = as_tensor(x), as_tensor(b)
    if b.data.shape != (x.data.shape[-1],):
        raise ValueError(f"add_bias: bias {b.data.shape} does not match trailing dim of {x.data.shape}")
    out = Tensor(x.data + b.data)
    axes = tuple(range(x.data.ndim - 1))
    return record(out, (x, b), lambda g: (g, g.sum(axis=axes)))


def relu(x):
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0  # subgradient 0 at the kink
    return record(out, (x,), lambda g: (g * mask,))


def sigmoid(x):
    x = as_tensor(x)
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    s[~pos] = e / (1.0 + e)
    out = Tensor(s)

    def bwd(g):
        ds = s * (1.0 - s)
        if CORRUPT_SIGMOID_BACKWARD:
            ds = ds * 1.1
        return (g * ds,)

    return record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions and shape

def sum_all(x):
    x = as_tensor(x)
    out = Tensor(np.asarray(x.data.sum(dtype=x.data.dtype)))
    return record(out, (x,), lambda g: (np.broadcast_to(g, x.data.shape).copy(),))


def mean_all(x):
    x = as_tensor(x)
    n = x.data.size
    out = Tensor(np.asarray(x.data.mean(dtype=x.data.dtype)))
    return record(out, (x,), lambda g: (np.broadcast_to(g / n, x.data.shape).copy(),))


def sum_axis(x, axis, keepdims=False):
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return record(out, (x,), bwd)


def reshape(x, shape):
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    return record(out, (x,), lambda g: (g.reshape(x.data.shape),))


def transpose(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    out = Tensor(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))
    return record(out, (x,), lambda g: (g.transpose(inv),))


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(out, tuple(tensors), bwd)


def slice_axis(x, axis, start, stop):
    """Contiguous slice x[..., start:stop, ...] along one axis."""
    x = as_tensor(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(x.data[idx].copy())

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return record(out, (x,), bwd)


def expand_last(x, n):
    """Broadcast a trailing singleton axis: (..., 1) -> (..., n)."""
    x = as_tensor(x)
    if x.data.shape[-1] != 1:
        raise ValueError(f"expand_last: trailing dim must be 1, got {x.data.shape}")
    out = Tensor(np.broadcast_to(x.data, x.data.shape[:-1] + (n,)).copy())
    return record(out, (x,), lambda g: (g.sum(axis=-1, keepdims=True),))


# ---------------------------------------------------------------------------
# linear algebra

def _unbroadcast(g, shape):
    """Reduce a gradient back to `shape` after numpy-style broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def matmul(a, b):
    """np.matmul on the trailing two axes; leading dims broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul: operands must have ndim >= 2")
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# softmax family

def softmax(x, axis):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return record(out, (x,), bwd)


def logsumexp(x, axis, keepdims=False):
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    val = m + np.log(s)
    out = Tensor(val if keepdims else np.squeeze(val, axis=axis))
    soft = e / s

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (soft * g,)

    return record(out, (x,), bwd)


def cross_entropy_logits(logits, targets):
    """Mean cross-entropy of integer targets under softmax(logits).

    logits (N, M) float, targets (N,) int.  Computed as
    mean(logsumexp(row) - row[target]) for stability.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.shape != (logits.data.shape[0],):
        raise ValueError(f"cross_entropy_logits: got logits {logits.data.shape}, targets {targets.shape}")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= logits.data.shape[1]:
        raise ValueError(f"cross_entropy_logits: target outside [0, {logits.data.shape[1]})")
    n = logits.data.shape[0]
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s)).ravel()
    picked = z[np.arange(n), targets]
    out = Tensor(np.asarray((lse - picked).mean(dtype=z.dtype)))
    soft = e / s

    def bwd(g):
        gz = soft.copy()
        gz[np.arange(n), targets] -= 1.0
        return (gz * (g / n), None)

    return record(out, (logits, Tensor(targets)), bwd)


def l2_normalize(x, eps=1e-12):
    """Row-normalize to unit L2 norm over the trailing axis.

    Zero vectors pass through unchanged (0/eps = 0) with a warning.
    """
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if (norm == 0).any():
        warnings.warn("l2_normalize: zero vector left unnormalized")
    norm = np.maximum(norm, eps)
    y = x.data / norm
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - y * dot) / norm,)

    return record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# batch normalization

def batchnorm(x, gamma, beta, train, running_mean=None, running_var=None,
              momentum=0.1, eps=1e-5):
    """Normalize over all axes except axis 1 (the channel axis).

    Training mode normalizes with the biased batch variance and, when the
    running buffers are provided, folds the batch statistics into them
    in place: r <- (1 - momentum) * r + momentum * batch_stat.  Eval mode
    normalizes with the running statistics only.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim < 2:
        raise ValueError("batchnorm: input must have a batch and a channel axis")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(f"batchnorm: gamma/beta must be ({c},)")
    axes = (0,) + tuple(range(2, x.data.ndim))
    bshape = (1, c) + (1,) * (x.data.ndim - 2)
    gam = gamma.data.reshape(bshape)
    bet = beta.data.reshape(bshape)

    if train:
        m = x.data.size // c
        if m < 2:
            raise ValueError("batchnorm: training needs at least 2 values per channel")
        mean = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)  # biased
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean.reshape(c).astype(running_mean.dtype)
            running_var *= 1.0 - momentum
            running_var += momentum * var.reshape(c).astype(running_var.dtype)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean) * inv
        out = Tensor(gam * xhat + bet)

        def bwd(g):
            gxhat = g * gam
            sum_g = gxhat.sum(axis=axes, keepdims=True)
            sum_gx = (gxhat * xhat).sum(axis=axes, keepdims=True)
            gx = (inv / m) * (m * gxhat - sum_g - xhat * sum_gx)
            ggam = (g * xhat).sum(axis=axes).reshape(c)
            gbet = g.sum(axis=axes).reshape(c)
            return (gx, ggam, gbet)

        return record(out, (x, gamma, beta), bwd)

    if running_mean is None or running_var is None:
        raise ValueError("batchnorm: eval mode needs running statistics")
    mean = running_mean.reshape(bshape)
    inv = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
    xhat = (x.data - mean) * inv
    out = Tensor(gam * xhat + bet)

    def bwd_eval(g):
        gx = g * gam * inv
        ggam = (g * xhat).sum(axis=axes).reshape(c)
        gbet = g.sum(axis=axes).reshape(c)
        return (gx, ggam, gbet)

    return record(out, (x, gamma, beta), bwd_eval)


# ---------------------------------------------------------------------------
# convolution

def conv2d(x, w, b=None, padding=0):
    """2D cross-correlation: x (N,C,H,W), w (O,C,kh,kw), stride 1."""
    x, w = as_tensor(x), as_tensor(w)
    if b is not None:
        b = as_tensor(b)
    n, cin, h, wd = x.data.shape
    o, cw, kh, kw = w.data.shape
    if cw != cin:
        raise ValueError(f"conv2d: input channels {cin} vs kernel {cw}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ValueError(f"conv2d: kernel ({kh},{kw}) larger than padded input {xp.shape[2:]}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (N,C,H',W',kh,kw)
    y = np.einsum("nchwij,ocij->nohw", win, w.data, optimize=True)
    if b is not None:
        y = y + b.data.reshape(1, o, 1, 1)
    out = Tensor(np.ascontiguousarray(y))

    def bwd(g):
        gw = np.einsum("nchwij,nohw->ocij", win, g, optimize=True)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
        wf = w.data[:, :, ::-1, ::-1]
        gxp = np.einsum("nohwij,ocij->nchw", gwin, wf, optimize=True)
        if padding:
            gxp = gxp[:, :, padding:-padding, padding:-padding]
        gx = np.ascontiguousarray(gxp)
        if b is not None:
            return (gx, gw, gb)
        return (gx, gw)

    inputs = (x, w) if b is None else (x, w, b)
    return record(out, inputs, bwd)


def conv3d(x, w, b=None):
    """3D cross-correlation: x (N,C,D,H,W), w (O,C,kd,kh,kw), stride 1, no padding."""
    x, w = as_tensor(x), as_tensor(w)
    if b is not None:
        b = as_tensor(b)
    n, cin, d, h, wd = x.data.shape
    o, cw, kd, kh, kw = w.data.shape
    if cw != cin:
        raise ValueError(f"conv3d: input channels {cin} vs kernel {cw}")
    if d < kd or h < kh or wd < kw:
        raise ValueError(f"conv3d: kernel ({kd},{kh},{kw}) larger than input ({d},{h},{wd})")
    win = sliding_window_view(x.data, (kd, kh, kw), axis=(2, 3, 4))  # (N,C,D',H',W',kd,kh,kw)
    y = np.einsum("ncdhwijk,ocijk->nodhw", win, w.data, optimize=True)
    if b is not None:
        y = y + b.data.reshape(1, o, 1, 1, 1)
    out = Tensor(np.ascontiguousarray(y))

    def bwd(g):
        gw = np.einsum("ncdhwijk,nodhw->ocijk", win, g, optimize=True)
        gb = g.sum(axis=(0, 2, 3, 4)) if b is not None else None
        gp = np.pad(g, ((0, 0), (0, 0), (kd - 1, kd - 1), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gwin = sliding_window_view(gp, (kd, kh, kw), axis=(2, 3, 4))
        wf = w.data[:, :, ::-1, ::-1, ::-1]
        gx = np.ascontiguousarray(np.einsum("nodhwijk,ocijk->ncdhw", gwin, wf, optimize=True))
        if b is not None:
            return (gx, gw, gb)
        return (gx, gw)

    inputs = (x, w) if b is None else (x, w, b)
    return record(out, inputs, bwd)
