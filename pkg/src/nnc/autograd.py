"""Reverse-mode automatic differentiation over numpy arrays.

Operations record themselves onto an explicit tape (a list of op records).
Calling backward(loss) replays the tape in reverse, accumulating gradients
into .grad of every reachable tensor that requires them.  Tensors never
reached from the loss keep grad None, which reads back as exact zeros.
"""

from __future__ import annotations

import contextlib

import numpy as np


class Tensor:
    """A numpy array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def detach(self):
        """A view of the same data with no gradient tracking."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad}{tag})"


class _Record:
    """One taped op: output tensor, input tensors, and a backward rule.

    backward(out_grad) must return one gradient array (or None) per input,
    in input order.
    """

    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output, inputs, backward):
        self.output = output
        self.inputs = inputs
        self.backward = backward


# Stack of active tapes; ops record onto the innermost one.  A None entry
# (pushed by no_grad) suspends recording without forgetting the outer tape.
_TAPES = []


@contextlib.contextmanager
def tape():
    """Open a fresh tape; ops called inside record onto it."""
    t = []
    _TAPES.append(t)
    try:
        yield t
    finally:
        _TAPES.pop()


@contextlib.contextmanager
def no_grad():
    """Suspend recording; forward values are still computed."""
    _TAPES.append(None)
    try:
        yield
    finally:
        _TAPES.pop()


def is_recording():
    return bool(_TAPES) and _TAPES[-1] is not None


def record(output, inputs, backward):
    """Tape an op if recording is active and any input requires grad."""
    if not is_recording():
        return output
    if any(t.requires_grad for t in inputs):
        output.requires_grad = True
        _TAPES[-1].append(_Record(output, inputs, backward))
    return output


def backward(loss, tape_records=None):
    """Replay the active tape in reverse from a scalar loss.

    Gradients accumulate into .grad (+=) so parameters shared between
    several taped subgraphs receive the sum.  Call zero_grad (or open a
    fresh tape) between steps.
    """
    records = tape_records if tape_records is not None else (_TAPES[-1] if _TAPES else None)
    if records is None:
        raise RuntimeError("backward() needs an active tape")
    if loss.data.size != 1:
        raise ValueError(f"backward() expects a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(records):
        out_grad = rec.output.grad
        if out_grad is None:
            continue  # not on the path from the loss
        grads = rec.backward(out_grad)
        for t, g in zip(rec.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.data.shape:
                raise RuntimeError(
                    f"backward shape mismatch: grad {g.shape} for tensor {t.data.shape}"
                )
            if t.grad is None:
                t.grad = g.astype(t.data.dtype, copy=True)
            else:
                t.grad += g


def grad_of(t):
    """Gradient of t from the last backward; exact zeros if unreachable."""
    if t.grad is None:
        return np.zeros_like(t.data)
    return t.grad


def grad_check(f, params, eps=1e-6, sample=None, rng=None):
    """Compare analytic gradients of scalar f() against central differences.

    f is a closure re-evaluating the forward pass from the current values of
    `params` (a list of Tensors, float64 for meaningful tolerances).  Returns
    the maximum relative error max|num - ana| / (max(|num|,|ana|) + 1e-8)
    over all checked coordinates.  `sample` caps the coordinates checked per
    tensor (deterministically chosen via rng) for large parameter sets.
    """
    params = list(params)
    for p in params:
        p.grad = None  # stale grads from earlier passes would pollute the check
    with tape():
        out = f()
        backward(out)
        analytic = [grad_of(p).copy() for p in params]
    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        n = flat.size
        if sample is not None and n > sample:
            if rng is None:
                raise ValueError("sampled grad_check needs an rng")
            idxs = rng.choice(n, size=sample, replace=False)
        else:
            idxs = np.arange(n)
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + eps
            with no_grad():
                hi = float(f().data)
            flat[i] = keep - eps
            with no_grad():
                lo = float(f().data)
            flat[i] = keep
            num = (hi - lo) / (2.0 * eps)
            err = abs(num - ana_flat[i]) / (max(abs(num), abs(ana_flat[i])) + 1e-8)
            if err > worst:
                worst = err
    return worst
