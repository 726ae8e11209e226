"""Layer modules, parameter registry, initialization, and Adam.

Modules register Tensors assigned to attributes as parameters and numpy
arrays assigned via register_buffer as non-trained state (BatchNorm running
statistics).  named_parameters walks the tree depth-first in attribute
definition order, so parameter enumeration is deterministic for a fixed
construction order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autograd import Tensor


def kaiming_uniform(shape, fan_in, rng, dtype=np.float32):
    """He-uniform init for ReLU nets: U(-sqrt(6/fan_in), sqrt(6/fan_in))."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Minimal parameter container with deterministic traversal order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, ModuleList):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield (prefix + name, b)
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def parameter_count(self):
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        """All parameters and buffers as name -> array copies."""
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        """Load arrays in place; name sets and shapes must match exactly."""
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        expected = set(own) | set(bufs)
        got = set(state)
        if expected != got:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise ValueError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, arr in state.items():
            target = own[name].data if name in own else bufs[name]
            if target.shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {target.shape}")
            target[...] = arr


class ModuleList:
    """Ordered list of submodules that participates in the name tree."""

    def __init__(self, modules=()):
        self._modules = list(modules)

    def append(self, m):
        self._modules.append(m)

    def __iter__(self):
        return iter(self._modules)

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i):
        return self._modules[i]

    def named_parameters(self, prefix=""):
        for i, m in enumerate(self._modules):
            yield from m.named_parameters(f"{prefix}{i}.")

    def named_buffers(self, prefix=""):
        for i, m in enumerate(self._modules):
            yield from m.named_buffers(f"{prefix}{i}.")


class Linear(Module):
    """y = x @ weight + bias, weight shaped (in_features, out_features)."""

    def __init__(self, in_features, out_features, rng, bias=True, dtype=np.float32):
        super().__init__()
        self.weight = Tensor(kaiming_uniform((in_features, out_features), in_features, rng, dtype),
                             requires_grad=True)
        if bias:
            self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)
        else:
            self.bias = None

    def forward(self, x):
        y = ops.matmul(x, self.weight)
        if self.bias is not None:
            y = ops.add_bias(y, self.bias)
        return y


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, padding=0, bias=True, dtype=np.float32):
        super().__init__()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        fan_in = in_ch * kh * kw
        self.weight = Tensor(kaiming_uniform((out_ch, in_ch, kh, kw), fan_in, rng, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None
        self.padding = padding

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, padding=self.padding)


class Conv3d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, bias=True, dtype=np.float32):
        super().__init__()
        kd, kh, kw = kernel
        fan_in = in_ch * kd * kh * kw
        self.weight = Tensor(kaiming_uniform((out_ch, in_ch, kd, kh, kw), fan_in, rng, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x):
        return ops.conv3d(x, self.weight, self.bias)


class BatchNorm(Module):
    """BatchNorm over the channel axis (axis 1) with running statistics."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, train):
        return ops.batchnorm(x, self.gamma, self.beta, train,
                             running_mean=self.running_mean,
                             running_var=self.running_var,
                             momentum=self.momentum, eps=self.eps)


@dataclass
class AdamState:
    """First/second moment estimates keyed by parameter name."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One Adam update, in place on the parameter arrays.

    params and grads are name -> array dicts with matching keys.  Moment
    buffers are created lazily on first sight of a name.  Returns state.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bias1
        vhat = v / bias2
        p -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return state


class Adam:
    """Adam over a module's parameters, reading .grad after backward."""

    def __init__(self, module, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.module = module
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        named = dict(self.module.named_parameters())
        params = {name: p.data for name, p in named.items()}
        grads = {}
        for name, p in named.items():
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        adam_step(params, grads, self.state)

    def state_dict(self):
        out = {"step": self.state.step, "lr": self.state.lr}
        for name, arr in self.state.m.items():
            out[f"m.{name}"] = arr.copy()
        for name, arr in self.state.v.items():
            out[f"v.{name}"] = arr.copy()
        return out

    def load_state_dict(self, d):
        self.state.step = int(d["step"])
        self.state.lr = float(d["lr"])
        self.state.m = {k[2:]: v.copy() for k, v in d.items() if k.startswith("m.")}
        self.state.v = {k[2:]: v.copy() for k, v in d.items() if k.startswith("v.")}
