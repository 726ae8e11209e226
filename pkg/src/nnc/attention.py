"""Multi-head bilinear attention with a sigmoid gate, plus output heads.

Tokens are split across heads in contiguous row blocks.  Per head, two
bilinear maps are formed by elementwise products of ReLU projections:
one (from Q and K) is turned into attention weights and a gate, the other
(from Q and V) carries the content.  The gate rescales the attended
content; head outputs concatenate back to the full token matrix.

All weighting matrices are bias-free; softmax normalizes over the token
axis by default (each feature column's weights sum to 1 across the head's
tokens), with the feature axis available behind a config switch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import Tensor
from .nn import Linear, Module, kaiming_uniform


@dataclass
class AttentionConfig:
    tokens: int            # c
    dim: int               # d
    heads: int = 5         # H
    gate: bool = True
    softmax_axis: str = "token"   # or "feature"

    def validate(self):
        if self.tokens % self.heads:
            raise ValueError(f"heads {self.heads} must divide token count {self.tokens}")
        if self.softmax_axis not in ("token", "feature"):
            raise ValueError(f"softmax_axis must be 'token' or 'feature', got {self.softmax_axis!r}")


def split_heads(x, heads):
    """Split the token axis (second-to-last) into contiguous row blocks."""
    c = x.data.shape[-2] if isinstance(x, Tensor) else x.shape[-2]
    if c % heads:
        raise ValueError(f"heads {heads} must divide token count {c}")
    block = c // heads
    return [ops.slice_axis(x, -2, i * block, (i + 1) * block) for i in range(heads)]


class BilinearHead(Module):
    """One attention head over a (N, c/H, d) token block."""

    def __init__(self, block_tokens, dim, gate, softmax_axis, rng, dtype=np.float32):
        super().__init__()
        def mat(rows, cols, fan):
            return Tensor(kaiming_uniform((rows, cols), fan, rng, dtype), requires_grad=True)

        self.Wq1 = mat(dim, dim, dim)
        self.Wq2 = mat(dim, dim, dim)
        self.Wk = mat(dim, dim, dim)
        self.Wv = mat(dim, dim, dim)
        self.Wb = mat(block_tokens, block_tokens, block_tokens)
        if gate:
            self.Wgate = mat(dim, 1, dim)
        else:
            self.Wgate = None
        self.softmax_axis = softmax_axis

    def forward(self, q_blk, k_blk, v_blk):
        b1 = ops.mul(ops.relu(ops.matmul(q_blk, self.Wq1)), ops.relu(ops.matmul(k_blk, self.Wk)))
        b2 = ops.mul(ops.relu(ops.matmul(q_blk, self.Wq2)), ops.relu(ops.matmul(v_blk, self.Wv)))
        b1_proj = ops.relu(ops.matmul(self.Wb, b1))   # mixes tokens within the head
        axis = -2 if self.softmax_axis == "token" else -1
        attn = ops.softmax(b1_proj, axis=axis)
        h = ops.mul(attn, b2)
        if self.Wgate is None:
            return h
        gate = ops.sigmoid(ops.matmul(b1_proj, self.Wgate))   # (N, c/H, 1)
        return ops.mul(ops.expand_last(gate, h.data.shape[-1]), h)


class BilinearAttention(Module):
    """Concatenation of independent bilinear heads; (N, c, d) -> (N, c, d)."""

    def __init__(self, cfg, rng, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        block = cfg.tokens // cfg.heads
        for i in range(cfg.heads):
            setattr(self, f"head{i}",
                    BilinearHead(block, cfg.dim, cfg.gate, cfg.softmax_axis, rng, dtype))

    def forward(self, q, k, v):
        qs = split_heads(q, self.cfg.heads)
        ks = split_heads(k, self.cfg.heads)
        vs = split_heads(v, self.cfg.heads)
        outs = [getattr(self, f"head{i}").forward(qs[i], ks[i], vs[i])
                for i in range(self.cfg.heads)]
        return ops.concat(outs, axis=-2)


def attention_parameter_count(tokens, dim, heads, gate=True):
    """Closed-form count: per head 4 d^2 projections, one (c/H)^2 token
    mixer, and (with gate) a d x 1 gate vector."""
    per_head = 4 * dim * dim + (tokens // heads) ** 2 + (dim if gate else 0)
    return heads * per_head


class ProjectionHead(Module):
    """Flatten tokens, linear to the embedding dim, L2-normalize."""

    def __init__(self, tokens, dim, out_dim, rng, dtype=np.float32):
        super().__init__()
        self.fc = Linear(tokens * dim, out_dim, rng, dtype=dtype)

    def forward(self, fused):
        n, c, d = fused.data.shape
        return ops.l2_normalize(self.fc.forward(ops.reshape(fused, (n, c * d))))


class ClassifierHead(Module):
    """Flatten tokens, linear to raw class logits."""

    def __init__(self, tokens, dim, num_classes, rng, dtype=np.float32):
        super().__init__()
        if num_classes < 2:
            raise ValueError("classification needs at least 2 classes")
        self.fc = Linear(tokens * dim, num_classes, rng, dtype=dtype)

    def forward(self, fused):
        n, c, d = fused.data.shape
        return self.fc.forward(ops.reshape(fused, (n, c * d)))


@dataclass
class ModelConfig:
    """Architecture knobs shared by the contrastive and classifier models."""

    encoder: object
    heads: int = 5
    gate: bool = True
    softmax_axis: str = "token"
    bilinear: bool = True     # False bypasses attention (fused tokens pass through)
    proj_dim: int = 128

    def attention_config(self):
        return AttentionConfig(tokens=self.encoder.tokens, dim=self.encoder.embed_dim,
                               heads=self.heads, gate=self.gate, softmax_axis=self.softmax_axis)


class _FusionCore(Module):
    """Shared trunk: encoder plus (optionally) bilinear attention."""

    def __init__(self, cfg, rng, dtype=np.float32):
        super().__init__()
        from .encoder import MultiSourceEncoder  # deferred to avoid cycle

        self.encoder = MultiSourceEncoder(cfg.encoder, rng, dtype)
        self.attn = BilinearAttention(cfg.attention_config(), rng, dtype) if cfg.bilinear else None
        self.cfg = cfg

    def fused_tokens(self, hsi, lidar, train, groups=1):
        q, k, v = self.encoder.forward(hsi, lidar, train, groups=groups)
        if self.attn is None:
            return v
        return self.attn.forward(q, k, v)


class ContrastiveModel(_FusionCore):
    """Patch pair -> L2-normalized embedding (N, proj_dim)."""

    def __init__(self, cfg, rng, dtype=np.float32):
        super().__init__(cfg, rng, dtype)
        self.proj = ProjectionHead(cfg.encoder.tokens, cfg.encoder.embed_dim,
                                   cfg.proj_dim, rng, dtype)

    def forward(self, hsi, lidar, train, groups=1):
        return self.proj.forward(self.fused_tokens(hsi, lidar, train, groups))


class ClassifierModel(_FusionCore):
    """Patch pair -> class logits (N, C)."""

    def __init__(self, cfg, num_classes, rng, dtype=np.float32):
        super().__init__(cfg, rng, dtype)
        self.head = ClassifierHead(cfg.encoder.tokens, cfg.encoder.embed_dim,
                                   num_classes, rng, dtype)

    def forward(self, hsi, lidar, train, groups=1):
        return self.head.forward(self.fused_tokens(hsi, lidar, train, groups))

    def trunk_state(self):
        """Encoder + attention arrays only (what pretraining transfers)."""
        return {name: arr for name, arr in self.state_dict().items()
                if not name.startswith("head.")}
