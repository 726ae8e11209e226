"""Finite-difference verification suite for every differentiable op and
the full contrastive loss on micro configurations.

Everything runs in float64: central differences at eps=1e-6 only resolve
the 1e-4 tolerance in 64-bit.  Ops are checked exhaustively on small
random shapes; whole-model losses are checked on a deterministic
coordinate subsample per parameter to keep the suite under its runtime
budget.  The micro geometry is patch 9 -> 3x3 token grid (9 tokens, 3
heads); the attention stack is additionally checked standalone at
(c=10, d=16, H=2, K=8) with leaf token matrices, which matches the
documented reduced configuration where a conv pipeline cannot produce a
10-token grid (square patches only yield square token counts).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import ops
from .attention import (AttentionConfig, BilinearAttention, ClassifierHead,
                        ModelConfig, ProjectionHead)
from .autograd import Tensor, grad_check, no_grad
from .contrastive import contrastive_logits, info_nce_loss, info_nce_loss_eq1
from .encoder import EncoderConfig, MultiSourceEncoder


@dataclass
class CheckResult:
    name: str
    max_err: float
    seconds: float
    passed: bool


def micro_encoder_config(use_3d=True, embed_dim=16):
    """Tiny geometry: patch 9 -> 3x3 tokens, 5 bands, single-digit channels."""
    return EncoderConfig(
        bands=5, patch=9,
        hsi_channels=(2, 3, 4), hsi_kernel_depths=(2, 2, 2),
        embed_dim=embed_dim, lidar_channels=(3, 4, embed_dim),
        hsi2d_channels=(3, 4), use_3d=use_3d,
    )


def micro_model_config(**overrides):
    base = dict(encoder=micro_encoder_config(), heads=3, gate=True,
                softmax_axis="token", bilinear=True, proj_dim=12)
    base.update(overrides)
    return ModelConfig(**base)


def _t(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _op_cases(rng):
    """(name, closure, params) triples covering every differentiable op."""
    cases = []

    def case(name, build):
        cases.append((name, build))

    def c_add():
        a, b = _t(rng, 3, 4), _t(rng, 3, 4)
        return lambda: ops.mean_all(ops.sigmoid(ops.add(a, b))), [a, b]
    case("add", c_add)

    def c_sub():
        a, b = _t(rng, 2, 5), _t(rng, 2, 5)
        return lambda: ops.mean_all(ops.sigmoid(ops.sub(a, b))), [a, b]
    case("sub", c_sub)

    def c_mul():
        a, b = _t(rng, 4, 3), _t(rng, 4, 3)
        return lambda: ops.mean_all(ops.mul(a, b)), [a, b]
    case("mul", c_mul)

    def c_neg_scale():
        a = _t(rng, 3, 3)
        return lambda: ops.mean_all(ops.sigmoid(ops.scale(ops.neg(a), 0.7))), [a]
    case("neg+scale", c_neg_scale)

    def c_add_bias():
        x, b = _t(rng, 4, 6), _t(rng, 6)
        return lambda: ops.mean_all(ops.sigmoid(ops.add_bias(x, b))), [x, b]
    case("add_bias", c_add_bias)

    def c_matmul():
        a, b = _t(rng, 4, 6), _t(rng, 6, 3)
        return lambda: ops.mean_all(ops.sigmoid(ops.matmul(a, b))), [a, b]
    case("matmul", c_matmul)

    def c_matmul_batched():
        a, b = _t(rng, 2, 4, 5), _t(rng, 5, 5)
        return lambda: ops.mean_all(ops.sigmoid(ops.matmul(a, b))), [a, b]
    case("matmul_batched", c_matmul_batched)

    def c_matmul_bcast_left():
        w, x = _t(rng, 4, 4), _t(rng, 3, 4, 5)
        return lambda: ops.mean_all(ops.sigmoid(ops.matmul(w, x))), [w, x]
    case("matmul_broadcast_left", c_matmul_bcast_left)

    def c_relu():
        a = _t(rng, 5, 5)
        a.data += np.sign(a.data) * 0.05  # keep coordinates off the kink
        return lambda: ops.mean_all(ops.relu(a)), [a]
    case("relu", c_relu)

    def c_sigmoid():
        a = _t(rng, 4, 4)
        return lambda: ops.mean_all(ops.mul(ops.sigmoid(a), a)), [a]
    case("sigmoid", c_sigmoid)

    def c_softmax_token():
        a = _t(rng, 3, 4, 5)
        w = Tensor(rng.standard_normal((3, 4, 5)))
        return lambda: ops.mean_all(ops.mul(ops.softmax(a, axis=-2), w)), [a]
    case("softmax_axis-2", c_softmax_token)

    def c_softmax_feature():
        a = _t(rng, 3, 4, 5)
        w = Tensor(rng.standard_normal((3, 4, 5)))
        return lambda: ops.mean_all(ops.mul(ops.softmax(a, axis=-1), w)), [a]
    case("softmax_axis-1", c_softmax_feature)

    def c_logsumexp():
        a = _t(rng, 4, 7)
        return lambda: ops.mean_all(ops.logsumexp(a, axis=1)), [a]
    case("logsumexp", c_logsumexp)

    def c_cross_entropy():
        a = _t(rng, 4, 7)
        tgt = np.array([0, 3, 6, 2])
        return lambda: ops.cross_entropy_logits(a, tgt), [a]
    case("cross_entropy", c_cross_entropy)

    def c_l2_normalize():
        a = _t(rng, 4, 6)
        w = Tensor(rng.standard_normal((4, 6)))
        return lambda: ops.mean_all(ops.mul(ops.l2_normalize(a), w)), [a]
    case("l2_normalize", c_l2_normalize)

    def c_batchnorm():
        x = _t(rng, 8, 4)
        g = Tensor(rng.uniform(0.5, 1.5, 4), requires_grad=True)
        b = _t(rng, 4)
        w = Tensor(rng.standard_normal((8, 4)))
        return lambda: ops.mean_all(ops.mul(ops.batchnorm(x, g, b, train=True), w)), [x, g, b]
    case("batchnorm_train", c_batchnorm)

    def c_batchnorm_conv():
        x = _t(rng, 3, 2, 4, 4)
        g = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
        b = _t(rng, 2)
        w = Tensor(rng.standard_normal((3, 2, 4, 4)))
        return lambda: ops.mean_all(ops.mul(ops.batchnorm(x, g, b, train=True), w)), [x, g, b]
    case("batchnorm_train_4d", c_batchnorm_conv)

    def c_batchnorm_eval():
        x = _t(rng, 4, 3)
        g = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
        b = _t(rng, 3)
        rm = rng.standard_normal(3)
        rv = rng.uniform(0.5, 2.0, 3)
        w = Tensor(rng.standard_normal((4, 3)))
        return lambda: ops.mean_all(ops.mul(
            ops.batchnorm(x, g, b, train=False, running_mean=rm, running_var=rv), w)), [x, g, b]
    case("batchnorm_eval", c_batchnorm_eval)

    def c_conv2d():
        x, w, b = _t(rng, 2, 3, 6, 6), _t(rng, 4, 3, 3, 3), _t(rng, 4)
        return lambda: ops.mean_all(ops.sigmoid(ops.conv2d(x, w, b, padding=1))), [x, w, b]
    case("conv2d_pad1", c_conv2d)

    def c_conv2d_nopad():
        x, w, b = _t(rng, 2, 2, 5, 5), _t(rng, 3, 2, 3, 3), _t(rng, 3)
        return lambda: ops.mean_all(ops.sigmoid(ops.conv2d(x, w, b))), [x, w, b]
    case("conv2d", c_conv2d_nopad)

    def c_conv3d():
        x, w, b = _t(rng, 2, 2, 4, 4, 4), _t(rng, 3, 2, 2, 3, 3), _t(rng, 3)
        return lambda: ops.mean_all(ops.sigmoid(ops.conv3d(x, w, b))), [x, w, b]
    case("conv3d", c_conv3d)

    def c_shapes():
        a = _t(rng, 2, 6, 4)
        g = _t(rng, 2, 3, 1)
        w = Tensor(rng.standard_normal((2, 4, 6)))

        def f():
            y = ops.transpose(a, (0, 2, 1))              # (2,4,6)
            y = ops.mul(y, w)
            parts = [ops.slice_axis(y, 1, 0, 2), ops.slice_axis(y, 1, 2, 4)]
            y = ops.concat(parts, axis=1)                # (2,4,6)
            y = ops.reshape(y, (2, 3, 8))
            gate = ops.expand_last(g, 8)                 # (2,3,8)
            return ops.mean_all(ops.mul(y, gate))
        return f, [a, g]
    case("reshape/transpose/concat/slice/expand", c_shapes)

    def c_sums():
        a = _t(rng, 3, 4, 2)
        return lambda: ops.mean_all(ops.sigmoid(ops.sum_axis(a, 1))), [a]
    case("sum_axis", c_sums)

    return cases


def _sampled(rng):
    return np.random.default_rng(rng.integers(2 ** 32))


def check_ops(seeds=(0, 1, 2), eps=1e-6, tol=1e-4):
    """Every op on len(seeds) random shapes; exhaustive coordinates."""
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, build in _op_cases(rng):
            f, params = build()
            t0 = time.perf_counter()
            err = grad_check(f, params, eps=eps)
            dt = time.perf_counter() - t0
            results.append(CheckResult(f"op:{name}[seed{seed}]", err, dt, err <= tol))
    return results


def check_attention_stack(eps=1e-6, tol=1e-4, seed=0):
    """Attention -> projection -> InfoNCE at the documented reduced size
    (c=10, d=16, H=2, K=8) with leaf Q, K, V token matrices."""
    rng = np.random.default_rng(seed)
    init = np.random.default_rng(seed + 1)
    c, d, heads, k_cap, n = 10, 16, 2, 8, 2
    attn = BilinearAttention(AttentionConfig(tokens=c, dim=d, heads=heads), init, dtype=np.float64)
    proj = ProjectionHead(c, d, 6, init, dtype=np.float64)
    q_tok = _t(rng, n, c, d)
    k_tok = _t(rng, n, c, d)
    v_tok = _t(rng, n, c, d)
    k_pos = rng.standard_normal((n, 6))
    k_pos /= np.linalg.norm(k_pos, axis=1, keepdims=True)
    queue = rng.standard_normal((k_cap, 6))
    queue /= np.linalg.norm(queue, axis=1, keepdims=True)

    def f():
        fused = attn.forward(q_tok, k_tok, v_tok)
        q = proj.forward(fused)
        return info_nce_loss(contrastive_logits(q, k_pos, queue), 0.07)

    params = [q_tok, k_tok, v_tok] + attn.parameters() + proj.parameters()
    t0 = time.perf_counter()
    err = grad_check(f, params, eps=eps, sample=6, rng=_sampled(rng))
    dt = time.perf_counter() - t0
    results = [CheckResult("attention+projection+infonce(c=10,d=16,H=2,K=8)", err, dt, err <= tol)]

    head = ClassifierHead(c, d, 3, init, dtype=np.float64)
    tgt = np.array([0, 2])

    def g():
        fused = attn.forward(q_tok, k_tok, v_tok)
        return ops.cross_entropy_logits(head.forward(fused), tgt)

    t0 = time.perf_counter()
    err = grad_check(g, attn.parameters() + head.parameters(), eps=eps, sample=6, rng=_sampled(rng))
    dt = time.perf_counter() - t0
    results.append(CheckResult("attention+classifier+cross_entropy", err, dt, err <= tol))
    return results


def check_encoder_branches(eps=1e-6, tol=1e-4, seed=0):
    """Each encoder stage end-to-end on the micro geometry (train-mode BN)."""
    results = []
    for use_3d, tag in ((True, "3d"), (False, "2d")):
        rng = np.random.default_rng(seed)
        init = np.random.default_rng(seed + 3)
        cfg = micro_encoder_config(use_3d=use_3d, embed_dim=8)
        enc = MultiSourceEncoder(cfg, init, dtype=np.float64)
        hsi = rng.standard_normal((2, cfg.bands, cfg.patch, cfg.patch))
        lid = rng.standard_normal((2, 1, cfg.patch, cfg.patch))
        w = Tensor(rng.standard_normal((2, cfg.tokens, cfg.embed_dim)))

        def f():
            q, k, v = enc.forward(hsi, lid, train=True)
            probe = ops.add(ops.mul(q, w), ops.mul(ops.add(k, v), w))
            return ops.mean_all(probe)

        t0 = time.perf_counter()
        err = grad_check(f, enc.parameters(), eps=eps, sample=5, rng=_sampled(rng))
        dt = time.perf_counter() - t0
        results.append(CheckResult(f"encoder_qkv[{tag}]", err, dt, err <= tol))
    return results


def _normalize_rows(a):
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def full_loss_case(model_cfg, eq1=False, seed=0, queue_size=8, batch=2):
    """Closure + parameters for the complete query-side contrastive loss.

    Keys and queue are constants (the key path carries no gradients by
    design), so the finite-difference loop only re-runs the query model.
    """
    from .attention import ContrastiveModel

    rng = np.random.default_rng(seed)
    init = np.random.default_rng(seed + 7)
    model = ContrastiveModel(model_cfg, init, dtype=np.float64)
    ec = model_cfg.encoder
    hsi = rng.standard_normal((batch, ec.bands, ec.patch, ec.patch))
    lid = rng.standard_normal((batch, 1, ec.patch, ec.patch))
    k_pos = _normalize_rows(rng.standard_normal((batch, model_cfg.proj_dim)))
    queue = _normalize_rows(rng.standard_normal((queue_size, model_cfg.proj_dim)))
    tau = 0.07

    def f():
        q = model.forward(hsi, lid, train=True)
        logits = contrastive_logits(q, k_pos, queue)
        if eq1:
            l_pos = ops.slice_axis(logits, 1, 0, 1)
            l_neg = ops.slice_axis(logits, 1, 1, logits.data.shape[1])
            return info_nce_loss_eq1(l_pos, l_neg, tau)
        return info_nce_loss(logits, tau)

    return f, model


def check_full_loss(eps=1e-6, tol=1e-4, seed=0, sample=4):
    """Micro end-to-end losses: default, the negatives-only variant, and each ablation."""
    variants = [
        ("full_loss[default]", micro_model_config(), False),
        ("full_loss[eq1_literal]", micro_model_config(), True),
        ("full_loss[no-bilinear]", micro_model_config(bilinear=False), False),
        ("full_loss[no-gate]", micro_model_config(gate=False), False),
        ("full_loss[no-3dconv]", micro_model_config(encoder=micro_encoder_config(use_3d=False)), False),
        ("full_loss[softmax-feature]", micro_model_config(softmax_axis="feature"), False),
    ]
    results = []
    for name, cfg, eq1 in variants:
        f, model = full_loss_case(cfg, eq1=eq1, seed=seed)
        rng = np.random.default_rng(seed + 11)
        t0 = time.perf_counter()
        err = grad_check(f, model.parameters(), eps=eps, sample=sample, rng=rng)
        dt = time.perf_counter() - t0
        results.append(CheckResult(name, err, dt, err <= tol))
    return results


def check_corruption_detected(eps=1e-6, seed=0):
    """Negative control: a sabotaged backward rule must trip the checker."""
    rng = np.random.default_rng(seed)
    a = _t(rng, 4, 4)
    ops.CORRUPT_SIGMOID_BACKWARD = True
    try:
        err = grad_check(lambda: ops.mean_all(ops.sigmoid(a)), [a], eps=eps)
    finally:
        ops.CORRUPT_SIGMOID_BACKWARD = False
    return CheckResult("negative-control:corrupted-backward", err, 0.0, err > 1e-2)


def run_suite(tol=1e-4, eps=1e-6, report=print):
    """The full gradient suite; returns (results, all_passed)."""
    results = []
    results += check_ops(eps=eps, tol=tol)
    results += check_attention_stack(eps=eps, tol=tol)
    results += check_encoder_branches(eps=eps, tol=tol)
    results += check_full_loss(eps=eps, tol=tol)
    results.append(check_corruption_detected(eps=eps))
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        if report:
            report(f"[{status}] {r.name}: max_rel_err={r.max_err:.3e} ({r.seconds:.2f}s)")
        ok &= r.passed
    return results, ok
