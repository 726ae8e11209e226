"""Bilinear attention against an independent numpy reimplementation."""

import numpy as np
import pytest

from nnc import ops
from nnc.attention import (AttentionConfig, BilinearAttention, ClassifierHead,
                           ModelConfig, ProjectionHead, attention_parameter_count,
                           split_heads)
from nnc.autograd import Tensor, no_grad
from nnc.encoder import small_config


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def reference_attention(attn, q, k, v):
    """Head-by-head numpy replica of the fused forward pass."""
    cfg = attn.cfg
    block = cfg.tokens // cfg.heads
    outs = []
    for i in range(cfg.heads):
        head = getattr(attn, f"head{i}")
        sl = slice(i * block, (i + 1) * block)
        qi, ki, vi = q[:, sl], k[:, sl], v[:, sl]
        b1 = np.maximum(qi @ head.Wq1.data, 0) * np.maximum(ki @ head.Wk.data, 0)
        b2 = np.maximum(qi @ head.Wq2.data, 0) * np.maximum(vi @ head.Wv.data, 0)
        b1p = np.maximum(head.Wb.data @ b1, 0)
        axis = -2 if cfg.softmax_axis == "token" else -1
        att = softmax(b1p, axis)
        np.testing.assert_allclose(att.sum(axis=axis), 1.0, atol=1e-6)
        h = att * b2
        if head.Wgate is not None:
            g = sigmoid(b1p @ head.Wgate.data)
            assert (g > 0).all() and (g < 1).all()
            h = g * h
        outs.append(h)
    return np.concatenate(outs, axis=-2)


class TestAgainstReference:
    @pytest.mark.parametrize("softmax_axis", ["token", "feature"])
    @pytest.mark.parametrize("gate", [True, False])
    def test_forward_matches_numpy_replica(self, softmax_axis, gate):
        cfg = AttentionConfig(tokens=10, dim=8, heads=2, gate=gate,
                              softmax_axis=softmax_axis)
        attn = BilinearAttention(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        q, k, v = (rng.standard_normal((3, 10, 8)).astype(np.float32) for _ in range(3))
        with no_grad():
            got = attn.forward(Tensor(q), Tensor(k), Tensor(v)).data
        want = reference_attention(attn, q, k, v)
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-6)
        assert got.shape == (3, 10, 8)


class TestSpecialValues:
    def test_zero_gate_weights_halve_the_features(self):
        cfg_g = AttentionConfig(tokens=6, dim=4, heads=2, gate=True)
        cfg_n = AttentionConfig(tokens=6, dim=4, heads=2, gate=False)
        a_g = BilinearAttention(cfg_g, np.random.default_rng(2))
        a_n = BilinearAttention(cfg_n, np.random.default_rng(3))
        for i in range(2):
            hg, hn = getattr(a_g, f"head{i}"), getattr(a_n, f"head{i}")
            for name in ("Wq1", "Wq2", "Wk", "Wv", "Wb"):
                getattr(hn, name).data[...] = getattr(hg, name).data
            hg.Wgate.data[...] = 0.0   # sigmoid(0) = 1/2
        rng = np.random.default_rng(4)
        q, k, v = (rng.standard_normal((2, 6, 4)).astype(np.float32) for _ in range(3))
        with no_grad():
            out_g = a_g.forward(Tensor(q), Tensor(k), Tensor(v)).data
            out_n = a_n.forward(Tensor(q), Tensor(k), Tensor(v)).data
        np.testing.assert_allclose(out_g, 0.5 * out_n, rtol=1e-6)

    def test_zero_queries_zero_output(self):
        cfg = AttentionConfig(tokens=8, dim=6, heads=2)
        attn = BilinearAttention(cfg, np.random.default_rng(5))
        rng = np.random.default_rng(6)
        z = np.zeros((2, 8, 6), dtype=np.float32)
        k, v = (rng.standard_normal((2, 8, 6)).astype(np.float32) for _ in range(2))
        with no_grad():
            out = attn.forward(Tensor(z), Tensor(k), Tensor(v)).data
        np.testing.assert_array_equal(out, 0.0)  # B2 vanishes with Q

    def test_uniform_token_mixing_averages(self):
        # identical token rows + averaging mixer => attention 1/(c/H) everywhere
        cfg = AttentionConfig(tokens=6, dim=4, heads=2, gate=False)
        attn = BilinearAttention(cfg, np.random.default_rng(7))
        block = 3
        for i in range(2):
            getattr(attn, f"head{i}").Wb.data[...] = 1.0 / block
        rng = np.random.default_rng(8)
        row_q = rng.standard_normal((1, 1, 4)).astype(np.float32)
        row_k = rng.standard_normal((1, 1, 4)).astype(np.float32)
        row_v = rng.standard_normal((1, 1, 4)).astype(np.float32)
        q = np.repeat(row_q, 6, axis=1)
        k = np.repeat(row_k, 6, axis=1)
        v = np.repeat(row_v, 6, axis=1)
        with no_grad():
            out = attn.forward(Tensor(q), Tensor(k), Tensor(v)).data
        # every output token row is B2_row / block
        for i in range(2):
            head = getattr(attn, f"head{i}")
            b2 = (np.maximum(row_q[0, 0] @ head.Wq2.data, 0)
                  * np.maximum(row_v[0, 0] @ head.Wv.data, 0))
            np.testing.assert_allclose(out[0, i * block:(i + 1) * block],
                                       np.repeat(b2[None] / block, block, axis=0),
                                       rtol=1e-5, atol=1e-6)


class TestHeadPlumbing:
    def test_split_heads_round_trip(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((2, 10, 4)).astype(np.float32)
        parts = split_heads(Tensor(x), 5)
        assert len(parts) == 5
        back = np.concatenate([p.data for p in parts], axis=-2)
        np.testing.assert_array_equal(back, x)

    def test_head_count_must_divide_tokens(self):
        with pytest.raises(ValueError):
            AttentionConfig(tokens=10, dim=8, heads=3).validate()

    def test_parameter_count_closed_form(self):
        for heads, gate in [(2, True), (5, True), (2, False)]:
            cfg = AttentionConfig(tokens=10 * heads, dim=6, heads=heads, gate=gate)
            attn = BilinearAttention(cfg, np.random.default_rng(10))
            got = sum(p.data.size for p in attn.parameters())
            assert got == attention_parameter_count(10 * heads, 6, heads, gate)

    def test_gate_delta_is_heads_times_dim(self):
        with_g = attention_parameter_count(20, 16, 4, gate=True)
        without = attention_parameter_count(20, 16, 4, gate=False)
        assert with_g - without == 4 * 16


class TestHeads:
    def test_projection_rows_unit_norm(self):
        proj = ProjectionHead(9, 8, 16, np.random.default_rng(11))
        rng = np.random.default_rng(12)
        x = rng.standard_normal((5, 9, 8)).astype(np.float32)
        with no_grad():
            out = proj.forward(Tensor(x)).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)

    def test_classifier_zero_weights_zero_logits(self):
        head = ClassifierHead(9, 8, 4, np.random.default_rng(13))
        head.fc.weight.data[...] = 0.0
        x = np.random.default_rng(14).standard_normal((3, 9, 8)).astype(np.float32)
        with no_grad():
            logits = head.forward(Tensor(x)).data
        np.testing.assert_array_equal(logits, 0.0)  # bias starts at zero

    def test_classifier_needs_two_classes(self):
        with pytest.raises(ValueError):
            ClassifierHead(9, 8, 1, np.random.default_rng(15))


class TestFusionBypass:
    def test_no_bilinear_returns_value_tokens(self):
        from nnc.attention import ContrastiveModel
        enc_cfg = small_config(bands=8, embed_dim=16)
        cfg = ModelConfig(encoder=enc_cfg, heads=5, bilinear=False, proj_dim=8)
        model = ContrastiveModel(cfg, np.random.default_rng(16))
        assert model.attn is None
        rng = np.random.default_rng(17)
        hsi = rng.standard_normal((2, 8, 11, 11)).astype(np.float32)
        lid = rng.standard_normal((2, 1, 11, 11)).astype(np.float32)
        with no_grad():
            fused = model.fused_tokens(hsi, lid, train=False)
            _, _, v = model.encoder.forward(hsi, lid, train=False)
        np.testing.assert_array_equal(fused.data, v.data)
