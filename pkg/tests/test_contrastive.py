"""Momentum updates, the key queue, InfoNCE values, and pretraining steps."""

from dataclasses import replace

import numpy as np
import pytest

from nnc.attention import ContrastiveModel, ModelConfig
from nnc.autograd import Tensor, no_grad, tape, backward
from nnc.checkpoint import load_checkpoint, rng_state, restore_rng
from nnc.config import seed_streams
from nnc.contrastive import (KeyQueue, PretrainConfig, PretrainState,
                             contrastive_logits, info_nce_loss,
                             info_nce_loss_eq1, load_pretrain_checkpoint,
                             momentum_update, pretrain_loop, pretrain_step,
                             assemble_batch, shuffled_key_forward, warmup_queue)
from nnc.data import AugmentConfig, load_scene
from nnc.encoder import small_config
from nnc.synth import SynthSpec, write_dataset


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds") / "scene"
    write_dataset(d, SynthSpec(height=48, width=48, bands=8, classes=3,
                               labels_per_class=5))
    return load_scene(d)


def tiny_cfg(**over):
    base = dict(tau=0.07, momentum=0.9, batch=8, lr=5e-4, steps=5, bn_groups=2,
                spatial_sep=2, queue_capacity=16, checkpoint_every=0,
                augment=AugmentConfig())
    base.update(over)
    return PretrainConfig(**base)


def tiny_state(cfg, seed=0):
    streams = seed_streams(seed)
    mc = ModelConfig(encoder=small_config(bands=8, embed_dim=16), heads=5,
                     proj_dim=8)
    query = ContrastiveModel(mc, streams["init"])
    key = ContrastiveModel(mc, streams["init"])
    return PretrainState(query, key, streams, cfg)


class TestMomentum:
    def test_single_update_value(self):
        k = np.array([1.0])
        momentum_update(k, np.array([0.5]), 0.9)
        np.testing.assert_allclose(k, [0.95])

    def test_fixed_point(self):
        k = np.array([0.3, -0.7])
        momentum_update(k, k.copy(), 0.9)
        np.testing.assert_array_equal(k, [0.3, -0.7])

    def test_geometric_decay(self):
        k = np.array([1.0], dtype=np.float64)
        q = np.array([0.0], dtype=np.float64)
        for n in (1, 5, 20, 100):
            k[:] = 1.0
            for _ in range(n):
                momentum_update(k, q, 0.9)
            np.testing.assert_allclose(k[0], 0.9 ** n, rtol=1e-6)

    def test_dict_form_requires_matching_names(self):
        a = {"w": np.ones(2)}
        b = {"w": np.zeros(2), "extra": np.ones(1)}
        with pytest.raises(ValueError):
            momentum_update(a, b, 0.9)


class TestKeyQueue:
    def _unit(self, rng, n, d=3):
        x = rng.standard_normal((n, d))
        return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)

    def test_fifo_matches_replay_log(self):
        rng = np.random.default_rng(0)
        for trial in range(1000):
            cap = int(rng.integers(4, 17))
            q = KeyQueue(cap, 3)
            log = []
            for _ in range(int(rng.integers(1, 12))):
                batch = self._unit(rng, int(rng.integers(1, 8)))
                q.enqueue(batch)
                log.extend(batch)
                want = np.array(log[-min(len(log), cap):], dtype=np.float32)
                np.testing.assert_array_equal(q.as_array(), want)

    def test_unit_norm_enforced(self):
        q = KeyQueue(8, 3)
        with pytest.raises(ValueError):
            q.enqueue(np.full((2, 3), 2.0, dtype=np.float32))

    def test_oversized_batch_keeps_newest(self):
        q = KeyQueue(4, 3)
        rng = np.random.default_rng(1)
        batch = self._unit(rng, 7)
        q.enqueue(batch)
        np.testing.assert_array_equal(q.as_array(), batch[-4:])


class TestLogitsAndLoss:
    def test_logits_match_double_loop(self):
        rng = np.random.default_rng(2)
        q = rng.standard_normal((4, 8))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        kp = rng.standard_normal((4, 8))
        kp /= np.linalg.norm(kp, axis=1, keepdims=True)
        neg = rng.standard_normal((6, 8))
        neg /= np.linalg.norm(neg, axis=1, keepdims=True)
        logits = contrastive_logits(Tensor(q), kp, neg).data
        assert logits.shape == (4, 7)
        for i in range(4):
            np.testing.assert_allclose(logits[i, 0], q[i] @ kp[i], rtol=1e-12)
            for j in range(6):
                np.testing.assert_allclose(logits[i, 1 + j], q[i] @ neg[j], rtol=1e-12)

    def test_matching_query_key_gives_unit_positive(self):
        rng = np.random.default_rng(3)
        q = rng.standard_normal((5, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        neg = np.eye(4)[:3]
        logits = contrastive_logits(Tensor(q), q.copy(), neg).data
        np.testing.assert_allclose(logits[:, 0], 1.0, atol=1e-6)

    @pytest.mark.parametrize("k_negatives", [3, 16, 255])
    def test_equal_logits_loss_is_log_k_plus_one(self, k_negatives):
        logits = Tensor(np.zeros((4, 1 + k_negatives)))
        loss = info_nce_loss(logits, tau=0.07)
        np.testing.assert_allclose(loss.item(), np.log(1.0 + k_negatives), rtol=1e-6)

    def test_equal_logits_variant_loss_is_log_k(self):
        l_pos = Tensor(np.zeros((4, 1)))
        l_neg = Tensor(np.zeros((4, 8)))
        loss = info_nce_loss_eq1(l_pos, l_neg, tau=0.07)
        np.testing.assert_allclose(loss.item(), np.log(8.0), rtol=1e-6)

    def test_saturated_positive_loss_vanishes(self):
        logits = np.full((2, 9), -1.0)
        logits[:, 0] = 1.0
        loss = info_nce_loss(Tensor(logits), tau=0.01)
        assert loss.item() < 1e-6

    def test_loss_monotone_in_positive_logit(self):
        prev = np.inf
        for pos in (-0.5, 0.0, 0.5, 0.9):
            logits = np.zeros((1, 5))
            logits[0, 0] = pos
            cur = info_nce_loss(Tensor(logits), tau=0.2).item()
            assert cur < prev
            prev = cur


class TestShuffledKeys:
    def test_matches_manual_permutation(self, scene):
        cfg = tiny_cfg()
        state = tiny_state(cfg)
        rng = np.random.default_rng(4)
        batch = assemble_batch(scene, cfg, np.random.default_rng(5), 11)
        from nnc.data import augment_batch
        hsi, lid = augment_batch(batch.anchors, np.random.default_rng(6), AugmentConfig.disabled())
        snapshot = rng_state(rng)
        keys = shuffled_key_forward(state.key, hsi, lid, rng, groups=2)
        # replay: same permutation draw, explicit permute/forward/unpermute
        ref_rng = np.random.default_rng()
        restore_rng(ref_rng, snapshot)
        perm = ref_rng.permutation(len(hsi))
        with no_grad():
            shuffled = state.key.forward(hsi[perm], lid[perm], train=True, groups=2)
        want = np.empty_like(shuffled.data)
        want[perm] = shuffled.data
        np.testing.assert_array_equal(keys, want)

    def test_single_group_close_to_plain_forward(self, scene):
        cfg = tiny_cfg(bn_groups=1)
        state = tiny_state(cfg)
        batch = assemble_batch(scene, cfg, np.random.default_rng(7), 11)
        from nnc.data import augment_batch
        hsi, lid = augment_batch(batch.anchors, np.random.default_rng(8), AugmentConfig.disabled())
        keys = shuffled_key_forward(state.key, hsi, lid, np.random.default_rng(9), groups=1)
        with no_grad():
            plain = state.key.forward(hsi, lid, train=True, groups=1).data
        # row order inside BN statistics differs, so only float-level equality
        np.testing.assert_allclose(keys, plain, rtol=1e-4, atol=1e-5)


class TestPretrainStep:
    def test_key_side_never_receives_gradients(self, scene):
        cfg = tiny_cfg()
        state = tiny_state(cfg)
        warmup_queue(state, scene, cfg, 11)
        batch = assemble_batch(scene, cfg, state.rngs["data"], 11)
        pretrain_step(state, batch, cfg)
        assert all(p.grad is None for p in state.key.parameters())
        assert any(p.grad is not None and np.abs(p.grad).sum() > 0
                   for p in state.query.parameters())

    def test_momentum_update_applied_exactly(self, scene):
        cfg = tiny_cfg()
        state = tiny_state(cfg)
        warmup_queue(state, scene, cfg, 11)
        key_before = {n: p.data.copy() for n, p in state.key.named_parameters()}
        batch = assemble_batch(scene, cfg, state.rngs["data"], 11)
        pretrain_step(state, batch, cfg)
        query_after = dict(state.query.named_parameters())
        for n, p in state.key.named_parameters():
            want = 0.9 * key_before[n] + 0.1 * query_after[n].data
            np.testing.assert_array_equal(p.data, want.astype(np.float32))

    def test_metrics_and_queue_growth(self, scene):
        cfg = tiny_cfg()
        state = tiny_state(cfg)
        batch = assemble_batch(scene, cfg, state.rngs["data"], 11)
        m = pretrain_step(state, batch, cfg)
        assert set(m) >= {"step", "loss", "pos_logit_mean", "queue_fill", "substituted"}
        assert m["step"] == 1 and m["queue_fill"] == cfg.batch
        assert m["substituted"] == cfg.batch // 2
        assert np.isfinite(m["loss"])

    def test_substitution_can_be_disabled(self, scene):
        cfg = tiny_cfg(neighbor=False)
        state = tiny_state(cfg)
        batch = assemble_batch(scene, cfg, state.rngs["data"], 11)
        m = pretrain_step(state, batch, cfg)
        assert m["substituted"] == 0

    def test_eq1_variant_changes_the_loss(self, scene):
        ca, cb = tiny_cfg(), tiny_cfg(eq1_literal=True)
        a, b = tiny_state(ca), tiny_state(cb)
        warmup_queue(a, scene, ca, 11)
        warmup_queue(b, scene, cb, 11)
        la = pretrain_step(a, assemble_batch(scene, ca, a.rngs["data"], 11), ca)["loss"]
        lb = pretrain_step(b, assemble_batch(scene, cb, b.rngs["data"], 11), cb)["loss"]
        assert la != lb


class TestLoopAndCheckpoints:
    def test_two_runs_bitwise_identical(self, scene, tmp_path):
        outs = []
        for run in ("a", "b"):
            cfg = tiny_cfg(steps=5)
            state = tiny_state(cfg)
            pretrain_loop(scene, state, cfg, tmp_path / run, patch_size=11)
            arrays, header = load_checkpoint(tmp_path / run / "ckpt_final")
            outs.append((arrays, header))
        (xa, ha), (xb, hb) = outs
        assert ha["step"] == hb["step"] == 5
        for n in xa:
            np.testing.assert_array_equal(xa[n], xb[n], err_msg=n)

    def test_zero_steps_checkpoint_equals_init(self, scene, tmp_path):
        cfg = tiny_cfg(steps=0)
        state = tiny_state(cfg)
        init = {n: a.copy() for n, a in state.query.state_dict().items()}
        pretrain_loop(scene, state, cfg, tmp_path / "zero", patch_size=11)
        arrays, header = load_checkpoint(tmp_path / "zero" / "ckpt_final")
        assert header["step"] == 0
        for n, a in init.items():
            np.testing.assert_array_equal(arrays[f"query.{n}"], a, err_msg=n)
        assert header["queue"]["fill"] == 0

    def test_resume_is_bitwise_continuation(self, scene, tmp_path):
        cfg10 = tiny_cfg(steps=10)
        straight = tiny_state(cfg10)
        pretrain_loop(scene, straight, cfg10, tmp_path / "straight", patch_size=11)

        cfg5 = tiny_cfg(steps=5)
        first = tiny_state(cfg5)
        pretrain_loop(scene, first, cfg5, tmp_path / "part1", patch_size=11)
        resumed = tiny_state(cfg10)
        load_pretrain_checkpoint(tmp_path / "part1" / "ckpt_final", resumed)
        assert resumed.step == 5
        pretrain_loop(scene, resumed, cfg10, tmp_path / "part2", patch_size=11)

        xa, _ = load_checkpoint(tmp_path / "straight" / "ckpt_final")
        xb, _ = load_checkpoint(tmp_path / "part2" / "ckpt_final")
        for n in xa:
            np.testing.assert_array_equal(xa[n], xb[n], err_msg=n)

    def test_architecture_mismatch_rejected(self, scene, tmp_path):
        cfg = tiny_cfg(steps=1)
        state = tiny_state(cfg)
        pretrain_loop(scene, state, cfg, tmp_path / "arch", patch_size=11)
        other = tiny_state(cfg)
        other.queue = KeyQueue(cfg.queue_capacity, 8)
        mc = ModelConfig(encoder=small_config(bands=8, embed_dim=16), heads=5,
                         proj_dim=4)   # different projection width
        streams = seed_streams(0)
        other.query = ContrastiveModel(mc, streams["init"])
        other.key = ContrastiveModel(mc, streams["init"])
        with pytest.raises(ValueError, match="architecture"):
            load_pretrain_checkpoint(tmp_path / "arch" / "ckpt_final", other)

    def test_warmup_fills_queue_without_stepping(self, scene):
        cfg = tiny_cfg()
        state = tiny_state(cfg)
        warmup_queue(state, scene, cfg, 11)
        assert state.queue.fill == cfg.batch
        assert state.step == 0
