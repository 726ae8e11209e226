"""Momentum-contrast pretraining with nearest-neighbor key substitution.

Two architecturally identical models: the query side learns by
backpropagation + Adam, the key side follows by exponential moving
average and never receives gradients.  A FIFO ring of past key
embeddings provides negatives.  Half of each key batch is replaced by
augmented spatial neighbors of the anchors, and the key encoder runs
with shuffled sub-batch BatchNorm to stop intra-batch statistic leakage.

One step, in order: augment query/key/neighbor views; substitute keys;
encode queries (grouped BN, gradients on); encode keys (shuffled grouped
BN, no gradients); similarity logits against the positive key and the
queue; temperature-scaled cross-entropy with the positive at index 0;
Adam update of the query side; momentum update of the key side; enqueue
the fresh keys (evicting the oldest).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autograd import Tensor, backward, no_grad, tape
from .checkpoint import (architecture_hash, load_checkpoint, restore_rng,
                         rng_state, save_checkpoint, split_prefix)
from .data import AugmentConfig, augment_batch, sample_pretrain_batch, substitute_half_keys
from .nn import Adam


@dataclass
class PretrainConfig:
    tau: float = 0.07
    momentum: float = 0.9            # key-side EMA coefficient
    batch: int = 64
    lr: float = 5e-4
    steps: int = 200
    bn_groups: int = 4               # virtual sub-batches for shuffled BN
    spatial_sep: int = 12            # min Chebyshev distance between anchors
    queue_capacity: int = 1024
    seed: int = 0
    eq1_literal: bool = False        # exclude the positive from the denominator
    neighbor: bool = True            # False disables key substitution
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    checkpoint_every: int = 100

    def validate(self):
        if not 0 < self.momentum < 1:
            raise ValueError(f"momentum must be in (0,1), got {self.momentum}")
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.batch % self.bn_groups:
            raise ValueError(f"bn_groups {self.bn_groups} must divide batch {self.batch}")


class KeyQueue:
    """Fixed-capacity FIFO ring of unit-norm key embeddings."""

    def __init__(self, capacity, dim, dtype=np.float32):
        self.capacity = capacity
        self.storage = np.zeros((capacity, dim), dtype=dtype)
        self.fill = 0
        self.head = 0  # next write slot

    def enqueue(self, keys):
        keys = np.asarray(keys)
        norms = np.linalg.norm(keys, axis=1)
        if np.abs(norms - 1.0).max(initial=0.0) > 1e-4:
            raise ValueError("enqueue: keys must be unit-norm")
        if len(keys) > self.capacity:
            keys = keys[-self.capacity:]  # only the newest can survive anyway
        m = len(keys)
        idx = (self.head + np.arange(m)) % self.capacity
        self.storage[idx] = keys
        self.head = (self.head + m) % self.capacity
        self.fill = min(self.fill + m, self.capacity)

    def as_array(self):
        """Contents oldest-to-newest, shape (fill, dim)."""
        if self.fill < self.capacity:
            return self.storage[:self.fill].copy()
        return np.concatenate([self.storage[self.head:], self.storage[:self.head]])

    def state(self):
        return {"fill": self.fill, "head": self.head}

    def load(self, storage, state):
        self.storage[...] = storage
        self.fill = int(state["fill"])
        self.head = int(state["head"])


def momentum_update(theta_k, theta_q, r):
    """theta_k <- r * theta_k + (1-r) * theta_q, in place on theta_k.

    Accepts single arrays or name-keyed dicts of arrays.  The key side
    never sees gradients; this EMA is its only source of progress.
    """
    if isinstance(theta_k, np.ndarray):
        if theta_k.shape != np.shape(theta_q):
            raise ValueError(f"momentum_update: shape {theta_k.shape} vs {np.shape(theta_q)}")
        theta_k *= r
        theta_k += (1.0 - r) * np.asarray(theta_q, dtype=theta_k.dtype)
        return theta_k
    if set(theta_k) != set(theta_q):
        raise ValueError("momentum_update: parameter name sets differ")
    for name in theta_k:
        momentum_update(theta_k[name], theta_q[name], r)
    return theta_k


def momentum_update_model(key_model, query_model, r):
    momentum_update({n: p.data for n, p in key_model.named_parameters()},
                    {n: p.data for n, p in query_model.named_parameters()}, r)


def shuffled_key_forward(key_model, hsi, lidar, rng, groups):
    """Key embeddings with a shuffled sub-batch BN assignment.

    A random permutation reassigns samples to the BN groups, the batch is
    encoded without gradients, and the outputs are un-permuted so row i
    again corresponds to input i.
    """
    n = hsi.shape[0]
    if n % groups:
        raise ValueError(f"bn groups {groups} must divide batch {n}")
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    with no_grad():
        out = key_model.forward(hsi[perm], lidar[perm], train=True, groups=groups)
    return out.data[inv]


def contrastive_logits(q, k_pos, negatives):
    """Similarity logits (N, 1+K): column 0 is the positive pair.

    q carries gradients; k_pos and the queue contents are plain arrays
    (detached by construction).  All rows must be unit-norm (cosine
    similarities), checked at 1e-4.
    """
    k_pos = np.asarray(k_pos)
    negatives = np.asarray(negatives)
    for name, arr in (("q", q.data), ("k_pos", k_pos), ("queue", negatives)):
        if arr.size and np.abs(np.linalg.norm(arr, axis=-1) - 1.0).max() > 1e-4:
            raise ValueError(f"contrastive_logits: {name} rows are not unit-norm")
    l_pos = ops.sum_axis(ops.mul(q, Tensor(k_pos)), axis=1, keepdims=True)
    l_neg = ops.matmul(q, Tensor(np.ascontiguousarray(negatives.T)))
    return ops.concat([l_pos, l_neg], axis=1)


def info_nce_loss(logits, tau):
    """Temperature-scaled cross-entropy with the positive at column 0."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    n = logits.data.shape[0]
    return ops.cross_entropy_logits(ops.scale(logits, 1.0 / tau),
                                    np.zeros(n, dtype=np.int64))


def info_nce_loss_eq1(l_pos, l_neg, tau):
    """Variant with only negatives in the denominator:
    mean(-l_pos/tau + logsumexp(l_neg/tau))."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    pos = ops.scale(ops.sum_axis(l_pos, axis=1), 1.0 / tau)
    lse = ops.logsumexp(ops.scale(l_neg, 1.0 / tau), axis=1)
    return ops.mean_all(ops.sub(lse, pos))


@dataclass
class PretrainBatch:
    anchors: list          # PatchPairs
    neighbors: list        # PatchPairs, aligned with anchors


def assemble_batch(scene, cfg, rng, patch_size):
    """Sample anchors + neighbor patches for one step."""
    pairs, nb_centers = sample_pretrain_batch(scene, cfg.batch, cfg.spatial_sep, rng,
                                              patch_size=patch_size)
    from .data import extract_patch

    neighbors = [extract_patch(scene, rc, patch_size) for rc in nb_centers]
    return PretrainBatch(anchors=pairs, neighbors=neighbors)


class PretrainState:
    """Everything one training step reads or writes."""

    def __init__(self, query_model, key_model, rngs, cfg):
        self.query = query_model
        self.key = key_model
        self.key.load_state_dict(query_model.state_dict())   # start coupled
        self.optimizer = Adam(query_model, lr=cfg.lr)
        self.queue = KeyQueue(cfg.queue_capacity, cfg_proj_dim(query_model))
        self.rngs = rngs
        self.step = 0

    def arch_hash(self):
        return architecture_hash(self.query)


def cfg_proj_dim(model):
    return model.proj.fc.weight.data.shape[1]


def encode_keys(state, cfg, k_hsi, k_lidar):
    return shuffled_key_forward(state.key, k_hsi, k_lidar, state.rngs["shuffle"], cfg.bn_groups)


def pretrain_step(state, batch, cfg):
    """One Algorithm-style training transaction; returns metrics dict."""
    rng_aug = state.rngs["augment"]
    rng_shuf = state.rngs["shuffle"]
    q_hsi, q_lid = augment_batch(batch.anchors, rng_aug, cfg.augment)
    k_hsi, k_lid = augment_batch(batch.anchors, rng_aug, cfg.augment)
    n_hsi, n_lid = augment_batch(batch.neighbors, rng_aug, cfg.augment)
    if cfg.neighbor:
        k_hsi, k_lid, mask = substitute_half_keys(k_hsi, k_lid, n_hsi, n_lid, rng_shuf)
    else:
        mask = np.zeros(len(batch.anchors), dtype=bool)

    state.query.zero_grad()
    with tape():
        q = state.query.forward(q_hsi, q_lid, train=True, groups=cfg.bn_groups)
        k = encode_keys(state, cfg, k_hsi, k_lid)   # detached: no_grad inside
        negatives = state.queue.as_array()
        logits = contrastive_logits(q, k, negatives)
        if cfg.eq1_literal:
            l_pos = ops.slice_axis(logits, 1, 0, 1)
            l_neg = ops.slice_axis(logits, 1, 1, logits.data.shape[1])
            loss = info_nce_loss_eq1(l_pos, l_neg, cfg.tau)
        else:
            loss = info_nce_loss(logits, cfg.tau)
        backward(loss)

    state.optimizer.step()
    momentum_update_model(state.key, state.query, cfg.momentum)
    state.queue.enqueue(k)
    state.step += 1
    return {
        "step": state.step,
        "loss": float(loss.data),
        "pos_logit_mean": float(logits.data[:, 0].mean()),
        "lr": cfg.lr,
        "queue_fill": state.queue.fill,
        "substituted": int(mask.sum()),
    }


def warmup_queue(state, scene, cfg, patch_size):
    """Cold start: encode one batch of keys so the first loss step has
    negatives; consumes the same RNG streams as a regular step."""
    batch = assemble_batch(scene, cfg, state.rngs["data"], patch_size)
    k_hsi, k_lid = augment_batch(batch.anchors, state.rngs["augment"], cfg.augment)
    keys = encode_keys(state, cfg, k_hsi, k_lid)
    state.queue.enqueue(keys)


def pretrain_checkpoint_arrays(state):
    arrays = {f"query.{n}": a for n, a in state.query.state_dict().items()}
    arrays.update({f"key.{n}": a for n, a in state.key.state_dict().items()})
    for n, a in state.optimizer.state.m.items():
        arrays[f"adam.m.{n}"] = a.copy()
    for n, a in state.optimizer.state.v.items():
        arrays[f"adam.v.{n}"] = a.copy()
    arrays["queue.storage"] = state.queue.storage.copy()
    return arrays


def save_pretrain_checkpoint(path, state):
    header = {
        "kind": "pretrain",
        "architecture": state.arch_hash(),
        "step": state.step,
        "adam_step": state.optimizer.state.step,
        "queue": state.queue.state(),
        "rng_state": {name: rng_state(g) for name, g in state.rngs.items()},
    }
    save_checkpoint(path, pretrain_checkpoint_arrays(state), header)


def load_pretrain_checkpoint(path, state):
    arrays, header = load_checkpoint(path)
    if header["architecture"] != state.arch_hash():
        raise ValueError("checkpoint was written by a different architecture")
    state.query.load_state_dict(split_prefix(arrays, "query"))
    state.key.load_state_dict(split_prefix(arrays, "key"))
    state.optimizer.state.m = split_prefix(arrays, "adam.m")
    state.optimizer.state.v = split_prefix(arrays, "adam.v")
    state.optimizer.state.step = int(header["adam_step"])
    state.queue.load(arrays["queue.storage"], header["queue"])
    for name, s in header["rng_state"].items():
        restore_rng(state.rngs[name], s)
    state.step = int(header["step"])
    return header


def pretrain_loop(scene, state, cfg, out_dir, patch_size=11):
    """Run pretraining to cfg.steps, writing checkpoints and metrics.csv.

    `state` may come fresh from init or from a resumed checkpoint; the
    loop continues from state.step.  Returns the final checkpoint path.
    """
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    fresh_metrics = state.step == 0
    rows = []
    if state.step == 0 and cfg.steps > 0 and state.queue.fill == 0:
        warmup_queue(state, scene, cfg, patch_size)
    while state.step < cfg.steps:
        batch = assemble_batch(scene, cfg, state.rngs["data"], patch_size)
        metrics = pretrain_step(state, batch, cfg)
        if not np.isfinite(metrics["loss"]):
            _dump_metrics(metrics_path, rows, fresh_metrics)
            raise RuntimeError(
                f"non-finite loss at step {metrics['step']}; metrics flushed to {metrics_path}"
            )
        rows.append(metrics)
        if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0 and state.step < cfg.steps:
            save_pretrain_checkpoint(os.path.join(out_dir, f"ckpt_{state.step:06d}"), state)
    _dump_metrics(metrics_path, rows, fresh_metrics)
    final = os.path.join(out_dir, "ckpt_final")
    save_pretrain_checkpoint(final, state)
    return final


def _dump_metrics(path, rows, fresh):
    fields = ["step", "loss", "pos_logit_mean", "lr", "queue_fill", "substituted"]
    mode = "w" if fresh else "a"
    with open(path, mode, newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        if fresh:
            w.writeheader()
        w.writerows(rows)
