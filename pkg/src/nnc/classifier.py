"""Fine-tuning, full-scene prediction, and OA/AA/Kappa evaluation.

Prediction computes logits in fixed 64-row tiles regardless of the
requested batch size (tails are padded by repeating the last row and the
padding discarded).  BLAS kernel selection depends on operand shapes, so
pinning the tile shape makes per-pixel results bitwise independent of
how the caller batches the scene.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, backward, no_grad, tape
from .checkpoint import architecture_hash, load_checkpoint, save_checkpoint, split_prefix
from .data import extract_batch
from .nn import Adam
from . import ops

EVAL_TILE = 64


@dataclass
class FinetuneConfig:
    batch: int = 128
    lr: float = 5e-4
    epochs: int = 60
    freeze_encoder: bool = False   # linear probe: train only the classifier head


def finetune(model, scene, train_mask, cfg, rng, patch_size=11):
    """Cross-entropy training on the masked pixels; returns loss history.

    The classifier head is expected fresh; the trunk may carry pretrained
    weights.  With freeze_encoder the trunk runs in eval mode and only the
    head is optimized.
    """
    rows, cols = np.nonzero(train_mask)
    labels = scene.labels[rows, cols].astype(np.int64)
    if (labels == 0).any():
        raise ValueError("train mask selects unlabeled pixels")
    present = np.unique(labels)
    if len(present) < scene.num_classes:
        missing = sorted(set(range(1, scene.num_classes + 1)) - set(present.tolist()))
        raise ValueError(f"training split has no pixels for class(es) {missing}")
    targets = labels - 1
    centers = np.stack([rows, cols], axis=1)

    if cfg.freeze_encoder:
        params = dict(model.head.named_parameters("head."))
        optimizer = Adam(_ParamView(params), lr=cfg.lr)
    else:
        optimizer = Adam(model, lr=cfg.lr)

    history = []
    n = len(centers)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch):
            idx = order[lo:lo + cfg.batch]
            if len(idx) < 2:
                continue  # BN needs at least two samples per batch
            hsi, lid = extract_batch(scene, centers[idx], patch_size)
            model.zero_grad()
            with tape():
                if cfg.freeze_encoder:
                    with no_grad():
                        fused = model.fused_tokens(hsi, lid, train=False)
                    logits = model.head.forward(fused.detach())
                else:
                    logits = model.forward(hsi, lid, train=True)
                loss = ops.cross_entropy_logits(logits, targets[idx])
                backward(loss)
            optimizer.step()
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
    return history


class _ParamView:
    """Adapter exposing a fixed named-parameter subset to the optimizer."""

    def __init__(self, named):
        self._named = named

    def named_parameters(self):
        return self._named.items()


def _eval_logits(model, hsi, lid):
    """Eval-mode logits computed in fixed EVAL_TILE-row tiles."""
    n = hsi.shape[0]
    outs = []
    with no_grad():
        for lo in range(0, n, EVAL_TILE):
            h = hsi[lo:lo + EVAL_TILE]
            l = lid[lo:lo + EVAL_TILE]
            m = h.shape[0]
            if m < EVAL_TILE:  # pad by repeating the last row, discard after
                reps = EVAL_TILE - m
                h = np.concatenate([h, np.repeat(h[-1:], reps, axis=0)])
                l = np.concatenate([l, np.repeat(l[-1:], reps, axis=0)])
            logits = model.forward(h, l, train=False)
            outs.append(logits.data[:m])
    return np.concatenate(outs)


def predict_map(model, scene, batch=256, patch_size=11):
    """Argmax class label (1..C) for every pixel; ties to the smallest index.

    `batch` only bounds how many patches are materialized at once; the
    computed logits are bitwise identical for any batch >= 1.
    """
    h, w = scene.height, scene.width
    coords = np.stack(np.meshgrid(np.arange(h), np.arange(w), indexing="ij"), axis=-1).reshape(-1, 2)
    out = np.empty(h * w, dtype=np.uint16)
    batch = max(int(batch), 1)
    for lo in range(0, len(coords), batch):
        chunk = coords[lo:lo + batch]
        hsi, lid = extract_batch(scene, chunk, patch_size)
        logits = _eval_logits(model, hsi, lid)
        out[lo:lo + len(chunk)] = np.argmax(logits, axis=1).astype(np.uint16) + 1
    return out.reshape(h, w)


def confusion_matrix(pred, truth, mask, num_classes):
    """C x C counts, rows = true class, columns = predicted."""
    t = truth[mask].astype(np.int64)
    p = pred[mask].astype(np.int64)
    if t.size == 0:
        raise ValueError("evaluation mask is empty")
    if (t == 0).any():
        raise ValueError("evaluation mask selects pixels absent from the truth labels")
    if p.min() < 1 or p.max() > num_classes or t.max() > num_classes:
        raise ValueError("labels outside 1..C")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t - 1, p - 1), 1)
    return cm


def evaluate(pred, truth, mask, num_classes):
    """OA, AA (over classes present), Cohen's kappa, per-class accuracy."""
    cm = confusion_matrix(pred, truth, mask, num_classes)
    total = cm.sum()
    po = np.trace(cm) / total
    row = cm.sum(axis=1)
    col = cm.sum(axis=0)
    present = row > 0
    per_class = np.full(num_classes, np.nan)
    per_class[present] = cm.diagonal()[present] / row[present]
    aa = float(np.nanmean(per_class[present]))
    pe = float((row * col).sum()) / float(total) ** 2
    kappa = 1.0 if po == 1.0 else (po - pe) / (1.0 - pe) if pe < 1.0 else 0.0
    return {
        "oa": float(po),
        "aa": aa,
        "kappa": float(kappa),
        "per_class": [None if np.isnan(v) else float(v) for v in per_class],
        "confusion": cm,
    }


def save_metrics(out_dir, metrics):
    os.makedirs(out_dir, exist_ok=True)
    payload = {k: v for k, v in metrics.items() if k != "confusion"}
    with open(os.path.join(out_dir, "metrics.json"), "w") as f:
        json.dump(payload, f, indent=1)
    with open(os.path.join(out_dir, "confusion.csv"), "w", newline="") as f:
        csv.writer(f).writerows(metrics["confusion"].tolist())


# 20 visually distinct colors; class c uses PALETTE[(c-1) % 20], 0 is black.
PALETTE = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
    (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0),
    (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
]


def write_ppm(labels, path):
    """8-bit binary PPM render of a label map with the fixed palette."""
    h, w = labels.shape
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    for cls in np.unique(labels):
        if cls == 0:
            continue
        rgb[labels == cls] = PALETTE[(int(cls) - 1) % len(PALETTE)]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(rgb.tobytes())


def save_model_checkpoint(path, model, step=0):
    arrays = {f"model.{n}": a for n, a in model.state_dict().items()}
    header = {"kind": "classifier", "architecture": architecture_hash(model),
              "step": step, "rng_state": {}}
    save_checkpoint(path, arrays, header)
    return path


def load_model_checkpoint(path, model):
    arrays, header = load_checkpoint(path)
    if header["architecture"] != architecture_hash(model):
        raise ValueError("checkpoint was written by a different architecture")
    model.load_state_dict(split_prefix(arrays, "model"))
    return header


def load_pretrained_trunk(path, model):
    """Initialize encoder + attention from a pretraining checkpoint.

    Loads the query-side arrays bit-exactly; the classifier head keeps its
    fresh initialization.  The projection head is pretraining-only and is
    dropped here.
    """
    arrays, header = load_checkpoint(path)
    if header.get("kind") != "pretrain":
        raise ValueError(f"{path} is not a pretraining checkpoint")
    query = split_prefix(arrays, "query")
    trunk = {n: a for n, a in query.items() if not n.startswith("proj.")}
    own = dict(model.named_parameters())
    own.update(dict(model.named_buffers()))
    expected = {n for n in own if not n.startswith("head.")}
    if expected != set(trunk):
        raise ValueError("pretraining checkpoint does not match the classifier trunk")
    for name, arr in trunk.items():
        target = own[name]
        data = target.data if isinstance(target, Tensor) else target
        if data.shape != arr.shape:
            raise ValueError(f"{name}: shape {arr.shape} does not match {data.shape}")
        data[...] = arr
    return header
