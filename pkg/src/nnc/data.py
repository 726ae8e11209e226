"""Scene ingestion, PCA band reduction, patch geometry, and augmentations.

A scene is a co-registered triple: hyperspectral cube (H, W, B), elevation
map (H, W), and label map (H, W) with 0 = unlabeled and 1..C = classes.
On-disk format: NPY arrays named by a JSON manifest `dataset.json` with
keys {hsi, lidar, labels, num_classes, class_names}.  Optional train/test
masks live next to it as train_mask.npy / test_mask.npy.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass
class Scene:
    """Standardized scene; patch extraction reflect-pads lazily per size."""

    hsi: np.ndarray          # (H, W, B) float32
    lidar: np.ndarray        # (H, W) float32
    labels: np.ndarray       # (H, W) uint16, 0 = unlabeled
    num_classes: int
    class_names: list
    explained_variance: np.ndarray | None = None   # set by pca_reduce
    _pad_cache: dict = field(default_factory=dict, repr=False)

    @property
    def height(self):
        return self.hsi.shape[0]

    @property
    def width(self):
        return self.hsi.shape[1]

    @property
    def bands(self):
        return self.hsi.shape[2]

    def padded(self, patch_size):
        """Reflect-padded (hsi, lidar) views for centered patch extraction."""
        key = int(patch_size)
        if key not in self._pad_cache:
            half = key // 2
            hp = np.pad(self.hsi, ((half, half), (half, half), (0, 0)), mode="reflect")
            lp = np.pad(self.lidar, ((half, half), (half, half)), mode="reflect")
            self._pad_cache[key] = (hp, lp)
        return self._pad_cache[key]


@dataclass
class PatchPair:
    center: tuple
    hsi: np.ndarray    # (B, p, p)
    lidar: np.ndarray  # (1, p, p)


@dataclass
class AugmentConfig:
    crop: bool = True
    hflip: bool = True
    vflip: bool = True
    noise: bool = True
    scale_range: tuple = (0.7, 1.0)
    noise_sigma: float = 0.01

    @classmethod
    def disabled(cls):
        return cls(crop=False, hflip=False, vflip=False, noise=False)


def standardize_bands(arr, name="band"):
    """Per-band (trailing-axis) standardization over all pixels.

    Constant bands become zeros with a warning instead of dividing by ~0.
    """
    arr = np.asarray(arr, dtype=np.float64)
    channeled = arr.ndim == 3
    flat = arr.reshape(-1, arr.shape[-1]) if channeled else arr.reshape(-1, 1)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    degenerate = std < 1e-8
    if degenerate.any():
        warnings.warn(f"{name}: {int(degenerate.sum())} constant channel(s) standardized to zeros")
        std = np.where(degenerate, 1.0, std)
    if channeled:
        out = (arr - mean[None, None, :]) / std[None, None, :]
        out[..., degenerate] = 0.0
    else:
        out = (arr - mean.item()) / std.item()
        if degenerate.item():
            out[...] = 0.0
    return out.astype(np.float32)


def load_scene(dataset_dir):
    """Load and standardize a scene from dataset.json + NPY files."""
    manifest_path = os.path.join(dataset_dir, "dataset.json")
    with open(manifest_path) as f:
        manifest = json.load(f)
    hsi = np.load(os.path.join(dataset_dir, manifest["hsi"]))
    lidar = np.load(os.path.join(dataset_dir, manifest["lidar"]))
    labels = np.load(os.path.join(dataset_dir, manifest["labels"])).astype(np.uint16)
    if hsi.shape[:2] != lidar.shape or hsi.shape[:2] != labels.shape:
        raise ValueError(
            f"co-registration error: hsi {hsi.shape[:2]}, lidar {lidar.shape}, labels {labels.shape}"
        )
    if not (np.isfinite(hsi).all() and np.isfinite(lidar).all()):
        raise ValueError("non-finite values in scene inputs")
    num_classes = int(manifest["num_classes"])
    if labels.max(initial=0) > num_classes:
        raise ValueError(f"label {labels.max()} exceeds num_classes {num_classes}")
    return Scene(
        hsi=standardize_bands(hsi, "hsi"),
        lidar=standardize_bands(lidar, "lidar"),
        labels=labels,
        num_classes=num_classes,
        class_names=list(manifest["class_names"]),
    )


def load_split(dataset_dir):
    """Boolean (train_mask, test_mask) written next to the dataset."""
    train = np.load(os.path.join(dataset_dir, "train_mask.npy"))
    test = np.load(os.path.join(dataset_dir, "test_mask.npy"))
    return train.astype(bool), test.astype(bool)


def pca_reduce(scene, n_components=30):
    """Project the cube onto the top principal components of band covariance.

    Covariance is accumulated in float64 (ddof=1); eigenvectors get a
    deterministic sign (largest-magnitude entry positive).  The projection
    is pure (no rescaling), so per-component variances equal the
    eigenvalues; the explained-variance ratios are stored on the scene.
    """
    b = scene.bands
    if n_components > b:
        raise ValueError(f"n_components {n_components} exceeds band count {b}")
    x = scene.hsi.reshape(-1, b).astype(np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    for j in range(eigvecs.shape[1]):
        col = eigvecs[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            eigvecs[:, j] = -col
    comps = eigvecs[:, :n_components]
    projected = (xc @ comps).reshape(scene.height, scene.width, n_components)
    total = eigvals.sum()
    ratios = eigvals[:n_components] / total if total > 0 else np.zeros(n_components)
    return replace(scene, hsi=projected.astype(np.float32),
                   explained_variance=ratios, _pad_cache={})


def extract_patch(scene, center, patch_size=11):
    """Centered patch pair; reflect padding makes every pixel a valid center."""
    r, c = int(center[0]), int(center[1])
    if not (0 <= r < scene.height and 0 <= c < scene.width):
        raise ValueError(f"center {center} outside scene {scene.height}x{scene.width}")
    hp, lp = scene.padded(patch_size)
    hsi = hp[r:r + patch_size, c:c + patch_size].transpose(2, 0, 1).copy()
    lidar = lp[r:r + patch_size, c:c + patch_size][None].copy()
    return PatchPair(center=(r, c), hsi=hsi, lidar=lidar)


def extract_batch(scene, centers, patch_size=11):
    """Stacked (hsi (N,B,p,p), lidar (N,1,p,p)) float32 arrays."""
    hs, ls = [], []
    for rc in centers:
        pair = extract_patch(scene, rc, patch_size)
        hs.append(pair.hsi)
        ls.append(pair.lidar)
    return np.stack(hs), np.stack(ls)


def neighbor_offsets(patch_size=11, min_overlap=0.8):
    """All (dy, dx) != (0,0) whose shifted patch overlaps by > min_overlap.

    Overlap fraction of two axis-aligned p x p squares offset by (dy, dx)
    is (p-|dy|)(p-|dx|)/p^2; enumerated, not hard-coded.
    """
    p = patch_size
    out = []
    for dy in range(-p, p + 1):
        for dx in range(-p, p + 1):
            if dy == 0 and dx == 0:
                continue
            frac = max(p - abs(dy), 0) * max(p - abs(dx), 0) / (p * p)
            if frac > min_overlap:
                out.append((dy, dx))
    return out


def sample_pretrain_batch(scene, n, s, rng, patch_size=11, min_overlap=0.8):
    """Anchor PatchPairs plus one neighbor center per anchor.

    Anchors are drawn uniformly with rejection so all pairwise Chebyshev
    distances are >= s (batch mates act as negatives).  Each neighbor
    center is uniform over the overlap offsets that stay inside the scene.
    """
    offsets = np.array(neighbor_offsets(patch_size, min_overlap))
    h, w = scene.height, scene.width
    centers = []
    budget = 1000 * n
    tries = 0
    while len(centers) < n:
        if tries >= budget:
            raise ValueError(
                f"could not place {n} centers with min Chebyshev distance {s} "
                f"on a {h}x{w} scene after {budget} proposals; reduce the batch "
                f"size or the spatial separation s"
            )
        tries += 1
        r = int(rng.integers(0, h))
        c = int(rng.integers(0, w))
        if all(max(abs(r - r0), abs(c - c0)) >= s for r0, c0 in centers):
            centers.append((r, c))
    neighbor_centers = []
    for r, c in centers:
        ok = offsets[(offsets[:, 0] + r >= 0) & (offsets[:, 0] + r < h)
                     & (offsets[:, 1] + c >= 0) & (offsets[:, 1] + c < w)]
        dy, dx = ok[rng.integers(0, len(ok))]
        neighbor_centers.append((r + int(dy), c + int(dx)))
    pairs = [extract_patch(scene, rc, patch_size) for rc in centers]
    return pairs, np.array(neighbor_centers)


def _resize_bilinear(img, out_size):
    """Channel-wise bilinear resize (C, h, w) -> (C, out, out), align-corners."""
    c, h, w = img.shape
    p = out_size
    if (h, w) == (p, p):
        return img.copy()

    def coords(src, dst):
        if dst == 1:
            return np.zeros(1)
        return np.arange(dst) * ((src - 1) / (dst - 1))

    ys, xs = coords(h, p), coords(w, p)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(img.dtype)
    wx = (xs - x0).astype(img.dtype)
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy)[None, :, None] + bot * wy[None, :, None]


def augment(pair, rng, config):
    """Resized crop, horizontal flip, vertical flip, Gaussian noise, in order.

    One geometric transform is drawn per pair and applied to both
    modalities; noise is drawn independently per modality.  With every
    stage disabled this is the identity.
    """
    hsi, lidar = pair.hsi, pair.lidar
    p = hsi.shape[-1]
    if config.crop:
        lo, hi = config.scale_range
        u = rng.uniform(lo, hi)
        side = int(np.clip(round(p * np.sqrt(u)), 1, p))
        top = int(rng.integers(0, p - side + 1))
        left = int(rng.integers(0, p - side + 1))
        hsi = _resize_bilinear(hsi[:, top:top + side, left:left + side], p)
        lidar = _resize_bilinear(lidar[:, top:top + side, left:left + side], p)
    else:
        hsi = hsi.copy()
        lidar = lidar.copy()
    if config.hflip and rng.random() < 0.5:
        hsi = hsi[:, :, ::-1]
        lidar = lidar[:, :, ::-1]
    if config.vflip and rng.random() < 0.5:
        hsi = hsi[:, ::-1, :]
        lidar = lidar[:, ::-1, :]
    hsi = np.ascontiguousarray(hsi, dtype=np.float32)
    lidar = np.ascontiguousarray(lidar, dtype=np.float32)
    if config.noise:
        hsi = hsi + rng.normal(0.0, config.noise_sigma, hsi.shape).astype(np.float32)
        lidar = lidar + rng.normal(0.0, config.noise_sigma, lidar.shape).astype(np.float32)
    return PatchPair(center=pair.center, hsi=hsi, lidar=lidar)


def augment_batch(pairs, rng, config):
    """Augment a list of pairs into stacked (hsi, lidar) arrays."""
    out = [augment(p, rng, config) for p in pairs]
    return np.stack([p.hsi for p in out]), np.stack([p.lidar for p in out])


def substitute_half_keys(key_hsi, key_lidar, nb_hsi, nb_lidar, rng):
    """Swap floor(N/2) uniformly chosen key views for their neighbor views.

    Returns new arrays plus the boolean substitution mask.
    """
    n = key_hsi.shape[0]
    if nb_hsi.shape[0] != n or nb_lidar.shape[0] != n or key_lidar.shape[0] != n:
        raise ValueError("substitute_half_keys: batch length mismatch")
    mask = np.zeros(n, dtype=bool)
    picks = rng.choice(n, size=n // 2, replace=False)
    mask[picks] = True
    out_h = key_hsi.copy()
    out_l = key_lidar.copy()
    out_h[mask] = nb_hsi[mask]
    out_l[mask] = nb_lidar[mask]
    return out_h, out_l, mask


def label_split(scene, labels_per_class, rng):
    """Train/test masks: labels_per_class training pixels per class, rest test."""
    train = np.zeros(scene.labels.shape, dtype=bool)
    for cls in range(1, scene.num_classes + 1):
        rows, cols = np.nonzero(scene.labels == cls)
        if len(rows) < labels_per_class:
            raise ValueError(f"class {cls} has {len(rows)} pixels, needs {labels_per_class}")
        picks = rng.choice(len(rows), size=labels_per_class, replace=False)
        train[rows[picks], cols[picks]] = True
    test = (scene.labels > 0) & ~train
    return train, test
