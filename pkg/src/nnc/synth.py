"""Seeded synthetic scene generator for end-to-end tests and demos.

Class regions are the argmax of C independently smoothed Gaussian random
fields, which yields contiguous blobs over the whole raster.  Each class
gets a random spectral signature (scaled to keep pairwise margins well
above the pixel noise), a low-frequency brightness field for spatially
correlated appearance, and a distinct elevation offset.  Everything is a
pure function of the spec, so identical specs produce identical bytes.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import label_split


@dataclass
class SynthSpec:
    height: int = 64
    width: int = 64
    bands: int = 12
    classes: int = 4
    seed: int = 7
    labels_per_class: int = 10
    noise: float = 0.25            # per-band pixel noise sigma
    blob_sigma: float = 6.0        # spatial smoothing of the class fields
    amplitude: float = 1.0         # spectral signature scale
    brightness: float = 0.2        # low-frequency multiplicative variation
    elevation_step: float = 1.0    # per-class elevation offset
    elevation_noise: float = 0.15

    def validate(self):
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.labels_per_class < 1:
            raise ValueError("labels_per_class must be >= 1")


def _class_regions(spec, rng):
    """Blob labels 1..C covering the scene; retries until no class is tiny."""
    need = max(4 * spec.labels_per_class, 40)
    for _ in range(20):
        fields = rng.standard_normal((spec.classes, spec.height, spec.width))
        smoothed = np.stack([gaussian_filter(f, spec.blob_sigma) for f in fields])
        labels = smoothed.argmax(axis=0).astype(np.uint16) + 1
        counts = np.bincount(labels.ravel(), minlength=spec.classes + 1)[1:]
        if counts.min() >= need:
            return labels
    raise ValueError(
        f"could not draw {spec.classes} blob regions with >= {need} pixels each; "
        f"reduce labels_per_class or blob_sigma"
    )


def _signatures(spec, rng):
    """Class spectra with pairwise distance >= 2x the noise sigma."""
    for _ in range(20):
        sig = rng.standard_normal((spec.classes, spec.bands)) * spec.amplitude
        dists = [np.linalg.norm(sig[i] - sig[j])
                 for i in range(spec.classes) for j in range(i + 1, spec.classes)]
        if min(dists) >= 2 * spec.noise:
            return sig, float(min(dists))
    raise RuntimeError("could not draw class signatures separated by 2 sigma; "
                       "raise amplitude or lower noise")


def generate_scene(spec):
    """Returns (hsi (H,W,B) float32, lidar (H,W) float32, labels (H,W) uint16)."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    labels = _class_regions(spec, rng)
    signatures, margin = _signatures(spec, rng)

    brightness = gaussian_filter(rng.standard_normal((spec.height, spec.width)), spec.blob_sigma)
    scale = brightness.std()
    if scale > 0:
        brightness = brightness / scale * spec.brightness
    base = signatures[labels - 1]                                # (H, W, B)
    hsi = base * (1.0 + brightness[..., None])
    hsi = hsi + rng.normal(0.0, spec.noise, hsi.shape)

    terrain = gaussian_filter(rng.standard_normal((spec.height, spec.width)), spec.blob_sigma)
    tscale = terrain.std()
    if tscale > 0:
        terrain = terrain / tscale * spec.elevation_noise
    lidar = (labels - 1).astype(np.float64) * spec.elevation_step + terrain
    lidar = lidar + rng.normal(0.0, spec.elevation_noise, lidar.shape)

    check = np.linalg.norm(signatures[:, None] - signatures[None, :], axis=-1)
    np.fill_diagonal(check, np.inf)
    assert check.min() >= 2 * spec.noise, "signature margin self-check failed"
    return hsi.astype(np.float32), lidar.astype(np.float32), labels


def write_dataset(out_dir, spec):
    """Write NPY arrays, dataset.json, and train/test masks; returns paths."""
    hsi, lidar, labels = generate_scene(spec)
    os.makedirs(out_dir, exist_ok=True)
    np.save(os.path.join(out_dir, "hsi.npy"), hsi)
    np.save(os.path.join(out_dir, "lidar.npy"), lidar)
    np.save(os.path.join(out_dir, "labels.npy"), labels)
    manifest = {
        "hsi": "hsi.npy",
        "lidar": "lidar.npy",
        "labels": "labels.npy",
        "num_classes": spec.classes,
        "class_names": [f"class_{i}" for i in range(1, spec.classes + 1)],
    }
    with open(os.path.join(out_dir, "dataset.json"), "w") as f:
        json.dump(manifest, f, indent=1)

    class _SceneView:
        def __init__(self):
            self.labels = labels
            self.num_classes = spec.classes

    split_rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(1)[0])
    train, test = label_split(_SceneView(), spec.labels_per_class, split_rng)
    np.save(os.path.join(out_dir, "train_mask.npy"), train)
    np.save(os.path.join(out_dir, "test_mask.npy"), test)
    with open(os.path.join(out_dir, "synth_spec.json"), "w") as f:
        json.dump(asdict(spec), f, indent=1)
    return out_dir
