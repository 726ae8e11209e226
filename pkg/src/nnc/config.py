"""Run configuration: defaults, TOML files, --set overrides, seed streams.

All knobs live in one flat dataclass so every value has exactly one
spelling in files, on the command line, and in the resolved JSON echo.
Unknown keys are errors.  All randomness flows from the root seed through
named child streams so ablations touch exactly one stream.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .attention import ModelConfig
from .classifier import FinetuneConfig
from .contrastive import PretrainConfig
from .data import AugmentConfig
from .encoder import reference_config, small_config

STREAM_NAMES = ("data", "init", "augment", "shuffle", "synth", "split")


@dataclass
class RunConfig:
    seed: int = 0
    # model
    preset: str = "small"          # "small" | "reference"
    patch: int = 11
    embed_dim: int = 0             # 0 = preset default (small 32, reference 256)
    heads: int = 5
    proj_dim: int = 128
    gate: bool = True
    bilinear: bool = True
    use_3d: bool = True
    batchnorm: bool = True
    softmax_axis: str = "token"
    pca_components: int = 30
    # pretraining
    tau: float = 0.07
    momentum: float = 0.9
    batch: int = 64
    lr: float = 5e-4
    steps: int = 200
    bn_groups: int = 4
    spatial_sep: int = 12
    queue_capacity: int = 1024
    eq1_literal: bool = False
    neighbor: bool = True
    checkpoint_every: int = 100
    # augmentation
    aug_crop: bool = True
    aug_hflip: bool = True
    aug_vflip: bool = True
    aug_noise: bool = True
    aug_scale_min: float = 0.7
    aug_scale_max: float = 1.0
    aug_noise_sigma: float = 0.01
    # fine-tuning
    ft_batch: int = 128
    ft_lr: float = 5e-4
    ft_epochs: int = 60
    freeze_encoder: bool = False
    # synthetic scenes
    synth_height: int = 64
    synth_width: int = 64
    synth_bands: int = 12
    synth_classes: int = 4
    synth_labels_per_class: int = 10
    synth_noise: float = 0.25


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name, value):
    """Coerce a TOML/CLI value to the field's declared type."""
    ftype = _FIELDS[name].type
    if ftype in ("bool", bool):
        if isinstance(value, bool):
            return value
        s = str(value).lower()
        if s in ("true", "1", "yes"):
            return True
        if s in ("false", "0", "no"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {value!r}")
    if ftype in ("int", int):
        return int(value)
    if ftype in ("float", float):
        return float(value)
    return str(value)


def load_config(path=None, sets=()):
    """Defaults <- TOML file <- --set overrides, rejecting unknown keys."""
    cfg = RunConfig()
    if path:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
        unknown = set(doc) - set(_FIELDS)
        if unknown:
            raise ValueError(f"unknown config key(s) in {path}: {sorted(unknown)}")
        cfg = replace(cfg, **{k: _coerce(k, v) for k, v in doc.items()})
    for item in sets:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ValueError(f"unknown config key: {key}")
        cfg = replace(cfg, **{key: _coerce(key, value.strip())})
    return cfg


def write_resolved(cfg, out_dir, extra=None):
    os.makedirs(out_dir, exist_ok=True)
    payload = dataclasses.asdict(cfg)
    if extra:
        payload.update(extra)
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)


def seed_streams(seed, names=STREAM_NAMES):
    """Named, order-stable child RNG streams spawned from the root seed."""
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def make_encoder_config(cfg, bands):
    if cfg.preset == "reference":
        ec = reference_config()
        if bands != ec.bands:
            raise ValueError(f"reference preset expects {ec.bands} bands after PCA, scene has {bands}")
        if cfg.embed_dim not in (0, ec.embed_dim):
            raise ValueError("reference preset pins embed_dim; leave it at 0")
        if cfg.patch != ec.patch:
            raise ValueError("reference preset pins patch size 11")
    elif cfg.preset == "small":
        ec = small_config(bands=bands, patch=cfg.patch, embed_dim=cfg.embed_dim or 32)
    else:
        raise ValueError(f"unknown preset {cfg.preset!r}")
    ec = replace(ec, use_3d=cfg.use_3d, batchnorm=cfg.batchnorm,
                 expected_trace=() if not cfg.use_3d else ec.expected_trace)
    return ec


def make_model_config(cfg, bands):
    return ModelConfig(encoder=make_encoder_config(cfg, bands), heads=cfg.heads,
                       gate=cfg.gate, softmax_axis=cfg.softmax_axis,
                       bilinear=cfg.bilinear, proj_dim=cfg.proj_dim)


def make_augment_config(cfg):
    return AugmentConfig(crop=cfg.aug_crop, hflip=cfg.aug_hflip, vflip=cfg.aug_vflip,
                         noise=cfg.aug_noise, scale_range=(cfg.aug_scale_min, cfg.aug_scale_max),
                         noise_sigma=cfg.aug_noise_sigma)


def make_pretrain_config(cfg):
    return PretrainConfig(tau=cfg.tau, momentum=cfg.momentum, batch=cfg.batch, lr=cfg.lr,
                          steps=cfg.steps, bn_groups=cfg.bn_groups, spatial_sep=cfg.spatial_sep,
                          queue_capacity=cfg.queue_capacity, seed=cfg.seed,
                          eq1_literal=cfg.eq1_literal, neighbor=cfg.neighbor,
                          augment=make_augment_config(cfg), checkpoint_every=cfg.checkpoint_every)


def make_finetune_config(cfg):
    return FinetuneConfig(batch=cfg.ft_batch, lr=cfg.ft_lr, epochs=cfg.ft_epochs,
                          freeze_encoder=cfg.freeze_encoder)
