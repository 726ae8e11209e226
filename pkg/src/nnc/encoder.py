"""Dual-branch multi-source encoder producing token matrices Q, K, V.

The hyperspectral branch stacks three 3D convolutions (spectral kernels
shrink the band axis), reshapes spectral x channel into a 2D channel axis,
and embeds with a padded 3x3 conv.  The elevation branch stacks three 2D
convolutions.  Fusion concatenates both feature maps channel-wise and
embeds with a 1x1 conv.  Every conv is followed by BatchNorm + ReLU
(toggleable).  Token output reshapes each (d, h, w) map to (h*w, d).

Roles: Q = hyperspectral tokens, K = elevation tokens, V = fused tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autograd import Tensor, no_grad
from .nn import BatchNorm, Conv2d, Conv3d, Module


@dataclass
class EncoderConfig:
    bands: int = 30
    patch: int = 11
    hsi_channels: tuple = (8, 16, 32)
    hsi_kernel_depths: tuple = (9, 7, 5)
    spatial_kernel: int = 3
    embed_dim: int = 256
    lidar_channels: tuple = (64, 128, 256)
    use_3d: bool = True                  # False swaps the HSI branch to 2D convs
    hsi2d_channels: tuple = (64, 128)    # leading channels of the 2D variant
    batchnorm: bool = True
    expected_trace: tuple = ()           # optional startup assertion

    @property
    def token_side(self):
        return self.patch - 3 * (self.spatial_kernel - 1)

    @property
    def tokens(self):
        return self.token_side ** 2

    @property
    def spectral_out(self):
        d = self.bands
        for kd in self.hsi_kernel_depths:
            d -= kd - 1
        return d

    @property
    def reshape_channels(self):
        return self.hsi_channels[-1] * self.spectral_out

    def validate(self):
        if self.token_side < 1:
            raise ValueError(f"patch {self.patch} too small for three {self.spatial_kernel}x{self.spatial_kernel} convs")
        # the 2D variant also derives its pre-embed width from spectral_out
        # so the two branch flavors stay parameter-comparable
        if self.spectral_out < 1:
            raise ValueError(f"bands {self.bands} too few for spectral kernels {self.hsi_kernel_depths}")
        if self.lidar_channels[-1] != self.embed_dim:
            raise ValueError("last elevation-branch channel count must equal embed_dim")
        if len(self.hsi_channels) != 3 or len(self.lidar_channels) != 3:
            raise ValueError("both branches use exactly three conv layers")
        trace = self.shape_trace()
        if self.expected_trace and tuple(trace) != tuple(self.expected_trace):
            raise ValueError(f"architecture drift: shape trace {trace} != expected {list(self.expected_trace)}")
        return trace

    def shape_trace(self):
        """Per-layer output shapes as (h, w, [depth,] channels) rows."""
        k = self.spatial_kernel
        rows = []
        side = self.patch
        depth = self.bands
        if self.use_3d:
            for ch, kd in zip(self.hsi_channels, self.hsi_kernel_depths):
                side -= k - 1
                depth -= kd - 1
                rows.append(("hsi_conv", (side, side, depth, ch)))
            rows.append(("hsi_reshape", (side, side, depth * self.hsi_channels[-1])))
        else:
            chans = tuple(self.hsi2d_channels) + (self.reshape_channels,)
            for ch in chans:
                side -= k - 1
                rows.append(("hsi_conv", (side, side, ch)))
        rows.append(("hsi_embed", (side, side, self.embed_dim)))
        lside = self.patch
        for ch in self.lidar_channels:
            lside -= k - 1
            rows.append(("lidar_conv", (lside, lside, ch)))
        rows.append(("fuse_embed", (lside, lside, self.embed_dim)))
        return rows


# The reference architecture at full scale; the trace doubles as a startup
# conformance check against config drift.
REFERENCE_TRACE = (
    ("hsi_conv", (9, 9, 22, 8)),
    ("hsi_conv", (7, 7, 16, 16)),
    ("hsi_conv", (5, 5, 12, 32)),
    ("hsi_reshape", (5, 5, 384)),
    ("hsi_embed", (5, 5, 256)),
    ("lidar_conv", (9, 9, 64)),
    ("lidar_conv", (7, 7, 128)),
    ("lidar_conv", (5, 5, 256)),
    ("fuse_embed", (5, 5, 256)),
)


def reference_config():
    return EncoderConfig(expected_trace=REFERENCE_TRACE)


def small_config(bands=12, patch=11, embed_dim=32):
    """Desk-scale variant for synthetic scenes; same topology, fewer channels."""
    return EncoderConfig(
        bands=bands, patch=patch,
        hsi_channels=(4, 8, 16), hsi_kernel_depths=(3, 3, 3),
        embed_dim=embed_dim, lidar_channels=(8, 16, embed_dim),
        hsi2d_channels=(8, 16),
    )


class _ConvBlock(Module):
    """conv -> [BN] -> ReLU, for either Conv2d or Conv3d."""

    def __init__(self, conv, channels, batchnorm, dtype):
        super().__init__()
        self.conv = conv
        self.bn = BatchNorm(channels, dtype=dtype) if batchnorm else None

    def forward(self, x, train):
        y = self.conv.forward(x)
        if self.bn is not None:
            y = self.bn.forward(y, train)
        return ops.relu(y)


class HsiBranch(Module):
    def __init__(self, cfg, rng, dtype):
        super().__init__()
        k = cfg.spatial_kernel
        if cfg.use_3d:
            in_ch = 1
            for i, (ch, kd) in enumerate(zip(cfg.hsi_channels, cfg.hsi_kernel_depths), 1):
                block = _ConvBlock(Conv3d(in_ch, ch, (kd, k, k), rng, bias=not cfg.batchnorm, dtype=dtype),
                                   ch, cfg.batchnorm, dtype)
                setattr(self, f"conv{i}", block)
                in_ch = ch
        else:
            chans = tuple(cfg.hsi2d_channels) + (cfg.reshape_channels,)
            in_ch = cfg.bands
            for i, ch in enumerate(chans, 1):
                block = _ConvBlock(Conv2d(in_ch, ch, k, rng, bias=not cfg.batchnorm, dtype=dtype),
                                   ch, cfg.batchnorm, dtype)
                setattr(self, f"conv{i}", block)
                in_ch = ch
        self.embed = _ConvBlock(Conv2d(cfg.reshape_channels, cfg.embed_dim, k, rng, padding=(k - 1) // 2,
                                       bias=not cfg.batchnorm, dtype=dtype),
                                cfg.embed_dim, cfg.batchnorm, dtype)
        self.use_3d = cfg.use_3d
        self.cfg = cfg

    def forward(self, x, train):
        """x: (N, B, p, p) -> feature map (N, d, side, side)."""
        if self.use_3d:
            n, b, p, _ = x.shape if isinstance(x, np.ndarray) else x.data.shape
            y = ops.reshape(x, (n, 1, b, p, p))
            y = self.conv1.forward(y, train)
            y = self.conv2.forward(y, train)
            y = self.conv3.forward(y, train)
            # merge channel and spectral axes: (N, C, D, h, w) -> (N, C*D, h, w)
            _, c, d, h, w = y.data.shape
            y = ops.reshape(y, (n, c * d, h, w))
        else:
            y = self.conv1.forward(x, train)
            y = self.conv2.forward(y, train)
            y = self.conv3.forward(y, train)
        return self.embed.forward(y, train)


class LidarBranch(Module):
    def __init__(self, cfg, rng, dtype):
        super().__init__()
        k = cfg.spatial_kernel
        in_ch = 1
        for i, ch in enumerate(cfg.lidar_channels, 1):
            block = _ConvBlock(Conv2d(in_ch, ch, k, rng, bias=not cfg.batchnorm, dtype=dtype),
                                   ch, cfg.batchnorm, dtype)
            setattr(self, f"conv{i}", block)
            in_ch = ch

    def forward(self, x, train):
        y = self.conv1.forward(x, train)
        y = self.conv2.forward(y, train)
        return self.conv3.forward(y, train)


class FusionEmbed(Module):
    def __init__(self, cfg, rng, dtype):
        super().__init__()
        self.embed = _ConvBlock(Conv2d(2 * cfg.embed_dim, cfg.embed_dim, 1, rng, bias=not cfg.batchnorm, dtype=dtype),
                                cfg.embed_dim, cfg.batchnorm, dtype)

    def forward(self, fh, fl, train):
        return self.embed.forward(ops.concat([fh, fl], axis=1), train)


def to_tokens(fmap):
    """(N, d, h, w) feature map -> (N, h*w, d) token matrix."""
    n, d, h, w = fmap.data.shape if isinstance(fmap, Tensor) else fmap.shape
    return ops.reshape(ops.transpose(fmap, (0, 2, 3, 1)), (n, h * w, d))


class MultiSourceEncoder(Module):
    """Maps patch pairs to (Q, K, V) token matrices, each (N, c, d)."""

    def __init__(self, cfg, rng, dtype=np.float32):
        super().__init__()
        cfg.validate()  # fail fast on config drift before any allocation
        self.cfg = cfg
        self.hsi = HsiBranch(cfg, rng, dtype)
        self.lidar = LidarBranch(cfg, rng, dtype)
        self.fuse = FusionEmbed(cfg, rng, dtype)

    def forward(self, hsi, lidar, train, groups=1):
        """groups > 1 runs BN statistics over equal batch sub-groups."""
        if groups == 1:
            fh = self.hsi.forward(hsi, train)
            fl = self.lidar.forward(lidar, train)
            fv = self.fuse.forward(fh, fl, train)
            return to_tokens(fh), to_tokens(fl), to_tokens(fv)
        n = hsi.shape[0]
        if n % groups:
            raise ValueError(f"batch {n} not divisible into {groups} BN groups")
        step = n // groups
        qs, ks, vs = [], [], []
        for i in range(0, n, step):
            q, k, v = self.forward(hsi[i:i + step], lidar[i:i + step], train)
            qs.append(q)
            ks.append(k)
            vs.append(v)
        return ops.concat(qs, axis=0), ops.concat(ks, axis=0), ops.concat(vs, axis=0)


def encode_hsi(encoder, hsi_patch):
    """Single-patch hyperspectral tokens (c, d); eval-mode statistics."""
    with no_grad():
        fmap = encoder.hsi.forward(hsi_patch[None].astype(np.float32, copy=False), train=False)
        return to_tokens(fmap).data[0]


def encode_lidar(encoder, lidar_patch):
    """Single-patch elevation tokens (c, d); eval-mode statistics."""
    with no_grad():
        fmap = encoder.lidar.forward(lidar_patch[None].astype(np.float32, copy=False), train=False)
        return to_tokens(fmap).data[0]


def fuse_embed(encoder, hsi_tokens, lidar_tokens):
    """Fuse single-patch token matrices into the value tokens (c, d)."""
    c, d = hsi_tokens.shape
    side = int(round(np.sqrt(c)))

    def to_map(tok):
        return np.ascontiguousarray(tok.reshape(1, side, side, d).transpose(0, 3, 1, 2))

    with no_grad():
        fused = encoder.fuse.forward(to_map(hsi_tokens), to_map(lidar_tokens), train=False)
        return to_tokens(fused).data[0]


def encoder_forward(encoder, pair):
    """Single PatchPair -> (Q, K, V) arrays, each (c, d); eval mode."""
    with no_grad():
        q, k, v = encoder.forward(pair.hsi[None], pair.lidar[None], train=False)
        return q.data[0], k.data[0], v.data[0]


def parameter_count(cfg):
    """Closed-form trainable-parameter count for an encoder config.

    Tests pin analytic ablation deltas against module.parameter_count().
    """
    k = cfg.spatial_kernel
    # conv bias exists only without BN (BN's shift makes it redundant);
    # with BN each layer instead carries 2*ch scale/shift parameters.
    extra = 2 if cfg.batchnorm else 1
    total = 0
    if cfg.use_3d:
        in_ch = 1
        for ch, kd in zip(cfg.hsi_channels, cfg.hsi_kernel_depths):
            total += ch * in_ch * kd * k * k + extra * ch
            in_ch = ch
    else:
        in_ch = cfg.bands
        for ch in tuple(cfg.hsi2d_channels) + (cfg.reshape_channels,):
            total += ch * in_ch * k * k + extra * ch
            in_ch = ch
    total += cfg.embed_dim * cfg.reshape_channels * k * k + extra * cfg.embed_dim
    in_ch = 1
    for ch in cfg.lidar_channels:
        total += ch * in_ch * k * k + extra * ch
        in_ch = ch
    total += cfg.embed_dim * 2 * cfg.embed_dim + extra * cfg.embed_dim
    return total
