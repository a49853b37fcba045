"""Foreground-aware background sampling and feature-distribution divergence.

A background sub-region is rejection-sampled from each training patch so its
normalized overlap with the foreground stays below alpha; both the full patch
and the background region are encoded by the shared encoder, and the loss
pushes their channel distributions apart (the loss is the exponential of the
negative KL divergence, so minimizing it maximizes the divergence), weighted
by how much of the volume's foreground the patch contains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import Tensor
from .errors import ConfigError, SamplingExhaustedError, ShapeError

_f32 = np.float32


@dataclass
class FAConfig:
    alpha: float = 0.1
    bg_size: tuple[int, int, int] = (32, 32, 32)
    max_attempts: int = 1000
    detach_background: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0,1], got {self.alpha}")
        if any(s < 1 for s in self.bg_size):
            raise ConfigError(f"background size must be positive, got {self.bg_size}")
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be at least 1")


@dataclass
class PatchSample:
    patch: Tensor            # [1, D, H, W]
    label: np.ndarray        # integer mask [D, H, W]
    origin: tuple[int, int, int] = (0, 0, 0)


@dataclass
class BackgroundPatch:
    region: Tensor           # [1, d, h, w]
    origin: tuple[int, int, int]
    overlap_fraction: float
    attempts: int = 1


def intersect_count(a: np.ndarray, b: np.ndarray) -> int:
    """|a and b| as a voxel count for two same-frame masks."""
    if a.shape != b.shape:
        raise ShapeError(f"masks live in different frames: {a.shape} vs {b.shape}")
    return int(np.count_nonzero(np.logical_and(a, b)))


def overlap_fraction(fore: np.ndarray, origin: tuple[int, int, int], bg_size) -> float:
    """Foreground fraction of the background window anchored at origin."""
    x, y, z = origin
    d, h, w = bg_size
    window = fore[x : x + d, y : y + h, z : z + w]
    return float(np.count_nonzero(window)) / float(d * h * w)


def sample_background(sample: PatchSample, cfg: FAConfig, rng: np.random.Generator) -> BackgroundPatch:
    """Uniformly sample a background origin until the overlap constraint holds.

    Raises SamplingExhaustedError after cfg.max_attempts rejected draws, in
    which case the caller skips the divergence loss for this patch.
    """
    cfg.validate()
    dims = sample.patch.data.shape[1:]
    d, h, w = cfg.bg_size
    if d > dims[0] or h > dims[1] or w > dims[2]:
        raise ConfigError(f"background size {cfg.bg_size} exceeds patch dims {dims}")
    fore = sample.label > 0
    lims = (dims[0] - d, dims[1] - h, dims[2] - w)
    for attempt in range(1, cfg.max_attempts + 1):
        origin = tuple(int(rng.integers(0, lim + 1)) for lim in lims)
        frac = overlap_fraction(fore, origin, cfg.bg_size)
        if frac < cfg.alpha:
            x, y, z = origin
            region = E.getitem(
                sample.patch,
                (slice(None), slice(x, x + d), slice(y, y + h), slice(z, z + w)),
            )
            return BackgroundPatch(region, origin, frac, attempt)
    raise SamplingExhaustedError(
        f"no background window with overlap < {cfg.alpha} in {cfg.max_attempts} attempts"
    )


def feature_distribution(feat: Tensor) -> Tensor:
    """Channel distribution of a feature map: spatial mean, then softmax."""
    if feat.data.ndim != 4:
        raise ShapeError(f"feature_distribution expects [C,D,H,W], got {feat.shape}")
    if feat.data.shape[0] < 2:
        raise ShapeError("feature_distribution needs at least 2 channels")
    pooled = E.mean_(feat, axis=(1, 2, 3))
    return E.softmax(pooled, axis=0)


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """D(p || q) with both arguments floored at 1e-8 inside the logs."""
    if p.data.shape != q.data.shape:
        raise ShapeError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    log_ratio = E.sub(E.log(E.clamp(p, 1e-8, 1.0)), E.log(E.clamp(q, 1e-8, 1.0)))
    return E.sum_(E.mul(p, log_ratio))


def adaptive_weight(sample: PatchSample, volume_foreground_count: int) -> float:
    """Fraction of the volume's foreground contained in the patch, capped at 1."""
    if volume_foreground_count <= 0:
        return 0.0
    patch_fg = int(np.count_nonzero(sample.label > 0))
    return min(1.0, patch_fg / float(volume_foreground_count))


def fa_loss(f_full: Tensor, f_bg: Tensor, omega: float, detach_background: bool = False) -> Tensor:
    """omega * exp(-KL(full || background)); lies in [0, omega]."""
    if detach_background:
        f_bg = E.stop_gradient(f_bg)
    p = feature_distribution(f_full)
    q = feature_distribution(f_bg)
    div = kl_divergence(p, q)
    return E.scale(E.exp(E.scale(div, -1.0)), omega)
