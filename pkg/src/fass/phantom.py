"""Synthetic low-contrast abdominal phantoms and raw volume I/O.

A phantom is an ellipsoidal organ with one to three spherical tumors strictly
inside it, sunk into a smoothly textured background.  The organ/background
and tumor/organ intensity offsets are small relative to the texture and
noise, so the class histograms overlap and segmentation has to rely on
context rather than thresholds.

Volume files come as a triple: <name>.json header, <name>.img raw
little-endian float32 intensities, <name>.lbl raw uint8 labels, both in
row-major (D, H, W) order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import FormatError, GenerationError

_f32 = np.float32

VOLUME_FORMAT_VERSION = 1


@dataclass
class Volume:
    intensities: np.ndarray          # float32 [D, H, W]
    labels: np.ndarray               # uint8 [D, H, W]: 0 bg, 1 organ, 2 tumor
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.intensities.shape != self.labels.shape:
            raise FormatError(
                f"intensity/label shapes differ: {self.intensities.shape} vs {self.labels.shape}"
            )


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (96, 96, 96)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    organ_semiaxis_range: tuple[float, float] = (28.0, 38.0)
    organ_intensity: float = 0.55
    background_offset: float = 0.08      # |mu_organ - mu_background|
    contrast_delta: float = 0.05         # |mu_tumor - mu_organ|
    tumor_count_range: tuple[int, int] = (1, 3)
    tumor_radius_range: tuple[float, float] = (8.0, 13.0)
    texture_amp: float = 0.015
    texture_sigma: float = 7.0
    noise_sigma: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        if self.contrast_delta < 0 or self.noise_sigma < 0:
            raise GenerationError("contrast_delta and noise_sigma must be nonnegative")
        if self.tumor_count_range[0] < 1:
            raise GenerationError("at least one tumor is required")


def _ellipsoid_norm(shape, center, axes) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, a in zip(grids, center, axes):
        acc += ((g - c) / a) ** 2
    return acc


def generate_phantom(spec: PhantomSpec) -> Volume:
    """Deterministic phantom for a given spec (pure function of the seed)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    dims = spec.dims

    center = np.array(dims, dtype=np.float64) / 2.0 + rng.uniform(-6, 6, 3)
    axes = rng.uniform(*spec.organ_semiaxis_range, 3)
    organ = _ellipsoid_norm(dims, center, axes) <= 1.0

    labels = np.zeros(dims, dtype=np.uint8)
    labels[organ] = 1

    mu_o = spec.organ_intensity
    mu_b = mu_o - spec.background_offset
    base = np.full(dims, mu_b, dtype=np.float64)
    base[organ] = mu_o

    n_tumors = int(rng.integers(spec.tumor_count_range[0], spec.tumor_count_range[1] + 1))
    min_axis = float(axes.min())
    for _ in range(n_tumors):
        placed = False
        for _ in range(100):
            radius = rng.uniform(*spec.tumor_radius_range)
            # conservative interior check, then exact containment
            u = rng.normal(size=3)
            u /= np.linalg.norm(u)
            rho = rng.uniform(0, 1) ** (1.0 / 3.0)
            margin = max(0.0, 1.0 - radius / min_axis)
            pos = center + u * rho * margin * axes
            tumor = _ellipsoid_norm(dims, pos, (radius, radius, radius)) <= 1.0
            if tumor.any() and not (tumor & ~organ).any():
                # hyperenhancing lesions: contrast_delta above the organ keeps
                # the tumor band clear of the background band (organ - offset)
                labels[tumor] = 2
                base[tumor] = mu_o + spec.contrast_delta
                placed = True
                break
        if not placed:
            raise GenerationError(
                f"could not place a tumor inside the organ after 100 attempts (seed {spec.seed})"
            )

    texture = gaussian_filter(rng.normal(size=dims), spec.texture_sigma)
    std = texture.std()
    if std > 0:
        texture *= spec.texture_amp / std
    noise = rng.normal(0.0, spec.noise_sigma, dims) if spec.noise_sigma > 0 else 0.0
    intensities = (base + texture + noise).astype(_f32)
    return Volume(intensities, labels, spec.spacing_mm)


_ROT_PLANES = ((1, 2), (0, 2), (0, 1))


def rotate90(vol: Volume, axis: int, k: int) -> Volume:
    """Rotate intensities and labels together by k*90 degrees about an axis."""
    plane = _ROT_PLANES[axis]
    return Volume(
        np.ascontiguousarray(np.rot90(vol.intensities, k, axes=plane)),
        np.ascontiguousarray(np.rot90(vol.labels, k, axes=plane)),
        vol.spacing_mm,
    )


def rotate_augment(vol: Volume, rng: np.random.Generator) -> Volume:
    """Random multiple of 90 degrees about a random axis (two rng draws)."""
    axis = int(rng.integers(0, 3))
    k = int(rng.integers(0, 4))
    return rotate90(vol, axis, k)


def write_volume(stem, vol: Volume) -> None:
    stem = Path(stem)
    header = {
        "version": VOLUME_FORMAT_VERSION,
        "dims": list(vol.intensities.shape),
        "spacing_mm": list(vol.spacing_mm),
        "dtype": "f32",
        "label_dtype": "u8",
    }
    stem.with_suffix(".json").write_text(json.dumps(header))
    stem.with_suffix(".img").write_bytes(
        np.ascontiguousarray(vol.intensities, dtype="<f4").tobytes()
    )
    stem.with_suffix(".lbl").write_bytes(
        np.ascontiguousarray(vol.labels, dtype=np.uint8).tobytes()
    )


def read_volume(path) -> Volume:
    stem = Path(path)
    if stem.suffix == ".json":
        stem = stem.with_suffix("")
    try:
        header = json.loads(stem.with_suffix(".json").read_text())
    except FileNotFoundError:
        raise FormatError(f"missing header file {stem.with_suffix('.json')}")
    if header.get("version") != VOLUME_FORMAT_VERSION:
        raise FormatError(f"unknown volume format version {header.get('version')!r}")
    dims = tuple(int(d) for d in header["dims"])
    n = int(np.prod(dims))

    img_bytes = stem.with_suffix(".img").read_bytes()
    if len(img_bytes) != 4 * n:
        raise FormatError(
            f"intensity payload size mismatch: expected {4 * n} bytes, got {len(img_bytes)}"
        )
    lbl_bytes = stem.with_suffix(".lbl").read_bytes()
    if len(lbl_bytes) != n:
        raise FormatError(
            f"label payload size mismatch: expected {n} bytes, got {len(lbl_bytes)}"
        )
    return Volume(
        np.frombuffer(img_bytes, dtype="<f4").reshape(dims).astype(_f32),
        np.frombuffer(lbl_bytes, dtype=np.uint8).reshape(dims).copy(),
        tuple(float(s) for s in header["spacing_mm"]),
    )


def list_volumes(directory) -> list[Path]:
    """Volume stems in a directory, sorted by name for determinism."""
    return sorted(p.with_suffix("") for p in Path(directory).glob("*.json"))
