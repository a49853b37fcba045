"""Single-level 2D wavelet transforms applied per axial slice of a feature map.

Each [C, D, H, W] feature map is decomposed slice by slice (the depth axis is
untouched) into an approximation band L and three detail bands H, V, D at half
the in-slice resolution.  The transform is critically sampled and periodized,
which keeps the subbands at exactly half resolution while giving perfect
reconstruction for every supported basis; odd in-slice dimensions are
symmetric-padded to even first and cropped again after reconstruction.

Filter coefficients are embedded constants from the standard wavelet filter
tables.  They are not trusted blindly: the round-trip property tests guard
them for every basis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import Tensor
from .errors import ConfigError, ShapeError

_SQ2 = float(np.sqrt(2.0))


@dataclass(frozen=True)
class WaveletBasis:
    """Analysis/synthesis filter pairs plus their circular alignment offsets.

    dec_* are the decomposition (analysis) filters, rec_* the reconstruction
    (synthesis) filters; *_start is the support offset of the first tap used
    by the periodized placement rule index = (2i + start + t) mod n.
    """

    name: str
    dec_lo: np.ndarray
    dec_hi: np.ndarray
    rec_lo: np.ndarray
    rec_hi: np.ndarray
    dec_lo_start: int = 0
    dec_hi_start: int = 0
    rec_lo_start: int = 0
    rec_hi_start: int = 0

    @property
    def support(self) -> int:
        return max(len(self.dec_lo), len(self.dec_hi))


def _orthogonal(name: str, dec_lo: list[float]) -> WaveletBasis:
    lo = np.asarray(dec_lo, dtype=np.float32)
    L = len(lo)
    # quadrature mirror: dec_hi[k] = (-1)^(k+1) dec_lo[L-1-k]
    hi = np.array([((-1.0) ** (k + 1)) * lo[L - 1 - k] for k in range(L)], dtype=np.float32)
    # synthesis by transposition uses the analysis filters themselves
    return WaveletBasis(name, lo, hi, rec_lo=lo, rec_hi=hi)


_HAAR = _orthogonal("haar", [1.0 / _SQ2, 1.0 / _SQ2])

_DB2 = _orthogonal(
    "db2",
    [-0.12940952255092145, 0.22414386804185735, 0.836516303737469, 0.48296291314469025],
)

_COIF1 = _orthogonal(
    "coif1",
    [-0.01565572813546454, -0.0727326195128539, 0.38486484686420286,
     0.8525720202122554, 0.3378976624578092, -0.0727326195128539],
)

# CDF 2,4 spline pair with centered supports.  The analysis low-pass is the
# 9-tap filter sqrt(2)*[3/128,-3/64,-1/8,19/64,45/64,19/64,-1/8,-3/64,3/128];
# high-pass filters follow g~[n] = (-1)^n h[1-n], g[n] = (-1)^n h~[1-n].
_B24_LO = _SQ2 * np.array(
    [3 / 128, -3 / 64, -1 / 8, 19 / 64, 45 / 64, 19 / 64, -1 / 8, -3 / 64, 3 / 128],
    dtype=np.float32,
)
_B24_REC_HI = np.array(
    [(-1.0) ** n * _B24_LO[(1 - n) + 4] for n in range(-3, 6)], dtype=np.float32
)
_BIOR24 = WaveletBasis(
    "bior2.4",
    dec_lo=_B24_LO,
    dec_hi=np.array([1 / 4, -1 / 2, 1 / 4], dtype=np.float32) * _SQ2,
    rec_lo=np.array([1 / 4, 1 / 2, 1 / 4], dtype=np.float32) * _SQ2,
    rec_hi=_B24_REC_HI,
    dec_lo_start=-4,
    dec_hi_start=0,
    rec_lo_start=-1,
    rec_hi_start=-3,
)

_BASES = {b.name: b for b in (_HAAR, _DB2, _COIF1, _BIOR24)}

DEFAULT_BASIS = "db2"


def get_basis(name: str) -> WaveletBasis:
    try:
        return _BASES[name]
    except KeyError:
        raise ConfigError(f"unknown wavelet basis {name!r}; choose from {sorted(_BASES)}")


def basis_names() -> list[str]:
    return sorted(_BASES)


@dataclass
class SubbandSet:
    """Per-slice subbands of one feature map plus reconstruction bookkeeping."""

    L: Tensor
    H: Tensor
    V: Tensor
    D: Tensor
    basis: WaveletBasis
    in_slice_shape: tuple[int, int]  # original (H, W) before any odd padding

    def bands(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return self.L, self.H, self.V, self.D


def _pad_last_even(x: Tensor) -> Tensor:
    """Symmetric pad of width 1 on the last axis (edge value repeats)."""
    edge = E.getitem(x, (..., slice(-1, None)))
    return E.concat([x, edge], axis=x.data.ndim - 1)


def _analyze_last(x: Tensor, basis: WaveletBasis) -> tuple[Tensor, Tensor]:
    lo = E.circ_filter_down(x, basis.dec_lo, basis.dec_lo_start)
    hi = E.circ_filter_down(x, basis.dec_hi, basis.dec_hi_start)
    return lo, hi


def _synthesize_last(lo: Tensor, hi: Tensor, basis: WaveletBasis) -> Tensor:
    a = E.circ_up_filter(lo, basis.rec_lo, basis.rec_lo_start)
    d = E.circ_up_filter(hi, basis.rec_hi, basis.rec_hi_start)
    return E.add(a, d)


def dwt_slicewise(feat: Tensor, basis: WaveletBasis) -> SubbandSet:
    """Separable periodized 2D DWT of every axial slice of a [C,D,H,W] map."""
    if feat.data.ndim != 4:
        raise ShapeError(f"dwt_slicewise expects [C,D,H,W], got {feat.shape}")
    _, _, h, w = feat.data.shape
    x = feat
    if w % 2:
        x = _pad_last_even(x)
        w += 1
    if h % 2:
        x = E.moveaxis(x, 2, 3)
        x = _pad_last_even(x)
        x = E.moveaxis(x, 3, 2)
        h += 1
    if h < basis.support or w < basis.support:
        raise ShapeError(
            f"slice dims {h}x{w} smaller than {basis.name} filter support {basis.support}"
        )

    lo_w, hi_w = _analyze_last(x, basis)  # filter along W
    # filter along H: bring the H axis last
    lo_wm = E.moveaxis(lo_w, 2, 3)
    hi_wm = E.moveaxis(hi_w, 2, 3)
    ll, lh = _analyze_last(lo_wm, basis)
    hl, hh = _analyze_last(hi_wm, basis)
    band_l = E.moveaxis(ll, 3, 2)
    band_v = E.moveaxis(lh, 3, 2)   # high along H, low along W
    band_h = E.moveaxis(hl, 3, 2)   # high along W, low along H
    band_d = E.moveaxis(hh, 3, 2)   # high along both
    return SubbandSet(band_l, band_h, band_v, band_d, basis, feat.data.shape[2:])


def idwt_slicewise(bands: SubbandSet) -> Tensor:
    """Perfect-reconstruction inverse of dwt_slicewise (crops odd padding)."""
    basis = bands.basis
    shapes = {b.data.shape for b in bands.bands()}
    if len(shapes) != 1:
        raise ShapeError(f"inconsistent subband shapes: {sorted(shapes)}")
    # invert the H-axis pass first
    ll = E.moveaxis(bands.L, 2, 3)
    lh = E.moveaxis(bands.V, 2, 3)
    hl = E.moveaxis(bands.H, 2, 3)
    hh = E.moveaxis(bands.D, 2, 3)
    lo_w = E.moveaxis(_synthesize_last(ll, lh, basis), 3, 2)
    hi_w = E.moveaxis(_synthesize_last(hl, hh, basis), 3, 2)
    x = _synthesize_last(lo_w, hi_w, basis)
    h0, w0 = bands.in_slice_shape
    if x.data.shape[2] != h0 or x.data.shape[3] != w0:
        x = E.getitem(x, (slice(None), slice(None), slice(0, h0), slice(0, w0)))
    return x
