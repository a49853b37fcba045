"""Four-level encoder/decoder backbone with segmentation and boundary heads.

The encoder doubles channels and halves every spatial dimension per level;
the decoder mirrors it with nearest-neighbor upsampling and skip
concatenation.  Two 1x1x1 heads read the last decoder feature map: one for
class logits, one for the boundary keypoint probability map.  When built
with a wavelet basis, each encoder transition routes through a
FrequencyEnhancer stage; without one, the network is the plain baseline and
carries no enhancement parameters at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import Tensor
from .errors import ConfigError, ShapeError
from .frequency import FrequencyEnhancer
from .modules import BatchNorm, Module, he_conv
from .wavelets import WaveletBasis

_f32 = np.float32


@dataclass
class SegOutput:
    seg_logits: Tensor       # [num_classes, D, H, W]
    boundary_logits: Tensor  # [1, D, H, W]


class EncoderBlock(Module):
    """Two conv3d + batch norm + relu stages."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        super().__init__()
        self.w1 = self.param("w1", he_conv(rng, cout, cin, 3))
        self.bn1 = self.child("bn1", BatchNorm(cout))
        self.w2 = self.param("w2", he_conv(rng, cout, cout, 3))
        self.bn2 = self.child("bn2", BatchNorm(cout))

    def __call__(self, x: Tensor) -> Tensor:
        h = E.relu(self.bn1(E.conv3d(x, self.w1, 1, 1)))
        return E.relu(self.bn2(E.conv3d(h, self.w2, 1, 1)))


class DecoderBlock(Module):
    """Single conv3d + batch norm + relu after skip concatenation."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        super().__init__()
        self.w = self.param("w", he_conv(rng, cout, cin, 3))
        self.bn = self.child("bn", BatchNorm(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return E.relu(self.bn(E.conv3d(x, self.w, 1, 1)))


class UNet(Module):
    LEVELS = 4

    def __init__(
        self,
        rng: np.random.Generator,
        num_classes: int = 3,
        base_channels: int = 8,
        flfe_basis: WaveletBasis | None = None,
    ):
        super().__init__()
        self.num_classes = num_classes
        self.base_channels = base_channels
        widths = [base_channels * (1 << l) for l in range(self.LEVELS)]

        self.enc = [
            self.child(f"enc{l + 1}", EncoderBlock(1 if l == 0 else widths[l - 1], widths[l], rng))
            for l in range(self.LEVELS)
        ]
        self.flfe: list[FrequencyEnhancer] | None = None
        if flfe_basis is not None:
            self.flfe = [
                self.child(f"flfe{l + 1}", FrequencyEnhancer(widths[l], flfe_basis, rng))
                for l in range(self.LEVELS - 1)
            ]
        self.dec = [
            self.child(f"dec{l + 1}", DecoderBlock(widths[l + 1] + widths[l], widths[l], rng))
            for l in range(self.LEVELS - 1)
        ]
        self.seg_w = self.param("seg_w", he_conv(rng, num_classes, widths[0], 1))
        self.seg_b = self.param("seg_b", np.zeros(num_classes, _f32))
        self.boundary_w = self.param("boundary_w", he_conv(rng, 1, widths[0], 1))
        self.boundary_b = self.param("boundary_b", np.zeros(1, _f32))

    def encode(self, patch: Tensor, flfe_enabled: bool | None = None) -> list[Tensor]:
        """Produce the four per-level feature maps for a [1, D, H, W] patch."""
        if patch.data.ndim != 4 or patch.data.shape[0] != 1:
            raise ShapeError(f"encode expects a [1,D,H,W] patch, got {patch.shape}")
        if any(d % 8 for d in patch.data.shape[1:]):
            raise ConfigError(f"patch dims {patch.data.shape[1:]} must be divisible by 8")
        if flfe_enabled is None:
            flfe_enabled = self.flfe is not None
        if flfe_enabled and self.flfe is None:
            raise ConfigError("network was built without frequency-enhancement stages")

        feats = [self.enc[0](patch)]
        for l in range(1, self.LEVELS):
            nxt = self.enc[l](E.avg_pool2(feats[-1]))
            if flfe_enabled:
                nxt = self.flfe[l - 1](feats[-1], nxt)
            feats.append(nxt)
        return feats

    def decode(self, feats: list[Tensor]) -> SegOutput:
        if len(feats) != self.LEVELS:
            raise ShapeError(f"decode expects {self.LEVELS} feature maps, got {len(feats)}")
        d = feats[-1]
        for l in range(self.LEVELS - 2, -1, -1):
            up = E.nearest_upsample2(d)
            if up.data.shape[1:] != feats[l].data.shape[1:]:
                raise ShapeError(
                    f"skip shape {feats[l].shape} does not match upsampled {up.shape}"
                )
            d = self.dec[l](E.concat([up, feats[l]], axis=0))
        seg = E.add_channel_bias(E.conv3d(d, self.seg_w, 1, 0), self.seg_b)
        boundary = E.add_channel_bias(E.conv3d(d, self.boundary_w, 1, 0), self.boundary_b)
        return SegOutput(seg, boundary)

    def forward(self, patch: Tensor, flfe_enabled: bool | None = None) -> SegOutput:
        return self.decode(self.encode(patch, flfe_enabled))
