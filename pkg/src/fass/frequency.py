"""Feature-level frequency enhancement.

Encoder features are decomposed slice-wise into wavelet subbands; the three
detail bands then enhance each other through cross attention (queries from
one band, keys and values from the concatenation of the other two), the
enhanced map is reconstructed, gated by a residual CBAM attention map, and
aggregated into the next encoder level.
"""

from __future__ import annotations

import numpy as np

from . import engine as E
from .engine import Tensor
from .errors import ShapeError
from .modules import BatchNorm, Module, he_conv, linear_init
from .wavelets import SubbandSet, WaveletBasis, dwt_slicewise, idwt_slicewise

_f32 = np.float32


def _to_tokens(x: Tensor) -> Tensor:
    """[C, D, h, w] -> [D, h*w, C]: one token per in-slice position."""
    c, d, h, w = x.data.shape
    return E.reshape(E.moveaxis(x, 0, 3), (d, h * w, c))


def _from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    d, _, c = t.data.shape
    return E.moveaxis(E.reshape(t, (d, h, w, c)), 3, 0)


def _linear(t3: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Apply a [Cin, Cout] projection to the channel axis of [B, T, Cin]."""
    b, tt, cin = t3.data.shape
    y = E.matmul(E.reshape(t3, (b * tt, cin)), weight)
    if bias is not None:
        y = E.add(y, E.expand(E.reshape(bias, (1, bias.size)), y.data.shape))
    return E.reshape(y, (b, tt, weight.data.shape[1]))


def _silu(u: Tensor) -> Tensor:
    return E.mul(u, E.sigmoid(u))


class CrossBandAttention(Module):
    """Shared query/key projections plus per-band fusion weights W_H, W_V, W_D."""

    def __init__(self, channels: int, rng: np.random.Generator, key_dim: int | None = None):
        super().__init__()
        self.channels = channels
        self.key_dim = key_dim or channels
        self.wq = self.param("wq", linear_init(rng, channels, self.key_dim))
        self.wk = self.param("wk", linear_init(rng, channels, self.key_dim))
        for band in "hvd":
            setattr(self, f"w_{band}", self.param(f"w_{band}", linear_init(rng, channels, channels)))
            setattr(self, f"b_{band}", self.param(f"b_{band}", np.zeros(channels, _f32)))

    def _enhance_one(self, query_band: Tensor, others: Tensor, w: Tensor, b: Tensor) -> Tensor:
        q = _linear(query_band, self.wq)
        k = _linear(others, self.wk)
        scores = E.scale(E.bmm(q, E.moveaxis(k, 1, 2)), 1.0 / np.sqrt(self.key_dim))
        attn = E.softmax(scores, axis=2)
        ctx = E.bmm(attn, others)
        return _silu(_linear(E.add(query_band, ctx), w, b))

    def __call__(self, bands: SubbandSet) -> SubbandSet:
        shapes = {bands.H.data.shape, bands.V.data.shape, bands.D.data.shape}
        if len(shapes) != 1:
            raise ShapeError(f"detail bands disagree in shape: {sorted(shapes)}")
        c, _, h, w = bands.H.data.shape
        if c != self.channels:
            raise ShapeError(f"attention built for {self.channels} channels, got {c}")
        th = _to_tokens(bands.H)
        tv = _to_tokens(bands.V)
        td = _to_tokens(bands.D)
        eh = self._enhance_one(th, E.concat([tv, td], axis=1), self.w_h, self.b_h)
        ev = self._enhance_one(tv, E.concat([th, td], axis=1), self.w_v, self.b_v)
        ed = self._enhance_one(td, E.concat([th, tv], axis=1), self.w_d, self.b_d)
        return SubbandSet(
            bands.L,
            _from_tokens(eh, h, w),
            _from_tokens(ev, h, w),
            _from_tokens(ed, h, w),
            bands.basis,
            bands.in_slice_shape,
        )


def cross_attention_enhance(bands: SubbandSet, params: CrossBandAttention) -> SubbandSet:
    return params(bands)


class ResBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.w1 = self.param("w1", he_conv(rng, channels, channels, 3))
        self.bn1 = self.child("bn1", BatchNorm(channels))
        self.w2 = self.param("w2", he_conv(rng, channels, channels, 3))
        self.bn2 = self.child("bn2", BatchNorm(channels))

    def __call__(self, x: Tensor) -> Tensor:
        h = E.relu(self.bn1(E.conv3d(x, self.w1, 1, 1)))
        h = self.bn2(E.conv3d(h, self.w2, 1, 1))
        return E.relu(E.add(x, h))


class CBAMGate(Module):
    """Channel-then-spatial attention producing a map strictly inside (0,1)."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 2):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.w1 = self.param("mlp_w1", linear_init(rng, channels, hidden))
        self.w2 = self.param("mlp_w2", linear_init(rng, hidden, channels))
        self.spatial_w = self.param("spatial_w", he_conv(rng, 1, 2, 3))
        self.spatial_b = self.param("spatial_b", np.zeros(1, _f32))

    def channel_gate(self, x: Tensor) -> Tensor:
        c = x.data.shape[0]
        avg = E.reshape(E.mean_(x, axis=(1, 2, 3)), (1, c))
        mx = E.reshape(E.max_reduce(x, axis=(1, 2, 3)), (1, c))
        a = E.matmul(E.relu(E.matmul(avg, self.w1)), self.w2)
        m = E.matmul(E.relu(E.matmul(mx, self.w1)), self.w2)
        return E.sigmoid(E.add(a, m))  # [1, C]

    def __call__(self, x: Tensor) -> Tensor:
        c = x.data.shape[0]
        mc = E.expand(E.reshape(self.channel_gate(x), (c, 1, 1, 1)), x.data.shape)
        gated = E.mul(x, mc)
        avg_map = E.mean_(gated, axis=0, keepdims=True)
        max_map = E.max_reduce(gated, axis=0, keepdims=True)
        stacked = E.concat([avg_map, max_map], axis=0)
        ms = E.sigmoid(E.add_channel_bias(E.conv3d(stacked, self.spatial_w, 1, 1), self.spatial_b))
        return E.mul(mc, E.expand(ms, x.data.shape))


class FrequencyEnhancer(Module):
    """One encoder-transition enhancement stage for a level with C channels."""

    def __init__(self, channels: int, basis: WaveletBasis, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        self.basis = basis
        self.attention = self.child("attention", CrossBandAttention(channels, rng))
        self.res = self.child("res", ResBlock(channels, rng))
        self.cbam = self.child("cbam", CBAMGate(channels, rng))
        self.fuse_w = self.param("fuse_w", he_conv(rng, 2 * channels, 3 * channels, 1))
        self.fuse_b = self.param("fuse_b", np.zeros(2 * channels, _f32))

    def enhance(self, feat: Tensor) -> Tensor:
        """Wavelet decomposition, detail cross attention, reconstruction.

        The approximation band passes through untouched (only H, V, D are
        enhanced), so the low-frequency structure survives verbatim.
        """
        bands = dwt_slicewise(feat, self.basis)
        return idwt_slicewise(self.attention(bands))

    def gate(self, enhanced: Tensor) -> Tensor:
        return self.cbam(self.res(enhanced))

    def aggregate(self, feat_next: Tensor, enhanced: Tensor, gate_map: Tensor) -> Tensor:
        if gate_map.data.shape != enhanced.data.shape:
            raise ShapeError(
                f"gate map {gate_map.shape} does not match enhanced feature {enhanced.shape}"
            )
        ns = feat_next.data.shape[1:]
        es = enhanced.data.shape[1:]
        if tuple(2 * n for n in ns) != tuple(es):
            raise ShapeError(
                f"aggregate needs a 2x resolution step, got next {ns} vs enhanced {es}"
            )
        gated = E.avg_pool2(E.mul(enhanced, gate_map))
        fused = E.conv3d(E.concat([feat_next, gated], axis=0), self.fuse_w, 1, 0)
        return E.add_channel_bias(fused, self.fuse_b)

    def __call__(self, feat: Tensor, feat_next: Tensor) -> Tensor:
        enhanced = self.enhance(feat)
        return self.aggregate(feat_next, enhanced, self.gate(enhanced))


def cbam_gate(feat: Tensor, gate: CBAMGate) -> Tensor:
    return gate(feat)


def flfe_aggregate(stage: FrequencyEnhancer, feat_next: Tensor, enhanced: Tensor, gate_map: Tensor) -> Tensor:
    return stage.aggregate(feat_next, enhanced, gate_map)
