"""Frequency-enhancement stage: attention, CBAM gate, aggregation."""

import numpy as np
import pytest

import fass.engine as E
from fass.engine import Tape, Tensor
from fass.errors import ShapeError
from fass.frequency import CBAMGate, CrossBandAttention, FrequencyEnhancer, cross_attention_enhance
from fass.wavelets import dwt_slicewise, get_basis

from conftest import assert_gradients_match


def make_stage(rng, channels=4):
    return FrequencyEnhancer(channels, get_basis("db2"), rng)


class TestCrossAttention:
    def test_zero_details_propagate_to_zero(self, rng):
        att = CrossBandAttention(4, rng)  # biases initialize to zero
        x = Tensor(np.zeros((4, 2, 16, 16), np.float32))
        bands = dwt_slicewise(x, get_basis("db2"))
        enhanced = cross_attention_enhance(bands, att)
        for band in (enhanced.H, enhanced.V, enhanced.D):
            assert np.abs(band.data).max() == 0.0

    def test_attention_rows_sum_to_one(self, rng):
        att = CrossBandAttention(4, rng)
        q = Tensor(rng.normal(size=(2, 9, 4)).astype(np.float32))
        k = Tensor(rng.normal(size=(2, 18, 4)).astype(np.float32))
        scores = E.scale(E.bmm(E.reshape(E.matmul(E.reshape(q, (18, 4)), att.wq), (2, 9, 4)),
                               E.moveaxis(E.reshape(E.matmul(E.reshape(k, (36, 4)), att.wk), (2, 18, 4)), 1, 2)),
                         0.5)
        attn = E.softmax(scores, axis=2)
        assert np.abs(attn.data.sum(axis=2) - 1.0).max() < 1e-6

    def test_output_shapes_match_input(self, rng):
        att = CrossBandAttention(4, rng)
        x = Tensor(rng.normal(size=(4, 3, 16, 16)).astype(np.float32))
        bands = dwt_slicewise(x, get_basis("db2"))
        enhanced = cross_attention_enhance(bands, att)
        for before, after in zip(bands.bands(), enhanced.bands()):
            assert before.data.shape == after.data.shape

    def test_approximation_band_untouched(self, rng):
        att = CrossBandAttention(4, rng)
        x = Tensor(rng.normal(size=(4, 2, 16, 16)).astype(np.float32))
        bands = dwt_slicewise(x, get_basis("db2"))
        enhanced = cross_attention_enhance(bands, att)
        assert enhanced.L is bands.L


class TestCBAM:
    def test_gate_range_and_shape(self, rng):
        gate = CBAMGate(4, rng)
        x = Tensor(rng.normal(size=(4, 4, 6, 6)).astype(np.float32))
        p = gate(x)
        assert p.data.shape == x.data.shape
        assert (p.data > 0.0).all() and (p.data < 1.0).all()

    def test_channel_gate_spatial_permutation_invariant(self, rng):
        gate = CBAMGate(3, rng)
        x = rng.normal(size=(3, 2, 4, 4)).astype(np.float32)
        base = gate.channel_gate(Tensor(x)).data
        perm = x.reshape(3, -1)[:, rng.permutation(32)].reshape(3, 2, 4, 4)
        shuffled = gate.channel_gate(Tensor(perm)).data
        assert np.allclose(base, shuffled, atol=1e-6)


class TestAggregate:
    def test_forced_zero_gate_erases_enhanced_path(self, rng):
        stage = make_stage(rng)
        nxt = Tensor(rng.normal(size=(8, 4, 4, 4)).astype(np.float32))
        enh_a = Tensor(rng.normal(size=(4, 8, 8, 8)).astype(np.float32))
        enh_b = Tensor(rng.normal(size=(4, 8, 8, 8)).astype(np.float32))
        zero_gate = Tensor(np.zeros((4, 8, 8, 8), np.float32))
        out_a = stage.aggregate(nxt, enh_a, zero_gate)
        out_b = stage.aggregate(nxt, enh_b, zero_gate)
        assert np.array_equal(out_a.data, out_b.data)

    def test_output_shape_matches_next_level(self, rng):
        stage = make_stage(rng)
        nxt = Tensor(rng.normal(size=(8, 4, 4, 4)).astype(np.float32))
        enh = Tensor(rng.normal(size=(4, 8, 8, 8)).astype(np.float32))
        gate = Tensor(rng.uniform(0.2, 0.8, (4, 8, 8, 8)).astype(np.float32))
        assert stage.aggregate(nxt, enh, gate).data.shape == nxt.data.shape

    def test_resolution_mismatch_rejected(self, rng):
        stage = make_stage(rng)
        nxt = Tensor(rng.normal(size=(8, 4, 4, 4)).astype(np.float32))
        enh = Tensor(rng.normal(size=(4, 4, 4, 4)).astype(np.float32))
        gate = Tensor(np.full((4, 4, 4, 4), 0.5, np.float32))
        with pytest.raises(ShapeError):
            stage.aggregate(nxt, enh, gate)

    def test_gradient_reaches_enhanced_features(self, rng):
        stage = make_stage(rng)
        nxt = Tensor(rng.normal(size=(8, 2, 2, 2)).astype(np.float32))
        enh = Tensor(rng.normal(size=(4, 4, 4, 4)).astype(np.float32), requires_grad=True)
        gate = Tensor(rng.uniform(0.2, 0.8, (4, 4, 4, 4)).astype(np.float32))
        with Tape() as tape:
            tape.backward(E.sum_(stage.aggregate(nxt, enh, gate)))
        assert enh.grad is not None and np.abs(enh.grad).max() > 0


def test_full_stage_gradcheck(rng):
    """dwt -> cross attention -> idwt -> CBAM -> aggregate vs finite differences."""
    stage = FrequencyEnhancer(1, get_basis("db2"), rng)
    feat = Tensor(rng.normal(size=(1, 2, 8, 8)).astype(np.float32), requires_grad=True)
    nxt = Tensor(rng.normal(size=(2, 1, 4, 4)).astype(np.float32))
    probe = Tensor(rng.normal(size=(2, 1, 4, 4)).astype(np.float32))
    stage.set_training(False)  # freeze batch-norm running buffers for re-evaluation

    assert_gradients_match(lambda: E.sum_(E.mul(stage(feat, nxt), probe)), [feat])
