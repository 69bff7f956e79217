import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctan import attention as A
from ctan.attention import (ChannelAttentionParams, TemporalAttentionParams, channel_attention, cta_forward,
                            temporal_attention)
from ctan.tensor import Tensor
from oracles import channel_oracle, temporal_oracle


def f64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def random_params(cls, extent, reduced, r, rng, bias=True):
    return cls(w1=f64(rng.normal(size=(reduced, extent))), w2=f64(rng.normal(size=(extent, reduced))),
               b1=f64(rng.normal(size=reduced)) if bias else None,
               b2=f64(rng.normal(size=extent)) if bias else None, r=r)


def test_channel_example_against_loop_oracle(rng):
    x = rng.normal(size=(2, 4, 8, 3, 3))
    p = random_params(ChannelAttentionParams, 8, 2, 4, rng)
    y, gate = channel_attention(f64(x), p)
    assert gate.shape == (2, 1, 8, 1, 1)
    np.testing.assert_allclose(y.data, channel_oracle(x, p), atol=1e-6)


def test_temporal_example_against_loop_oracle(rng):
    x = rng.normal(size=(2, 8, 4, 3, 3))
    p = random_params(TemporalAttentionParams, 8, 4, 2, rng)
    y, gate = temporal_attention(f64(x), p)
    assert gate.shape == (2, 8, 1, 1, 1)
    np.testing.assert_allclose(y.data, temporal_oracle(x, p), atol=1e-6)


shapes = st.tuples(st.integers(1, 3), st.integers(1, 6), st.sampled_from([2, 4, 6, 8]),
                   st.integers(1, 3), st.integers(1, 3))


@pytest.mark.parametrize("seed", range(100))
def test_oracles_on_many_random_shapes(seed):
    rng = np.random.default_rng(seed)
    n, t, c = rng.integers(1, 4), rng.integers(1, 9), int(rng.choice([2, 4, 6, 8]))
    h, w = rng.integers(1, 4, size=2)
    r = int(rng.choice([r for r in (1, 2) if c % r == 0]))
    bias = bool(seed % 2)
    x = rng.normal(size=(n, t, c, h, w))
    cp = random_params(ChannelAttentionParams, c, c // r, r, rng, bias)
    tp = random_params(TemporalAttentionParams, t, A.temporal_reduced_extent(t, r), r, rng, bias)
    np.testing.assert_allclose(channel_attention(f64(x), cp)[0].data, channel_oracle(x, cp), atol=1e-6)
    np.testing.assert_allclose(temporal_attention(f64(x), tp)[0].data, temporal_oracle(x, tp), atol=1e-6)


def _variant_params(rng, t=4, c=8):
    return (random_params(ChannelAttentionParams, c, c // 4, 4, rng),
            random_params(TemporalAttentionParams, t, A.temporal_reduced_extent(t, 4), 4, rng))


@pytest.mark.parametrize("variant", A.VARIANTS)
def test_forced_gates_give_identity_and_doubling(variant, rng):
    x = Tensor(rng.normal(size=(2, 4, 8, 3, 3)).astype(np.float32))
    cp, tp = _variant_params(rng)
    assert np.array_equal(cta_forward(x, variant, cp, tp, force_gate=0.0).data, x.data)
    expected = x.data * 2 ** len(variant)
    assert np.array_equal(cta_forward(x, variant, cp, tp, force_gate=1.0).data, expected)


def test_single_module_forced_gates(rng):
    x = Tensor(rng.normal(size=(2, 4, 8, 2, 2)).astype(np.float32))
    cp, tp = _variant_params(rng)
    y, _ = channel_attention(x, cp, np.ones((2, 1, 8, 1, 1), np.float32))
    assert np.array_equal(y.data, 2 * x.data)
    y, _ = temporal_attention(x, tp, np.zeros((2, 4, 1, 1, 1), np.float32))
    assert np.array_equal(y.data, x.data)
    with pytest.raises(ValueError):
        channel_attention(x, cp, np.zeros((2, 4, 1, 1, 1), np.float32))


@pytest.mark.parametrize("variant", A.VARIANTS)
def test_shape_preserved(variant, rng):
    cp, tp = _variant_params(rng, t=5)
    x = f64(rng.normal(size=(3, 5, 8, 2, 4)))
    assert cta_forward(x, variant, cp, tp).shape == x.shape


def test_ct_is_manual_composition_and_differs_from_tc(rng):
    cp, tp = _variant_params(rng)
    x = f64(rng.normal(size=(2, 4, 8, 3, 3)))
    manual = temporal_attention(channel_attention(x, cp)[0], tp)[0]
    ct = cta_forward(x, "CT", cp, tp)
    np.testing.assert_array_equal(ct.data, manual.data)
    assert np.max(np.abs(ct.data - cta_forward(x, "TC", cp, tp).data)) > 0


def test_constant_along_time_gives_equal_temporal_gates(rng):
    frame = rng.normal(size=(1, 1, 4, 3, 3))
    x = f64(np.repeat(frame, 8, axis=1))
    p = random_params(TemporalAttentionParams, 8, 4, 2, rng)
    # every frame gets its own output row, so equal gates need a row-shared second layer
    p.w2 = f64(np.repeat(p.w2.data[:1], 8, axis=0))
    p.b2 = f64(np.full(8, p.b2.data[0]))
    _, gate = temporal_attention(x, p)
    assert np.all(gate.data == gate.data[0, 0])


@given(st.integers(0, 2**31), st.floats(-5, 5))
def test_gates_lie_in_open_unit_interval(seed, offset):
    rng = np.random.default_rng(seed)
    x = f64(rng.normal(offset, 1.0, size=(2, 4, 8, 2, 2)))
    cp = A.init_channel_params(8, 4, rng, np.float64)
    tp = A.init_temporal_params(4, 4, rng, np.float64)
    for gate in (channel_attention(x, cp)[1].data, temporal_attention(x, tp)[1].data):
        assert np.all((gate > 0) & (gate < 1))


@given(st.integers(0, 2**31))
def test_channel_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 8, 2, 2))
    p = random_params(ChannelAttentionParams, 8, 2, 4, rng)
    perm = rng.permutation(8)
    q = ChannelAttentionParams(w1=f64(p.w1.data[:, perm]), w2=f64(p.w2.data[perm]), b1=p.b1,
                               b2=f64(p.b2.data[perm]), r=4)
    y = channel_attention(f64(x), p)[0].data
    y_perm = channel_attention(f64(x[:, :, perm]), q)[0].data
    np.testing.assert_allclose(y_perm, y[:, :, perm], atol=1e-12)


@given(st.integers(0, 2**31))
def test_gate_invariance_to_permutations_of_pooled_axes(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 4, 8, 3, 3))
    cp, tp = _variant_params(rng)
    ac = channel_attention(f64(x), cp)[1].data
    at = temporal_attention(f64(x), tp)[1].data
    for axis in (1, 3, 4):
        xp = np.take(x, rng.permutation(x.shape[axis]), axis=axis)
        np.testing.assert_allclose(channel_attention(f64(xp), cp)[1].data, ac, atol=1e-12)
    for axis in (2, 3, 4):
        xp = np.take(x, rng.permutation(x.shape[axis]), axis=axis)
        np.testing.assert_allclose(temporal_attention(f64(xp), tp)[1].data, at, atol=1e-12)


def test_reduced_extents_and_errors(rng):
    assert A.temporal_reduced_extent(16, 4) == 4 and A.temporal_reduced_extent(3, 4) == 1
    with pytest.raises(ValueError):
        A.channel_reduced_extent(6, 4)
    with pytest.raises(ValueError):
        A.init_channel_params(6, 4, rng)
    cp, tp = _variant_params(rng)
    with pytest.raises(ValueError):
        channel_attention(f64(np.ones((1, 4, 6, 2, 2))), cp)
    with pytest.raises(ValueError):
        temporal_attention(f64(np.ones((1, 5, 8, 2, 2))), tp)
    with pytest.raises(ValueError):
        cta_forward(f64(np.ones((1, 4, 8, 2, 2))), "CC", cp, tp)


def test_init_biases_are_zero_and_weights_bounded(rng):
    p = A.init_channel_params(16, 4, rng)
    assert p.w1.shape == (4, 16) and p.w2.shape == (16, 4)
    assert not p.b1.data.any() and not p.b2.data.any()
    assert np.all(np.abs(p.w1.data) <= math.sqrt(1 / 16)) and np.all(np.abs(p.w2.data) <= math.sqrt(1 / 4))
    assert set(A.init_temporal_params(8, 4, rng, bias=False).named()) == {"w1", "w2"}
