from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from slimcomm.bev import bilinear_sample_many
from slimcomm.comm import SparseFeatureMessage, halo_extract
from slimcomm.fusion import (
    AttentionLevel,
    AttentionParams,
    GateLevel,
    GateParams,
    aggregate_scales,
    aggregation_projections,
    attention_combine,
    attention_logit_grad,
    attention_logits,
    average_collaborators,
    deformable_cross_attention,
    finite_difference_check,
    gate,
    gated_blend,
    scatter_to_grid,
    softmax,
)
from slimcomm.querygen import HEADS, N_POINTS, STENCIL

POSE = (0.0, 0.0, 0.0)
SHAPES = [(10, 12)]
C = 8


def _msg(sender, cells, values, halo=False):
    return SparseFeatureMessage(sender, 0, POSE, [np.asarray(cells)], [np.asarray(values, dtype=np.float32)], halo)


def test_single_collaborator_is_identity():
    v = np.arange(C, dtype=np.float32)[None] + 1
    nb = average_collaborators([_msg(1, [[3, 4]], v)], SHAPES, (C,))
    assert np.array_equal(nb.values[0][:, 4, 3], v[0])
    assert nb.present[0].sum() == 1


def test_two_collaborators_average():
    a, b = np.full((1, C), 2.0), np.full((1, C), 5.0)
    nb = average_collaborators([_msg(1, [[3, 4]], a), _msg(2, [[3, 4]], b)], SHAPES, (C,))
    assert np.allclose(nb.values[0][:, 4, 3], 3.5)


def test_absent_collaborators_do_not_attenuate():
    a = np.full((1, C), 2.0)
    msgs = [_msg(1, [[3, 4]], a), _msg(2, [[7, 1]], a)]
    assert np.allclose(average_collaborators(msgs, SHAPES, (C,)).values[0][:, 4, 3], 2.0)
    assert np.allclose(average_collaborators(msgs, SHAPES, (C,), divide_by_all=True).values[0][:, 4, 3], 1.0)


def test_halo_blocks_fill_neighbours():
    F = np.random.default_rng(0).normal(size=(C, 10, 12)).astype(np.float32)
    vals = halo_extract(F, [[5, 5]])
    nb = average_collaborators([_msg(1, [[5, 5]], vals, halo=True)], SHAPES, (C,))
    assert np.allclose(nb.values[0][:, 4:7, 4:7], F[:, 4:7, 4:7])
    assert nb.present[0].sum() == 9
    assert np.allclose(nb.lookup(0, (5, 5)), vals[0])


def test_collaborator_permutation_invariance():
    rng = np.random.default_rng(3)
    msgs = [
        _msg(s, rng.integers(0, 10, (6, 2)), rng.normal(size=(6, 9 * C)), halo=True) for s in (4, 1, 7)
    ]
    ref = average_collaborators(msgs, SHAPES, (C,))
    for perm in itertools.permutations(msgs):
        out = average_collaborators(list(perm), SHAPES, (C,))
        assert np.array_equal(out.values[0], ref.values[0])


def _identity_level(c=C, heads=HEADS):
    return AttentionLevel(
        w_value=np.eye(c),
        w_offset=np.zeros((heads * N_POINTS * 2, c)),
        w_logit=np.zeros((heads * N_POINTS, c)),
        w_out=np.eye(c),
        heads=heads,
    )


@pytest.mark.parametrize("point", [0, 4, 8])
def test_one_hot_attention_is_bilinear_sampling(point):
    rng = np.random.default_rng(point)
    vmap = rng.normal(size=(C, 10, 12))
    p = _identity_level()
    nudged = np.array([[4.3, 5.6], [2.0, 3.0]])
    logits = np.full((2, HEADS, N_POINTS), -1e3)
    logits[:, :, point] = 0.0
    out, locs, w = deformable_cross_attention(np.zeros((2, C)), nudged, vmap, p, logits=logits)
    expected = bilinear_sample_many(vmap, nudged + STENCIL[point])
    assert np.allclose(out, expected, atol=1e-6)


def test_zero_neighbourhood_gives_zero_output():
    p = AttentionParams.init((C,), 0).levels[0]
    emb = np.random.default_rng(0).normal(size=(5, C))
    out, _, _ = deformable_cross_attention(emb, np.full((5, 2), 4.0), np.zeros((C, 10, 12)), p)
    assert not np.any(out)


@settings(max_examples=30)
@given(arrays(np.float64, (3, HEADS, N_POINTS), elements=st.floats(-50, 50)))
def test_attention_weights_sum_to_one(logits):
    w = softmax(logits)
    assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(w >= 0)


def test_attention_weights_from_embeddings_sum_to_one():
    p = AttentionParams.init((16,), 2).levels[0]
    emb = np.random.default_rng(1).normal(size=(7, 16)) * 10
    _, _, w = deformable_cross_attention(emb, np.full((7, 2), 3.0), np.ones((16, 8, 8)), p)
    assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_logit_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = AttentionParams.init((C,), seed).levels[0]
    values = rng.normal(size=(3, HEADS, N_POINTS, C // HEADS))
    up = rng.normal(size=(3, C))
    z0 = rng.normal(size=(3, HEADS, N_POINTS))

    def f(z):
        return float(np.sum(up * attention_combine(z, values, p.w_out)))

    err = finite_difference_check(f, lambda z: attention_logit_grad(z, values, p.w_out, up), z0, 1e-4)
    assert err < 1e-4


def test_logits_shape_and_params_validation():
    p = AttentionParams.init((C,), 0).levels[0]
    assert attention_logits(np.zeros((2, C)), p).shape == (2, HEADS, N_POINTS)
    with pytest.raises(ValueError):
        AttentionParams.init((6,), 0)


def test_scatter_examples():
    assert not np.any(scatter_to_grid(np.zeros((0, 3)), np.zeros((0, 2)), (9, 9)))
    v = np.array([[1.0, 2.0, 3.0]])
    g = scatter_to_grid(v, [[5, 7]], (9, 9))
    assert np.array_equal(g[:, 7, 5], v[0])
    assert np.count_nonzero(np.any(g != 0, axis=0)) == 1
    g = scatter_to_grid(np.array([[1.0, 1.0, 1.0], [3.0, 5.0, 7.0]]), [[2, 2], [2, 2]], (9, 9))
    assert np.array_equal(g[:, 2, 2], [2.0, 3.0, 4.0])


@given(arrays(np.int64, (6, 2), elements=st.integers(0, 8)), st.integers(0, 100))
def test_scatter_support_within_anchor_cells(cells, seed):
    feats = np.random.default_rng(seed).normal(size=(6, 4))
    g = scatter_to_grid(feats, cells, (9, 9))
    support = {(int(u), int(v)) for v, u in np.argwhere(np.any(g != 0, axis=0))}
    assert support <= {tuple(map(int, c)) for c in cells}


def _pair(seed, shape=(C, 6, 7)):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, size=shape), rng.uniform(-1, 1, size=shape)


def test_gate_saturation_passthrough():
    # sigmoid(-20) ~ 2e-9 and |Fc - F| <= 2, so the residual stays below 1e-8
    F, Fc = _pair(0)
    w = np.zeros((C, 2 * C))
    assert np.abs(gated_blend(F, Fc, GateLevel(w, np.full(C, -20.0))) - F).max() <= 1e-8
    assert np.abs(gated_blend(F, Fc, GateLevel(w, np.full(C, 20.0))) - Fc).max() <= 1e-8


def test_equal_operands_pass_through_exactly():
    F, _ = _pair(1)
    g = GateParams.init((C,), 5).levels[0]
    assert np.array_equal(gated_blend(F, F.copy(), g), F)


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_gate_is_convex(seed, bias):
    F, Fc = _pair(seed)
    g = GateParams.init((C,), seed, bias).levels[0]
    out = gated_blend(F, Fc, g)
    G = gate(F, Fc, g)
    assert np.all((G > 0) & (G < 1))
    assert np.all(out >= np.minimum(F, Fc) - 1e-12)
    assert np.all(out <= np.maximum(F, Fc) + 1e-12)


def test_gate_shape_mismatch():
    with pytest.raises(ValueError):
        gated_blend(np.zeros((C, 4, 4)), np.zeros((C, 4, 5)), GateParams.init((C,), 0).levels[0])


def test_no_messages_with_passthrough_gate_equals_ego():
    F, _ = _pair(2)
    p = AttentionParams.init((C,), 0).levels[0]
    nb = average_collaborators([], [F.shape[1:]], (C,))
    emb = np.random.default_rng(0).normal(size=(4, C))
    anchors = np.array([[1.0, 1.0], [3.0, 2.0], [5.0, 5.0], [0.0, 4.0]])
    out, _, _ = deformable_cross_attention(emb, anchors, nb.values[0], p)
    F_cav = scatter_to_grid(out, anchors.astype(int), F.shape[1:])
    w = GateParams.init((C,), 0).levels[0].weight
    assert np.array_equal(gated_blend(F, F_cav, GateLevel(w, np.full(C, -1e3))), F)


CH = (4, 8, 16)


def _pyramid(seed):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(c, -(-8 // 2**l), -(-10 // 2**l))) for l, c in enumerate(CH)]


def test_aggregation_examples():
    P = aggregation_projections(CH, 0)
    zero = [np.zeros_like(x) for x in _pyramid(0)]
    assert not np.any(aggregate_scales(zero, P))
    only0 = _pyramid(1)
    only0[1][:] = 0
    only0[2][:] = 0
    assert np.allclose(aggregate_scales(only0, P), np.einsum("ck,khw->chw", P[0], only0[0]))


def test_aggregation_is_linear():
    P = aggregation_projections(CH, 0)
    A, B = _pyramid(2), _pyramid(3)
    lhs = aggregate_scales([a + b for a, b in zip(A, B)], P)
    assert np.allclose(lhs, aggregate_scales(A, P) + aggregate_scales(B, P))


def test_aggregation_uses_nearest_upsampling():
    P = [np.eye(4), np.ones((4, 8)) * 0, np.zeros((4, 16))]
    pyr = [np.zeros((4, 8, 10)), np.zeros((8, 4, 5)), np.zeros((16, 2, 3))]
    pyr[0][:, 3, 3] = 1.0
    out = aggregate_scales(pyr, P)
    assert np.array_equal(out, pyr[0])


def test_finite_difference_check_quadratic():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    err = finite_difference_check(lambda x: float(x @ A @ x), lambda x: 2 * A @ x, np.array([0.7, -1.2]), 1e-4)
    assert err < 1e-8


def test_finite_difference_check_reports_nonfinite():
    assert math.isinf(finite_difference_check(lambda x: float("nan"), lambda x: np.zeros(2), np.zeros(2)))
