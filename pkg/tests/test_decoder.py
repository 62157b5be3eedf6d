import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import det, max_rel_err, numeric_grad
from transmot import tensor as tn
from transmot.assignment import hungarian, matching_score
from transmot.decoder import DecoderParams, ExtendedAssignmentMatrix, decode, hard_assign
from transmot.geometry import build_candidate_graph
from transmot.tensor import Tensor

D_IN, D, H = 6, 16, 4


def params(seed=0, score_path=False):
    return DecoderParams.initialize(np.random.default_rng(seed), D_IN, D, H, score_path=score_path)


def candidates(rng, m, spread=30.0):
    return [det(*rng.uniform(0, spread, 2), *rng.uniform(8, 16, 2), idx=i) for i in range(m)]


def instance(rng, m=5, n=4, t=3):
    dets = candidates(rng, m)
    return build_candidate_graph(dets), rng.normal(size=(m, D_IN)), Tensor(rng.normal(size=(t, n, D))), dets


@pytest.mark.parametrize("score_path", [False, True])
def test_decode_shape_and_row_normalization(rng, score_path):
    g, feats, enc, _ = instance(rng)
    a = decode(g, feats, enc, params(score_path=score_path))
    assert a.logits.shape == (6, 5)
    probs = a.probs
    assert np.allclose(probs[:5].sum(axis=1), 1.0, atol=1e-9)
    assert np.all((probs >= 0) & (probs <= 1))


def test_decode_tracklet_permutation_equivariance(rng):
    p = params()
    g, feats, enc, _ = instance(rng)
    presence = rng.random((4, 3)) < 0.7
    presence[:, -1] = True
    base = decode(g, feats, enc, p, presence).logits.data
    perm = rng.permutation(4)
    permuted = decode(g, feats, Tensor(enc.data[:, perm]), p, presence[perm]).logits.data
    assert np.allclose(permuted[:, :4], base[:, perm], atol=1e-12)
    assert np.allclose(permuted[:, 4], base[:, 4], atol=1e-12)


def test_decode_candidate_permutation_equivariance(rng):
    p = params()
    g, feats, enc, dets = instance(rng)
    base = decode(g, feats, enc, p).logits.data
    perm = rng.permutation(5)
    g2 = build_candidate_graph([dets[i] for i in perm])
    permuted = decode(g2, feats[perm], enc, p).logits.data
    assert np.allclose(permuted[:5], base[perm], atol=1e-12)
    assert np.allclose(permuted[5], base[5], atol=1e-12)


def test_decode_is_deterministic(rng):
    p = params()
    g, feats, enc, _ = instance(rng)
    assert np.array_equal(decode(g, feats, enc, p).logits.data, decode(g, feats, enc, p).logits.data)


def test_decode_empty_sides(rng):
    p = params()
    a = decode(build_candidate_graph([]), np.zeros((0, D_IN)), Tensor(rng.normal(size=(3, 2, D))), p)
    assert a.logits.shape == (1, 3)
    g, feats, _, _ = instance(rng, m=2)
    assert decode(g, feats, Tensor(np.zeros((3, 0, D))), p).logits.shape == (3, 1)
    with pytest.raises(ValueError):
        decode(build_candidate_graph([]), np.zeros((0, D_IN)), Tensor(np.zeros((3, 0, D))), p)


def test_decode_shape_errors(rng):
    p = params()
    g, feats, enc, _ = instance(rng)
    with pytest.raises(ValueError):
        decode(build_candidate_graph([]), feats, enc, p)
    with pytest.raises(ValueError):
        decode(g, feats, Tensor(rng.normal(size=(3, 4, D + 4))), p)


def test_masked_history_step_does_not_change_logits(rng):
    p = params()
    g, feats, enc, _ = instance(rng)
    presence = np.ones((4, 3), dtype=bool)
    presence[1, 0] = False
    base = decode(g, feats, enc, p, presence).logits.data
    enc.data[0, 1] += 10.0
    assert np.array_equal(decode(g, feats, enc, p, presence).logits.data, base)


@pytest.mark.parametrize("score_path", [False, True])
def test_decoder_gradients(rng, score_path):
    p = DecoderParams.initialize(np.random.default_rng(1), D_IN, 8, 2, d_ff=8, score_path=score_path)
    dets = candidates(rng, 3)
    g, feats = build_candidate_graph(dets), rng.normal(size=(3, D_IN))
    enc = Tensor(rng.normal(size=(2, 3, 8)), requires_grad=True)
    r = rng.normal(size=(4, 4))
    params_ = list(p.tensors.values()) + [enc]

    def loss():
        return tn.tsum(decode(g, feats, enc, p).logits * r)

    tn.zero_grad(params_)
    loss().backward()

    def f():
        with tn.no_grad():
            return float(loss().data)

    for t in params_:
        assert max_rel_err(t.grad, numeric_grad(f, t.data)) < 1e-4, t.name


def test_sink_logits_drop_source_column(rng):
    logits = Tensor(rng.normal(size=(3, 4)))
    a = ExtendedAssignmentMatrix(logits)
    assert np.array_equal(a.sink_logits().data, logits.data[2, :3])
    assert np.allclose(a.probs[2], 1 / (1 + np.exp(-logits.data[2])))


# hard assignment ------------------------------------------------------
def _probs_with_block(block):
    m, n = block.shape
    probs = np.zeros((m + 1, n + 1))
    probs[:m, :n] = block
    probs[:m, n] = np.clip(1 - block.sum(axis=1), 0, None)
    return probs


def test_hard_assign_identity_like():
    block = np.full((3, 3), 0.01) + np.eye(3) * 0.97
    r = hard_assign(_probs_with_block(block), 0.5)
    assert r.matches == [(0, 0), (1, 1), (2, 2)]
    assert r.unmatched_candidates == [] and r.unmatched_tracklets == []


def test_hard_assign_uniform_matches_nothing():
    n = 3
    probs = np.full((3, n + 1), 1 / (n + 1))
    probs = np.vstack([probs, np.full(n + 1, 0.2)])
    r = hard_assign(probs, 0.5)
    assert r.matches == []
    assert r.unmatched_candidates == [0, 1, 2] and r.unmatched_tracklets == [0, 1, 2]


def test_hard_assign_reports_new_tracks_and_sink():
    probs = np.array([[0.9, 0.05, 0.05],
                      [0.1, 0.1, 0.8],
                      [0.3, 0.9, 0.0]])
    r = hard_assign(probs, 0.5)
    assert r.matches == [(0, 0)]
    assert r.new_track_candidates == [1]
    assert r.sink_tracklets == [1]
    assert r.unmatched_tracklets == [1]


def test_hard_assign_3x3_brute_force(rng):
    for _ in range(50):
        block = rng.random((3, 3))
        r = hard_assign(_probs_with_block(block), 0.0)
        best = max(itertools.permutations(range(3)), key=lambda s: sum(block[i, s[i]] for i in range(3)))
        assert abs(sum(block[i, j] for i, j in r.matches) - sum(block[i, best[i]] for i in range(3))) < 1e-12


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(0, 1)),
       st.floats(0, 1))
def test_hard_assign_is_a_matching(block, tau):
    r = hard_assign(_probs_with_block(block), tau)
    rows = [i for i, _ in r.matches]
    cols = [j for _, j in r.matches]
    assert len(set(rows)) == len(rows) and len(set(cols)) == len(cols)
    assert all(block[i, j] > tau for i, j in r.matches)
    assert sorted(rows + r.unmatched_candidates) == list(range(block.shape[0]))


# Hungarian ------------------------------------------------------------
def brute_force(cost, maximize):
    m, n = cost.shape
    if m <= n:
        cands = (list(zip(range(m), cols)) for cols in itertools.permutations(range(n), m))
    else:
        cands = (list(zip(rows, range(n))) for rows in itertools.permutations(range(m), n))
    pick = max if maximize else min
    return pick(sum(cost[i, j] for i, j in c) for c in cands)


def test_hungarian_examples():
    assert hungarian(np.array([[1.0, 2.0], [2.0, 1.0]])) == [(0, 0), (1, 1)]
    assert matching_score(np.array([[1.0, 2.0], [2.0, 1.0]]), [(0, 0), (1, 1)]) == 2.0
    dom = np.full((3, 3), 5.0) - np.eye(3) * 4
    assert hungarian(dom) == [(0, 0), (1, 1), (2, 2)]
    assert hungarian(-dom, maximize=True) == [(0, 0), (1, 1), (2, 2)]
    assert hungarian(np.zeros((0, 3))) == []


def test_hungarian_rectangular_matches_brute_force(rng):
    for _ in range(60):
        m, n = rng.integers(1, 6, size=2)
        cost = rng.normal(size=(m, n))
        for maximize in (False, True):
            pairs = hungarian(cost, maximize)
            assert len(pairs) == min(m, n)
            assert abs(matching_score(cost, pairs) - brute_force(cost, maximize)) < 1e-12
