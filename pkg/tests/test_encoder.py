import numpy as np
import pytest

from conftest import max_rel_err, numeric_grad
from transmot import tensor as tn
from transmot.encoder import (
    EncoderParams,
    TrackletFeatureTensor,
    embed_source,
    encode,
    graph_multi_head_attention_encoder,
    temporal_encoder_layer,
)
from transmot.geometry import BoundingBox, build_tracklet_graph, scaled_laplacian
from transmot.layers import GraphBatch, cheb_conv, dense_graph_multi_head_attention
from transmot.tensor import Tensor

D_IN, D, H = 6, 16, 4


def params(seed=0, d_in=D_IN, d=D, heads=H):
    return EncoderParams.initialize(np.random.default_rng(seed), d_in, d, heads)


def random_instance(rng, n, t, d_in=D_IN, p_present=0.8, spread=40.0):
    presence = rng.random((n, t)) < p_present
    presence[:, -1] |= ~presence.any(axis=1)
    data = rng.normal(size=(n, t, d_in))
    boxes = [[(i, BoundingBox(*rng.uniform(0, spread, 2), *rng.uniform(8, 20, 2))) for i in range(n) if presence[i, s]]
             for s in range(t)]
    graphs = [build_tracklet_graph(b, num_nodes=n) for b in boxes]
    return TrackletFeatureTensor(data, presence), graphs, boxes


def test_absent_rows_are_zeroed(rng):
    x = TrackletFeatureTensor(rng.normal(size=(2, 3, 4)), [[True, False, True], [False, True, True]])
    assert np.all(x.data[0, 1] == 0) and np.all(x.data[1, 0] == 0)


def test_heads_must_divide_model_dim():
    with pytest.raises(ValueError):
        params(d=10, heads=4)


# embedding ------------------------------------------------------------
def test_embed_zero_weights():
    p = params()
    p["src_w"].data[:] = 0
    x = TrackletFeatureTensor(np.ones((2, 3, D_IN)), np.ones((2, 3), dtype=bool))
    assert np.all(embed_source(x, p).data == 0)


def test_embed_identity():
    p = params(d_in=D, d=D)
    p["src_w"].data = np.eye(D)
    vals = np.random.default_rng(1).normal(size=(1, 1, D))
    out = embed_source(TrackletFeatureTensor(vals, [[True]]), p).data
    assert np.array_equal(out, vals)


def test_embed_masks_absent_slots(rng):
    p = params()
    p["src_b"].data = np.ones(D)
    out = embed_source(TrackletFeatureTensor(rng.normal(size=(2, 2, D_IN)), [[True, False], [True, True]]), p)
    assert np.all(out.data[0, 1] == 0) and np.all(out.data[0, 0] != 0)


def test_embed_gradient(rng):
    p = params()
    x = TrackletFeatureTensor(rng.normal(size=(3, 2, D_IN)), np.ones((3, 2), dtype=bool))
    r = rng.normal(size=(3, 2, D))
    tn.zero_grad([p["src_w"], p["src_b"]])
    tn.tsum(embed_source(x, p) * r).backward()

    def f():
        with tn.no_grad():
            return float((embed_source(x, p).data * r).sum())

    assert max_rel_err(p["src_w"].grad, numeric_grad(f, p["src_w"].data)) < 1e-4
    assert max_rel_err(p["src_b"].grad, numeric_grad(f, p["src_b"].data)) < 1e-4


def test_embed_dimension_mismatch():
    with pytest.raises(ValueError):
        embed_source(TrackletFeatureTensor(np.zeros((1, 1, D_IN + 1)), [[True]]), params())


# ChebConv -------------------------------------------------------------
def _theta(rng, d=4):
    return Tensor(rng.normal(size=(d, d))), Tensor(rng.normal(size=(d, d)))


def test_cheb_theta1_zero_is_graph_independent(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    t0, _ = _theta(rng)
    zero = Tensor(np.zeros((4, 4)))
    boxes = [(i, BoundingBox(i, 0, 2, 2)) for i in range(3)]
    dense_graph = GraphBatch.from_graphs([build_tracklet_graph(boxes)])
    empty_graph = GraphBatch.from_graphs([build_tracklet_graph([], num_nodes=3)])
    a = cheb_conv(x, dense_graph, t0, zero).data
    assert np.allclose(a, cheb_conv(x, empty_graph, t0, zero).data, atol=1e-15)
    assert np.allclose(a, x.data @ t0.data, atol=1e-15)


def test_cheb_single_node(rng):
    g = build_tracklet_graph([(0, BoundingBox(0, 0, 1, 1))])
    assert scaled_laplacian(g).tolist() == [[0.0]]
    x = Tensor(rng.normal(size=(1, 4)))
    t0, t1 = _theta(rng)
    assert np.allclose(cheb_conv(x, GraphBatch.from_graphs([g]), t0, t1).data, x.data @ t0.data, atol=1e-15)


def test_cheb_two_node_path():
    b = BoundingBox(0, 0, 1, 1)
    g = build_tracklet_graph([(0, b), (1, b)])
    x = Tensor([[1.0, 2.0], [3.0, 5.0]])
    out = cheb_conv(x, GraphBatch.from_graphs([g]), Tensor(np.zeros((2, 2))), Tensor(np.eye(2))).data
    lhat = np.array([[0.0, -1.0], [-1.0, 0.0]])
    assert np.array_equal(out, lhat @ x.data)
    assert out.tolist() == [[-3.0, -5.0], [-1.0, -2.0]]


# spatial attention ----------------------------------------------------
def test_disconnected_nodes_attend_only_to_themselves(rng):
    p = params()
    n, t = 3, 2
    graphs = [build_tracklet_graph([(i, BoundingBox(50 * i, 0, 5, 5)) for i in range(n)]) for _ in range(t)]
    fs = Tensor(rng.normal(size=(n, t, D)))
    out, attn, batch = graph_multi_head_attention_encoder(fs, graphs, p, return_weights=True)
    assert np.all(batch.src == batch.dst) and np.all(attn.data == 1.0)
    pre = "sp0_att_"
    expected = (fs.data @ p[pre + "cheb0"].data + p[pre + "cheb_b"].data) @ p[pre + "wo"].data + p[pre + "bo"].data
    assert np.allclose(out.data, expected, atol=1e-12)


def _sparse_vs_dense(p, fs, graphs):
    n, t, _ = fs.shape
    out, attn, batch = graph_multi_head_attention_encoder(fs, graphs, p, return_weights=True)
    ref_out, ref_attn = dense_graph_multi_head_attention(tn.permute(fs, (1, 0, 2)), graphs, p, "sp0_att_", p.heads,
                                                         return_weights=True)
    dense_from_sparse = np.zeros((t, p.heads, n, n))
    g, local_dst, local_src = batch.dst // n, batch.dst % n, batch.src % n
    dense_from_sparse[g, :, local_dst, local_src] = attn.data
    return out.data, np.transpose(ref_out.data, (1, 0, 2)), dense_from_sparse, ref_attn.data


def test_identical_boxes_sparse_matches_dense(rng):
    p = params()
    b = BoundingBox(0, 0, 3, 3)
    graphs = [build_tracklet_graph([(0, b), (1, b)])]
    out, ref, att, ref_att = _sparse_vs_dense(p, Tensor(rng.normal(size=(2, 1, D))), graphs)
    assert np.allclose(att.sum(axis=-1), 1.0, atol=1e-9)
    assert np.abs(out - ref).max() < 1e-10
    assert np.abs(att - ref_att).max() < 1e-10


def test_sparse_attention_exact_zero_and_matches_dense(rng):
    p = params()
    for _ in range(20):
        n, t = rng.integers(1, 9), rng.integers(1, 6)
        x, graphs, _ = random_instance(rng, n, t)
        out, ref, att, ref_att = _sparse_vs_dense(p, Tensor(rng.normal(size=(n, t, D))), graphs)
        adj = np.stack([g.dense() for g in graphs]) > 0
        assert np.all(att[np.broadcast_to(~adj[:, None], att.shape)] == 0.0)
        assert np.all(ref_att[np.broadcast_to(~adj[:, None], att.shape)] == 0.0)
        assert np.allclose(att.sum(axis=-1), 1.0, atol=1e-9)
        assert np.abs(out - ref).max() < 1e-10


def test_disconnected_node_features_do_not_leak(rng):
    p = params()
    boxes = [(0, BoundingBox(0, 0, 5, 5)), (1, BoundingBox(2, 2, 5, 5)), (2, BoundingBox(90, 90, 5, 5))]
    graphs = [build_tracklet_graph(boxes)]
    fs = rng.normal(size=(3, 1, D))
    base = graph_multi_head_attention_encoder(Tensor(fs), graphs, p).data
    fs[2] += rng.normal(size=(1, D)) * 100
    moved = graph_multi_head_attention_encoder(Tensor(fs), graphs, p).data
    assert np.array_equal(base[:2], moved[:2])
    assert not np.allclose(base[2], moved[2])


def test_graph_count_and_size_checks(rng):
    p = params()
    fs = Tensor(rng.normal(size=(2, 2, D)))
    with pytest.raises(ValueError):
        graph_multi_head_attention_encoder(fs, [build_tracklet_graph([], num_nodes=2)], p)
    with pytest.raises(ValueError):
        graph_multi_head_attention_encoder(fs, [build_tracklet_graph([], num_nodes=3)] * 2, p)


# temporal layer -------------------------------------------------------
def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def test_temporal_single_step_is_ffn_norm_pipeline(rng):
    p = params()
    f = rng.normal(size=(3, 1, D))
    out = temporal_encoder_layer(Tensor(f), np.ones((3, 1), dtype=bool), p).data
    a = {k: v.data for k, v in p.tensors.items()}
    x = f + p.positional(1)
    att = (x @ a["tm0_att_wv"]) @ a["tm0_att_wo"] + a["tm0_att_bo"]
    h = _ln(x + att, a["tm0_ln1_g"], a["tm0_ln1_b"])
    ff = np.maximum(h @ a["tm0_ff1_w"] + a["tm0_ff1_b"], 0) @ a["tm0_ff2_w"] + a["tm0_ff2_b"]
    expected = np.transpose(_ln(h + ff, a["tm0_ln2_g"], a["tm0_ln2_b"]), (1, 0, 2))
    assert out.shape == (1, 3, D)
    assert np.allclose(out, expected, atol=1e-12)


def test_temporal_masked_step_does_not_influence_present_steps(rng):
    p = params()
    f = rng.normal(size=(2, 4, D))
    presence = np.array([[True, False, True, True], [True, True, True, True]])
    base = temporal_encoder_layer(Tensor(f), presence, p).data
    f[0, 1] += 50.0
    moved = temporal_encoder_layer(Tensor(f), presence, p).data
    assert np.array_equal(base[[0, 2, 3], 0], moved[[0, 2, 3], 0])
    assert np.array_equal(base[:, 1], moved[:, 1])


def test_temporal_output_index_contract(rng):
    p = params()
    f = rng.normal(size=(3, 4, D))
    presence = np.ones((3, 4), dtype=bool)
    out = temporal_encoder_layer(Tensor(f), presence, p).data
    for n in range(3):
        alone = temporal_encoder_layer(Tensor(f[n:n + 1]), presence[n:n + 1], p).data
        assert np.allclose(out[:, n], alone[:, 0], atol=1e-13)


def test_temporal_rejects_empty_tracklet(rng):
    with pytest.raises(ValueError, match="no present frame"):
        temporal_encoder_layer(Tensor(rng.normal(size=(2, 3, D))), [[True, False, False], [False] * 3], params())


# full encoder ---------------------------------------------------------
def test_encode_shape(rng):
    x, graphs, _ = random_instance(rng, 4, 5)
    assert encode(x, graphs, params()).shape == (5, 4, D)


def test_encode_permutation_equivariant(rng):
    p = params()
    x, graphs, boxes = random_instance(rng, 5, 3, spread=20.0)
    out = encode(x, graphs, p).data
    perm = rng.permutation(5)
    inv = np.argsort(perm)
    xp = TrackletFeatureTensor(x.data[perm], x.presence[perm])
    gp = [build_tracklet_graph([(inv[i], b) for i, b in frame], num_nodes=5) for frame in boxes]
    outp = encode(xp, gp, p).data
    assert np.allclose(outp, out[:, perm], atol=1e-12)


def test_encode_gradients(rng):
    p = EncoderParams.initialize(np.random.default_rng(3), 5, 8, 2, d_ff=8)
    x, graphs, _ = random_instance(rng, 3, 3, d_in=5, spread=15.0)
    # absent slots are key-masked downstream, so only present outputs reach a loss
    r = rng.normal(size=(3, 3, 8)) * x.presence.T[..., None]

    def loss():
        return tn.tsum(encode(x, graphs, p) * r)

    tn.zero_grad(p.tensors.values())
    loss().backward()

    def f():
        with tn.no_grad():
            return float(loss().data)

    for name, t in p.tensors.items():
        assert max_rel_err(t.grad, numeric_grad(f, t.data)) < 1e-4, name
