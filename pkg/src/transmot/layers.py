"""Building blocks shared by the encoder and decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .geometry import SparseWeightedGraph, laplacian_edges, scaled_laplacian
from .tensor import Tensor


@dataclass
class GraphBatch:
    """Several graphs laid side by side as one block-diagonal edge list.

    Graph ``b`` owns node ids ``b * nodes_per_graph ... (b + 1) * nodes_per_graph - 1``.
    """

    num_nodes: int
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    lap_src: np.ndarray
    lap_dst: np.ndarray
    lap_coef: np.ndarray
    graphs: tuple[SparseWeightedGraph, ...]

    @classmethod
    def from_graphs(cls, graphs: Sequence[SparseWeightedGraph]) -> "GraphBatch":
        graphs = tuple(graphs)
        sizes = {g.num_nodes for g in graphs}
        if len(sizes) != 1:
            raise ValueError(f"graphs in a batch must share a node count, got {sorted(sizes)}")
        n = sizes.pop()
        src, dst, w, ls, ld, lc = [], [], [], [], [], []
        for b, g in enumerate(graphs):
            off = b * n
            src.append(g.src + off)
            dst.append(g.dst + off)
            w.append(g.weight)
            s, d, c = laplacian_edges(g)
            ls.append(s + off)
            ld.append(d + off)
            lc.append(c)
        cat = np.concatenate
        return cls(n * len(graphs), cat(src), cat(dst), cat(w), cat(ls), cat(ld), cat(lc), graphs)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = tn.matmul(x, w)
    return y if b is None else y + b


def feed_forward(x: Tensor, p, prefix: str) -> Tensor:
    h = tn.relu(linear(x, p[prefix + "ff1_w"], p[prefix + "ff1_b"]))
    return linear(h, p[prefix + "ff2_w"], p[prefix + "ff2_b"])


def cheb_conv(x: Tensor, batch: GraphBatch, theta0: Tensor, theta1: Tensor, bias: Tensor | None = None) -> Tensor:
    """Order-2 Chebyshev graph convolution ``x Theta0 + L_hat x Theta1 (+ b)``."""
    gathered = tn.take_rows(x, batch.lap_src) * batch.lap_coef[:, None]
    lx = tn.segment_sum(gathered, batch.lap_dst, batch.num_nodes)
    return linear(x, theta0, bias) + tn.matmul(lx, theta1)


def cheb_conv_dense(x: Tensor, graph: SparseWeightedGraph, theta0: Tensor, theta1: Tensor,
                    bias: Tensor | None = None) -> Tensor:
    lhat = Tensor(scaled_laplacian(graph))
    return linear(x, theta0, bias) + tn.matmul(tn.matmul(lhat, x), theta1)


def graph_attention_weights(x: Tensor, batch: GraphBatch, wq: Tensor, wk: Tensor, heads: int) -> Tensor:
    """Per-edge, per-head attention, normalized over each query node's neighbours.

    Returns ``[E, H]``; edge ``e`` carries the weight node ``dst[e]`` gives to
    node ``src[e]``.
    """
    n, d = x.shape
    dh = d // heads
    q = tn.reshape(linear(x, wq), (n, heads, dh))
    k = tn.reshape(linear(x, wk), (n, heads, dh))
    qe = tn.take_rows(q, batch.dst)
    ke = tn.take_rows(k, batch.src)
    scores = tn.tsum(qe * ke, axis=-1) * (batch.weight[:, None] / math.sqrt(dh))
    return tn.segment_softmax(scores, batch.dst, n)


def graph_multi_head_attention(x: Tensor, batch: GraphBatch, p, prefix: str, heads: int,
                               return_weights: bool = False):
    """Edge-restricted multi-head attention with ChebConv values.

    ``x`` is ``[num_nodes, D]`` in batch node order.
    """
    n, d = x.shape
    dh = d // heads
    attn = graph_attention_weights(x, batch, p[prefix + "wq"], p[prefix + "wk"], heads)
    v = cheb_conv(x, batch, p[prefix + "cheb0"], p[prefix + "cheb1"], p[prefix + "cheb_b"])
    v = tn.reshape(v, (n, heads, dh))
    msg = tn.reshape(attn, attn.shape + (1,)) * tn.take_rows(v, batch.src)
    out = tn.reshape(tn.segment_sum(msg, batch.dst, n), (n, d))
    out = linear(out, p[prefix + "wo"], p[prefix + "bo"])
    return (out, attn) if return_weights else out


def dense_graph_multi_head_attention(x: Tensor, graphs: Sequence[SparseWeightedGraph], p, prefix: str,
                                     heads: int, return_weights: bool = False):
    """Reference path: full N x N scores per graph with masking by the adjacency.

    ``x`` is ``[G, N, D]`` with one slice per graph.
    """
    g_count, n, d = x.shape
    dh = d // heads
    adj = np.stack([g.dense() for g in graphs])  # [G, N, N]
    q = tn.permute(tn.reshape(linear(x, p[prefix + "wq"]), (g_count, n, heads, dh)), (0, 2, 1, 3))
    k = tn.permute(tn.reshape(linear(x, p[prefix + "wk"]), (g_count, n, heads, dh)), (0, 2, 3, 1))
    scores = tn.matmul(q, k) * (adj[:, None] / math.sqrt(dh))
    attn = tn.masked_softmax(scores, (adj > 0)[:, None])
    v = tn.stack([cheb_conv_dense(x[i], graphs[i], p[prefix + "cheb0"], p[prefix + "cheb1"], p[prefix + "cheb_b"])
                  for i in range(g_count)])
    v = tn.permute(tn.reshape(v, (g_count, n, heads, dh)), (0, 2, 1, 3))
    out = tn.reshape(tn.permute(tn.matmul(attn, v), (0, 2, 1, 3)), (g_count, n, d))
    out = linear(out, p[prefix + "wo"], p[prefix + "bo"])
    return (out, attn) if return_weights else out


def multi_head_self_attention(x: Tensor, key_mask: np.ndarray, p, prefix: str, heads: int) -> Tensor:
    """Standard self-attention over axis 1 of ``x`` ``[B, S, D]``; ``key_mask`` is ``[B, S]``."""
    b, s, d = x.shape
    dh = d // heads

    def split(t):
        return tn.permute(tn.reshape(t, (b, s, heads, dh)), (0, 2, 1, 3))

    q = split(linear(x, p[prefix + "wq"]))
    k = split(linear(x, p[prefix + "wk"]))
    v = split(linear(x, p[prefix + "wv"]))
    scores = tn.matmul(q, tn.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    attn = tn.masked_softmax(scores, np.asarray(key_mask, dtype=bool)[:, None, None, :])
    out = tn.reshape(tn.permute(tn.matmul(attn, v), (0, 2, 1, 3)), (b, s, d))
    return linear(out, p[prefix + "wo"], p[prefix + "bo"])


def sinusoidal_encoding(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# ----------------------------------------------------------------------
# parameter initialisation helpers
# ----------------------------------------------------------------------
def init_graph_attention(rng, d: int, prefix: str) -> dict[str, np.ndarray]:
    return {
        prefix + "wq": glorot(rng, d, d),
        prefix + "wk": glorot(rng, d, d),
        prefix + "cheb0": glorot(rng, d, d),
        prefix + "cheb1": glorot(rng, d, d),
        prefix + "cheb_b": np.zeros(d),
        prefix + "wo": glorot(rng, d, d),
        prefix + "bo": np.zeros(d),
    }


def init_attention(rng, d: int, prefix: str) -> dict[str, np.ndarray]:
    return {
        prefix + "wq": glorot(rng, d, d),
        prefix + "wk": glorot(rng, d, d),
        prefix + "wv": glorot(rng, d, d),
        prefix + "wo": glorot(rng, d, d),
        prefix + "bo": np.zeros(d),
    }


def init_ffn(rng, d: int, d_ff: int, prefix: str) -> dict[str, np.ndarray]:
    return {
        prefix + "ff1_w": glorot(rng, d, d_ff),
        prefix + "ff1_b": np.zeros(d_ff),
        prefix + "ff2_w": glorot(rng, d_ff, d),
        prefix + "ff2_b": np.zeros(d),
    }


def init_norm(d: int, prefix: str) -> dict[str, np.ndarray]:
    return {prefix + "g": np.ones(d), prefix + "b": np.zeros(d)}


def norm(x: Tensor, p, prefix: str) -> Tensor:
    return tn.layer_norm(x, p[prefix + "g"], p[prefix + "b"])
