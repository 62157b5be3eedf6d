"""Spatial-temporal graph transformer encoder over tracklet histories."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .geometry import SparseWeightedGraph
from .layers import (
    GraphBatch,
    feed_forward,
    glorot,
    graph_multi_head_attention,
    init_attention,
    init_ffn,
    init_graph_attention,
    init_norm,
    linear,
    multi_head_self_attention,
    norm,
    sinusoidal_encoding,
)
from .tensor import Tensor


@dataclass
class TrackletFeatureTensor:
    """Tracklet node features ``[N, T, D_in]`` plus a ``[N, T]`` presence mask."""

    data: np.ndarray
    presence: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.presence = np.asarray(self.presence, dtype=bool)
        if self.data.ndim != 3 or self.presence.shape != self.data.shape[:2]:
            raise ValueError(f"feature tensor {self.data.shape} and presence {self.presence.shape} disagree")
        self.data = np.where(self.presence[..., None], self.data, 0.0)

    @property
    def num_tracklets(self) -> int:
        return self.data.shape[0]

    @property
    def history(self) -> int:
        return self.data.shape[1]


@dataclass
class EncoderParams:
    tensors: dict[str, Tensor]
    heads: int
    spatial_layers: int = 1
    temporal_layers: int = 1
    _pe: dict = field(default_factory=dict, repr=False)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __post_init__(self):
        d = self.tensors["src_w"].shape[1]
        if d % self.heads:
            raise ValueError(f"number of heads {self.heads} must divide the model dimension {d}")

    @property
    def d_model(self) -> int:
        return self.tensors["src_w"].shape[1]

    @property
    def d_in(self) -> int:
        return self.tensors["src_w"].shape[0]

    def positional(self, length: int) -> np.ndarray:
        if length not in self._pe:
            self._pe[length] = sinusoidal_encoding(length, self.d_model)
        return self._pe[length]

    @classmethod
    def initialize(cls, rng: np.random.Generator, d_in: int, d_model: int, heads: int, d_ff: int | None = None,
                   spatial_layers: int = 1, temporal_layers: int = 1) -> "EncoderParams":
        d_ff = d_ff or 4 * d_model
        arrays = {"src_w": glorot(rng, d_in, d_model), "src_b": np.zeros(d_model)}
        for i in range(spatial_layers):
            pre = f"sp{i}_"
            arrays |= init_graph_attention(rng, d_model, pre + "att_")
            arrays |= init_norm(d_model, pre + "ln1_")
            arrays |= init_ffn(rng, d_model, d_ff, pre)
            arrays |= init_norm(d_model, pre + "ln2_")
        for i in range(temporal_layers):
            pre = f"tm{i}_"
            arrays |= init_attention(rng, d_model, pre + "att_")
            arrays |= init_norm(d_model, pre + "ln1_")
            arrays |= init_ffn(rng, d_model, d_ff, pre)
            arrays |= init_norm(d_model, pre + "ln2_")
        tensors = {k: Tensor(v, requires_grad=True, name="enc." + k) for k, v in arrays.items()}
        return cls(tensors, heads, spatial_layers, temporal_layers)


def embed_source(x: TrackletFeatureTensor, p: EncoderParams) -> Tensor:
    """Per-node linear embedding; absent slots are forced back to zero. Returns ``[N, T, D]``."""
    if x.data.shape[2] != p.d_in:
        raise ValueError(f"feature dimension {x.data.shape[2]} does not match encoder input {p.d_in}")
    out = linear(Tensor(x.data), p["src_w"], p["src_b"])
    return out * x.presence[..., None].astype(np.float64)


def spatial_encoder_layer(fs: Tensor, batch: GraphBatch, p: EncoderParams, layer: int = 0) -> Tensor:
    """One spatial graph transformer layer on ``[N, T, D]`` features."""
    n, t, d = fs.shape
    pre = f"sp{layer}_"
    flat = tn.reshape(tn.permute(fs, (1, 0, 2)), (t * n, d))
    att = graph_multi_head_attention(flat, batch, p, pre + "att_", p.heads)
    h = norm(flat + att, p, pre + "ln1_")
    h = norm(h + feed_forward(h, p, pre), p, pre + "ln2_")
    return tn.permute(tn.reshape(h, (t, n, d)), (1, 0, 2))


def graph_multi_head_attention_encoder(fs: Tensor, graphs: Sequence[SparseWeightedGraph], p: EncoderParams,
                                       layer: int = 0, return_weights: bool = False):
    """Graph attention block alone (before residual / feed-forward), ``[N, T, D]`` in and out."""
    n, t, d = fs.shape
    _check_graphs(graphs, n, t)
    batch = GraphBatch.from_graphs(graphs)
    flat = tn.reshape(tn.permute(fs, (1, 0, 2)), (t * n, d))
    out = graph_multi_head_attention(flat, batch, p, f"sp{layer}_att_", p.heads, return_weights=return_weights)
    if return_weights:
        out, attn = out
    out = tn.permute(tn.reshape(out, (t, n, d)), (1, 0, 2))
    return (out, attn, batch) if return_weights else out


def temporal_encoder_layer(f: Tensor, presence: np.ndarray, p: EncoderParams, layer: int = 0,
                           add_position: bool = True) -> Tensor:
    """Self-attention along each tracklet's time axis. ``[N, T, D]`` in, ``[T, N, D]`` out."""
    presence = np.asarray(presence, dtype=bool)
    if not presence.any(axis=1).all():
        bad = np.flatnonzero(~presence.any(axis=1)).tolist()
        raise ValueError(f"tracklets {bad} have no present frame in the history window")
    n, t, d = f.shape
    pre = f"tm{layer}_"
    x = f + p.positional(t) if add_position else f
    att = multi_head_self_attention(x, presence, p, pre + "att_", p.heads)
    h = norm(x + att, p, pre + "ln1_")
    h = norm(h + feed_forward(h, p, pre), p, pre + "ln2_")
    return tn.permute(h, (1, 0, 2))


def encode(x: TrackletFeatureTensor, graphs: Sequence[SparseWeightedGraph], p: EncoderParams) -> Tensor:
    """Full encoder: embedding, spatial layer(s), temporal layer(s). Returns ``[T, N, D]``."""
    n, t = x.presence.shape
    _check_graphs(graphs, n, t)
    batch = GraphBatch.from_graphs(graphs)
    h = embed_source(x, p)
    for i in range(p.spatial_layers):
        h = spatial_encoder_layer(h, batch, p, i)
    for i in range(p.temporal_layers):
        out = temporal_encoder_layer(h, x.presence, p, i, add_position=(i == 0))
        h = tn.permute(out, (1, 0, 2))
    return tn.permute(h, (1, 0, 2))


def _check_graphs(graphs: Sequence[SparseWeightedGraph], n: int, t: int) -> None:
    if len(graphs) != t:
        raise ValueError(f"expected {t} frame graphs, got {len(graphs)}")
    for i, g in enumerate(graphs):
        if g.num_nodes != n:
            raise ValueError(f"graph for frame {i} has {g.num_nodes} nodes, expected {n}")
        if g.has_virtual_sink:
            raise ValueError("encoder graphs must not carry a virtual sink")
