"""Spatial graph transformer decoder producing the extended assignment matrix."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .assignment import hungarian
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
    norm,
)
from .tensor import Tensor


@dataclass
class DecoderParams:
    tensors: dict[str, Tensor]
    heads: int
    score_path: bool = False

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"number of heads {self.heads} must divide the model dimension {self.d_model}")

    @property
    def d_model(self) -> int:
        return self.tensors["tgt_w"].shape[1]

    @property
    def d_in(self) -> int:
        return self.tensors["tgt_w"].shape[0]

    @classmethod
    def initialize(cls, rng: np.random.Generator, d_in: int, d_model: int, heads: int, d_ff: int | None = None,
                   score_path: bool = False) -> "DecoderParams":
        d_ff = d_ff or 4 * d_model
        arrays = {
            "tgt_w": glorot(rng, d_in, d_model),
            "tgt_b": np.zeros(d_model),
            "f_snk": rng.normal(0.0, 1.0 / math.sqrt(d_model), size=d_model),
            "f_src": rng.normal(0.0, 1.0 / math.sqrt(d_model), size=d_model),
        }
        arrays |= init_graph_attention(rng, d_model, "gatt_")
        arrays |= init_norm(d_model, "gln_")
        arrays |= init_attention(rng, d_model, "ca_")
        if score_path:
            arrays["ca_score_w"] = glorot(rng, heads, d_model)
        arrays |= init_norm(d_model, "ln1_")
        arrays |= init_ffn(rng, d_model, d_ff, "")
        arrays |= init_norm(d_model, "ln2_")
        arrays["out_w"] = glorot(rng, d_model, 1)
        arrays["out_b"] = np.zeros(1)
        tensors = {k: Tensor(v, requires_grad=True, name="dec." + k) for k, v in arrays.items()}
        return cls(tensors, heads, score_path)


@dataclass
class ExtendedAssignmentMatrix:
    """Logits over ``(M + 1) x (N + 1)``: candidates plus sink row, tracklets plus source column."""

    logits: Tensor
    extras: dict = field(default_factory=dict, repr=False)

    @property
    def num_candidates(self) -> int:
        return self.logits.shape[0] - 1

    @property
    def num_tracklets(self) -> int:
        return self.logits.shape[1] - 1

    @property
    def probs(self) -> np.ndarray:
        z = self.logits.data
        m = self.num_candidates
        out = np.empty_like(z)
        rows = z[:m] - z[:m].max(axis=1, keepdims=True)
        e = np.exp(rows)
        out[:m] = e / e.sum(axis=1, keepdims=True)
        out[m] = 1.0 / (1.0 + np.exp(-z[m]))
        return out

    def candidate_log_probs(self) -> Tensor:
        return tn.log_softmax(self.logits[: self.num_candidates])

    def sink_logits(self) -> Tensor:
        """Sink-row logits over the real tracklet columns (source column dropped)."""
        return self.logits[self.num_candidates, : self.num_tracklets]


def decode(cand_graph: SparseWeightedGraph, cand_features, enc_out: Tensor, p: DecoderParams,
           tracklet_presence: np.ndarray | None = None) -> ExtendedAssignmentMatrix:
    """Run the decoder.

    ``cand_features`` is ``[M, D_in]``; ``enc_out`` is ``[T, N, D]``;
    ``tracklet_presence`` (``[N, T]``) masks absent history steps as keys.
    """
    feats = np.asarray(cand_features.data if isinstance(cand_features, Tensor) else cand_features,
                       dtype=np.float64).reshape(-1, p.d_in)
    m = feats.shape[0]
    t, n, d = enc_out.shape
    if m == 0 and n == 0:
        raise ValueError("decode called with no candidates and no tracklets")
    if cand_graph.num_nodes != m + 1 or not cand_graph.has_virtual_sink:
        raise ValueError(f"candidate graph must have {m + 1} nodes including the sink")
    if d != p.d_model:
        raise ValueError(f"encoder width {d} does not match decoder width {p.d_model}")
    heads = p.heads
    dh = d // heads

    # candidate embedding + sink, graph attention over the candidate graph
    emb = linear(Tensor(feats), p["tgt_w"], p["tgt_b"]) if m else Tensor(np.zeros((0, d)))
    tgt = tn.concat([emb, tn.reshape(p["f_snk"], (1, d))], axis=0)
    batch = GraphBatch.from_graphs([cand_graph])
    att = norm(tgt + graph_multi_head_attention(tgt, batch, p, "gatt_", heads), p, "gln_")

    # tracklet memory extended by the virtual source
    src = tn.broadcast_to(tn.reshape(p["f_src"], (1, 1, d)), (t, 1, d))
    memory = tn.concat([enc_out, src], axis=1)  # [T, N+1, D]
    if tracklet_presence is None:
        tracklet_presence = np.ones((n, t), dtype=bool)
    key_mask = np.concatenate([np.asarray(tracklet_presence, dtype=bool), np.ones((1, t), dtype=bool)], axis=0)

    # cross attention: query (m, n) attends over tracklet n's history
    q = tn.reshape(tn.permute(tn.reshape(linear(att, p["ca_wq"]), (m + 1, heads, dh)), (1, 0, 2)),
                   (heads, 1, m + 1, dh))
    k = tn.permute(tn.reshape(linear(memory, p["ca_wk"]), (t, n + 1, heads, dh)), (2, 1, 3, 0))
    v = tn.permute(tn.reshape(linear(memory, p["ca_wv"]), (t, n + 1, heads, dh)), (2, 1, 0, 3))
    scores = tn.matmul(q, k) * (1.0 / math.sqrt(dh))  # [H, N+1, M+1, T]
    mask = key_mask[None, :, None, :]
    weights = tn.masked_softmax(scores, mask)
    ctx = tn.matmul(weights, v)  # [H, N+1, M+1, dh]
    ctx = tn.reshape(tn.permute(ctx, (2, 1, 0, 3)), (m + 1, n + 1, d))
    cross = linear(ctx, p["ca_wo"], p["ca_bo"])

    pair = tn.reshape(att, (m + 1, 1, d)) + cross
    if p.score_path:
        # mean raw query-key score over present steps, one value per head
        present = mask.astype(np.float64)
        raw = tn.tsum(scores * present, axis=-1) * (1.0 / present.sum(axis=-1))  # [H, N+1, M+1]
        raw = tn.permute(raw, (2, 1, 0))  # [M+1, N+1, H]
        pair = pair + tn.matmul(raw, p["ca_score_w"])

    y = norm(pair, p, "ln1_")
    y = norm(y + feed_forward(y, p, ""), p, "ln2_")
    logits = tn.reshape(linear(y, p["out_w"], p["out_b"]), (m + 1, n + 1))
    return ExtendedAssignmentMatrix(logits, extras={"cross_weights": weights})


@dataclass
class AssignmentResult:
    matches: list[tuple[int, int]]
    unmatched_candidates: list[int]
    unmatched_tracklets: list[int]
    new_track_candidates: list[int]
    sink_tracklets: list[int]


def hard_assign(a: ExtendedAssignmentMatrix | np.ndarray, tau_a: float = 0.5) -> AssignmentResult:
    """Hungarian matching on the candidate x tracklet block, gated by ``tau_a``.

    Accepts either an :class:`ExtendedAssignmentMatrix` or a ready
    ``(M + 1) x (N + 1)`` probability array.
    """
    probs = a.probs if isinstance(a, ExtendedAssignmentMatrix) else np.asarray(a, dtype=np.float64)
    m, n = probs.shape[0] - 1, probs.shape[1] - 1
    block = probs[:m, :n]
    matches = []
    if m and n:
        for i, j in hungarian(block, maximize=True):
            if block[i, j] > tau_a:
                matches.append((i, j))
    used_c = {i for i, _ in matches}
    used_t = {j for _, j in matches}
    unmatched_c = [i for i in range(m) if i not in used_c]
    new_tracks = [i for i in unmatched_c if probs[i].argmax() == n]
    return AssignmentResult(
        matches=matches,
        unmatched_candidates=unmatched_c,
        unmatched_tracklets=[j for j in range(n) if j not in used_t],
        new_track_candidates=new_tracks,
        sink_tracklets=[j for j in range(n) if probs[m, j] > 0.5],
    )
