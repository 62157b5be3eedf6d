"""Encoder + decoder bundled as one trainable association model."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .decoder import DecoderParams, ExtendedAssignmentMatrix, decode
from .encoder import EncoderParams, TrackletFeatureTensor, encode
from .geometry import (
    BoundingBox,
    Detection,
    SparseWeightedGraph,
    build_candidate_graph,
    build_tracklet_graph,
    normalize_box,
)
from .tensor import Tensor, load_checkpoint, save_checkpoint


@dataclass
class ModelConfig:
    feature_dim: int
    d_model: int = 32
    heads: int = 4
    history: int = 5
    d_ff: int | None = None
    spatial_layers: int = 1
    temporal_layers: int = 1
    score_path: bool = False
    seed: int = 0

    @property
    def d_in(self) -> int:
        return self.feature_dim + 4


@dataclass
class AssociationProblem:
    """Inputs of one association step."""

    tracklets: TrackletFeatureTensor
    tracklet_graphs: list[SparseWeightedGraph]
    candidate_features: np.ndarray
    candidate_graph: SparseWeightedGraph

    @property
    def num_tracklets(self) -> int:
        return self.tracklets.num_tracklets

    @property
    def num_candidates(self) -> int:
        return self.candidate_features.shape[0]


def node_feature(appearance: np.ndarray, box: BoundingBox, img_w: float, img_h: float) -> np.ndarray:
    return np.concatenate([np.asarray(appearance, dtype=np.float64), normalize_box(box, img_w, img_h)])


def build_problem(histories: Sequence[Mapping[int, tuple[BoundingBox, np.ndarray]]],
                  candidates: Sequence[Detection], history: int, img_w: float, img_h: float,
                  feature_dim: int) -> AssociationProblem:
    """Assemble tensors and graphs.

    ``histories[n]`` maps a slot in ``range(history)`` (``history - 1`` is the
    most recent frame) to that tracklet's ``(box, appearance)``.
    """
    n = len(histories)
    d_in = feature_dim + 4
    data = np.zeros((n, history, d_in))
    presence = np.zeros((n, history), dtype=bool)
    per_slot: list[list[tuple[int, BoundingBox]]] = [[] for _ in range(history)]
    for i, hist in enumerate(histories):
        for slot, (box, app) in hist.items():
            data[i, slot] = node_feature(app, box, img_w, img_h)
            presence[i, slot] = True
            per_slot[slot].append((i, box))
    graphs = [build_tracklet_graph(per_slot[s], num_nodes=n) for s in range(history)]
    cand = np.array([node_feature(d.appearance, d.bbox, img_w, img_h) for d in candidates]).reshape(-1, d_in)
    return AssociationProblem(TrackletFeatureTensor(data, presence), graphs, cand, build_candidate_graph(candidates))


class TransMOTModel:
    def __init__(self, config: ModelConfig, encoder: EncoderParams | None = None,
                 decoder: DecoderParams | None = None):
        self.config = config
        if encoder is None or decoder is None:
            rng = np.random.default_rng(config.seed)
            encoder = EncoderParams.initialize(rng, config.d_in, config.d_model, config.heads, config.d_ff,
                                               config.spatial_layers, config.temporal_layers)
            decoder = DecoderParams.initialize(rng, config.d_in, config.d_model, config.heads, config.d_ff,
                                               config.score_path)
        self.encoder = encoder
        self.decoder = decoder

    def parameters(self) -> dict[str, Tensor]:
        out = {"enc." + k: v for k, v in self.encoder.tensors.items()}
        out.update({"dec." + k: v for k, v in self.decoder.tensors.items()})
        return out

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def forward(self, problem: AssociationProblem) -> ExtendedAssignmentMatrix:
        enc = encode(problem.tracklets, problem.tracklet_graphs, self.encoder)
        return decode(problem.candidate_graph, problem.candidate_features, enc, self.decoder,
                      tracklet_presence=problem.tracklets.presence)

    __call__ = forward

    def save(self, path) -> None:
        save_checkpoint(path, self.parameters(), meta={"model_config": asdict(self.config)})

    @classmethod
    def load(cls, path) -> "TransMOTModel":
        arrays, meta = load_checkpoint(path)
        config = ModelConfig(**meta["model_config"])
        model = cls(config)
        params = model.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint is missing parameters: {sorted(missing)[:5]}")
        for name, t in params.items():
            if arrays[name].shape != t.shape:
                raise ValueError(f"checkpoint parameter {name} has shape {arrays[name].shape}, expected {t.shape}")
            t.data = arrays[name].copy()
        return model
