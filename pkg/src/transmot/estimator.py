"""scikit-learn style wrapper: fit on annotated sequences, predict tracks."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .cascade import TrackerConfig, track_sequence
from .data import MotRecord, SequenceBundle
from .metrics import evaluate
from .model import ModelConfig, TransMOTModel
from .training import build_samples, train


class TransMOTTracker(BaseEstimator):
    """Learned association tracker.

    ``X`` is a list of :class:`SequenceBundle`; training bundles must carry
    ground truth. ``predict`` returns one list of :class:`MotRecord` per
    bundle and ``score`` averages IDF1 over bundles.
    """

    def __init__(self, d_model: int = 32, n_heads: int = 4, history: int = 5, lr: float = 0.0015,
                 n_steps: int = 4000, lam: float = 1.0, score_path: bool = False, tau_m: float = 0.75,
                 k_r: int = 15, k_p: int = 50, tau_det: float = 0.3, tau_a: float = 0.5,
                 tau_ltoh: float = 1.0, tau_dup: float = 0.9, seed: int = 0):
        self.d_model = d_model
        self.n_heads = n_heads
        self.history = history
        self.lr = lr
        self.n_steps = n_steps
        self.lam = lam
        self.score_path = score_path
        self.tau_m = tau_m
        self.k_r = k_r
        self.k_p = k_p
        self.tau_det = tau_det
        self.tau_a = tau_a
        self.tau_ltoh = tau_ltoh
        self.tau_dup = tau_dup
        self.seed = seed

    def _tracker_config(self, bundle: SequenceBundle) -> TrackerConfig:
        return TrackerConfig(history=self.history, tau_m=self.tau_m, k_r=self.k_r, k_p=self.k_p,
                             tau_det=self.tau_det, tau_a=self.tau_a, tau_ltoh=self.tau_ltoh,
                             tau_dup=self.tau_dup, lam=self.lam, img_w=bundle.img_w, img_h=bundle.img_h)

    def fit(self, X: Sequence[SequenceBundle], y=None) -> "TransMOTTracker":
        bundles = list(X)
        if not bundles:
            raise ValueError("fit needs at least one sequence")
        dims = {b.feature_dim for b in bundles}
        if len(dims) != 1:
            raise ValueError(f"sequences disagree on feature dimension: {sorted(dims)}")
        samples = [s for b in bundles for s in build_samples(b, self.history)]
        config = ModelConfig(feature_dim=dims.pop(), d_model=self.d_model, heads=self.n_heads,
                             history=self.history, score_path=self.score_path, seed=self.seed)
        self.model_ = TransMOTModel(config)
        self.train_result_ = train(self.model_, samples, max_steps=self.n_steps, lr=self.lr, lam=self.lam,
                                   seed=self.seed)
        self.n_samples_ = len(samples)
        return self

    def predict(self, X: Sequence[SequenceBundle]) -> list[list[MotRecord]]:
        check_is_fitted(self, "model_")
        out = []
        for bundle in X:
            if bundle.feature_dim != self.model_.config.feature_dim:
                raise ValueError(f"sequence {bundle.name} has feature dimension {bundle.feature_dim}, "
                                 f"model expects {self.model_.config.feature_dim}")
            frames = track_sequence(bundle, self._tracker_config(bundle), model=self.model_)
            out.append([MotRecord(r.frame, ident, box) for r in frames for ident, box in r.tracks])
        return out

    def score(self, X: Sequence[SequenceBundle], y=None) -> float:
        bundles = list(X)
        preds = self.predict(bundles)
        return float(np.mean([evaluate(b.gt, p).IDF1 for b, p in zip(bundles, preds)]))
