"""Training samples, the assignment loss and the SGD loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .data import GroundTruthBox, SequenceBundle
from .decoder import ExtendedAssignmentMatrix, hard_assign
from .geometry import Detection, iou
from .model import AssociationProblem, TransMOTModel, build_problem

log = logging.getLogger(__name__)

GT_MATCH_IOU = 0.5


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainingSample:
    problem: AssociationProblem
    target_row_labels: np.ndarray
    sink_row_labels: np.ndarray
    tracklet_ids: list[int] = field(default_factory=list)
    start_frame: int = 0

    def __post_init__(self):
        n = self.problem.num_tracklets
        self.target_row_labels = np.asarray(self.target_row_labels, dtype=np.int64)
        self.sink_row_labels = np.asarray(self.sink_row_labels, dtype=bool)
        if self.target_row_labels.shape != (self.problem.num_candidates,):
            raise ValueError("one row label per candidate is required")
        if self.target_row_labels.size and (self.target_row_labels.min() < 0 or self.target_row_labels.max() > n):
            raise ValueError(f"row labels must lie in 0..{n}")
        if self.sink_row_labels.shape != (n,):
            raise ValueError("one sink label per tracklet is required")
        claimed = np.zeros(n, dtype=bool)
        claimed[self.target_row_labels[self.target_row_labels < n]] = True
        if np.any(claimed == self.sink_row_labels):
            raise ValueError("sink labels must mark exactly the tracklets no candidate is labelled with")


@dataclass
class LossBreakdown:
    ce: float
    sink: float
    total: float
    lam: float


def inject_detector_noise(gt_frames: dict[int, list[GroundTruthBox]],
                          detections: dict[int, list[Detection]]) -> dict[int, list[tuple[Detection, int]]]:
    """Swap ground-truth boxes for overlapping detections.

    Per frame, (gt, detection) pairs with IoU above 0.5 are taken greedily in
    decreasing IoU order, each side used once. A matched ground-truth box is
    replaced by its detection (identity kept); unmatched ground-truth boxes
    stay as they are; unmatched detections get identity -1.
    """
    out: dict[int, list[tuple[Detection, int]]] = {}
    for frame in sorted(set(gt_frames) | set(detections)):
        gts = gt_frames.get(frame, [])
        dets = detections.get(frame, [])
        pairs = []
        for gi, g in enumerate(gts):
            for di, d in enumerate(dets):
                score = iou(g.bbox, d.bbox)
                if score > GT_MATCH_IOU:
                    pairs.append((score, gi, di))
        pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
        gt_to_det: dict[int, int] = {}
        used_d: set[int] = set()
        for _, gi, di in pairs:
            if gi in gt_to_det or di in used_d:
                continue
            gt_to_det[gi] = di
            used_d.add(di)
        det_to_gt = {di: gi for gi, di in gt_to_det.items()}
        items = [(d, gts[det_to_gt[di]].id if di in det_to_gt else -1) for di, d in enumerate(dets)]
        dim = dets[0].appearance.shape[0] if dets else 0
        for gi, g in enumerate(gts):
            if gi in gt_to_det:
                continue
            app = g.appearance if g.appearance is not None else np.zeros(dim)
            items.append((Detection(g.bbox, 1.0, app, frame, len(items)), g.id))
        out[frame] = items
    return out


def build_samples(bundle: SequenceBundle, history: int, frames: dict | None = None) -> list[TrainingSample]:
    """All ``history + 1``-frame windows of a sequence with at least one tracklet and one candidate."""
    if bundle.gt is None:
        raise ValueError(f"sequence {bundle.name} has no ground truth")
    if frames is None:
        frames = inject_detector_noise(bundle.gt, bundle.detections)
    samples = []
    for start in range(1, bundle.num_frames - history + 1):
        window = [frames.get(start + k, []) for k in range(history)]
        ids = sorted({ident for items in window for _, ident in items if ident >= 0})
        candidates = frames.get(start + history, [])
        if not ids or not candidates:
            continue
        col = {ident: i for i, ident in enumerate(ids)}
        histories: list[dict] = [{} for _ in ids]
        for slot, items in enumerate(window):
            for det, ident in items:
                if ident >= 0:
                    histories[col[ident]][slot] = (det.bbox, det.appearance)
        dets = [d for d, _ in candidates]
        problem = build_problem(histories, dets, history, bundle.img_w, bundle.img_h, bundle.feature_dim)
        rows = np.array([col.get(ident, len(ids)) if ident >= 0 else len(ids) for _, ident in candidates])
        sink = np.ones(len(ids), dtype=bool)
        sink[rows[rows < len(ids)]] = False
        samples.append(TrainingSample(problem, rows, sink, ids, start))
    return samples


def assignment_loss(a: ExtendedAssignmentMatrix, sample: TrainingSample, lam: float = 1.0):
    """Candidate-row cross-entropy plus ``lam`` times the sink-row soft-margin term.

    Returns ``(total_tensor, LossBreakdown)``.
    """
    m, n = a.num_candidates, a.num_tracklets
    labels = sample.target_row_labels
    if labels.shape != (m,) or sample.sink_row_labels.shape != (n,):
        raise ValueError("sample labels do not match the assignment matrix shape")
    if m and (labels.min() < 0 or labels.max() > n):
        raise ValueError(f"row label out of range 0..{n}")
    if m:
        logp = a.candidate_log_probs()
        picked = logp[np.arange(m), labels]
        ce = tn.tsum(picked) * (-1.0 / m)
    else:
        ce = tn.Tensor(0.0)
    if n:
        z = a.sink_logits()
        y = sample.sink_row_labels.astype(np.float64)
        # y * log(sigmoid(z)) + (1 - y) * log(sigmoid(-z)), negated and averaged
        ll = tn.log_sigmoid(z) * y + tn.log_sigmoid(-z) * (1.0 - y)
        sink = tn.tsum(ll) * (-1.0 / n)
    else:
        sink = tn.Tensor(0.0)
    total = ce + sink * lam
    breakdown = LossBreakdown(float(ce.data), float(sink.data), float(total.data), lam)
    return total, breakdown


def assignment_correct(a: ExtendedAssignmentMatrix, sample: TrainingSample, tau_a: float = 0.5) -> bool:
    """True when the gated matching reproduces every candidate's label."""
    result = hard_assign(a, tau_a)
    n = a.num_tracklets
    predicted = {i: j for i, j in result.matches}
    for i, label in enumerate(sample.target_row_labels):
        if predicted.get(i, n) != label:
            return False
    return True


@dataclass
class TrainResult:
    losses: list[LossBreakdown]
    steps: int
    seconds: float
    evaluations: list[tuple[int, float]] = field(default_factory=list)


def evaluate(model: TransMOTModel, samples: Sequence[TrainingSample], lam: float = 1.0,
             tau_a: float = 0.5) -> tuple[float, float]:
    """Mean total loss and fraction of samples assigned fully correctly."""
    losses, correct = [], 0
    for s in samples:
        a = model(s.problem)
        _, b = assignment_loss(a, s, lam)
        losses.append(b.total)
        correct += assignment_correct(a, s, tau_a)
    return float(np.mean(losses)), correct / len(samples)


def train(model: TransMOTModel, samples: Sequence[TrainingSample], epochs: int | None = None, lr: float = 0.0015,
          lam: float = 1.0, seed: int = 0, max_steps: int | None = None, eval_every: int = 0,
          target_loss: float | None = None, lr_decay: float = 1.0, decay_every: int = 0,
          callback: Callable[[int, LossBreakdown], None] | None = None) -> TrainResult:
    """Plain SGD, one sample per step, shuffled each epoch.

    With ``eval_every`` and ``target_loss`` set, training stops once the mean
    loss over all ``samples`` drops below ``target_loss``.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("training set is empty")
    if epochs is None and max_steps is None:
        raise ValueError("give epochs or max_steps")
    rng = np.random.default_rng(seed)
    params = list(model.parameters().values())
    losses: list[LossBreakdown] = []
    evaluations: list[tuple[int, float]] = []
    step = 0
    t0 = time.perf_counter()
    epoch = 0
    rate = lr
    while (epochs is None or epoch < epochs) and (max_steps is None or step < max_steps):
        for idx in rng.permutation(len(samples)):
            if max_steps is not None and step >= max_steps:
                break
            sample = samples[idx]
            total, breakdown = assignment_loss(model(sample.problem), sample, lam)
            if not math.isfinite(breakdown.total):
                raise TrainingDivergedError(f"non-finite loss at step {step} (sample window {sample.start_frame})")
            tn.zero_grad(params)
            total.backward()
            tn.sgd_step(params, rate)
            losses.append(breakdown)
            step += 1
            if decay_every and step % decay_every == 0:
                rate *= lr_decay
            if callback is not None:
                callback(step, breakdown)
            if eval_every and step % eval_every == 0:
                mean_loss, _ = evaluate(model, samples, lam)
                evaluations.append((step, mean_loss))
                log.info("step %d mean loss %.5f", step, mean_loss)
                if target_loss is not None and mean_loss < target_loss:
                    return TrainResult(losses, step, time.perf_counter() - t0, evaluations)
        epoch += 1
    return TrainResult(losses, step, time.perf_counter() - t0, evaluations)


def write_loss_csv(losses: Sequence[LossBreakdown], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "ce", "sink", "total"])
        for i, b in enumerate(losses, start=1):
            w.writerow([i, repr(b.ce), repr(b.sink), repr(b.total)])
