"""Three-stage cascade association and tracklet lifecycle.

Per frame: (1) motion-gated IoU matching for robustly tracked tracklets and
low-confidence filtering, (2) learned association on the remaining
tracklets/candidates, (3) long-term re-association by appearance plus
normalized top distance, then duplicate suppression and spawning of new
tracklets.
"""

from __future__ import annotations

import enum
import itertools
import logging
import math
from collections import deque
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .assignment import hungarian
from .data import SequenceBundle, coerce, read_key_values
from .decoder import hard_assign
from .geometry import BoundingBox, Detection, intersection_over_area, iou_matrix
from .kalman import KalmanParams, KalmanState, kalman_init, kalman_predict, kalman_update
from .model import TransMOTModel, build_problem

log = logging.getLogger(__name__)

AffinityFn = Callable[[Sequence["Tracklet"], Sequence[Detection], int], np.ndarray]


class Status(enum.Enum):
    ACTIVE = "active"
    OCCLUDED = "occluded"
    DEAD = "dead"


@dataclass
class TrackerConfig:
    """Tracker settings; each field is also a ``key = value`` config key."""

    history: int = 5
    tau_m: float = 0.75
    k_r: int = 15
    k_p: int = 50
    tau_det: float = 0.3
    tau_a: float = 0.5
    tau_ltoh: float = 1.0
    tau_dup: float = 0.9
    lam: float = 1.0
    img_w: float = 1920.0
    img_h: float = 1080.0
    checkpoint: str | None = None
    kalman_std_position: float = 1.0 / 20
    kalman_std_velocity: float = 1.0 / 160

    def __post_init__(self):
        if self.history < 1:
            raise ValueError("history must be >= 1")
        for name in ("tau_m", "tau_det", "tau_a", "tau_dup"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.tau_ltoh < 0 or self.k_r < 0 or self.k_p < 0:
            raise ValueError("tau_ltoh, k_r and k_p must be non-negative")
        if self.img_w <= 0 or self.img_h <= 0:
            raise ValueError("image dimensions must be positive")

    @property
    def kalman(self) -> KalmanParams:
        return KalmanParams(self.kalman_std_position, self.kalman_std_velocity)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrackerConfig":
        """Defaults, then file values, then non-None ``overrides``."""
        defaults = cls()
        values = read_key_values(path) if path else {}
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown tracker config keys: {sorted(unknown)}")
        kwargs = {k: coerce(v, getattr(defaults, k)) for k, v in values.items()}
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)


@dataclass
class HistoryEntry:
    frame: int
    bbox: BoundingBox
    appearance: np.ndarray
    source_index: int = -1


@dataclass
class Tracklet:
    id: int
    history: deque
    kalman: KalmanState
    status: Status = Status.ACTIVE
    consecutive_matches: int = 1
    frames_since_update: int = 0
    predicted: BoundingBox | None = None

    @property
    def last_visible(self) -> HistoryEntry:
        return self.history[-1]

    @classmethod
    def start(cls, ident: int, det: Detection, history: int, params: KalmanParams) -> "Tracklet":
        entry = HistoryEntry(det.frame, det.bbox, det.appearance, det.source_index)
        return cls(ident, deque([entry], maxlen=history), kalman_init(det.bbox, params))


@dataclass
class FrameResult:
    frame: int
    tracks: list[tuple[int, BoundingBox]]
    stage_matches: dict[str, int] = field(default_factory=dict)


def d_top(occluded: BoundingBox, cand: BoundingBox) -> float:
    """Distance between top-centre points, normalized by the occluded box height."""
    dx = (occluded.u - cand.u) + (occluded.w - cand.w) / 2.0
    dy = occluded.v - cand.v
    return math.hypot(dx, dy) / occluded.h


def stage1_match_with_motion(tracklets: Sequence[Tracklet], detections: Sequence[Detection], cfg: TrackerConfig):
    """Returns ``(pairs, remaining_tracklets, remaining_detections)``.

    Only active tracklets with at least ``k_r`` consecutive matches take part;
    a pair needs IoU above ``tau_m`` between the predicted and detected box.
    Unmatched detections under ``tau_det`` confidence are dropped.
    """
    robust = [t for t in tracklets if t.status is Status.ACTIVE and t.consecutive_matches >= cfg.k_r]
    pairs: list[tuple[Tracklet, Detection]] = []
    if robust and detections:
        pred = np.array([(t.predicted or t.kalman.box()).as_array() for t in robust])
        ious = iou_matrix(pred, np.array([d.bbox.as_array() for d in detections]))
        for i, j in hungarian(ious, maximize=True):
            if ious[i, j] > cfg.tau_m:
                pairs.append((robust[i], detections[j]))
    used_t = {id(t) for t, _ in pairs}
    used_d = {id(d) for _, d in pairs}
    rest_t = [t for t in tracklets if id(t) not in used_t]
    rest_d = [d for d in detections if id(d) not in used_d and d.confidence >= cfg.tau_det]
    return pairs, rest_t, rest_d


def stage2_transmot(tracklets: Sequence[Tracklet], detections: Sequence[Detection], frame: int,
                    cfg: TrackerConfig, model: TransMOTModel | None = None,
                    affinity: AffinityFn | None = None):
    """Learned association over tracklets seen within the last ``history`` frames.

    ``affinity`` (tracklets, detections, frame) -> ``(M+1) x (N+1)`` probabilities
    replaces the model when given.
    """
    window_start = frame - cfg.history
    eligible = [t for t in tracklets if any(window_start <= e.frame < frame for e in t.history)]
    if not eligible or not detections or (model is None and affinity is None):
        return [], list(tracklets), list(detections)
    if affinity is not None:
        probs = np.asarray(affinity(eligible, detections, frame), dtype=np.float64)
        if probs.shape != (len(detections) + 1, len(eligible) + 1):
            raise ValueError(f"affinity returned shape {probs.shape}, expected "
                             f"{(len(detections) + 1, len(eligible) + 1)}")
    else:
        dim = model.config.feature_dim
        histories = [{e.frame - window_start: (e.bbox, e.appearance) for e in t.history
                      if window_start <= e.frame < frame} for t in eligible]
        problem = build_problem(histories, detections, cfg.history, cfg.img_w, cfg.img_h, dim)
        with tn.no_grad():
            probs = model(problem).probs
    result = hard_assign(probs, cfg.tau_a)
    pairs = [(eligible[j], detections[i]) for i, j in result.matches]
    used_t = {id(t) for t, _ in pairs}
    used_d = {id(d) for _, d in pairs}
    return pairs, [t for t in tracklets if id(t) not in used_t], [d for d in detections if id(d) not in used_d]


def stage3_ltoh(tracklets: Sequence[Tracklet], detections: Sequence[Detection], cfg: TrackerConfig):
    """Appearance distance plus :func:`d_top` against each tracklet's last visible state."""
    if not tracklets or not detections:
        return []
    cost = np.empty((len(tracklets), len(detections)))
    for i, t in enumerate(tracklets):
        last = t.last_visible
        for j, d in enumerate(detections):
            cost[i, j] = np.linalg.norm(last.appearance - d.appearance) + d_top(last.bbox, d.bbox)
    return [(tracklets[i], detections[j]) for i, j in hungarian(cost) if cost[i, j] <= cfg.tau_ltoh]


def duplicate_removal(associated: Sequence[BoundingBox], unassociated: Sequence[Detection],
                      tau_dup: float) -> list[Detection]:
    """Drop unassociated detections mostly covered by an associated box."""
    survivors = []
    for d in unassociated:
        ratio = max((intersection_over_area(d.bbox, a) for a in associated), default=0.0)
        if ratio < tau_dup:
            survivors.append(d)
    return survivors


class Tracker:
    """Online tracker for one sequence; feed frames in order."""

    def __init__(self, config: TrackerConfig, model: TransMOTModel | None = None,
                 affinity: AffinityFn | None = None):
        self.config = config
        self.model = model
        self.affinity = affinity
        self.tracklets: list[Tracklet] = []
        self._ids = itertools.count(1)
        self._last_frame: int | None = None

    @property
    def live_tracklets(self) -> list[Tracklet]:
        return [t for t in self.tracklets if t.status is not Status.DEAD]

    def _match(self, t: Tracklet, d: Detection, revive: bool = False) -> None:
        params = self.config.kalman
        if revive:
            t.kalman = kalman_init(d.bbox, params)
            t.consecutive_matches = 1
        else:
            t.kalman = kalman_update(t.kalman, d.bbox, params)
            t.consecutive_matches += 1
        t.history.append(HistoryEntry(d.frame, d.bbox, d.appearance, d.source_index))
        t.frames_since_update = 0
        t.status = Status.ACTIVE

    def process_frame(self, detections: Sequence[Detection], frame: int | None = None) -> FrameResult:
        cfg = self.config
        if frame is None:
            frame = detections[0].frame if detections else (self._last_frame or 0) + 1
        if self._last_frame is not None and frame <= self._last_frame:
            raise ValueError(f"frames must increase: got {frame} after {self._last_frame}")
        self._last_frame = frame
        live = self.live_tracklets
        for t in live:
            t.kalman, t.predicted = kalman_predict(t.kalman, cfg.kalman)

        pairs1, rest_t, rest_d = stage1_match_with_motion(live, list(detections), cfg)
        for t, d in pairs1:
            self._match(t, d)
        pairs2, rest_t, rest_d = stage2_transmot(rest_t, rest_d, frame, cfg, self.model, self.affinity)
        for t, d in pairs2:
            self._match(t, d)
        pairs3 = stage3_ltoh(rest_t, rest_d, cfg)
        for t, d in pairs3:
            self._match(t, d, revive=True)

        matched = pairs1 + pairs2 + pairs3
        used_t = {id(t) for t, _ in matched}
        used_d = {id(d) for _, d in matched}
        unassoc = [d for d in rest_d if id(d) not in used_d]
        survivors = duplicate_removal([d.bbox for _, d in matched], unassoc, cfg.tau_dup)

        for t in live:
            if id(t) in used_t:
                continue
            t.consecutive_matches = 0
            t.frames_since_update += 1
            t.status = Status.DEAD if t.frames_since_update > cfg.k_p else Status.OCCLUDED
        self.tracklets = [t for t in self.tracklets if t.status is not Status.DEAD]

        out = [(t.id, d.bbox) for t, d in matched]
        for d in survivors:
            t = Tracklet.start(next(self._ids), d, cfg.history, cfg.kalman)
            self.tracklets.append(t)
            out.append((t.id, d.bbox))
        out.sort(key=lambda x: x[0])
        return FrameResult(frame, out, {"motion": len(pairs1), "transmot": len(pairs2), "ltoh": len(pairs3),
                                        "new": len(survivors)})


def track_sequence(bundle: SequenceBundle, config: TrackerConfig, model: TransMOTModel | None = None,
                   affinity: AffinityFn | None = None) -> list[FrameResult]:
    tracker = Tracker(config, model, affinity)
    return [tracker.process_frame(bundle.frame_detections(f), f) for f in range(1, bundle.num_frames + 1)]


def ground_truth_affinity(bundle: SequenceBundle) -> AffinityFn:
    """Affinity oracle for synthetic bundles: one-hot on true identities.

    A tracklet's identity is that of the detection it was last updated with.
    """
    if bundle.det_gt_ids is None:
        raise ValueError("bundle carries no detection identities")
    ids = bundle.det_gt_ids

    def affinity(tracklets, detections, frame):
        m, n = len(detections), len(tracklets)
        probs = np.zeros((m + 1, n + 1))
        col = {}
        for j, t in enumerate(tracklets):
            last = t.last_visible
            gid = ids[last.frame][last.source_index]
            if gid >= 0:
                col[gid] = j
        hit = set()
        for i, d in enumerate(detections):
            gid = ids[d.frame][d.source_index]
            j = col.get(gid, n) if gid >= 0 else n
            probs[i, j] = 1.0
            hit.add(j)
        probs[m, [j for j in range(n) if j not in hit]] = 1.0
        return probs

    return affinity
