"""Seeded synthetic tracking scenarios with ground truth and noisy detections."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .data import GroundTruthBox, SequenceBundle, coerce, read_key_values
from .geometry import BoundingBox, Detection


@dataclass
class ScenarioConfig:
    """Every field maps 1:1 to a ``key = value`` line in a scenario file."""

    num_targets: int = 6
    num_frames: int = 30
    img_w: float = 640.0
    img_h: float = 480.0
    feature_dim: int = 8
    speed_min: float = 0.5
    speed_max: float = 2.0
    turn_prob: float = 0.0
    turn_sigma: float = 0.5
    box_h_min: float = 60.0
    box_h_max: float = 120.0
    aspect: float = 0.4
    jitter_sigma: float = 0.0
    fn_rate: float = 0.0
    fp_rate: float = 0.0
    conf_min: float = 0.6
    fp_conf_max: float = 0.6
    occlusion_prob: float = 0.0
    occlusion_min: int = 3
    occlusion_max: int = 10
    appearance_noise: float = 0.0
    birth_spread: int = 0
    seed: int = 0
    name: str = "synth"

    def __post_init__(self):
        for rate in ("fn_rate", "fp_rate", "turn_prob", "occlusion_prob"):
            value = getattr(self, rate)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{rate} must lie in [0, 1], got {value}")
        if self.num_frames < 1 or self.num_targets < 0:
            raise ValueError("num_frames must be >= 1 and num_targets >= 0")
        if self.occlusion_min > self.occlusion_max or self.occlusion_min < 1:
            raise ValueError("need 1 <= occlusion_min <= occlusion_max")

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        values = read_key_values(path)
        defaults = cls()
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**{k: coerce(v, getattr(defaults, k)) for k, v in values.items()})


@dataclass
class _Target:
    ident: int
    cx: float
    cy: float
    vx: float
    vy: float
    w: float
    h: float
    birth: int
    appearance: np.ndarray
    occluded: set


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def synth_generate(cfg: ScenarioConfig, initial_states=None) -> SequenceBundle:
    """Generate one sequence; a pure function of ``cfg`` (and ``initial_states``).

    ``initial_states`` optionally fixes ``(cx, cy, vx, vy, w, h)`` per target.
    """
    rng = np.random.default_rng(cfg.seed)
    targets = []
    n_targets = len(initial_states) if initial_states is not None else cfg.num_targets
    for k in range(n_targets):
        h = rng.uniform(cfg.box_h_min, cfg.box_h_max)
        w = h * cfg.aspect
        cx = rng.uniform(w / 2, cfg.img_w - w / 2)
        cy = rng.uniform(h / 2, cfg.img_h - h / 2)
        speed = rng.uniform(cfg.speed_min, cfg.speed_max)
        theta = rng.uniform(0, 2 * np.pi)
        vx, vy = speed * np.cos(theta), speed * np.sin(theta)
        if initial_states is not None:
            cx, cy, vx, vy, w, h = (float(x) for x in initial_states[k])
        birth = 1 + (int(rng.integers(0, cfg.birth_spread + 1)) if cfg.birth_spread > 0 else 0)
        appearance = _unit(rng.normal(size=cfg.feature_dim)) if cfg.feature_dim else np.zeros(0)
        occluded: set[int] = set()
        if rng.random() < cfg.occlusion_prob:
            length = int(rng.integers(cfg.occlusion_min, cfg.occlusion_max + 1))
            lo, hi = birth + 1, cfg.num_frames - length
            if hi >= lo:
                start = int(rng.integers(lo, hi + 1))
                occluded = set(range(start, start + length))
        targets.append(_Target(k + 1, cx, cy, vx, vy, w, h, birth, appearance, occluded))

    detections: dict[int, list[Detection]] = {}
    gt: dict[int, list[GroundTruthBox]] = {}
    det_ids: dict[int, list[int]] = {}
    for frame in range(1, cfg.num_frames + 1):
        frame_items: list[tuple[BoundingBox, float, np.ndarray, int]] = []
        frame_gt = []
        for tg in targets:
            if frame < tg.birth:
                continue
            if frame > tg.birth:
                _advance(tg, cfg, rng)
            if frame in tg.occluded:
                continue
            box = BoundingBox.from_center(tg.cx, tg.cy, tg.w, tg.h)
            app = tg.appearance + (rng.normal(scale=cfg.appearance_noise, size=cfg.feature_dim)
                                   if cfg.appearance_noise > 0 else 0.0)
            frame_gt.append(GroundTruthBox(tg.ident, box, 1.0, np.asarray(app, dtype=np.float64)))
            if cfg.fn_rate > 0 and rng.random() < cfg.fn_rate:
                continue
            if cfg.jitter_sigma > 0:
                du, dv, dw, dh = rng.normal(scale=cfg.jitter_sigma, size=4)
                dbox = BoundingBox(box.u + du, box.v + dv, max(1.0, box.w + dw), max(1.0, box.h + dh))
            else:
                dbox = box
            conf = float(rng.uniform(cfg.conf_min, 1.0))
            frame_items.append((dbox, conf, np.asarray(app, dtype=np.float64), tg.ident))
        if cfg.fp_rate > 0:
            for _ in range(int(rng.binomial(max(len(targets), 1), cfg.fp_rate))):
                h = rng.uniform(cfg.box_h_min, cfg.box_h_max)
                w = h * cfg.aspect
                box = BoundingBox(rng.uniform(0, cfg.img_w - w), rng.uniform(0, cfg.img_h - h), w, h)
                app = _unit(rng.normal(size=cfg.feature_dim)) if cfg.feature_dim else np.zeros(0)
                frame_items.append((box, float(rng.uniform(0.0, cfg.fp_conf_max)), app, -1))
        order = rng.permutation(len(frame_items))
        detections[frame] = [Detection(frame_items[i][0], frame_items[i][1], frame_items[i][2], frame, pos)
                             for pos, i in enumerate(order)]
        det_ids[frame] = [frame_items[i][3] for i in order]
        gt[frame] = sorted(frame_gt, key=lambda g: g.id)
    return SequenceBundle(cfg.name, cfg.img_w, cfg.img_h, cfg.num_frames, detections, gt,
                          det_gt_ids=det_ids, feature_dim=cfg.feature_dim)


def _advance(tg: _Target, cfg: ScenarioConfig, rng: np.random.Generator) -> None:
    if cfg.turn_prob > 0 and rng.random() < cfg.turn_prob:
        angle = rng.normal(scale=cfg.turn_sigma)
        c, s = np.cos(angle), np.sin(angle)
        tg.vx, tg.vy = c * tg.vx - s * tg.vy, s * tg.vx + c * tg.vy
    tg.cx += tg.vx
    tg.cy += tg.vy
    half_w, half_h = tg.w / 2, tg.h / 2
    if tg.cx < half_w or tg.cx > cfg.img_w - half_w:
        tg.vx = -tg.vx
        tg.cx = min(max(tg.cx, half_w), cfg.img_w - half_w)
    if tg.cy < half_h or tg.cy > cfg.img_h - half_h:
        tg.vy = -tg.vy
        tg.cy = min(max(tg.cy, half_h), cfg.img_h - half_h)
