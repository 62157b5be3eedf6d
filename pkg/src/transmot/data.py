"""MOTChallenge text formats, appearance sidecars, and on-disk sequence bundles.

Record layouts (comma separated, one record per line):

* detections: ``frame,-1,left,top,width,height,conf,-1,-1,-1``
* ground truth: ``frame,id,left,top,width,height,flag,class,visibility``
* results: ``frame,id,left,top,width,height,1,-1,-1,-1``
* features: ``frame,det_index,f1,...,fF`` where ``det_index`` is the 0-based
  position of the detection among that frame's lines in the detection file.

A sequence directory holds ``seqinfo.ini``, ``det/det.txt``,
``det/features.txt`` and optionally ``gt/gt.txt``.
"""

from __future__ import annotations

import configparser
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .geometry import BoundingBox, Detection

log = logging.getLogger(__name__)

PEDESTRIAN_CLASS = 1


class FormatError(ValueError):
    """Malformed input file."""


@dataclass(frozen=True)
class MotRecord:
    frame: int
    id: int
    bbox: BoundingBox
    conf: float = 1.0
    cls: int = -1
    visibility: float = -1.0


@dataclass
class GroundTruthBox:
    id: int
    bbox: BoundingBox
    visibility: float = 1.0
    appearance: np.ndarray | None = None


@dataclass
class SequenceBundle:
    name: str
    img_w: float
    img_h: float
    num_frames: int
    detections: dict[int, list[Detection]]
    gt: dict[int, list[GroundTruthBox]] | None = None
    det_gt_ids: dict[int, list[int]] | None = None
    feature_dim: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for f in self.detections:
            if not 1 <= f <= self.num_frames:
                raise ValueError(f"detection frame {f} outside 1..{self.num_frames}")

    def frame_detections(self, frame: int) -> list[Detection]:
        return self.detections.get(frame, [])

    def frame_gt(self, frame: int) -> list[GroundTruthBox]:
        return (self.gt or {}).get(frame, [])


def _format(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 1e15 else repr(x)


def parse_mot(path) -> list[MotRecord]:
    """Parse any MOT-style text file into records (empty file gives ``[]``)."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) < 6:
                raise FormatError(f"{path}:{lineno}: expected at least 6 fields, got {len(parts)}")
            try:
                frame = int(float(parts[0]))
                ident = int(float(parts[1]))
                u, v, w, h = (float(p) for p in parts[2:6])
                conf = float(parts[6]) if len(parts) > 6 else 1.0
                cls = int(float(parts[7])) if len(parts) > 7 else -1
                vis = float(parts[8]) if len(parts) > 8 else -1.0
                box = BoundingBox(u, v, w, h)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            records.append(MotRecord(frame, ident, box, conf, cls, vis))
    return records


def records_to_detections(records: Iterable[MotRecord], feature_dim: int = 0) -> dict[int, list[Detection]]:
    out: dict[int, list[Detection]] = defaultdict(list)
    for r in records:
        dets = out[r.frame]
        dets.append(Detection(r.bbox, r.conf, np.zeros(feature_dim), r.frame, len(dets)))
    return dict(out)


def records_to_gt(records: Iterable[MotRecord], min_visibility: float = 0.1,
                  classes: tuple[int, ...] = (PEDESTRIAN_CLASS,)) -> dict[int, list[GroundTruthBox]]:
    """Evaluable ground truth.

    Rows with a zero ``flag`` (the conf column), a class outside ``classes``
    or visibility below ``min_visibility`` are dropped. Missing class or
    visibility columns (value -1) are accepted.
    """
    out: dict[int, list[GroundTruthBox]] = defaultdict(list)
    for r in records:
        if r.conf == 0:
            continue
        if r.cls != -1 and r.cls not in classes:
            continue
        if r.visibility != -1 and r.visibility < min_visibility:
            continue
        out[r.frame].append(GroundTruthBox(r.id, r.bbox, r.visibility if r.visibility != -1 else 1.0))
    return dict(out)


def write_results(tracks: Iterable[MotRecord], path) -> None:
    """Write tracker output sorted by frame then id; confidence is always 1."""
    rows = sorted(tracks, key=lambda r: (r.frame, r.id))
    with open(path, "w") as fh:
        for r in rows:
            b = r.bbox
            fh.write(f"{r.frame},{r.id},{_format(b.u)},{_format(b.v)},{_format(b.w)},{_format(b.h)},1,-1,-1,-1\n")


def write_detections(detections: dict[int, list[Detection]], path) -> None:
    with open(path, "w") as fh:
        for frame in sorted(detections):
            for d in detections[frame]:
                b = d.bbox
                fh.write(f"{frame},-1,{_format(b.u)},{_format(b.v)},{_format(b.w)},{_format(b.h)},"
                         f"{_format(d.confidence)},-1,-1,-1\n")


def write_gt(gt: dict[int, list[GroundTruthBox]], path) -> None:
    with open(path, "w") as fh:
        for frame in sorted(gt):
            for g in sorted(gt[frame], key=lambda g: g.id):
                b = g.bbox
                fh.write(f"{frame},{g.id},{_format(b.u)},{_format(b.v)},{_format(b.w)},{_format(b.h)},"
                         f"1,{PEDESTRIAN_CLASS},{_format(g.visibility)}\n")


def parse_features(path, expected_dim: int) -> dict[tuple[int, int], np.ndarray]:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) - 2 != expected_dim:
                raise FormatError(f"{path}:{lineno}: expected {expected_dim} feature values, got {len(parts) - 2}")
            try:
                key = (int(parts[0]), int(parts[1]))
                out[key] = np.array([float(p) for p in parts[2:]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return out


def attach_features(detections: dict[int, list[Detection]], features: dict[tuple[int, int], np.ndarray],
                    dim: int) -> int:
    """Set each detection's appearance from ``features``; returns the number left as zero vectors."""
    missing = 0
    for frame, dets in detections.items():
        for d in dets:
            vec = features.get((frame, d.source_index))
            if vec is None:
                missing += 1
                d.appearance = np.zeros(dim)
            else:
                d.appearance = vec
    if missing:
        log.warning("%d detections have no appearance feature; using zero vectors", missing)
    return missing


def write_features(detections: dict[int, list[Detection]], path) -> None:
    with open(path, "w") as fh:
        for frame in sorted(detections):
            for d in detections[frame]:
                vals = ",".join(repr(float(x)) for x in d.appearance)
                fh.write(f"{frame},{d.source_index},{vals}\n")


# ----------------------------------------------------------------------
# sequence directories
# ----------------------------------------------------------------------
def write_sequence(bundle: SequenceBundle, root) -> Path:
    root = Path(root)
    (root / "det").mkdir(parents=True, exist_ok=True)
    info = configparser.ConfigParser()
    info.optionxform = str
    info["Sequence"] = {
        "name": bundle.name,
        "imWidth": _format(bundle.img_w),
        "imHeight": _format(bundle.img_h),
        "seqLength": str(bundle.num_frames),
        "featureDim": str(bundle.feature_dim),
    }
    with open(root / "seqinfo.ini", "w") as fh:
        info.write(fh)
    write_detections(bundle.detections, root / "det" / "det.txt")
    write_features(bundle.detections, root / "det" / "features.txt")
    if bundle.gt is not None:
        (root / "gt").mkdir(exist_ok=True)
        write_gt(bundle.gt, root / "gt" / "gt.txt")
    return root


def read_sequence(root, det_path=None, features_path=None, gt_path=None) -> SequenceBundle:
    root = Path(root)
    info = configparser.ConfigParser()
    info.optionxform = str
    if not info.read(root / "seqinfo.ini"):
        raise FileNotFoundError(f"{root / 'seqinfo.ini'} not found")
    sec = info["Sequence"]
    img_w, img_h = float(sec["imWidth"]), float(sec["imHeight"])
    num_frames = int(sec["seqLength"])
    dim = int(sec.get("featureDim", "0"))
    det_path = Path(det_path) if det_path else root / "det" / "det.txt"
    if not det_path.exists():
        raise FileNotFoundError(f"detection file {det_path} not found")
    detections = records_to_detections(parse_mot(det_path), dim)
    features_path = Path(features_path) if features_path else root / "det" / "features.txt"
    if dim and features_path.exists():
        attach_features(detections, parse_features(features_path, dim), dim)
    gt_path = Path(gt_path) if gt_path else root / "gt" / "gt.txt"
    gt = records_to_gt(parse_mot(gt_path)) if gt_path.exists() else None
    return SequenceBundle(sec.get("name", root.name), img_w, img_h, num_frames, detections, gt, feature_dim=dim)


def read_key_values(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def coerce(value: str, like):
    """Convert a config string to the type of ``like``."""
    if isinstance(like, bool):
        low = value.lower()
        if low in {"1", "true", "yes", "on"}:
            return True
        if low in {"0", "false", "no", "off"}:
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        out = float(value)
        if math.isnan(out):
            raise ValueError("NaN not allowed")
        return out
    if like is None and value.lower() in {"", "none"}:
        return None
    return value
