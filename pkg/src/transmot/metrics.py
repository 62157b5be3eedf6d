"""CLEAR MOT and identity metrics.

Inputs are per-frame collections ``{frame: [(id, BoundingBox), ...]}``;
objects with ``.id`` and ``.bbox`` attributes are accepted too, as are flat
lists of :class:`~transmot.data.MotRecord`.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np

from .assignment import hungarian
from .geometry import BoundingBox, iou_matrix

Frames = dict[int, list[tuple[int, BoundingBox]]]


def as_frames(data) -> Frames:
    out: Frames = defaultdict(list)
    if isinstance(data, dict):
        items = ((f, x) for f, xs in data.items() for x in xs)
    else:
        items = ((x.frame, x) for x in data)
    for frame, x in items:
        if isinstance(x, tuple):
            ident, box = x
        else:
            ident, box = x.id, x.bbox
        out[int(frame)].append((int(ident), box))
    return dict(out)


def _iou_block(a: list[tuple[int, BoundingBox]], b: list[tuple[int, BoundingBox]]) -> np.ndarray:
    if not a or not b:
        return np.zeros((len(a), len(b)))
    return iou_matrix(np.array([x.as_array() for _, x in a]), np.array([x.as_array() for _, x in b]))


@dataclass
class ClearMotResult:
    FP: int
    FN: int
    IDS: int
    MOTA: float
    MOTP: float
    MT: float
    ML: float
    num_gt: int
    num_matches: int


def clear_mot(gt, pred, iou_threshold: float = 0.5) -> ClearMotResult:
    """CLEAR MOT counts with correspondence continuation.

    Per frame, last frame's (gt, track) pairs are kept when both are present
    and still overlap at ``iou_threshold``; the rest are matched by
    maximum-IoU assignment. An identity switch is counted when a gt object is
    matched to a different track than at its previous match. MOTP is the
    mean IoU of matched pairs.
    """
    gt, pred = as_frames(gt), as_frames(pred)
    fp = fn = ids = matches = 0
    iou_sum = 0.0
    prev: dict[int, int] = {}
    last_match: dict[int, int] = {}
    gt_frames_count: dict[int, int] = defaultdict(int)
    gt_matched_count: dict[int, int] = defaultdict(int)
    for frame in sorted(set(gt) | set(pred)):
        g = gt.get(frame, [])
        p = pred.get(frame, [])
        for gid, _ in g:
            gt_frames_count[gid] += 1
        ious = _iou_block(g, p)
        gi_of = {gid: i for i, (gid, _) in enumerate(g)}
        pi_of = {pid: j for j, (pid, _) in enumerate(p)}
        pairs: list[tuple[int, int]] = []
        for gid, pid in prev.items():
            i, j = gi_of.get(gid), pi_of.get(pid)
            if i is not None and j is not None and ious[i, j] >= iou_threshold:
                pairs.append((i, j))
        used_g = {i for i, _ in pairs}
        used_p = {j for _, j in pairs}
        free_g = [i for i in range(len(g)) if i not in used_g]
        free_p = [j for j in range(len(p)) if j not in used_p]
        if free_g and free_p:
            sub = ious[np.ix_(free_g, free_p)]
            for a, b in hungarian(np.where(sub >= iou_threshold, sub, 0.0), maximize=True):
                if sub[a, b] >= iou_threshold:
                    pairs.append((free_g[a], free_p[b]))
        current: dict[int, int] = {}
        for i, j in pairs:
            gid, pid = g[i][0], p[j][0]
            if gid in last_match and last_match[gid] != pid:
                ids += 1
            last_match[gid] = pid
            current[gid] = pid
            gt_matched_count[gid] += 1
            iou_sum += float(ious[i, j])
        prev = current
        matches += len(pairs)
        fp += len(p) - len(pairs)
        fn += len(g) - len(pairs)
    num_gt = sum(gt_frames_count.values())
    mota = 1.0 - (fp + fn + ids) / num_gt if num_gt else float("nan")
    ratios = [gt_matched_count[k] / n for k, n in gt_frames_count.items()]
    mt = 100.0 * sum(r >= 0.8 for r in ratios) / len(ratios) if ratios else 0.0
    ml = 100.0 * sum(r <= 0.2 for r in ratios) / len(ratios) if ratios else 0.0
    motp = iou_sum / matches if matches else 0.0
    return ClearMotResult(fp, fn, ids, mota, motp, mt, ml, num_gt, matches)


@dataclass
class IdMetricsResult:
    IDTP: int
    IDFP: int
    IDFN: int
    IDP: float
    IDR: float
    IDF1: float
    pairing: list[tuple[int, int]]


def trajectory_overlap(gt, pred, iou_threshold: float = 0.5):
    """Frames each (gt trajectory, predicted trajectory) pair agree on.

    Returns ``(gt_ids, pred_ids, counts, gt_lengths, pred_lengths)``.
    """
    gt, pred = as_frames(gt), as_frames(pred)
    gt_ids = sorted({i for xs in gt.values() for i, _ in xs})
    pred_ids = sorted({i for xs in pred.values() for i, _ in xs})
    gi = {k: n for n, k in enumerate(gt_ids)}
    pi = {k: n for n, k in enumerate(pred_ids)}
    counts = np.zeros((len(gt_ids), len(pred_ids)), dtype=np.int64)
    g_len = np.zeros(len(gt_ids), dtype=np.int64)
    p_len = np.zeros(len(pred_ids), dtype=np.int64)
    for frame in set(gt) | set(pred):
        g = gt.get(frame, [])
        p = pred.get(frame, [])
        for k, _ in g:
            g_len[gi[k]] += 1
        for k, _ in p:
            p_len[pi[k]] += 1
        ious = _iou_block(g, p)
        for a, b in zip(*np.nonzero(ious >= iou_threshold)):
            counts[gi[g[a][0]], pi[p[b][0]]] += 1
    return gt_ids, pred_ids, counts, g_len, p_len


def id_metrics(gt, pred, iou_threshold: float = 0.5) -> IdMetricsResult:
    """Identity precision / recall / F1 from the best one-to-one trajectory pairing."""
    gt_ids, pred_ids, counts, g_len, p_len = trajectory_overlap(gt, pred, iou_threshold)
    pairs = hungarian(counts, maximize=True) if counts.size else []
    idtp = int(sum(counts[i, j] for i, j in pairs))
    idfn = int(g_len.sum()) - idtp
    idfp = int(p_len.sum()) - idtp
    idp = idtp / (idtp + idfp) if idtp + idfp else 0.0
    idr = idtp / (idtp + idfn) if idtp + idfn else 0.0
    denom = 2 * idtp + idfp + idfn
    idf1 = 2 * idtp / denom if denom else 0.0
    pairing = [(gt_ids[i], pred_ids[j]) for i, j in pairs if counts[i, j] > 0]
    return IdMetricsResult(idtp, idfp, idfn, idp, idr, idf1, pairing)


@dataclass
class MetricsReport:
    MOTA: float
    MOTP: float
    IDF1: float
    IDP: float
    IDR: float
    FP: int
    FN: int
    IDS: int
    MT: float
    ML: float
    num_gt: int
    num_tracks: int

    def as_dict(self) -> dict:
        return asdict(self)

    def to_table(self) -> str:
        d = self.as_dict()
        cells = [(k, f"{v:.4f}" if isinstance(v, float) else str(v)) for k, v in d.items()]
        widths = [max(len(k), len(v)) for k, v in cells]
        head = "  ".join(k.rjust(w) for (k, _), w in zip(cells, widths))
        row = "  ".join(v.rjust(w) for (_, v), w in zip(cells, widths))
        return head + "\n" + row

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = self.as_dict()
        w.writerow(d.keys())
        w.writerow([repr(v) if isinstance(v, float) else v for v in d.values()])
        return buf.getvalue()


def evaluate(gt, pred, iou_threshold: float = 0.5) -> MetricsReport:
    gt_f, pred_f = as_frames(gt), as_frames(pred)
    cm = clear_mot(gt_f, pred_f, iou_threshold)
    im = id_metrics(gt_f, pred_f, iou_threshold)
    num_tracks = len({i for xs in pred_f.values() for i, _ in xs})
    return MetricsReport(cm.MOTA, cm.MOTP, im.IDF1, im.IDP, im.IDR, cm.FP, cm.FN, cm.IDS, cm.MT, cm.ML,
                         cm.num_gt, num_tracks)
