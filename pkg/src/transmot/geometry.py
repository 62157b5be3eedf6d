"""Box geometry and the IoU-weighted spatial graphs over tracklets and candidates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

SINK_WEIGHT = 0.5


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box; (u, v) is the top-left corner, all in pixels."""

    u: float
    v: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box width and height must be positive, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return self.u + self.w / 2.0, self.v + self.h / 2.0

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BoundingBox":
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)


@dataclass
class Detection:
    bbox: BoundingBox
    confidence: float
    appearance: np.ndarray
    frame: int
    source_index: int

    def __post_init__(self):
        self.appearance = np.asarray(self.appearance, dtype=np.float64)


@dataclass
class SparseWeightedGraph:
    """Undirected weighted graph stored as a symmetric directed edge list.

    Self-loops of weight 1 are always present. When ``has_virtual_sink`` is
    set, node ``num_nodes - 1`` is the sink.
    """

    num_nodes: int
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    has_virtual_sink: bool = False
    _dense: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def edges(self) -> set[tuple[int, int, float]]:
        return {(int(i), int(j), float(w)) for i, j, w in zip(self.src, self.dst, self.weight)}

    @property
    def num_edges(self) -> int:
        return len(self.src)

    def dense(self) -> np.ndarray:
        if self._dense is None:
            a = np.zeros((self.num_nodes, self.num_nodes))
            a[self.src, self.dst] = self.weight
            self._dense = a
        return self._dense


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.u + a.w, b.u + b.w) - max(a.u, b.u)
    ih = min(a.v + a.h, b.v + b.h) - max(a.v, b.v)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # round-off can push near-identical boxes just above 1
    return min(inter / (a.area + b.area - inter), 1.0)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) arrays of (u, v, w, h)."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 0] + a[:, None, 2], b[None, :, 0] + b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 1] + a[:, None, 3], b[None, :, 1] + b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return np.minimum(inter / union, 1.0)


def intersection_over_area(unassoc: BoundingBox, assoc: BoundingBox) -> float:
    """Intersection area divided by the area of ``unassoc``."""
    iw = min(unassoc.u + unassoc.w, assoc.u + assoc.w) - max(unassoc.u, assoc.u)
    ih = min(unassoc.v + unassoc.h, assoc.v + assoc.h) - max(unassoc.v, assoc.v)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih / unassoc.area


def _graph_from_boxes(num_nodes: int, boxes: Sequence[tuple[int, BoundingBox]], sink: bool) -> SparseWeightedGraph:
    src = list(range(num_nodes))
    dst = list(range(num_nodes))
    wts = [1.0] * num_nodes
    if boxes:
        idx = np.array([i for i, _ in boxes], dtype=np.int64)
        arr = np.array([b.as_array() for _, b in boxes])
        ious = iou_matrix(arr, arr)
        ii, jj = np.nonzero(ious > 0)
        off = ii != jj
        src.extend(idx[ii[off]].tolist())
        dst.extend(idx[jj[off]].tolist())
        wts.extend(ious[ii[off], jj[off]].tolist())
    if sink:
        s = num_nodes - 1
        for i in range(num_nodes - 1):
            src.extend((i, s))
            dst.extend((s, i))
            wts.extend((SINK_WEIGHT, SINK_WEIGHT))
    return SparseWeightedGraph(
        num_nodes=num_nodes,
        src=np.array(src, dtype=np.int64),
        dst=np.array(dst, dtype=np.int64),
        weight=np.array(wts, dtype=np.float64),
        has_virtual_sink=sink,
    )


def build_tracklet_graph(boxes: Iterable[tuple[int, BoundingBox]], num_nodes: int | None = None) -> SparseWeightedGraph:
    """Graph over tracklet nodes at one frame.

    ``boxes`` holds ``(node_index, box)`` for tracklets present at the frame.
    Nodes in ``range(num_nodes)`` without a box stay isolated (self-loop only).
    """
    boxes = list(boxes)
    indices = [i for i, _ in boxes]
    if len(set(indices)) != len(indices):
        raise ValueError("build_tracklet_graph: node indices must be distinct")
    if num_nodes is None:
        num_nodes = max(indices) + 1 if indices else 0
    return _graph_from_boxes(num_nodes, boxes, sink=False)


def build_candidate_graph(detections: Sequence[Detection]) -> SparseWeightedGraph:
    """Graph over the frame's candidates plus a trailing virtual sink node."""
    boxes = [(i, d.bbox) for i, d in enumerate(detections)]
    return _graph_from_boxes(len(detections) + 1, boxes, sink=True)


def normalize_box(b: BoundingBox, img_w: float, img_h: float) -> np.ndarray:
    if img_w <= 0 or img_h <= 0:
        raise ValueError("image dimensions must be positive")
    return np.array([b.u / img_w, b.v / img_h, b.w / img_w, b.h / img_h], dtype=np.float64)


def dense_adjacency(g: SparseWeightedGraph) -> np.ndarray:
    return g.dense().copy()


def scaled_laplacian(g: SparseWeightedGraph) -> np.ndarray:
    """Dense ``2 L / lambda_max - I`` with ``lambda_max = 2``.

    ``L`` is the symmetric normalized Laplacian of the graph with self-loops
    removed; isolated nodes contribute a zero row.
    """
    a = g.dense().copy()
    np.fill_diagonal(a, 0.0)
    deg = a.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    return -(inv_sqrt[:, None] * a * inv_sqrt[None, :])


def laplacian_edges(g: SparseWeightedGraph) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Non-zero entries of :func:`scaled_laplacian` as ``(src, dst, coef)``."""
    off = g.src != g.dst
    src, dst, w = g.src[off], g.dst[off], g.weight[off]
    deg = np.zeros(g.num_nodes)
    np.add.at(deg, dst, w)
    coef = -w / np.sqrt(deg[src] * deg[dst])
    return src, dst, coef
