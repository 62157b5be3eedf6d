"""Rectangular linear assignment."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment


def hungarian(cost, maximize: bool = False) -> list[tuple[int, int]]:
    """Optimal one-to-one matching of rows to columns.

    Returns ``min(m, n)`` ``(row, col)`` pairs sorted by row. Costs must be
    finite.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if cost.size == 0:
        return []
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost, maximize=maximize)
    return [(int(r), int(c)) for r, c in zip(rows, cols)]


def matching_score(cost, pairs) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return float(sum(cost[i, j] for i, j in pairs))
