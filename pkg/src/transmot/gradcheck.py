"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .geometry import BoundingBox, Detection
from .model import ModelConfig, TransMOTModel, build_problem
from .tensor import Tensor
from .training import TrainingSample, assignment_loss

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    name: str
    shape: tuple[int, ...]
    max_error: float
    checks: int

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic))


def check_parameter(loss_fn: Callable[[], float], param: Tensor, analytic: np.ndarray, rng: np.random.Generator,
                    name: str = "", coords: int = 6, directions: int = 2, step: float = STEP) -> GradCheckResult:
    """Probe ``coords`` random entries and ``directions`` random unit directions.

    The directional probes compare ``<grad, v>`` with the central difference
    along ``v`` and so cover every entry of the tensor at once.
    """
    errors = []
    base = param.data.copy()
    flat = param.data.reshape(-1)
    picks = rng.choice(flat.size, size=min(coords, flat.size), replace=False)
    for idx in picks:
        orig = flat[idx]
        flat[idx] = orig + step
        up = loss_fn()
        flat[idx] = orig - step
        down = loss_fn()
        flat[idx] = orig
        errors.append(relative_error(float(analytic.reshape(-1)[idx]), (up - down) / (2 * step)))
    for _ in range(directions):
        v = rng.normal(size=param.shape)
        v /= np.linalg.norm(v)
        param.data = base + step * v
        up = loss_fn()
        param.data = base - step * v
        down = loss_fn()
        param.data = base.copy()
        errors.append(relative_error(float((analytic * v).sum()), (up - down) / (2 * step)))
    return GradCheckResult(name or (param.name or ""), param.shape, max(errors), len(errors))


def random_problem(rng: np.random.Generator, n: int, m: int, t: int, feature_dim: int,
                   img: float = 100.0, overlap: bool = True):
    """Random association problem plus labels; boxes cluster so graphs have edges."""
    def box():
        scale = 30.0 if overlap else img
        return BoundingBox(rng.uniform(0, scale), rng.uniform(0, scale), rng.uniform(10, 30), rng.uniform(20, 40))

    histories = []
    for i in range(n):
        slots = [s for s in range(t) if rng.random() < 0.75] or [t - 1]
        histories.append({s: (box(), rng.normal(size=feature_dim)) for s in slots})
    dets = [Detection(box(), 0.9, rng.normal(size=feature_dim), t + 1, j) for j in range(m)]
    problem = build_problem(histories, dets, t, img, img, feature_dim)
    labels = rng.integers(0, n + 1, size=m)
    sink = np.ones(n, dtype=bool)
    sink[labels[labels < n]] = False
    return TrainingSample(problem, labels, sink)


def gradcheck_model(seed: int = 0, n: int = 4, m: int = 5, t: int = 3, d_model: int = 16, heads: int = 4,
                    feature_dim: int = 6, lam: float = 1.0, corrupt: str | None = None,
                    coords: int = 6, directions: int = 2) -> tuple[list[GradCheckResult], float]:
    """Check every encoder/decoder parameter through the full loss.

    ``corrupt`` names a parameter whose analytic gradient is deliberately
    perturbed (negative control). Returns ``(results, seconds)``.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    model = TransMOTModel(ModelConfig(feature_dim=feature_dim, d_model=d_model, heads=heads, history=t, seed=seed))
    sample = random_problem(rng, n, m, t, feature_dim)
    params = model.parameters()
    tn.zero_grad(params.values())
    total, _ = assignment_loss(model(sample.problem), sample, lam)
    total.backward()
    grads = {k: p.grad.copy() for k, p in params.items()}
    if corrupt is not None:
        if corrupt not in grads:
            raise KeyError(f"unknown parameter {corrupt!r}")
        grads[corrupt] = grads[corrupt] * 1.5 + 0.1

    def loss_fn() -> float:
        with tn.no_grad():
            return float(assignment_loss(model(sample.problem), sample, lam)[0].data)

    results = [check_parameter(loss_fn, p, grads[k], rng, k, coords, directions) for k, p in params.items()]
    return results, time.perf_counter() - t0
