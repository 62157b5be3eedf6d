import numpy as np
import pytest

from transmot import tensor as tn
from transmot.geometry import BoundingBox, Detection


def numeric_grad(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def check_op(fn, *arrays, step=1e-5):
    """Gradcheck ``sum(fn(*tensors) * r)`` for a fixed random weighting ``r``."""
    ts = [tn.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*ts)
    r = np.random.default_rng(99).normal(size=out.shape)
    tn.tsum(out * r).backward()

    def f():
        with tn.no_grad():
            return float((fn(*ts).data * r).sum())

    return max(max_rel_err(t.grad, numeric_grad(f, t.data, step)) for t in ts)


def det(u, v, w, h, conf=0.9, app=None, frame=1, idx=0):
    return Detection(BoundingBox(u, v, w, h), conf, np.zeros(2) if app is None else app, frame, idx)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
