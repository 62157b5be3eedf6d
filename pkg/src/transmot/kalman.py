"""Constant-velocity Kalman filter on (cx, cy, w, h)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BoundingBox

_F = np.eye(8)
_F[:4, 4:] = np.eye(4)
_H = np.eye(4, 8)
MIN_SIZE = 1e-3


@dataclass(frozen=True)
class KalmanParams:
    """Noise standard deviations relative to box size (per frame).

    Values are the usual pedestrian-tracking choices: 1/20 of the box side
    for position, 1/160 for velocity.
    """

    std_position: float = 1.0 / 20
    std_velocity: float = 1.0 / 160
    measurement_scale: float = 1.0
    jitter: float = 1e-9


@dataclass
class KalmanState:
    mean: np.ndarray
    covariance: np.ndarray

    def box(self) -> BoundingBox:
        cx, cy, w, h = self.mean[:4]
        return BoundingBox.from_center(cx, cy, max(w, MIN_SIZE), max(h, MIN_SIZE))


def _scales(w: float, h: float) -> np.ndarray:
    return np.array([w, h, w, h])


def kalman_init(box: BoundingBox, params: KalmanParams = KalmanParams()) -> KalmanState:
    cx, cy = box.center
    mean = np.array([cx, cy, box.w, box.h, 0, 0, 0, 0], dtype=np.float64)
    s = _scales(box.w, box.h)
    std = np.concatenate([2 * params.std_position * s, 10 * params.std_velocity * s])
    return KalmanState(mean, np.diag(std ** 2))


def kalman_predict(state: KalmanState, params: KalmanParams = KalmanParams()) -> tuple[KalmanState, BoundingBox]:
    s = _scales(abs(state.mean[2]), abs(state.mean[3]))
    q = np.diag(np.concatenate([params.std_position * s, params.std_velocity * s]) ** 2)
    mean = _F @ state.mean
    cov = _F @ state.covariance @ _F.T + q
    new = KalmanState(mean, 0.5 * (cov + cov.T))
    return new, new.box()


def kalman_update(state: KalmanState, z: BoundingBox, params: KalmanParams = KalmanParams()) -> KalmanState:
    cx, cy = z.center
    meas = np.array([cx, cy, z.w, z.h])
    s = _scales(abs(state.mean[2]), abs(state.mean[3]))
    r = np.diag((params.measurement_scale * params.std_position * s) ** 2)
    proj_cov = _H @ state.covariance @ _H.T + r
    jitter = params.jitter
    while True:
        try:
            chol = np.linalg.cholesky(proj_cov)
            break
        except np.linalg.LinAlgError:
            proj_cov = proj_cov + jitter * np.eye(4)
            jitter *= 10
    # gain = P H^T S^{-1}, via two triangular solves
    pht = state.covariance @ _H.T
    gain = np.linalg.solve(chol.T, np.linalg.solve(chol, pht.T)).T
    mean = state.mean + gain @ (meas - _H @ state.mean)
    mean[2] = max(mean[2], MIN_SIZE)
    mean[3] = max(mean[3], MIN_SIZE)
    cov = state.covariance - gain @ proj_cov @ gain.T
    return KalmanState(mean, 0.5 * (cov + cov.T))
