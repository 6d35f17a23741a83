"""
Planar motion models used by the tracker.

CTRV state: (x, y, v, yaw, yaw_rate); process noise (longitudinal
acceleration, yaw acceleration). CV state: (x, y, vx, vy); process noise
(ax, ay). Both are written for batches of sigma points.
"""
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from utils import rotation_2d, wrap_angle

STRAIGHT_LINE_YAW_RATE = 1e-4


class MotionKind(str, Enum):
    CTRV = "CTRV"
    CV = "CV"


DEFAULT_ALPHA = {MotionKind.CTRV: 0.5, MotionKind.CV: 1e-3}


@dataclass(frozen=True)
class MotionModel:
    """Motion and measurement model of one object class."""
    kind: MotionKind
    accel_sigma: float = 2.0
    yaw_accel_sigma: float = 0.6
    alpha: Optional[float] = None
    beta: float = 2.0
    kappa: float = 0.0
    position_sigma: float = 0.3
    yaw_sigma: float = 0.1
    init_speed_sigma: float = 10.0
    init_yaw_rate_sigma: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", MotionKind(self.kind))
        if self.alpha is None:
            object.__setattr__(self, "alpha", DEFAULT_ALPHA[self.kind])
        sigmas = [self.accel_sigma, self.position_sigma, self.init_speed_sigma]
        if self.kind is MotionKind.CTRV:
            sigmas += [self.yaw_accel_sigma, self.yaw_sigma, self.init_yaw_rate_sigma]
        if min(sigmas) <= 0:
            raise ValueError(f"{self.kind.value}: noise sigmas must be > 0")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"{self.kind.value}: alpha must be in (0, 1]")

    @property
    def dim_x(self) -> int:
        return 5 if self.kind is MotionKind.CTRV else 4

    @property
    def dim_z(self) -> int:
        return 3 if self.kind is MotionKind.CTRV else 2

    @property
    def dim_noise(self) -> int:
        return 2

    @property
    def state_angle_index(self) -> Optional[int]:
        return 3 if self.kind is MotionKind.CTRV else None

    @property
    def measurement_angle_index(self) -> Optional[int]:
        return 2 if self.kind is MotionKind.CTRV else None

    def noise_sigmas(self) -> np.ndarray:
        if self.kind is MotionKind.CTRV:
            return np.array([self.accel_sigma, self.yaw_accel_sigma])
        return np.array([self.accel_sigma, self.accel_sigma])

    def measurement_sqrt(self) -> np.ndarray:
        """Lower-triangular square root of the measurement noise covariance."""
        if self.kind is MotionKind.CTRV:
            return np.diag([self.position_sigma, self.position_sigma, self.yaw_sigma])
        return np.diag([self.position_sigma, self.position_sigma])

    def transition(self, states: np.ndarray, noise: np.ndarray, dt: float) -> np.ndarray:
        """
        Propagate a batch of states over dt.

        Args:
            states: (k, dim_x) states
            noise: (k, dim_noise) process-noise samples
            dt: Time step in seconds

        Returns:
            (k, dim_x) propagated states, yaw wrapped
        """
        states = np.atleast_2d(np.asarray(states, dtype=float))
        noise = np.atleast_2d(np.asarray(noise, dtype=float))
        out = states.copy()
        half_dt2 = 0.5 * dt * dt

        if self.kind is MotionKind.CV:
            ax, ay = noise[:, 0], noise[:, 1]
            out[:, 0] += states[:, 2] * dt + half_dt2 * ax
            out[:, 1] += states[:, 3] * dt + half_dt2 * ay
            out[:, 2] += dt * ax
            out[:, 3] += dt * ay
            return out

        v, yaw, yaw_rate = states[:, 2], states[:, 3], states[:, 4]
        nu_a, nu_yaw = noise[:, 0], noise[:, 1]
        straight = np.abs(yaw_rate) < STRAIGHT_LINE_YAW_RATE
        safe_rate = np.where(straight, 1.0, yaw_rate)
        yaw_end = yaw + yaw_rate * dt
        dx = np.where(straight, v * np.cos(yaw) * dt, v / safe_rate * (np.sin(yaw_end) - np.sin(yaw)))
        dy = np.where(straight, v * np.sin(yaw) * dt, v / safe_rate * (np.cos(yaw) - np.cos(yaw_end)))

        out[:, 0] += dx + half_dt2 * np.cos(yaw) * nu_a
        out[:, 1] += dy + half_dt2 * np.sin(yaw) * nu_a
        out[:, 2] += dt * nu_a
        out[:, 3] = wrap_angle(yaw_end + half_dt2 * nu_yaw)
        out[:, 4] += dt * nu_yaw
        return out

    def predict_mean(self, mean: np.ndarray, dt: float) -> np.ndarray:
        """Noise-free propagation of a single state."""
        return self.transition(mean.reshape(1, -1), np.zeros((1, self.dim_noise)), dt)[0]

    def observe(self, states: np.ndarray) -> np.ndarray:
        """Box-pose measurement of a batch of states."""
        states = np.atleast_2d(states)
        if self.kind is MotionKind.CTRV:
            return states[:, [0, 1, 3]].copy()
        return states[:, [0, 1]].copy()

    def initial_state(self, x: float, y: float, yaw: float) -> Tuple[np.ndarray, np.ndarray]:
        """Mean and square-root covariance of a track born at a box pose with zero speed."""
        if self.kind is MotionKind.CTRV:
            mean = np.array([x, y, 0.0, wrap_angle(yaw), 0.0])
            sqrt_cov = np.diag([self.position_sigma, self.position_sigma, self.init_speed_sigma,
                                self.yaw_sigma, self.init_yaw_rate_sigma])
        else:
            mean = np.array([x, y, 0.0, 0.0])
            sqrt_cov = np.diag([self.position_sigma, self.position_sigma,
                                self.init_speed_sigma, self.init_speed_sigma])
        return mean, sqrt_cov

    def speed(self, mean: np.ndarray) -> float:
        if self.kind is MotionKind.CTRV:
            return float(mean[2])
        return float(math.hypot(mean[2], mean[3]))

    def frame_change(self, delta_yaw: float) -> np.ndarray:
        """Jacobian of the state under a planar frame rotation by delta_yaw."""
        jac = np.eye(self.dim_x)
        rot = rotation_2d(delta_yaw)
        jac[0:2, 0:2] = rot
        if self.kind is MotionKind.CV:
            jac[2:4, 2:4] = rot
        return jac
