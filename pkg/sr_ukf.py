"""
Square-root unscented Kalman filter.

The covariance is carried as a lower-triangular factor S (P = S S^T) with a
strictly positive diagonal. Time and measurement updates use QR
re-triangularization and rank-one Cholesky updates/downdates, so P itself is
never formed except in the logged fallback of a failed downdate.
"""
import math
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import block_diag, qr, solve_triangular

from motion_models import MotionModel
from utils import wrap_angle

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class UnscentedWeights:
    mean: np.ndarray
    cov: np.ndarray
    gamma: float


def unscented_weights(n: int, alpha: float, beta: float = 2.0, kappa: float = 0.0) -> UnscentedWeights:
    """Scaled unscented transform weights for dimension n."""
    lam = alpha * alpha * (n + kappa) - n
    scale = n + lam
    wm = np.full(2 * n + 1, 1.0 / (2.0 * scale))
    wc = wm.copy()
    wm[0] = lam / scale
    wc[0] = wm[0] + 1.0 - alpha * alpha + beta
    return UnscentedWeights(wm, wc, math.sqrt(scale))


def sigma_points(mean: np.ndarray, sqrt_cov: np.ndarray, alpha: float, beta: float = 2.0,
                 kappa: float = 0.0) -> Tuple[np.ndarray, UnscentedWeights]:
    """
    Draw 2n+1 sigma points: mean, then mean + gamma * S[:, i], then mean - gamma * S[:, i].

    Returns:
        ((2n+1, n) points, weights)
    """
    mean = np.asarray(mean, dtype=float)
    n = mean.shape[0]
    weights = unscented_weights(n, alpha, beta, kappa)
    offsets = weights.gamma * np.asarray(sqrt_cov, dtype=float).T
    points = np.vstack([mean, mean + offsets, mean - offsets])
    return points, weights


def tria(rows: np.ndarray) -> np.ndarray:
    """Lower-triangular L (positive diagonal) with L L^T = rows^T rows."""
    r = qr(np.asarray(rows, dtype=float), mode="r")[0]
    n = r.shape[1]
    lower = r[:n, :n].T.copy()
    signs = np.sign(np.diag(lower))
    signs[signs == 0] = 1.0
    return lower * signs


def cholupdate(lower: np.ndarray, x: np.ndarray, sign: float = 1.0) -> np.ndarray:
    """
    Rank-one update (sign > 0) or downdate (sign < 0) of a Cholesky factor.

    Returns:
        L' with L' L'^T = L L^T + sign * x x^T

    Raises:
        np.linalg.LinAlgError: the downdated matrix is not positive definite
    """
    L = np.array(lower, dtype=float, copy=True)
    x = np.array(x, dtype=float, copy=True)
    sgn = 1.0 if sign >= 0 else -1.0
    for k in range(L.shape[0]):
        r2 = L[k, k] * L[k, k] + sgn * x[k] * x[k]
        if not r2 > 0.0 or L[k, k] <= 0.0:
            raise np.linalg.LinAlgError("rank-one downdate lost positive definiteness")
        r = math.sqrt(r2)
        c = r / L[k, k]
        s = x[k] / L[k, k]
        L[k, k] = r
        L[k + 1:, k] = (L[k + 1:, k] + sgn * s * x[k + 1:]) / c
        x[k + 1:] = c * x[k + 1:] - s * L[k + 1:, k]
    return L


def _weighted_update(lower: np.ndarray, x: np.ndarray, weight: float) -> np.ndarray:
    """Apply P += weight * x x^T to a factor, falling back to a dense Cholesky."""
    try:
        return cholupdate(lower, math.sqrt(abs(weight)) * x, weight)
    except np.linalg.LinAlgError:
        logger.warning("Square-root downdate failed; re-factorizing the dense covariance")
        dense = lower @ lower.T + weight * np.outer(x, x)
        return np.linalg.cholesky(0.5 * (dense + dense.T))


def weighted_mean(points: np.ndarray, weights: np.ndarray, angle_index: Optional[int] = None) -> np.ndarray:
    """Weighted sigma-point mean; the angle component is averaged on the circle."""
    center = points[0]
    diffs = points - center
    if angle_index is not None:
        diffs[:, angle_index] = wrap_angle(diffs[:, angle_index])
    mean = center + weights[1:] @ diffs[1:]
    if angle_index is not None:
        angles = points[:, angle_index]
        mean[angle_index] = math.atan2(weights @ np.sin(angles), weights @ np.cos(angles))
    return mean


def residuals(points: np.ndarray, mean: np.ndarray, angle_index: Optional[int] = None) -> np.ndarray:
    diffs = np.atleast_2d(points) - mean
    if angle_index is not None:
        diffs[:, angle_index] = wrap_angle(diffs[:, angle_index])
    return diffs


def _factor_from_deviations(deviations: np.ndarray, weights: UnscentedWeights,
                            extra_rows: Optional[np.ndarray] = None) -> np.ndarray:
    """Square root of sum_i Wc_i d_i d_i^T (+ extra^T extra)."""
    rows = math.sqrt(weights.cov[1]) * deviations[1:]
    if extra_rows is not None:
        rows = np.vstack([rows, extra_rows])
    lower = tria(rows)
    return _weighted_update(lower, deviations[0], weights.cov[0])


def predict(mean: np.ndarray, sqrt_cov: np.ndarray, model: MotionModel, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Time update with process noise carried in an augmented state.

    Returns:
        (predicted mean, predicted lower-triangular factor)
    """
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    n = model.dim_x
    aug_mean = np.concatenate([mean, np.zeros(model.dim_noise)])
    aug_sqrt = block_diag(sqrt_cov, np.diag(model.noise_sigmas()))
    points, weights = sigma_points(aug_mean, aug_sqrt, model.alpha, model.beta, model.kappa)

    propagated = model.transition(points[:, :n], points[:, n:], dt)
    angle = model.state_angle_index
    pred_mean = weighted_mean(propagated, weights.mean, angle)
    deviations = residuals(propagated, pred_mean, angle)
    pred_sqrt = _factor_from_deviations(deviations, weights)
    return pred_mean, pred_sqrt


@dataclass(frozen=True)
class Innovation:
    """Predicted measurement, its covariance factor and the state-measurement cross covariance."""
    z_pred: np.ndarray
    sqrt_cov: np.ndarray
    cross_cov: np.ndarray


def predict_measurement(mean: np.ndarray, sqrt_cov: np.ndarray, model: MotionModel) -> Innovation:
    points, weights = sigma_points(mean, sqrt_cov, model.alpha, model.beta, model.kappa)
    z_points = model.observe(points)
    z_angle = model.measurement_angle_index
    z_pred = weighted_mean(z_points, weights.mean, z_angle)
    z_dev = residuals(z_points, z_pred, z_angle)
    x_dev = residuals(points, mean, model.state_angle_index)
    sqrt_inn = _factor_from_deviations(z_dev, weights, extra_rows=model.measurement_sqrt().T)
    cross = (weights.cov[:, None] * x_dev).T @ z_dev
    return Innovation(z_pred, sqrt_inn, cross)


def measurement_residual(z: np.ndarray, z_pred: np.ndarray, angle_index: Optional[int] = None) -> np.ndarray:
    """z - z_pred; a box yaw is taken modulo pi, choosing the hypothesis nearest the prediction."""
    r = np.asarray(z, dtype=float) - z_pred
    if angle_index is not None:
        a = wrap_angle(r[angle_index])
        if abs(a) > math.pi / 2.0:
            a = wrap_angle(a - math.copysign(math.pi, a))
        r[angle_index] = a
    return r


def mahalanobis_sq(residual: np.ndarray, sqrt_inn: np.ndarray) -> float:
    """r^T (S S^T)^-1 r through one triangular solve."""
    w = solve_triangular(sqrt_inn, residual, lower=True, check_finite=True)
    return float(w @ w)


def update(mean: np.ndarray, sqrt_cov: np.ndarray, model: MotionModel, z: np.ndarray,
           innovation: Optional[Innovation] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Measurement update.

    Raises:
        FloatingPointError: non-finite innovation (the caller keeps the prior)
    """
    inn = innovation or predict_measurement(mean, sqrt_cov, model)
    r = measurement_residual(z, inn.z_pred, model.measurement_angle_index)
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(inn.sqrt_cov))):
        raise FloatingPointError("non-finite innovation")

    sz = inn.sqrt_cov
    gain = solve_triangular(sz.T, solve_triangular(sz, inn.cross_cov.T, lower=True), lower=False).T
    new_mean = mean + gain @ r
    if model.state_angle_index is not None:
        new_mean[model.state_angle_index] = wrap_angle(new_mean[model.state_angle_index])

    u = gain @ sz
    new_sqrt = np.array(sqrt_cov, dtype=float)
    try:
        for k in range(u.shape[1]):
            new_sqrt = cholupdate(new_sqrt, u[:, k], -1.0)
    except np.linalg.LinAlgError:
        logger.warning("Square-root measurement downdate failed; re-factorizing the dense covariance")
        dense = sqrt_cov @ sqrt_cov.T - u @ u.T
        new_sqrt = np.linalg.cholesky(0.5 * (dense + dense.T))
    return new_mean, new_sqrt
