"""Nonlinear filters over the augmented attitude / rate / log-inertia state.

State layout (n = 10): ``[qw, qx, qy, qz, wx, wy, wz, ln Jx, ln Jy, ln Jz]``.
Process and observation maps are batch callables: ``process(X, t, dt)``
and ``h(X)`` take an (N, n) array and return (N, n) / (N, m).  The filter
functions themselves are model-agnostic, which is what lets the linear
Kalman oracle tests drive them directly.

The quaternion is treated additively; callers pass ``quat=slice(0, 4)``
(the default for the rigid-body helpers) to renormalize it in the mean
after each predict and in every ensemble member.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np

from .dynamics import InertiaTriple, TorqueProfile, rigid_body_step
from .numerics import (
    DecompositionError,
    NumericalDivergence,
    RngStream,
    cholesky,
    symmetrize_jitter,
)

__all__ = [
    "UtParams",
    "FilterBelief",
    "Prediction",
    "EnsembleCollapse",
    "RigidBodyProcess",
    "measure_state",
    "sigma_points",
    "unscented_moments",
    "ukf_predict",
    "ukf_update",
    "numerical_jacobian",
    "ekf_predict",
    "ekf_update",
    "ekf_step",
    "enkf_step",
    "theta_map",
    "theta_unmap",
    "prior_to_theta",
    "QUAT",
    "THETA",
]

QUAT = slice(0, 4)
RATE = slice(4, 7)
THETA = slice(7, 10)

Process = Callable[[np.ndarray, float, float], np.ndarray]
Observation = Callable[[np.ndarray], np.ndarray]


class EnsembleCollapse(FloatingPointError):
    pass


@dataclass(frozen=True)
class UtParams:
    """Scaled unscented transform parameters for an ``n``-dimensional state."""

    n: int
    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0

    @property
    def lam(self) -> float:
        return self.alpha ** 2 * (self.n + self.kappa) - self.n

    @cached_property
    def Wm(self) -> np.ndarray:
        w = np.full(2 * self.n + 1, 1.0 / (2.0 * (self.n + self.lam)))
        w[0] = self.lam / (self.n + self.lam)
        return w

    @cached_property
    def Wc(self) -> np.ndarray:
        w = self.Wm.copy()
        w[0] += 1.0 - self.alpha ** 2 + self.beta
        return w


@dataclass
class FilterBelief:
    mean: np.ndarray
    cov: np.ndarray

    def copy(self) -> "FilterBelief":
        return FilterBelief(self.mean.copy(), self.cov.copy())

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


@dataclass
class Prediction:
    belief: FilterBelief
    sigmas: np.ndarray  # propagated sigma points, (2n+1, n)


def _chol_retry(P: np.ndarray) -> np.ndarray:
    try:
        return cholesky(P)
    except DecompositionError:
        return cholesky(symmetrize_jitter(P, max(1e-9 * abs(np.trace(P)) / len(P), 1e-12)))


def sigma_points(belief: FilterBelief, ut: UtParams) -> np.ndarray:
    """Central point plus +/- columns of chol((n + lambda) P); shape (2n+1, n)."""
    n = ut.n
    S = _chol_retry((n + ut.lam) * belief.cov)
    m = belief.mean
    X = np.empty((2 * n + 1, n))
    X[0] = m
    X[1:n + 1] = m + S.T
    X[n + 1:] = m - S.T
    return X


def unscented_moments(Y: np.ndarray, ut: UtParams) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean and covariance of transformed sigma points ``Y``.

    The mean is accumulated as offsets from the central point, which is
    exact (weights sum to one) and avoids cancellation when the central
    weight is large and negative.
    """
    mean = Y[0] + ut.Wm[1:] @ (Y[1:] - Y[0])
    D = Y - mean
    return mean, (D.T * ut.Wc) @ D


def _normalize_quat(x: np.ndarray, quat) -> np.ndarray:
    if quat is not None:
        q = x[..., quat]
        x[..., quat] = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return x


def ukf_predict(belief: FilterBelief, ut: UtParams, process: Process, t: float, dt: float,
                Q, quat=None) -> Prediction:
    X = sigma_points(belief, ut)
    Xp = process(X, t, dt)
    if not np.all(np.isfinite(Xp)):
        raise NumericalDivergence("sigma-point propagation diverged", t + dt)
    mean, P = unscented_moments(Xp, ut)
    _normalize_quat(mean, quat)
    return Prediction(FilterBelief(mean, P + Q), Xp)


def _gain(Pxz: np.ndarray, S: np.ndarray) -> np.ndarray:
    L = _chol_retry(S)
    # K = Pxz S^-1 via two triangular solves
    Y = np.linalg.solve(L, Pxz.T)
    return np.linalg.solve(L.T, Y).T


def ukf_update(pred: Prediction, z, h: Observation, R, ut: UtParams,
               redraw: bool = False) -> tuple[FilterBelief, np.ndarray]:
    """Sensor correction; returns (belief, innovation).

    By default the propagated sigma points are reused, so additive process
    noise does not enter ``S`` or ``P_xz``.  ``redraw=True`` rebuilds them
    about the predicted belief first, which makes the update exact for
    linear-Gaussian models with nonzero ``Q``.
    """
    X = sigma_points(pred.belief, ut) if redraw else pred.sigmas
    xm = pred.belief.mean
    Z = h(X)
    zhat, Szz = unscented_moments(Z, ut)
    S = Szz + R
    Pxz = ((X - xm).T * ut.Wc) @ (Z - zhat)
    K = _gain(Pxz, S)
    innov = np.asarray(z, dtype=np.float64) - zhat
    mean = xm + K @ innov
    P = pred.belief.cov - K @ S @ K.T
    return FilterBelief(mean, 0.5 * (P + P.T)), innov


def numerical_jacobian(fn: Callable[[np.ndarray], np.ndarray], x, rel: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a batch map with steps ``rel * max(|x_j|, 1)``."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    h = rel * np.maximum(np.abs(x), 1.0)
    X = np.empty((2 * n, n))
    X[:n] = x
    X[n:] = x
    idx = np.arange(n)
    X[idx, idx] += h
    X[n + idx, idx] -= h
    Y = fn(X)
    return ((Y[:n] - Y[n:]) / (2.0 * h[:, None])).T


def ekf_predict(belief: FilterBelief, process: Process, t: float, dt: float, Q,
                quat=None, rel: float = 1e-6) -> FilterBelief:
    x = belief.mean
    F = numerical_jacobian(lambda X: process(X, t, dt), x, rel)
    mean = process(x[None, :], t, dt)[0]
    if not np.all(np.isfinite(mean)):
        raise NumericalDivergence("EKF propagation diverged", t + dt)
    _normalize_quat(mean, quat)
    return FilterBelief(mean, F @ belief.cov @ F.T + Q)


def ekf_update(belief: FilterBelief, z, h: Observation, R, rel: float = 1e-6) -> tuple[FilterBelief, np.ndarray]:
    x = belief.mean
    H = numerical_jacobian(h, x, rel)
    P = belief.cov
    S = H @ P @ H.T + R
    K = _gain(P @ H.T, S)
    innov = np.asarray(z, dtype=np.float64) - h(x[None, :])[0]
    P = P - K @ S @ K.T
    return FilterBelief(x + K @ innov, 0.5 * (P + P.T)), innov


def ekf_step(belief: FilterBelief, z, process: Process, h: Observation, t: float, dt: float,
             Q, R, quat=None) -> tuple[FilterBelief, np.ndarray]:
    """Finite-difference EKF predict + correct."""
    return ekf_update(ekf_predict(belief, process, t, dt, Q, quat), z, h, R)


def _noise(rng: RngStream, cov: np.ndarray, size: int) -> np.ndarray | None:
    if not np.any(cov):
        return None
    L = cholesky(cov)
    return rng.normal((size, cov.shape[0])) @ L.T


def enkf_step(ensemble, z, process: Process, h: Observation, t: float, dt: float, Q, R,
              rng: RngStream, quat=None, min_spread: float = 1e-14) -> tuple[np.ndarray, np.ndarray]:
    """Stochastic (perturbed-observation) ensemble Kalman step.

    Returns the updated (N, n) ensemble and the innovation of the mean.
    """
    E = np.asarray(ensemble, dtype=np.float64)
    N = E.shape[0]
    if N < 2:
        raise ValueError("ensemble needs at least two members")
    E = process(E, t, dt)
    if not np.all(np.isfinite(E)):
        raise NumericalDivergence("ensemble propagation diverged", t + dt)
    w = _noise(rng, np.asarray(Q, dtype=np.float64), N)
    if w is not None:
        E = E + w
    _normalize_quat(E, quat)
    if min_spread > 0 and np.max(np.std(E, axis=0)) < min_spread:
        raise EnsembleCollapse(f"ensemble spread below {min_spread:g} at t={t + dt:g}")
    Z = h(E)
    A = E - E.mean(axis=0)
    B = Z - Z.mean(axis=0)
    Pxz = A.T @ B / (N - 1)
    S = B.T @ B / (N - 1) + R
    K = _gain(Pxz, S)
    z = np.asarray(z, dtype=np.float64)
    v = _noise(rng, np.asarray(R, dtype=np.float64), N)
    D = z - Z if v is None else z + v - Z
    E = E + D @ K.T
    _normalize_quat(E, quat)
    return E, z - Z.mean(axis=0)


# ---------------------------------------------------------------------------
# rigid-body models
# ---------------------------------------------------------------------------


class RigidBodyProcess:
    """One RK4 step of the attitude/rate dynamics with ``J = exp(theta)``.

    The log-inertia block is carried through unchanged.
    """

    def __init__(self, profile: TorqueProfile):
        self.profile = profile

    def __call__(self, X: np.ndarray, t: float, dt: float) -> np.ndarray:
        X = np.atleast_2d(X)
        out = X.copy()
        out[:, :7] = rigid_body_step(X[:, :7], np.exp(X[:, THETA]), self.profile, t, dt)
        return out


def measure_state(X: np.ndarray) -> np.ndarray:
    """Physical sensor model: quaternion and body rate."""
    return np.atleast_2d(X)[:, :7]


def theta_map(J) -> np.ndarray:
    J = J.as_array() if isinstance(J, InertiaTriple) else np.asarray(J, dtype=np.float64)
    if np.any(J <= 0):
        raise ValueError("inertia must be strictly positive to take logs")
    return np.log(J)


def theta_unmap(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    return np.exp(theta)


def prior_to_theta(mu, Sigma, ut: UtParams | None = None) -> FilterBelief:
    """Unscented image of a physical inertia Gaussian in log coordinates."""
    ut = UtParams(3) if ut is None else UtParams(3, ut.alpha, ut.beta, ut.kappa)
    X = sigma_points(FilterBelief(np.asarray(mu, dtype=np.float64),
                                  np.asarray(Sigma, dtype=np.float64)), ut)
    mean, cov = unscented_moments(theta_map(X), ut)
    return FilterBelief(mean, 0.5 * (cov + cov.T))
