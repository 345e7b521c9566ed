"""Rigid-body rotational dynamics with diagonal inertia.

State convention: attitude quaternion ``q = (qw, qx, qy, qz)`` (scalar first,
inertial-to-body) and body angular velocity ``omega`` in rad/s.  All
right-hand sides broadcast over leading batch axes so sigma points, ensemble
members and surrogate inertia samples can be integrated together.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import NumericalDivergence, quat_mul

__all__ = [
    "InertiaTriple",
    "RigidBodyState",
    "TorqueProfile",
    "Trajectory",
    "J_TRUE",
    "OMEGA0",
    "euler_rhs",
    "quat_rhs",
    "torque_at",
    "propagate",
    "propagate_omega",
    "rigid_body_step",
    "kinetic_energy",
    "angular_momentum_norm",
]


@dataclass(frozen=True)
class InertiaTriple:
    """Principal moments of inertia in kg m^2."""

    Jx: float
    Jy: float
    Jz: float

    def __post_init__(self):
        if not self.is_valid(self.as_array()):
            raise ValueError(f"not a physical inertia triple: {self}")

    @staticmethod
    def is_valid(J) -> bool | np.ndarray:
        """Positivity and triangle inequalities; works row-wise on (..., 3)."""
        J = np.asarray(J, dtype=np.float64)
        x, y, z = J[..., 0], J[..., 1], J[..., 2]
        ok = (x > 0) & (y > 0) & (z > 0) & (x + y >= z) & (y + z >= x) & (z + x >= y)
        ok &= np.all(np.isfinite(J), axis=-1)
        return bool(ok) if np.ndim(ok) == 0 else ok

    @classmethod
    def from_array(cls, J) -> "InertiaTriple":
        return cls(*(float(v) for v in J))

    def as_array(self) -> np.ndarray:
        return np.array([self.Jx, self.Jy, self.Jz])


J_TRUE = InertiaTriple(100.0, 80.0, 70.0)
OMEGA0 = np.array([0.1, 0.1, 0.1])


@dataclass
class RigidBodyState:
    q: np.ndarray
    omega: np.ndarray

    @classmethod
    def at_rest(cls, omega=OMEGA0) -> "RigidBodyState":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.array(omega, dtype=np.float64))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.omega])


# torque profile: amplitude, angular frequency, 0 = sin / 1 = cos, per axis
_TORQUE_TERMS = (
    ((1.0, 0.1, 0), (2.5, 0.3, 1), (1.0, 0.7, 0), (1.0, 1.5, 0)),
    ((2.6, 0.15, 1), (3.0, 0.4, 0), (2.4, 0.8, 1), (1.8, 1.8, 1)),
    ((3.4, 0.12, 0), (2.1, 0.5, 1), (1.0, 0.9, 0), (1.5, 2.0, 0)),
)
_AMP = np.array([[a for a, _, _ in axis] for axis in _TORQUE_TERMS])
_FREQ = np.array([[w for _, w, _ in axis] for axis in _TORQUE_TERMS])
_IS_COS = np.array([[c for _, _, c in axis] for axis in _TORQUE_TERMS], dtype=bool)

WINDOWED_STARTS = (200.0, 250.0, 300.0)
PERSISTENT_STARTS = tuple(50.0 + 25.0 * i for i in range(14))  # 50 ... 375
REGIMES = ("zero", "full", "windowed", "persistent")


def _full_torque(t: float) -> np.ndarray:
    out = np.empty(3)
    for i, axis in enumerate(_TORQUE_TERMS):
        s = 0.0
        for a, w, is_cos in axis:
            s += a * (math.cos(w * t) if is_cos else math.sin(w * t))
        out[i] = s
    return out


@dataclass(frozen=True)
class TorqueProfile:
    """External torque schedule: ``zero``, ``full``, ``windowed`` or ``persistent``.

    Pulsed regimes switch the full multi-frequency profile on over
    half-open one-second windows ``[t0, t0 + width)``.
    """

    regime: str = "zero"
    width: float = 1.0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; choose from {REGIMES}")

    @property
    def starts(self) -> tuple[float, ...]:
        if self.regime == "windowed":
            return WINDOWED_STARTS
        if self.regime == "persistent":
            return PERSISTENT_STARTS
        return ()

    def active(self, t: float) -> bool:
        if self.regime == "full":
            return True
        if self.regime == "zero":
            return False
        return any(t0 <= t < t0 + self.width for t0 in self.starts)

    def __call__(self, t: float) -> np.ndarray:
        return torque_at(self, t)

    def sample(self, t) -> np.ndarray:
        """Vectorized evaluation on an array of times; returns (len(t), 3)."""
        t = np.asarray(t, dtype=np.float64)
        arg = _FREQ[None] * t[:, None, None]
        terms = np.where(_IS_COS[None], np.cos(arg), np.sin(arg)) * _AMP[None]
        tau = terms.sum(axis=-1)
        if self.regime == "zero":
            return np.zeros_like(tau)
        if self.regime != "full":
            mask = np.zeros(t.shape, dtype=bool)
            for t0 in self.starts:
                mask |= (t >= t0) & (t < t0 + self.width)
            tau[~mask] = 0.0
        return tau


def torque_at(profile: TorqueProfile, t: float) -> np.ndarray:
    if profile.active(t):
        return _full_torque(t)
    return np.zeros(3)


def euler_rhs(J, omega, tau) -> np.ndarray:
    """Angular acceleration ``J^-1 (-omega x (J omega) + tau)`` for diagonal ``J``."""
    J = np.asarray(J.as_array() if isinstance(J, InertiaTriple) else J, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    return (np.asarray(tau, dtype=np.float64) - np.cross(omega, J * omega)) / J


def quat_rhs(q, omega) -> np.ndarray:
    """``0.5 * q (x) [0, omega]``."""
    omega = np.asarray(omega, dtype=np.float64)
    pure = np.concatenate([np.zeros(omega.shape[:-1] + (1,)), omega], axis=-1)
    return 0.5 * quat_mul(q, pure)


def _rhs7(x: np.ndarray, J: np.ndarray, tau: np.ndarray) -> np.ndarray:
    # expanded quat_rhs / euler_rhs; this sits in every filter's inner loop
    qw, qx, qy, qz = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    wx, wy, wz = x[..., 4], x[..., 5], x[..., 6]
    Jx, Jy, Jz = J[..., 0], J[..., 1], J[..., 2]
    out = np.empty_like(x)
    out[..., 0] = -0.5 * (qx * wx + qy * wy + qz * wz)
    out[..., 1] = 0.5 * (qw * wx + qy * wz - qz * wy)
    out[..., 2] = 0.5 * (qw * wy - qx * wz + qz * wx)
    out[..., 3] = 0.5 * (qw * wz + qx * wy - qy * wx)
    out[..., 4] = (tau[0] + (Jy - Jz) * wy * wz) / Jx
    out[..., 5] = (tau[1] + (Jz - Jx) * wz * wx) / Jy
    out[..., 6] = (tau[2] + (Jx - Jy) * wx * wy) / Jz
    return out


def rigid_body_step(x, J, profile: TorqueProfile, t: float, dt: float) -> np.ndarray:
    """RK4 step of the coupled (q, omega) system, stacked as (..., 7).

    The quaternion is *not* renormalized here; callers decide.
    """
    h2 = 0.5 * dt
    tau0 = torque_at(profile, t)
    tau1 = torque_at(profile, t + h2)
    tau2 = torque_at(profile, t + dt)
    k1 = _rhs7(x, J, tau0)
    k2 = _rhs7(x + h2 * k1, J, tau1)
    k3 = _rhs7(x + h2 * k2, J, tau1)
    k4 = _rhs7(x + dt * k3, J, tau2)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass
class Trajectory:
    t: np.ndarray  # (steps + 1,)
    q: np.ndarray  # (steps + 1, 4)
    omega: np.ndarray  # (steps + 1, 3)

    def __len__(self) -> int:
        return len(self.t)

    def state(self, k: int) -> RigidBodyState:
        return RigidBodyState(self.q[k].copy(), self.omega[k].copy())

    def states(self) -> list[RigidBodyState]:
        return [self.state(k) for k in range(len(self))]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "qw", "qx", "qy", "qz", "wx", "wy", "wz"])
            for k in range(len(self)):
                w.writerow([repr(float(self.t[k]))] + [repr(float(v)) for v in self.q[k]]
                           + [repr(float(v)) for v in self.omega[k]])

    @classmethod
    def from_csv(cls, path: str | Path) -> "Trajectory":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1:5], data[:, 5:8])


def propagate(J, x0: RigidBodyState, profile: TorqueProfile, dt: float, steps: int,
              t0: float = 0.0) -> Trajectory:
    """Integrate attitude and rate with RK4, renormalizing q after each step."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    J = J.as_array() if isinstance(J, InertiaTriple) else np.asarray(J, dtype=np.float64)
    out = np.empty((steps + 1, 7))
    out[0, :4] = x0.q
    out[0, 4:] = x0.omega
    x = out[0].copy()
    for k in range(steps):
        t = t0 + k * dt
        x = rigid_body_step(x, J, profile, t, dt)
        x[:4] /= math.sqrt(x[0] ** 2 + x[1] ** 2 + x[2] ** 2 + x[3] ** 2)
        if not np.all(np.isfinite(x)):
            raise NumericalDivergence("rigid-body propagation diverged", t + dt)
        out[k + 1] = x
    times = t0 + dt * np.arange(steps + 1)
    return Trajectory(times, out[:, :4], out[:, 4:])


def propagate_omega(J, omega0, dt: float, steps: int) -> np.ndarray:
    """Torque-free angular-velocity histories for a batch of inertias.

    ``J`` is (N, 3); returns (N, steps + 1, 3).  Euler's equations do not
    depend on attitude, so the quaternion is skipped entirely.
    """
    J = np.atleast_2d(np.asarray(J, dtype=np.float64))
    w = np.broadcast_to(np.asarray(omega0, dtype=np.float64), J.shape).copy()
    out = np.empty((J.shape[0], steps + 1, 3))
    out[:, 0] = w
    zero = np.zeros(3)
    h2 = 0.5 * dt
    for k in range(steps):
        k1 = euler_rhs(J, w, zero)
        k2 = euler_rhs(J, w + h2 * k1, zero)
        k3 = euler_rhs(J, w + h2 * k2, zero)
        k4 = euler_rhs(J, w + dt * k3, zero)
        w = w + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[:, k + 1] = w
    if not np.all(np.isfinite(out)):
        raise NumericalDivergence("torque-free propagation diverged", steps * dt)
    return out


def kinetic_energy(J, omega) -> np.ndarray:
    J = J.as_array() if isinstance(J, InertiaTriple) else np.asarray(J)
    return 0.5 * np.sum(J * np.asarray(omega) ** 2, axis=-1)


def angular_momentum_norm(J, omega) -> np.ndarray:
    J = J.as_array() if isinstance(J, InertiaTriple) else np.asarray(J)
    return np.linalg.norm(J * np.asarray(omega), axis=-1)
