"""Low-level numerical kernels shared by the rest of the package.

Everything here works in float64.  The random stream is a counter-based
SplitMix64 generator implemented on top of numpy uint64 arithmetic, so a
given seed produces the same bits on every platform and numpy version.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

__all__ = [
    "NumericalDivergence",
    "DecompositionError",
    "RngStream",
    "rk4_step",
    "cholesky",
    "symmetrize_jitter",
    "default_jitter",
    "quat_mul",
    "quat_conj",
    "quat_normalize",
    "gaussian_sample",
]


class NumericalDivergence(FloatingPointError):
    """Raised when an integrator or optimizer produces non-finite values."""

    def __init__(self, message: str, t: float | None = None):
        super().__init__(message if t is None else f"{message} (t={t:g})")
        self.t = t


class DecompositionError(np.linalg.LinAlgError):
    """Cholesky factorization failed (matrix not positive definite)."""


# ---------------------------------------------------------------------------
# random numbers
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _mix_int(x: int) -> int:
    return int(_mix64(np.array([x & _MASK64], dtype=np.uint64))[0])


class RngStream:
    """Deterministic counter-based random stream (SplitMix64).

    Output ``i`` of a stream is ``mix(key + (i + 1) * golden)``, so draws
    can be generated in vectorized blocks and any position can be read
    without advancing the counter (see :meth:`uniform_at`).  Streams are
    single-owner; derive independent ones with :meth:`spawn`.
    """

    def __init__(self, seed: int = 0):
        seed = int(seed)
        if seed < 0:
            raise ValueError("seed must be a non-negative integer")
        self.seed = seed & _MASK64
        self._key = np.uint64(_mix_int(self.seed ^ 0x5DEECE66D))
        self.counter = 0

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, counter={self.counter})"

    def spawn(self, *keys: int) -> "RngStream":
        """Independent child stream derived from this seed and ``keys``.

        The child depends only on (seed, keys), never on how many draws
        the parent has made.
        """
        s = self.seed
        for k in keys:
            s = _mix_int(_mix_int(s) ^ (int(k) * 0x632BE59BD9B4E019 + 1))
        return RngStream(s)

    def _raw_at(self, positions: np.ndarray) -> np.ndarray:
        pos = np.asarray(positions, dtype=np.uint64)
        with np.errstate(over="ignore"):
            state = self._key + (pos + np.uint64(1)) * _GOLDEN
        return _mix64(state)

    def bits(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit outputs."""
        pos = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        return self._raw_at(pos)

    @staticmethod
    def _to_unit(raw: np.ndarray) -> np.ndarray:
        # 53 high bits -> [0, 1)
        return (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def uniform(self, size: int | tuple[int, ...] = ()) -> np.ndarray | float:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        u = self._to_unit(self.bits(n))
        return float(u[0]) if not shape else u.reshape(shape)

    def uniform_at(self, positions) -> np.ndarray:
        """Uniforms at absolute stream positions; does not move the counter."""
        return self._to_unit(self._raw_at(np.asarray(positions)))

    def normal(self, size: int | tuple[int, ...] = ()) -> np.ndarray | float:
        """Standard normal variates by the Box-Muller transform."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u = self._to_unit(self.bits(2 * pairs)).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))  # 1 - u in (0, 1]
        phi = 2.0 * math.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(phi)
        z[:, 1] = r * np.sin(phi)
        z = z.ravel()[:n]
        return float(z[0]) if not shape else z.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, n: int, size: int, p: np.ndarray | None = None) -> np.ndarray:
        """Indices in ``range(n)`` drawn with replacement (optionally weighted)."""
        u = self.uniform(size)
        if p is None:
            return np.minimum((u * n).astype(np.int64), n - 1)
        cdf = np.cumsum(np.asarray(p, dtype=np.float64))
        if cdf[-1] <= 0:
            raise ValueError("choice weights must have positive sum")
        idx = np.searchsorted(cdf, u * cdf[-1], side="right")
        return np.minimum(idx, n - 1)

    def state_dict(self) -> dict:
        return {"seed": self.seed, "counter": self.counter}


# ---------------------------------------------------------------------------
# integration and linear algebra
# ---------------------------------------------------------------------------


def rk4_step(f: Callable[[np.ndarray, float], np.ndarray], x, t: float, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step of ``dx/dt = f(x, t)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=np.float64)
    h2 = 0.5 * dt
    k1 = f(x, t)
    k2 = f(x + h2 * k1, t + h2)
    k3 = f(x + h2 * k2, t + h2)
    k4 = f(x + dt * k3, t + dt)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NumericalDivergence("RK4 step produced non-finite state", t)
    return out


def cholesky(P) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == P``."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {P.shape}")
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(f"matrix is not positive definite: {exc}") from None


def default_jitter(P: np.ndarray) -> float:
    """1e-9 times the mean diagonal (1e-9 if the diagonal is non-positive)."""
    m = float(np.mean(np.diag(P)))
    return 1e-9 * m if m > 0 else 1e-9


def symmetrize_jitter(P, eps: float | None = None) -> np.ndarray:
    """Return ``(P + P.T) / 2 + eps * I``; ``eps`` defaults to :func:`default_jitter`."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {P.shape}")
    out = 0.5 * (P + P.T)
    if eps is None:
        eps = default_jitter(out)
    if eps:
        out[np.diag_indices_from(out)] += eps
    return out


# ---------------------------------------------------------------------------
# quaternions (scalar first, Hamilton convention); all accept (..., 4)
# ---------------------------------------------------------------------------


def quat_mul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q) -> np.ndarray:
    q = np.array(q, dtype=np.float64)
    q[..., 1:] *= -1.0
    return q


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def gaussian_sample(rng: RngStream, mean, cov, size: int | None = None) -> np.ndarray:
    """Draw ``mean + L z`` with ``L = cholesky(cov)``.

    An all-zero covariance short-circuits to the mean itself.  With
    ``size`` given, returns ``size`` draws stacked along axis 0.
    """
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    d = mean.shape[0]
    if not np.any(cov):
        return mean.copy() if size is None else np.tile(mean, (size, 1))
    L = cholesky(cov)
    if size is None:
        return mean + L @ rng.normal(d)
    z = rng.normal((size, d))
    return mean + z @ L.T
