"""Synthetic sensors and the training-data pipeline for LRW/WFM.

``build_dataset`` follows the reliability-scoring recipe: simulate a
reference rate history with the nominal inertia, corrupt it with gyro noise,
integrate a cloud of perturbed inertias, score each by the mean-squared rate
mismatch, and split the cloud into train / meta (clean validation) / test.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import J_TRUE, OMEGA0, InertiaTriple, RigidBodyState, Trajectory, propagate_omega
from .numerics import RngStream

__all__ = [
    "Measurement",
    "TrainingSample",
    "WeightedDataset",
    "ResampleLimitError",
    "measure",
    "measure_trajectory",
    "sample_inertias",
    "reliability_error",
    "zscores",
    "median_labels",
    "build_dataset",
]

INERTIA_SAMPLING_STD = np.array([10.0, 8.0, 7.0])
DATA_DT = 0.05
DATA_SNAPSHOTS = 600


class ResampleLimitError(RuntimeError):
    pass


@dataclass
class Measurement:
    z: np.ndarray  # [qw, qx, qy, qz, wx, wy, wz]
    t: float = 0.0

    @property
    def q(self) -> np.ndarray:
        return self.z[:4]

    @property
    def omega(self) -> np.ndarray:
        return self.z[4:]


def measure(x: RigidBodyState, sigma_quat: float, sigma_gyro: float, rng: RngStream,
            t: float = 0.0) -> Measurement:
    """Noisy quaternion + gyro reading; the noisy quaternion is renormalized."""
    if sigma_quat < 0 or sigma_gyro < 0:
        raise ValueError("noise levels must be non-negative")
    q = np.asarray(x.q, dtype=np.float64)
    w = np.asarray(x.omega, dtype=np.float64)
    if sigma_quat > 0:
        q = q + sigma_quat * rng.normal(4)
    if sigma_gyro > 0:
        w = w + sigma_gyro * rng.normal(3)
    q = q / np.linalg.norm(q)
    return Measurement(np.concatenate([q, w]), t)


def measure_trajectory(traj: Trajectory, sigma_quat: float, sigma_gyro: float,
                       rng: RngStream) -> np.ndarray:
    """Vectorized :func:`measure` over a whole trajectory; returns (len, 7)."""
    n = len(traj)
    q = traj.q + sigma_quat * rng.normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w = traj.omega + sigma_gyro * rng.normal((n, 3))
    return np.hstack([q, w])


def sample_inertias(n: int, rng: RngStream, mean=None, std=None,
                    max_rejections: int = 1000) -> np.ndarray:
    """Draw ``n`` physical inertia triples as an (n, 3) array.

    Each axis is Gaussian (10% relative deviation about the nominal
    inertia by default); rows failing positivity or the triangle
    inequalities are redrawn.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    mean = J_TRUE.as_array() if mean is None else np.asarray(mean, dtype=np.float64)
    std = INERTIA_SAMPLING_STD if std is None else np.asarray(std, dtype=np.float64)
    out = mean + std * rng.normal((n, 3))
    bad = np.flatnonzero(~InertiaTriple.is_valid(out))
    attempts = 0
    while bad.size:
        attempts += 1
        if attempts > max_rejections:
            raise ResampleLimitError(
                f"{bad.size} inertia draws still invalid after {max_rejections} redraws")
        out[bad] = mean + std * rng.normal((bad.size, 3))
        bad = bad[~InertiaTriple.is_valid(out[bad])]
    return out


def reliability_error(omega_s, omega_m) -> np.ndarray | float:
    """Mean over snapshots of the squared rate mismatch.

    Accepts (M, 3) histories or a batch (N, M, 3) of simulated ones.
    """
    omega_s = np.asarray(omega_s, dtype=np.float64)
    omega_m = np.asarray(omega_m, dtype=np.float64)
    if omega_s.shape[-2:] != omega_m.shape[-2:]:
        raise ValueError(f"trajectory shapes differ: {omega_s.shape} vs {omega_m.shape}")
    if omega_s.shape[-2] < 1:
        raise ValueError("empty trajectory")
    e = np.mean(np.sum((omega_s - omega_m) ** 2, axis=-1), axis=-1)
    return float(e) if np.ndim(e) == 0 else e


def zscores(e) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    sd = e.std()
    if sd == 0:
        return np.zeros_like(e)
    return (e - e.mean()) / sd


def median_labels(e) -> np.ndarray:
    """1 where the error is strictly above the median, else 0."""
    e = np.asarray(e, dtype=np.float64)
    return (e > np.median(e)).astype(np.int64)


@dataclass
class TrainingSample:
    J: InertiaTriple
    e: float
    zscore: float
    label: int
    weight: float
    split: str = "train"
    sample_id: int = 0


SPLITS = ("train", "val", "test")


@dataclass
class WeightedDataset:
    """Column-oriented store of scored inertia samples."""

    J: np.ndarray
    e: np.ndarray
    z: np.ndarray
    label: np.ndarray
    weight: np.ndarray
    split: np.ndarray  # array of "train" / "val" / "test"
    ids: np.ndarray
    raw_weight: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.e)

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def samples(self) -> list[TrainingSample]:
        return [
            TrainingSample(InertiaTriple.from_array(self.J[i]), float(self.e[i]), float(self.z[i]),
                           int(self.label[i]), float(self.weight[i]), str(self.split[i]),
                           int(self.ids[i]))
            for i in range(len(self))
        ]

    def with_weights(self, weight, raw_weight=None) -> "WeightedDataset":
        w = np.asarray(weight, dtype=np.float64)
        if w.shape != self.e.shape or np.any(w < 0):
            raise ValueError("weights must be non-negative, one per sample")
        s = w.sum()
        if s <= 0:
            raise ValueError("weights sum to zero")
        raw = None if raw_weight is None else np.asarray(raw_weight, dtype=np.float64)
        return WeightedDataset(self.J, self.e, self.z, self.label, w / s, self.split, self.ids,
                               raw, dict(self.meta))

    def reordered(self, order) -> "WeightedDataset":
        order = np.asarray(order)
        raw = None if self.raw_weight is None else self.raw_weight[order]
        return WeightedDataset(self.J[order], self.e[order], self.z[order], self.label[order],
                               self.weight[order], self.split[order], self.ids[order], raw,
                               dict(self.meta))

    def to_json(self) -> dict:
        rows = []
        for i in range(len(self)):
            row = {
                "id": int(self.ids[i]),
                "Jx": float(self.J[i, 0]),
                "Jy": float(self.J[i, 1]),
                "Jz": float(self.J[i, 2]),
                "e": float(self.e[i]),
                "z": float(self.z[i]),
                "label": int(self.label[i]),
                "weight": float(self.weight[i]),
                "split": str(self.split[i]),
            }
            if self.raw_weight is not None:
                row["raw_weight"] = float(self.raw_weight[i])
            rows.append(row)
        head = {k: self.meta.get(k) for k in ("seed", "sigma", "M")}
        head["n"] = len(self)
        head.update({k: v for k, v in self.meta.items() if k not in head})
        return {**head, "samples": rows}

    @classmethod
    def from_json(cls, data: dict) -> "WeightedDataset":
        rows = data["samples"]
        J = np.array([[r["Jx"], r["Jy"], r["Jz"]] for r in rows], dtype=np.float64).reshape(-1, 3)
        raw = None
        if rows and "raw_weight" in rows[0]:
            raw = np.array([r["raw_weight"] for r in rows])
        meta = {k: v for k, v in data.items() if k not in ("samples", "n")}
        return cls(
            J=J,
            e=np.array([r["e"] for r in rows], dtype=np.float64),
            z=np.array([r["z"] for r in rows], dtype=np.float64),
            label=np.array([r["label"] for r in rows], dtype=np.int64),
            weight=np.array([r["weight"] for r in rows], dtype=np.float64),
            split=np.array([r["split"] for r in rows], dtype="<U5"),
            ids=np.array([r.get("id", i) for i, r in enumerate(rows)], dtype=np.int64),
            raw_weight=raw,
            meta=meta,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "WeightedDataset":
        return cls.from_json(json.loads(Path(path).read_text()))


def reference_rates(dt: float = DATA_DT, snapshots: int = DATA_SNAPSHOTS,
                    J=J_TRUE) -> np.ndarray:
    """Torque-free nominal rate history at t_k = k dt, k = 1..snapshots."""
    J = J.as_array() if isinstance(J, InertiaTriple) else J
    return propagate_omega(J, OMEGA0, dt, snapshots)[0, 1:]


def build_dataset(n: int, sigma: float, rng: RngStream, inertias=None,
                  meta_fraction: float = 0.1, test_fraction: float = 0.2,
                  dt: float = DATA_DT, snapshots: int = DATA_SNAPSHOTS) -> WeightedDataset:
    """Generate, score and split ``n`` surrogate inertias at gyro noise ``sigma``.

    Sub-streams are spawned per stage (noise, inertia draws, splits) so two
    datasets with the same seed but different ``sigma`` share inertia
    samples and the noise pattern, differing only in its amplitude.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    omega_star = reference_rates(dt, snapshots)
    omega_m = omega_star + sigma * rng.spawn(1).normal(omega_star.shape)
    if inertias is None:
        J = sample_inertias(n, rng.spawn(2))
    else:
        J = np.asarray(inertias, dtype=np.float64).reshape(n, 3)
    omega_s = propagate_omega(J, OMEGA0, dt, snapshots)[:, 1:]
    e = reliability_error(omega_s, omega_m)
    e = np.atleast_1d(e)

    split = np.full(n, "train", dtype="<U5")
    n_meta = max(1, int(round(meta_fraction * n))) if n > 1 else 0
    meta_idx = np.argsort(e, kind="stable")[:n_meta]
    split[meta_idx] = "val"
    rest = np.flatnonzero(split == "train")
    n_test = min(int(round(test_fraction * n)), max(rest.size - 1, 0))
    perm = rest[rng.spawn(3).permutation(rest.size)]
    split[perm[:n_test]] = "test"

    meta = {"seed": rng.seed, "sigma": float(sigma), "M": int(snapshots), "dt": float(dt)}
    return WeightedDataset(
        J=J,
        e=e,
        z=zscores(e),
        label=median_labels(e),
        weight=np.full(n, 1.0 / n),
        split=split,
        ids=np.arange(n, dtype=np.int64),
        meta=meta,
    )
