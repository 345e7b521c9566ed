"""Experiment plumbing shared by the CLI and the acceptance suite.

Truth simulation, measurement synthesis, single filter runs, the Monte
Carlo study, the LRW -> WFM preprocessing chain and the result table.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from .boosted import FILTERS, BoostedConfig, FilterTrace, VirtualSensor, run_filter
from .dynamics import J_TRUE, REGIMES, RigidBodyState, TorqueProfile, Trajectory, propagate
from .lrw import LrwConfig, LrwResult, lrw_train
from .numerics import RngStream
from .sensing import WeightedDataset, measure_trajectory
from .wfm import FlowField, FlowTrainConfig, GaussianBelief, gaussian_summary, wfm_sample, wfm_train

__all__ = [
    "SENSOR_SIGMA",
    "MC_PRIOR_MEAN",
    "MC_PRIOR_STD",
    "config_hash",
    "provenance",
    "truth_trajectory",
    "synth_measurements",
    "draw_prior_mean",
    "run_single",
    "monte_carlo",
    "preprocess",
    "ResultTable",
]

log = logging.getLogger(__name__)

SENSOR_SIGMA = 0.005  # quaternion and gyro noise, matches R0 = 2.5e-5 I
MC_PRIOR_MEAN = np.array([140.0, 20.0, 36.0])
MC_PRIOR_STD = np.array([10.0, 10.0, 10.0])
TABLE_REGIMES = ("full", "windowed", "persistent")
FILTER_LABELS = {"ekf": "EKF", "ukf": "UKF", "enkf": "EnKF", "boosted": "Boosted UKF"}

# stream keys; every consumer of the run seed draws from its own branch
_KEY_SENSOR, _KEY_FILTER, _KEY_PRIOR = 1, 2, 3


def config_hash(cfg) -> str:
    data = cfg if isinstance(cfg, dict) else asdict(cfg)
    blob = json.dumps(data, sort_keys=True, default=lambda o: np.asarray(o).tolist())
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def provenance(seed, cfg) -> dict:
    return {"seed": seed, "config_hash": config_hash(cfg), "version": __version__}


@lru_cache(maxsize=8)
def truth_trajectory(regime: str, horizon: float = 400.0, dt: float = 0.01) -> Trajectory:
    """True attitude/rate history with the nominal inertia, starting at rest attitude."""
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    steps = int(round(horizon / dt))
    return propagate(J_TRUE, RigidBodyState.at_rest(), TorqueProfile(regime), dt, steps)


def synth_measurements(traj: Trajectory, rng: RngStream, sigma: float = SENSOR_SIGMA) -> np.ndarray:
    """Noisy readings z_1 .. z_K (the initial state is not measured)."""
    return measure_trajectory(traj, sigma, sigma, rng)[1:]


def draw_prior_mean(rng: RngStream, mean=MC_PRIOR_MEAN, std=MC_PRIOR_STD,
                    max_redraws: int = 1000) -> np.ndarray:
    """Gaussian initial guess with non-positive components redrawn."""
    out = mean + std * rng.normal(3)
    for _ in range(max_redraws):
        bad = out <= 0
        if not bad.any():
            return out
        out[bad] = (mean + std * rng.normal(3))[bad]
    raise RuntimeError("could not draw a positive prior mean")


def run_single(kind: str, regime: str, cfg: BoostedConfig, seed: int,
               vs: VirtualSensor | None = None, record_every: int = 100) -> FilterTrace:
    """One filter on one noise realization; measurements depend only on (seed, regime)."""
    rng = RngStream(seed)
    traj = truth_trajectory(regime, cfg.horizon, cfg.dt)
    Z = synth_measurements(traj, rng.spawn(_KEY_SENSOR))
    return run_filter(kind, cfg, Z, TorqueProfile(regime), vs=vs, rng=rng.spawn(_KEY_FILTER),
                      record_every=record_every)


def monte_carlo(kinds, regimes, cfg: BoostedConfig, n_runs: int, seed: int,
                vs: VirtualSensor | None = None, randomize_prior: bool = True,
                on_run=None) -> dict:
    """Final relative errors (%) as ``{kind: {regime: (n_runs, 3) array}}``.

    Realization ``r`` uses seed stream ``(seed, r)`` for both its noise and
    its prior draw, so every filter sees the same data and initial guess.
    """
    root = RngStream(seed)
    out = {k: {g: np.empty((n_runs, 3)) for g in regimes} for k in kinds}
    for r in range(n_runs):
        sub = root.spawn(r)
        run_seed = int(sub.bits(1)[0] & 0x7FFFFFFFFFFFFFFF)
        run_cfg = cfg
        if randomize_prior:
            run_cfg = replace(cfg, prior_mean=tuple(draw_prior_mean(sub.spawn(_KEY_PRIOR))))
        for g in regimes:
            for k in kinds:
                tr = run_single(k, g, run_cfg, run_seed, vs=vs if k == "boosted" else None,
                                record_every=max(cfg.steps, 1))
                out[k][g][r] = tr.rel_err_pct()
                if on_run is not None:
                    on_run(k, g, r, tr)
    return out


def preprocess(dataset: WeightedDataset, lrw_cfg: LrwConfig, flow_cfg: FlowTrainConfig,
               seed: int, m: int = 2000) -> tuple[LrwResult, FlowField, GaussianBelief]:
    """LRW weights -> weighted flow training -> Gaussian summary of ``m`` flow samples."""
    rng = RngStream(seed)
    lrw = lrw_train(dataset, lrw_cfg, rng.spawn(1))
    weighted = dataset.with_weights(lrw.weights, lrw.raw_weights)
    flow = wfm_train(weighted, flow_cfg, rng.spawn(2))
    samples = wfm_sample(flow, m, rng.spawn(3), steps=flow_cfg.ode_steps)
    return lrw, flow, gaussian_summary(samples)


@dataclass
class ResultTable:
    """Final relative inertia errors (%) aggregated over realizations."""

    errors: dict  # {filter: {regime: (runs, 3) array}}
    meta: dict = field(default_factory=dict)

    def _cells(self, fn) -> dict:
        return {k: {g: fn(np.asarray(v, dtype=np.float64)).tolist() for g, v in regs.items()}
                for k, regs in self.errors.items()}

    @property
    def mean(self) -> dict:
        return self._cells(lambda a: a.mean(axis=0))

    @property
    def std(self) -> dict:
        # population std over realizations; a single run reports 0
        return self._cells(lambda a: a.std(axis=0))

    @property
    def abs_mean(self) -> dict:
        return self._cells(lambda a: np.abs(a).mean(axis=0))

    def filters(self) -> list[str]:
        return [k for k in FILTERS if k in self.errors] + [k for k in self.errors if k not in FILTERS]

    def regimes(self) -> list[str]:
        seen = []
        for regs in self.errors.values():
            seen += [g for g in regs if g not in seen]
        return [g for g in TABLE_REGIMES if g in seen] + [g for g in seen if g not in TABLE_REGIMES]

    def to_json(self) -> dict:
        return {
            **self.meta,
            "errors": {k: {g: np.asarray(v).tolist() for g, v in regs.items()}
                       for k, regs in self.errors.items()},
            "mean": self.mean,
            "std": self.std,
            "abs_mean": self.abs_mean,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ResultTable":
        errors = {k: {g: np.asarray(v, dtype=np.float64).reshape(-1, 3) for g, v in regs.items()}
                  for k, regs in data["errors"].items()}
        meta = {k: v for k, v in data.items() if k not in ("errors", "mean", "std", "abs_mean")}
        return cls(errors, meta)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "ResultTable":
        return cls.from_json(json.loads(Path(path).read_text()))

    @classmethod
    def merge(cls, tables: list["ResultTable"]) -> "ResultTable":
        errors: dict = {}
        for tab in tables:
            for k, regs in tab.errors.items():
                for g, v in regs.items():
                    prev = errors.setdefault(k, {}).get(g)
                    errors[k][g] = v if prev is None else np.vstack([prev, v])
        meta = tables[0].meta if len(tables) == 1 else {"merged": [t.meta for t in tables]}
        return cls(errors, meta)

    def format_text(self, digits: int = 2) -> str:
        """Rows per filter, one column group per regime, ``mean ± std`` per axis."""
        regs = self.regimes()
        mean, std = self.mean, self.std
        head = ["Filter"] + [f"{g.capitalize()} J{a}" for g in regs for a in "xyz"]
        rows = []
        for k in self.filters():
            row = [FILTER_LABELS.get(k, k)]
            for g in regs:
                if g in mean[k]:
                    row += [f"{m:.{digits}f} ± {s:.{digits}f}" for m, s in zip(mean[k][g], std[k][g])]
                else:
                    row += ["-"] * 3
            rows.append(row)
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
        return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows])

    def to_csv_rows(self) -> list[dict]:
        rows = []
        mean, std, am = self.mean, self.std, self.abs_mean
        for k in self.filters():
            for g in self.regimes():
                if g not in mean[k]:
                    continue
                for i, a in enumerate("xyz"):
                    rows.append({"filter": k, "regime": g, "axis": f"J{a}",
                                 "mean_pct": mean[k][g][i], "std_pct": std[k][g][i],
                                 "abs_mean_pct": am[k][g][i],
                                 "runs": len(self.errors[k][g])})
        return rows
