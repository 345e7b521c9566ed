"""Weighted flow matching on the inertia-parameter space.

The vector field ``v(s, x)`` is an MLP fed with ``[x, time_encoding(s)]``.
Training regresses it onto the velocity of the regularized straight path
from a standard-normal draw to a data point, with data points weighted by
their LRW reliability.  Sampling integrates ``dx/ds = v`` from s=0 to 1
with RK4, and :func:`gaussian_summary` condenses the samples into the mean
and covariance consumed by the virtual sensor.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .neuralnet import (
    AdamState,
    MlpParams,
    adam_step,
    backward,
    checkpoint_dict,
    forward,
    init_mlp,
    params_from_dict,
    time_encoding,
)
from .numerics import NumericalDivergence, RngStream, symmetrize_jitter
from .sensing import WeightedDataset

__all__ = [
    "FlowTrainConfig",
    "FlowField",
    "GaussianBelief",
    "DegenerateBatchError",
    "ot_interpolate",
    "target_velocity",
    "eulerian_velocity",
    "wfm_loss",
    "wfm_train",
    "wfm_sample",
    "gaussian_summary",
]

log = logging.getLogger(__name__)


class DegenerateBatchError(ValueError):
    """All weights in a minibatch are zero."""


@dataclass
class FlowTrainConfig:
    epochs: int = 10000
    lr: float = 1e-5
    eps_min: float = 1e-3
    batch_size: int = 256
    ode_steps: int = 100
    hidden: tuple[int, ...] = (256, 256, 256, 256, 256)
    encoding_pairs: int = 8
    standardize: bool = True
    weighting: str = "resample"  # or "loss": uniform draws, weights inside the loss

    def __post_init__(self):
        if not 0.0 < self.eps_min < 1.0:
            raise ValueError("eps_min must lie in (0, 1)")
        if self.weighting not in ("resample", "loss"):
            raise ValueError("weighting must be 'resample' or 'loss'")
        if self.lr <= 0 or self.batch_size < 1 or self.ode_steps < 1:
            raise ValueError("invalid flow training configuration")


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def to_json(self, m: int | None = None, seed: int | None = None) -> dict:
        return {"mu": self.mean.tolist(), "sigma": self.cov.tolist(), "m": m, "seed": seed}

    @classmethod
    def from_json(cls, data: dict) -> "GaussianBelief":
        return cls(np.array(data["mu"], dtype=np.float64), np.array(data["sigma"], dtype=np.float64))


@dataclass
class FlowField:
    """Vector field in standardized coordinates ``(x - shift) / scale``."""

    params: MlpParams
    d: int
    eps_min: float = 1e-3
    encoding_pairs: int = 8
    shift: np.ndarray = None
    scale: np.ndarray = None
    step: int = 0
    seed: int | None = None
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.params.widths[-1] != self.d:
            raise ValueError("field output width must equal the sample dimension")
        if self.params.widths[0] != self.d + 2 * self.encoding_pairs:
            raise ValueError("field input width must be d + 2 * encoding_pairs")
        self.shift = np.zeros(self.d) if self.shift is None else np.asarray(self.shift, float)
        self.scale = np.ones(self.d) if self.scale is None else np.asarray(self.scale, float)

    @classmethod
    def init(cls, d: int, rng: RngStream, hidden=(256,) * 5, encoding_pairs: int = 8,
             eps_min: float = 1e-3, **kw) -> "FlowField":
        params = init_mlp([d + 2 * encoding_pairs, *hidden, d], rng)
        return cls(params, d, eps_min, encoding_pairs, **kw)

    def inputs(self, s, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        s = np.broadcast_to(np.asarray(s, dtype=np.float64), (x.shape[0],))
        return np.hstack([x, time_encoding(s, self.encoding_pairs)])

    def velocity(self, s, x) -> np.ndarray:
        """Field value in standardized coordinates for a batch ``x`` (B, d)."""
        return forward(self.params, self.inputs(s, x))

    def to_json(self) -> dict:
        return checkpoint_dict(self.params, self.seed, self.step, d=self.d, eps_min=self.eps_min,
                               encoding_pairs=self.encoding_pairs, shift=self.shift.tolist(),
                               scale=self.scale.tolist())

    @classmethod
    def from_json(cls, data: dict) -> "FlowField":
        return cls(params_from_dict(data), int(data["d"]), float(data["eps_min"]),
                   int(data["encoding_pairs"]), np.array(data["shift"]), np.array(data["scale"]),
                   int(data.get("step", 0)), data.get("seed"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "FlowField":
        return cls.from_json(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        h = hashlib.sha256()
        for W, b in zip(self.params.weights, self.params.biases):
            h.update(W.tobytes())
            h.update(b.tobytes())
        return h.hexdigest()


def ot_interpolate(x0, x1, s, eps_min: float):
    """``(1 - (1 - eps_min) s) x0 + s x1``; ``s`` broadcasts against rows."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if x0.ndim == 2 and s.ndim == 1:
        s = s[:, None]
    return (1.0 - (1.0 - eps_min) * s) * x0 + s * x1


def eulerian_velocity(x, x1, s, eps_min: float):
    """Conditional field ``(x1 - (1 - eps_min) x) / (1 - (1 - eps_min) s)`` at point ``x``."""
    x = np.asarray(x, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if x.ndim == 2 and s.ndim == 1:
        s = s[:, None]
    return (x1 - (1.0 - eps_min) * x) / (1.0 - (1.0 - eps_min) * s)


def target_velocity(x0, x1, s, eps_min: float):
    """Velocity of the interpolation path at parameter ``s``.

    This is :func:`eulerian_velocity` evaluated at ``ot_interpolate(x0, x1, s)``;
    the denominator cancels, leaving ``x1 - (1 - eps_min) x0`` for every ``s``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    v = x1 - (1.0 - eps_min) * x0
    s = np.asarray(s, dtype=np.float64)
    if s.ndim and x0.ndim < 2:
        v = np.broadcast_to(v, s.shape + v.shape).copy()
    return v


def wfm_loss(flow: FlowField, x0, x1, s, w=None) -> tuple[float, MlpParams]:
    """Weight-normalized squared velocity residual and its parameter gradient.

    Row ``b`` of the batch is the triplet (prior draw ``x0[b]``, data point
    ``x1[b]`` with weight ``w[b]``, time ``s[b]``); coordinates are the
    field's standardized ones.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    w = np.ones(x0.shape[0]) if w is None else np.asarray(w, dtype=np.float64)
    wsum = w.sum()
    if not wsum > 0:
        raise DegenerateBatchError("minibatch weights sum to zero")
    xs = ot_interpolate(x0, x1, s, flow.eps_min)
    u = target_velocity(x0, x1, s, flow.eps_min)
    inp = flow.inputs(s, xs)
    v, cache = forward(flow.params, inp, return_cache=True)
    r = v - u
    sq = np.sum(r * r, axis=1)
    loss = float(np.dot(w, sq) / wsum)
    if not math.isfinite(loss):
        raise NumericalDivergence("flow-matching loss is not finite")
    grads = backward(flow.params, inp, (2.0 / wsum) * w[:, None] * r, cache)
    return loss, grads


def _training_data(data, weights) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, WeightedDataset):
        x = data.J
        w = data.weight if weights is None else weights
    else:
        x = np.asarray(data, dtype=np.float64)
        w = np.ones(x.shape[0]) if weights is None else weights
    x = x.reshape(x.shape[0], -1)
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    keep = w > 0
    if not np.any(keep):
        raise ValueError("all sample weights are zero")
    x, w = x[keep], w[keep]
    return x, w / w.sum()


def wfm_train(data, cfg: FlowTrainConfig, rng: RngStream, weights=None,
              log_every: int = 0) -> FlowField:
    """Train a flow from N(0, I) to the weighted empirical distribution.

    ``data`` is a :class:`WeightedDataset` (inertia samples with their
    stored weights) or an (M, d) array with optional ``weights``.
    """
    x1_all, w = _training_data(data, weights)
    m1, d = x1_all.shape
    if cfg.standardize:
        shift = x1_all.mean(axis=0)
        scale = x1_all.std(axis=0)
        scale[scale == 0] = 1.0
    else:
        shift, scale = np.zeros(d), np.ones(d)
    x1_std = (x1_all - shift) / scale

    flow = FlowField.init(d, rng.spawn(0), cfg.hidden, cfg.encoding_pairs, cfg.eps_min,
                          shift=shift, scale=scale, seed=rng.seed)
    stream = rng.spawn(1)
    state = AdamState()
    params = flow.params
    n_batches = -(-m1 // cfg.batch_size)
    B = cfg.batch_size
    step = 0
    for epoch in range(cfg.epochs):
        total = 0.0
        for _ in range(n_batches):
            x0 = stream.normal((B, d))
            s = stream.uniform(B)
            if cfg.weighting == "resample":
                j = stream.choice(m1, B, p=w)
                bw = None
            else:
                j = stream.choice(m1, B)
                bw = w[j]
                if not bw.sum() > 0:
                    continue  # degenerate batch, draw again next iteration
            flow.params = params
            loss, grads = wfm_loss(flow, x0, x1_std[j], s, bw)
            params, state = adam_step(params, grads, cfg.lr, state)
            total += loss
            step += 1
        flow.history.append(total / n_batches)
        if log_every and epoch % log_every == 0:
            log.info("wfm epoch %d loss %.5f", epoch, flow.history[-1])
    flow.params = params
    flow.step = step
    return flow


def _integrate(flow: FlowField, x: np.ndarray, steps: int) -> np.ndarray:
    h = 1.0 / steps
    for k in range(steps):
        s = k * h
        k1 = flow.velocity(s, x)
        k2 = flow.velocity(s + 0.5 * h, x + 0.5 * h * k1)
        k3 = flow.velocity(s + 0.5 * h, x + 0.5 * h * k2)
        k4 = flow.velocity(s + h, x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise NumericalDivergence("flow ODE diverged", s + h)
    return x


def wfm_sample(flow: FlowField, m: int, rng: RngStream, steps: int = 100,
               x0: np.ndarray | None = None) -> np.ndarray:
    """Push ``m`` standard-normal draws through the flow; returns (m, d)."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if x0 is None:
        x0 = rng.normal((m, flow.d))
    x = _integrate(flow, np.asarray(x0, dtype=np.float64).reshape(m, flow.d), steps)
    return flow.shift + flow.scale * x


def gaussian_summary(samples) -> GaussianBelief:
    """Sample mean and unbiased covariance, floored with a small jitter."""
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 2:
        raise ValueError("need at least two samples")
    mean = X.mean(axis=0)
    C = X - mean
    cov = C.T @ C / (X.shape[0] - 1)
    return GaussianBelief(mean, symmetrize_jitter(cov))
