"""A small fully-connected network with hand-written reverse-mode gradients.

Layers are dense ``a @ W + b`` followed by an activation (``relu``,
``sigmoid`` or ``linear``); weights are stored as (fan_in, fan_out) so a
batch of row vectors flows through with plain matrix products.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import NumericalDivergence, RngStream

__all__ = [
    "MlpParams",
    "Gradients",
    "AdamState",
    "init_mlp",
    "forward",
    "backward",
    "per_sample_gradients",
    "time_encoding",
    "sigmoid",
    "bce_loss",
    "sgd_step",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
]

ACTIVATIONS = ("relu", "sigmoid", "linear")


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: tuple[str, ...]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must have equal length")
        for i, (W, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError(f"layer {i}: weight {W.shape} and bias {b.shape} disagree")
            if i and self.weights[i - 1].shape[1] != W.shape[0]:
                raise ValueError(f"layer {i}: input width {W.shape[0]} does not chain")

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def size(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpParams":
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                         self.activations)

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(W) for W in self.weights],
                         [np.zeros_like(b) for b in self.biases], self.activations)

    def flatten(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts += [W.ravel(), b]
        return np.concatenate(parts)

    def unflatten(self, flat) -> "MlpParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size:
            raise ValueError(f"expected {self.size} values, got {flat.size}")
        Ws, bs, i = [], [], 0
        for W, b in zip(self.weights, self.biases):
            Ws.append(flat[i:i + W.size].reshape(W.shape).copy())
            i += W.size
            bs.append(flat[i:i + b.size].copy())
            i += b.size
        return MlpParams(Ws, bs, self.activations)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(W)) and np.all(np.isfinite(b))
                   for W, b in zip(self.weights, self.biases))


Gradients = MlpParams


def init_mlp(widths, rng: RngStream, hidden_activation: str = "relu",
             output_activation: str = "linear") -> MlpParams:
    """He-uniform weights (bound sqrt(6 / fan_in)) and zero biases."""
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise ValueError("need at least input and output widths")
    Ws, bs = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = math.sqrt(6.0 / fan_in)
        Ws.append((2.0 * rng.uniform((fan_in, fan_out)) - 1.0) * bound)
        bs.append(np.zeros(fan_out))
    acts = (hidden_activation,) * (len(widths) - 2) + (output_activation,)
    return MlpParams(Ws, bs, acts)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return sigmoid(z)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "relu":
        return g * (z > 0)
    if name == "sigmoid":
        return g * a * (1.0 - a)
    return g


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != params.weights[0].shape[0]:
        raise ValueError(f"input width {X.shape[-1]} does not match {params.weights[0].shape[0]}")
    return X, single


def forward(params: MlpParams, x, return_cache: bool = False):
    """Network output for one input vector or a (batch, width) array."""
    X, single = _as_batch(params, x)
    a = X
    cache = [(None, X)]
    for W, b, act in zip(params.weights, params.biases, params.activations):
        z = a @ W + b
        a = _act(act, z)
        cache.append((z, a))
    out = a[0] if single else a
    return (out, cache) if return_cache else out


def backward(params: MlpParams, x, grad_out, cache=None) -> Gradients:
    """Gradient of ``sum(grad_out * forward(params, x))`` w.r.t. the parameters.

    For a batch, contributions are summed over rows.
    """
    X, single = _as_batch(params, x)
    G = np.asarray(grad_out, dtype=np.float64)
    G = G[None, :] if single else G
    if G.shape != (X.shape[0], params.weights[-1].shape[1]):
        raise ValueError(f"upstream gradient shape {G.shape} does not match output")
    if cache is None:
        _, cache = forward(params, X, return_cache=True)
    gW = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for l in range(len(params.weights) - 1, -1, -1):
        z, a = cache[l + 1]
        delta = _act_grad(params.activations[l], z, a, G)
        a_prev = cache[l][1]
        gW[l] = a_prev.T @ delta
        gb[l] = delta.sum(axis=0)
        if l:
            G = delta @ params.weights[l].T
    return MlpParams(gW, gb, params.activations)


def per_sample_gradients(params: MlpParams, X, grad_out, cache=None) -> np.ndarray:
    """Row ``i`` is the flattened gradient of ``grad_out[i] . f(X[i])``."""
    X, _ = _as_batch(params, X)
    G = np.asarray(grad_out, dtype=np.float64).reshape(X.shape[0], -1)
    if cache is None:
        _, cache = forward(params, X, return_cache=True)
    blocks = []
    for l in range(len(params.weights) - 1, -1, -1):
        z, a = cache[l + 1]
        delta = _act_grad(params.activations[l], z, a, G)
        a_prev = cache[l][1]
        gW = np.einsum("bi,bj->bij", a_prev, delta).reshape(X.shape[0], -1)
        blocks.append((gW, delta))
        if l:
            G = delta @ params.weights[l].T
    parts = []
    for gW, gb in reversed(blocks):
        parts += [gW, gb]
    return np.concatenate(parts, axis=1)


def time_encoding(s, pairs: int = 8) -> np.ndarray:
    """Interleaved ``sin(2 pi 2^k s), cos(2 pi 2^k s)`` for k < pairs."""
    if pairs < 1:
        raise ValueError("pairs must be >= 1")
    s = np.asarray(s, dtype=np.float64)
    freqs = 2.0 * np.pi * 2.0 ** np.arange(pairs)
    arg = s[..., None] * freqs
    out = np.empty(s.shape + (2 * pairs,))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def bce_loss(logit, label):
    """Binary cross-entropy on a logit and its derivative ``sigmoid(logit) - y``.

    Uses ``max(l, 0) - l y + log1p(exp(-|l|))`` so no log of zero occurs.
    """
    logit = np.asarray(logit, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    loss = np.maximum(logit, 0.0) - logit * y + np.log1p(np.exp(-np.abs(logit)))
    grad = sigmoid(logit) - y
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def _check_finite(grads: Gradients) -> None:
    if not grads.is_finite():
        raise NumericalDivergence("non-finite gradient")


def sgd_step(params: MlpParams, grads: Gradients, lr: float) -> MlpParams:
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    _check_finite(grads)
    return MlpParams([W - lr * g for W, g in zip(params.weights, grads.weights)],
                     [b - lr * g for b, g in zip(params.biases, grads.biases)],
                     params.activations)


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: MlpParams, grads: Gradients, lr: float,
              state: AdamState | None = None) -> tuple[MlpParams, AdamState]:
    """Bias-corrected Adam; the returned state replaces the input one."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    _check_finite(grads)
    state = AdamState() if state is None else state
    g = grads.weights + grads.biases
    p = params.weights + params.biases
    if not state.m:
        state.m = [np.zeros_like(x) for x in p]
        state.v = [np.zeros_like(x) for x in p]
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_m, new_v, new_p = [], [], []
    for x, gi, m, v in zip(p, g, state.m, state.v):
        m = b1 * m + (1.0 - b1) * gi
        v = b2 * v + (1.0 - b2) * gi * gi
        new_p.append(x - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    k = len(params.weights)
    out = MlpParams(new_p[:k], new_p[k:], params.activations)
    return out, AdamState(new_m, new_v, t, b1, b2, state.eps)


def checkpoint_dict(params: MlpParams, seed: int | None = None, step: int = 0, **extra) -> dict:
    return {
        "widths": params.widths,
        "activations": list(params.activations),
        "layers": [
            {"shape": list(W.shape), "weight": W.ravel().tolist(), "bias": b.tolist()}
            for W, b in zip(params.weights, params.biases)
        ],
        "seed": seed,
        "step": int(step),
        **extra,
    }


def params_from_dict(data: dict) -> MlpParams:
    Ws = [np.array(L["weight"], dtype=np.float64).reshape(L["shape"]) for L in data["layers"]]
    bs = [np.array(L["bias"], dtype=np.float64) for L in data["layers"]]
    return MlpParams(Ws, bs, tuple(data["activations"]))


def save_checkpoint(path: str | Path, params: MlpParams, seed: int | None = None,
                    step: int = 0, **extra) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(params, seed, step, **extra)))


def load_checkpoint(path: str | Path) -> tuple[MlpParams, dict]:
    data = json.loads(Path(path).read_text())
    return params_from_dict(data), data
