"""Learning-to-reweight: per-sample reliability weights from a clean meta set.

A small classifier predicts whether a surrogate trajectory is high-error
from its error z-score.  For each training minibatch the validation-loss
sensitivity to an infinitesimal per-sample loss weight is evaluated at zero
weight, clipped at zero and normalized; the classifier then takes an SGD
step on the reweighted loss.  Because the probe step starts from zero
weights, the provisional parameters equal the current ones and the
sensitivity reduces to a scaled gradient inner product, which is what
:func:`meta_gradients` computes.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .neuralnet import MlpParams, backward, bce_loss, forward, init_mlp, per_sample_gradients, sgd_step
from .numerics import RngStream
from .sensing import WeightedDataset

__all__ = [
    "LrwConfig",
    "LrwResult",
    "sample_losses",
    "inner_step",
    "validation_loss",
    "meta_gradients",
    "normalize_weights",
    "lrw_train",
    "baseline_train",
    "accuracy",
]

log = logging.getLogger(__name__)


@dataclass
class LrwConfig:
    epochs: int = 200
    lr: float = 3e-4  # meta model; also the inner probe step
    baseline_lr: float = 1e-4
    batch_size: int = 32
    hidden: tuple[int, ...] = (64, 32)

    def __post_init__(self):
        if self.lr <= 0 or self.baseline_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def _col(z) -> np.ndarray:
    return np.asarray(z, dtype=np.float64).reshape(-1, 1)


def sample_losses(params: MlpParams, z, y) -> np.ndarray:
    logits = forward(params, _col(z))[:, 0]
    return bce_loss(logits, np.asarray(y, dtype=np.float64))[0]


def _weighted_loss_grad(params: MlpParams, z, y, w) -> MlpParams:
    Z = _col(z)
    logits, cache = forward(params, Z, return_cache=True)
    _, dl = bce_loss(logits[:, 0], np.asarray(y, dtype=np.float64))
    return backward(params, Z, (np.asarray(w) * dl)[:, None], cache)


def inner_step(params: MlpParams, z, y, eps, lr: float) -> MlpParams:
    """One SGD step on ``sum_n eps_n * loss_n``."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (len(np.atleast_1d(z)),):
        raise ValueError("need one perturbation per batch sample")
    return sgd_step(params, _weighted_loss_grad(params, z, y, eps), lr)


def validation_loss(params: MlpParams, z, y) -> float:
    return float(np.mean(sample_losses(params, z, y)))


def meta_gradients(params: MlpParams, z_train, y_train, z_val, y_val, lr: float) -> np.ndarray:
    """``u_n = -d L_val(inner_step(eps)) / d eps_n`` at ``eps = 0``.

    Equals ``lr * <grad L_val, grad loss_n>`` evaluated at ``params``.
    """
    if len(np.atleast_1d(z_val)) == 0:
        raise ValueError("validation batch is empty")
    Zt = _col(z_train)
    logits, cache = forward(params, Zt, return_cache=True)
    _, dl = bce_loss(logits[:, 0], np.asarray(y_train, dtype=np.float64))
    G = per_sample_gradients(params, Zt, dl[:, None], cache)
    nv = len(np.atleast_1d(z_val))
    g_val = _weighted_loss_grad(params, z_val, y_val, np.full(nv, 1.0 / nv)).flatten()
    return lr * (G @ g_val)


def normalize_weights(u) -> np.ndarray:
    """Clip at zero and normalize to sum one; uniform if nothing survives."""
    u = np.asarray(u, dtype=np.float64)
    w = np.maximum(u, 0.0)
    s = w.sum()
    if s > 0:
        return w / s
    return np.full(u.shape, 1.0 / u.size)


def accuracy(params: MlpParams, z, y) -> float:
    if len(np.atleast_1d(z)) == 0:
        return float("nan")
    logits = forward(params, _col(z))[:, 0]
    return float(np.mean((logits > 0).astype(np.int64) == np.asarray(y)))


@dataclass
class LrwResult:
    weights: np.ndarray  # normalized over the training split, zero elsewhere
    raw_weights: np.ndarray  # mean clipped meta-gradient per appearance
    params: MlpParams
    history: list[dict] = field(default_factory=list)
    appearances: np.ndarray | None = None

    def weight_table(self, dataset: WeightedDataset) -> list[dict]:
        rows = []
        for i in dataset.indices("train"):
            rows.append({
                "sample_id": int(dataset.ids[i]),
                "Jx": float(dataset.J[i, 0]),
                "Jy": float(dataset.J[i, 1]),
                "Jz": float(dataset.J[i, 2]),
                "raw_weight": float(self.raw_weights[i]),
                "normalized_weight": float(self.weights[i]),
            })
        return rows

    def save_weights(self, path: str | Path, dataset: WeightedDataset) -> None:
        Path(path).write_text(json.dumps(self.weight_table(dataset), indent=1))


def _epoch_batches(rng: RngStream, epoch: int, ids: np.ndarray, rows: np.ndarray,
                   batch_size: int) -> list[np.ndarray]:
    # ordering keyed by sample id, so a reordered dataset gives the same batches
    keys = rng.spawn(10, epoch).uniform_at(ids[rows])
    order = rows[np.argsort(keys, kind="stable")]
    return [order[i:i + batch_size] for i in range(0, order.size, batch_size)]


def _val_batch(rng: RngStream, epoch: int, it: int, ids: np.ndarray, rows: np.ndarray,
               batch_size: int) -> np.ndarray:
    keys = rng.spawn(20, epoch, it).uniform_at(ids[rows])
    return rows[np.argsort(keys, kind="stable")[:batch_size]]


def lrw_train(dataset: WeightedDataset, cfg: LrwConfig, rng: RngStream) -> LrwResult:
    train = dataset.indices("train")
    val = dataset.indices("val")
    test = dataset.indices("test")
    if train.size == 0 or val.size == 0:
        raise ValueError("LRW needs non-empty train and validation splits")
    z, y, ids = dataset.z, dataset.label, dataset.ids
    params = init_mlp([1, *cfg.hidden, 1], rng.spawn(0))

    n = len(dataset)
    raw_sum = np.zeros(n)
    norm_sum = np.zeros(n)
    count = np.zeros(n, dtype=np.int64)
    history = []
    for epoch in range(cfg.epochs):
        for it, batch in enumerate(_epoch_batches(rng, epoch, ids, train, cfg.batch_size)):
            vb = _val_batch(rng, epoch, it, ids, val, cfg.batch_size)
            u = meta_gradients(params, z[batch], y[batch], z[vb], y[vb], cfg.lr)
            w = normalize_weights(u)
            raw_sum[batch] += np.maximum(u, 0.0)
            norm_sum[batch] += w
            count[batch] += 1
            params = sgd_step(params, _weighted_loss_grad(params, z[batch], y[batch], w), cfg.lr)
        history.append({
            "epoch": epoch,
            "train_acc": accuracy(params, z[train], y[train]),
            "test_acc": accuracy(params, z[test], y[test]),
        })
        if epoch % 50 == 0:
            log.debug("lrw epoch %d: %s", epoch, history[-1])

    seen = count > 0
    raw = np.zeros(n)
    raw[seen] = raw_sum[seen] / count[seen]
    mean_w = np.zeros(n)
    mean_w[seen] = norm_sum[seen] / count[seen]
    weights = np.zeros(n)
    total = mean_w[train].sum()
    if total > 0:
        weights[train] = mean_w[train] / total
    else:
        weights[train] = 1.0 / train.size
    return LrwResult(weights, raw, params, history, count)


def baseline_train(dataset: WeightedDataset, cfg: LrwConfig, rng: RngStream) -> tuple[MlpParams, list[dict]]:
    """Same classifier and batching, plain mean-loss SGD at the baseline rate."""
    train = dataset.indices("train")
    test = dataset.indices("test")
    z, y, ids = dataset.z, dataset.label, dataset.ids
    params = init_mlp([1, *cfg.hidden, 1], rng.spawn(0))
    history = []
    for epoch in range(cfg.epochs):
        for batch in _epoch_batches(rng, epoch, ids, train, cfg.batch_size):
            w = np.full(batch.size, 1.0 / batch.size)
            params = sgd_step(params, _weighted_loss_grad(params, z[batch], y[batch], w),
                              cfg.baseline_lr)
        history.append({
            "epoch": epoch,
            "train_acc": accuracy(params, z[train], y[train]),
            "test_acc": accuracy(params, z[test], y[test]),
        })
    return params, history
