"""Reduced-order simulator: a frozen neural surrogate of the truss solver.

The surrogate maps normalised context to sensor readings in mm. After
pre-training it is frozen and only ever used to push gradients back into the
inferred context (the physics-guided loss).
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConvergenceFailure, FrozenViolation, ShapeMismatch

log = logging.getLogger(__name__)


@dataclass
class RomConfig:
    hidden: tuple = (64, 64)
    epochs: int = 400
    batch_size: int = 64
    lr: float = 3e-3
    holdout_fraction: float = 0.1
    rmse_threshold: float = 0.1
    min_samples: int = 1
    seed: int = 0

    @classmethod
    def from_mapping(cls, cfg: dict | None) -> "RomConfig":
        cfg = dict(cfg or {})
        if "hidden" in cfg:
            cfg["hidden"] = tuple(cfg["hidden"])
        return cls(**cfg)


@dataclass
class ReducedOrderSimulator:
    network: nn.Network
    dataset_size: int = 0
    holdout_rmse: float = float("nan")
    dataset_hash: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def frozen(self) -> bool:
        return self.network.frozen

    @property
    def d(self) -> int:
        return self.network.n_out

    def checksum(self) -> str:
        return self.network.checksum()

    def predict(self, contexts_norm) -> np.ndarray:
        return self.network(np.asarray(contexts_norm, dtype=float))

    def save(self, path) -> None:
        """Checkpoint plus a ``.json`` sidecar with training metadata."""
        path = Path(path)
        checksum = nn.save_network(self.network, path)
        sidecar = {"dataset_size": self.dataset_size, "holdout_rmse": self.holdout_rmse,
                   "dataset_hash": self.dataset_hash, "checksum": checksum, **self.metadata}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ReducedOrderSimulator":
        path = Path(path)
        net = nn.load_network(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        extra = {k: v for k, v in meta.items()
                 if k not in ("dataset_size", "holdout_rmse", "dataset_hash", "checksum")}
        return cls(net, meta["dataset_size"], meta["holdout_rmse"], meta["dataset_hash"], extra)


def dataset_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=float).tobytes())
    return h.hexdigest()


def pretrain_rom(contexts_norm, sensors, config: RomConfig | None = None) -> ReducedOrderSimulator:
    """Fit the surrogate on (normalised context, clean reading) pairs and freeze it.

    Targets are standardised during training and the scaling is folded into
    the last layer afterwards, so the returned network emits mm directly.
    Raises ``ConvergenceFailure`` if the held-out RMSE stays above
    ``config.rmse_threshold``.
    """
    config = config or RomConfig()
    X = np.asarray(contexts_norm, dtype=float)
    Y = np.asarray(sensors, dtype=float)
    if X.ndim != 2 or Y.ndim != 2 or len(X) != len(Y):
        raise ShapeMismatch("contexts and sensors must be row-aligned 2-D arrays")
    if len(X) < config.min_samples:
        raise ValueError(f"need at least {config.min_samples} samples, got {len(X)}")

    rng = np.random.default_rng(config.seed)
    n = len(X)
    n_hold = int(round(config.holdout_fraction * n)) if n >= 10 else 0
    perm = rng.permutation(n)
    hold, train = perm[:n_hold], perm[n_hold:]

    mu = Y[train].mean(axis=0)
    sd = Y[train].std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    Yn = (Y - mu) / sd

    net = nn.Network.mlp([X.shape[1], *config.hidden, Y.shape[1]], rng=rng, name="rom")
    state = nn.OptimizerState(lr=config.lr)
    for epoch in range(config.epochs):
        state.lr = config.lr * 0.5 * (1.0 + np.cos(np.pi * epoch / config.epochs))
        order = rng.permutation(train)
        for k in range(0, len(order), config.batch_size):
            idx = order[k:k + config.batch_size]
            out, tape = net.forward(X[idx])
            _, g = nn.mse(out, Yn[idx])
            net.backward(tape, g)
            nn.optimizer_step([net], state)

    last = [l for l in net.layers if isinstance(l, nn.Dense)][-1]
    last.W[...] = last.W * sd
    last.b[...] = last.b * sd + mu
    net.freeze()

    eval_idx = hold if len(hold) else train
    rmse = float(np.sqrt(np.mean((net(X[eval_idx]) - Y[eval_idx]) ** 2)))
    log.info("ROM pre-training finished: %d samples, held-out RMSE %.4f mm", n, rmse)
    if rmse > config.rmse_threshold:
        raise ConvergenceFailure(f"held-out RMSE {rmse:.4f} mm exceeds {config.rmse_threshold} mm")
    return ReducedOrderSimulator(net, n, rmse, dataset_hash(X, Y))


def physics_loss(rom: ReducedOrderSimulator, inferred_contexts, observed):
    """MSE between R(c_hat) and the observations, with gradient w.r.t. c_hat.

    The surrogate's parameters never receive gradient.
    """
    if not rom.frozen:
        raise FrozenViolation("physics loss requires a frozen simulator")
    c_hat = np.asarray(inferred_contexts, dtype=float)
    y_hat, tape = rom.network.forward(c_hat)
    loss, g = nn.mse(y_hat, np.asarray(observed, dtype=float).reshape(y_hat.shape))
    grad = rom.network.backward(tape, g)
    if np.any(rom.network.grads != 0):
        raise FrozenViolation("simulator accumulated parameter gradients")
    return loss, grad.reshape(c_hat.shape)
