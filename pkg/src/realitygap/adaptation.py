"""Domain-adversarial context inference constrained by the frozen surrogate.

Encoder -> shared latent z -> (context predictor, reversal -> discriminator).
The predictor output (normalised context) also feeds the frozen reduced-order
simulator, whose mismatch with the observed readings is the physics loss::

    L_total = alpha * L_domain + beta * L_context + gamma * L_physics
"""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import nn
from .errors import DivergenceDetected, FrozenViolation, InsufficientData, ShapeMismatch
from .rom import ReducedOrderSimulator
from .truss import ContextRanges, ContextVector

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("stage", "epoch", "lam", "L_domain", "L_context", "L_physics", "L_total",
                  "val_context", "val_physics", "val_composite")


@dataclass
class AdaptationConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.5
    z_dim: int = 32
    encoder_hidden: tuple = (64,)
    predictor_hidden: tuple = (32,)
    discriminator_hidden: tuple = (32,)
    epochs: int = 60
    warmup_epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    patience: int = 20
    val_fraction: float = 0.1
    physics_rows: str = "both"  # "both" or "real"
    ft_epochs: int = 20
    ft_lr_scale: float = 1.0
    ft_buffer: int = 200
    seed: int = 0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.physics_rows not in ("both", "real"):
            raise ValueError("physics_rows must be 'both' or 'real'")

    @classmethod
    def from_mapping(cls, cfg: dict | None) -> "AdaptationConfig":
        cfg = dict(cfg or {})
        known = {f.name for f in fields(cls)}
        unknown = set(cfg) - known
        if unknown:
            raise ValueError(f"unknown adaptation keys: {sorted(unknown)}")
        for key in ("encoder_hidden", "predictor_hidden", "discriminator_hidden"):
            if key in cfg:
                cfg[key] = tuple(cfg[key])
        return cls(**cfg)


@dataclass
class TrainingCorpus:
    """Labelled simulated rows plus unlabelled real rows.

    Contexts are stored normalised; sensor normalisation statistics come
    from the source rows only.
    """

    source_x: np.ndarray
    source_c: np.ndarray
    target_x: np.ndarray
    ranges: ContextRanges
    sensor_mean: np.ndarray = None
    sensor_std: np.ndarray = None

    def __post_init__(self):
        self.source_x = np.atleast_2d(np.asarray(self.source_x, dtype=float))
        self.source_c = np.atleast_2d(np.asarray(self.source_c, dtype=float))
        self.target_x = np.atleast_2d(np.asarray(self.target_x, dtype=float))
        if len(self.source_x) != len(self.source_c):
            raise ShapeMismatch("every source row needs a context label")
        if self.source_x.shape[1] != self.target_x.shape[1]:
            raise ShapeMismatch("source and target sensor widths differ")
        if self.sensor_mean is None:
            self.sensor_mean = self.source_x.mean(axis=0)
            sd = self.source_x.std(axis=0)
            self.sensor_std = np.where(sd > 1e-12, sd, 1.0)

    @classmethod
    def from_raw(cls, source_x, source_contexts, target_x, ranges: ContextRanges) -> "TrainingCorpus":
        return cls(source_x, ranges.normalize(source_contexts), target_x, ranges)


@dataclass
class ContextInferenceModel:
    encoder: nn.Network
    predictor: nn.Network
    discriminator: nn.Network
    rom: ReducedOrderSimulator
    ranges: ContextRanges
    sensor_mean: np.ndarray
    sensor_std: np.ndarray
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.5
    physics_rows: str = "both"
    reversal: nn.GradientReversal = field(default_factory=nn.GradientReversal)
    history: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    @classmethod
    def build(cls, corpus: TrainingCorpus, rom: ReducedOrderSimulator,
              config: AdaptationConfig) -> "ContextInferenceModel":
        if not rom.frozen:
            raise FrozenViolation("the reduced-order simulator must be frozen before training")
        rng = np.random.default_rng(config.seed)
        d = corpus.source_x.shape[1]
        k = corpus.source_c.shape[1]
        encoder = nn.Network.mlp([d, *config.encoder_hidden, config.z_dim], output="relu",
                                 rng=rng, name="encoder")
        predictor = nn.Network.mlp([config.z_dim, *config.predictor_hidden, k], rng=rng,
                                   name="predictor")
        discriminator = nn.Network.mlp([config.z_dim, *config.discriminator_hidden, 1], rng=rng,
                                       name="discriminator")
        return cls(encoder, predictor, discriminator, rom, corpus.ranges, corpus.sensor_mean,
                   corpus.sensor_std, config.alpha, config.beta, config.gamma, config.physics_rows,
                   nn.GradientReversal(0.0))

    @property
    def trainable(self) -> list:
        return [self.encoder, self.predictor, self.discriminator]

    def normalize_inputs(self, x) -> np.ndarray:
        return (np.atleast_2d(np.asarray(x, dtype=float)) - self.sensor_mean) / self.sensor_std

    def predict_normalized(self, x) -> np.ndarray:
        return self.predictor(self.encoder(self.normalize_inputs(x)))

    def embed(self, x) -> np.ndarray:
        return self.encoder(self.normalize_inputs(x))

    def total_loss(self, l_domain: float, l_context: float, l_physics: float) -> float:
        return self.alpha * l_domain + self.beta * l_context + self.gamma * l_physics

    def copy(self) -> "ContextInferenceModel":
        clone = copy.copy(self)
        clone.encoder = self.encoder.copy()
        clone.predictor = self.predictor.copy()
        clone.discriminator = self.discriminator.copy()
        clone.reversal = nn.GradientReversal(self.reversal.lam)
        clone.history = list(self.history)
        clone.metrics = dict(self.metrics)
        return clone

    def snapshot(self) -> list:
        return [net.params.copy() for net in self.trainable]

    def restore(self, snap) -> None:
        for net, params in zip(self.trainable, snap):
            net.params[...] = params

    def save(self, directory) -> None:
        """One checkpoint per sub-network plus ``manifest.json``."""
        import json

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma,
                    "physics_rows": self.physics_rows, "ranges": self.ranges.to_mapping(),
                    "sensor_mean": self.sensor_mean.tolist(), "sensor_std": self.sensor_std.tolist(),
                    "checksums": {}}
        for net in self.trainable:
            manifest["checksums"][net.name] = nn.save_network(net, directory / f"{net.name}.npz")
        self.rom.save(directory / "rom.npz")
        manifest["checksums"]["rom"] = self.rom.checksum()
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "ContextInferenceModel":
        import json

        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        nets = {name: nn.load_network(directory / f"{name}.npz")
                for name in ("encoder", "predictor", "discriminator")}
        rom = ReducedOrderSimulator.load(directory / "rom.npz")
        return cls(nets["encoder"], nets["predictor"], nets["discriminator"], rom,
                   ContextRanges.from_mapping(manifest["ranges"]),
                   np.array(manifest["sensor_mean"]), np.array(manifest["sensor_std"]),
                   manifest["alpha"], manifest["beta"], manifest["gamma"], manifest["physics_rows"])


def train_step(model: ContextInferenceModel, xs, cs, xt, state: nn.OptimizerState,
               ys_obs=None, update: bool = True) -> dict:
    """One gradient step on a mixed batch.

    ``xs``/``cs`` are labelled source rows (mm, normalised context); ``xt``
    are unlabelled target rows. ``ys_obs`` overrides the observation the
    physics loss compares against for source rows (defaults to ``xs``).
    """
    ns, nt = len(xs), len(xt)
    x = model.normalize_inputs(np.concatenate([xs, xt]))
    z, tape_f = model.encoder.forward(x)
    c_hat, tape_c = model.predictor.forward(z)

    l_context, g_ctx = nn.mse(c_hat[:ns], cs) if ns else (0.0, np.zeros((0, c_hat.shape[1])))
    g_c = np.zeros_like(c_hat)
    g_c[:ns] = model.beta * g_ctx

    l_physics = 0.0
    if model.gamma > 0:
        obs = np.concatenate([xs if ys_obs is None else ys_obs, xt])
        rows = np.arange(ns + nt) if model.physics_rows == "both" else np.arange(ns, ns + nt)
        y_hat, tape_r = model.rom.network.forward(c_hat[rows])
        l_physics, g_y = nn.mse(y_hat, obs[rows])
        g_c[rows] += model.gamma * model.rom.network.backward(tape_r, g_y)

    labels = np.concatenate([np.zeros(ns), np.ones(nt)])[:, None]
    z_rev, _ = model.reversal.forward(z)
    logits, tape_d = model.discriminator.forward(z_rev)
    l_domain, g_logit = nn.bce_with_logits(logits, labels)
    g_zrev = model.discriminator.backward(tape_d, model.alpha * g_logit)
    g_z = model.predictor.backward(tape_c, g_c) + model.reversal.backward(None, g_zrev)
    model.encoder.backward(tape_f, g_z)

    total = model.total_loss(l_domain, l_context, l_physics)
    if not np.isfinite(total):
        raise DivergenceDetected(f"non-finite total loss {total}")
    if update:
        nn.optimizer_step(model.trainable, state)
    return {"L_domain": l_domain, "L_context": l_context, "L_physics": l_physics, "L_total": total}


def evaluate_losses(model: ContextInferenceModel, xs, cs, xt) -> dict:
    c_s = model.predict_normalized(xs)
    l_context = float(np.mean((c_s - cs) ** 2)) if len(xs) else 0.0
    l_physics = 0.0
    if model.gamma > 0:
        obs = np.concatenate([xs, xt]) if model.physics_rows == "both" else np.asarray(xt)
        c_all = np.concatenate([c_s, model.predict_normalized(xt)]) if model.physics_rows == "both" \
            else model.predict_normalized(xt)
        l_physics = float(np.mean((model.rom.predict(c_all) - obs) ** 2))
    return {"val_context": l_context, "val_physics": l_physics,
            "val_composite": l_context + model.gamma * l_physics}


def discriminator_accuracy(model: ContextInferenceModel, xs, xt) -> float:
    """Balanced accuracy (mean of per-domain hit rates); 0.5 is chance."""
    hit_s = np.mean(model.discriminator(model.embed(xs))[:, 0] <= 0) if len(xs) else np.nan
    hit_t = np.mean(model.discriminator(model.embed(xt))[:, 0] > 0) if len(xt) else np.nan
    return float(np.nanmean([hit_s, hit_t]))


def _run_epoch(model, xs, cs, xt, state, rng, batch_size, ys_obs=None) -> dict:
    half = max(batch_size // 2, 1)
    n_batches = max(int(np.ceil(max(len(xs), len(xt)) / half)), 1)
    src_order = np.concatenate([rng.permutation(len(xs)) for _ in range(
        int(np.ceil(n_batches * half / max(len(xs), 1))) + 1)]) if len(xs) else np.zeros(0, int)
    tgt_order = np.concatenate([rng.permutation(len(xt)) for _ in range(
        int(np.ceil(n_batches * half / len(xt))) + 1)])
    sums = dict.fromkeys(("L_domain", "L_context", "L_physics", "L_total"), 0.0)
    for b in range(n_batches):
        si = src_order[b * half:(b + 1) * half]
        ti = tgt_order[b * half:(b + 1) * half]
        obs = None if ys_obs is None else ys_obs[si]
        out = train_step(model, xs[si], cs[si], xt[ti], state, ys_obs=obs)
        for k in sums:
            sums[k] += out[k]
    means = {k: v / n_batches for k, v in sums.items()}
    means["L_total"] = model.total_loss(means["L_domain"], means["L_context"], means["L_physics"])
    return means


def train_initial(corpus: TrainingCorpus, rom: ReducedOrderSimulator,
                  config: AdaptationConfig | None = None) -> ContextInferenceModel:
    """Initial adversarial training; keeps the epoch with the best validation
    ``L_context + gamma * L_physics``.

    The first ``warmup_epochs`` run with the reversal scale at zero so the
    discriminator learns to separate the domains before the encoder fights it.
    """
    config = config or AdaptationConfig()
    if len(corpus.source_x) == 0 or len(corpus.target_x) == 0:
        raise InsufficientData("both domains need at least one row")
    model = ContextInferenceModel.build(corpus, rom, config)
    rng = np.random.default_rng(config.seed + 1)

    def split(n):
        perm = rng.permutation(n)
        k = int(round(config.val_fraction * n)) if n >= 10 else 0
        return perm[k:], perm[:k]

    s_tr, s_va = split(len(corpus.source_x))
    t_tr, t_va = split(len(corpus.target_x))
    xs, cs, xt = corpus.source_x[s_tr], corpus.source_c[s_tr], corpus.target_x[t_tr]
    vs, vc, vt = corpus.source_x[s_va], corpus.source_c[s_va], corpus.target_x[t_va]
    if len(s_va) == 0:
        vs, vc, vt = xs, cs, xt

    state = nn.OptimizerState(lr=config.lr)
    best, best_score, stale = model.snapshot(), np.inf, 0
    adv_epochs = max(config.epochs - config.warmup_epochs, 1)
    for epoch in range(config.epochs):
        if epoch < config.warmup_epochs:
            model.reversal.lam = 0.0
        else:
            model.reversal.lam = nn.reversal_schedule((epoch - config.warmup_epochs) / adv_epochs)
        record = _run_epoch(model, xs, cs, xt, state, rng, config.batch_size)
        record.update(evaluate_losses(model, vs, vc, vt))
        record.update(stage="initial", epoch=epoch, lam=model.reversal.lam)
        model.history.append(record)
        if epoch == config.warmup_epochs - 1:
            model.metrics["disc_acc_warmup"] = discriminator_accuracy(model, vs, vt)
        if epoch < config.warmup_epochs:
            continue
        if record["val_composite"] < best_score:
            best, best_score, stale = model.snapshot(), record["val_composite"], 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    if np.isfinite(best_score):
        model.restore(best)
    model.reversal.lam = 1.0
    model.metrics["disc_acc_final"] = discriminator_accuracy(model, vs, vt)
    log.info("initial training done after %d epochs, best val composite %.5f",
             len(model.history), best_score)
    return model


def infer_contexts(model: ContextInferenceModel, sensors) -> tuple[np.ndarray, np.ndarray]:
    """Denormalised contexts for a batch of readings and the per-entry clamp mask."""
    raw = model.ranges.denormalize(model.predict_normalized(sensors))
    return model.ranges.clip(raw)


def infer_context(model: ContextInferenceModel, sensor_vector) -> tuple[ContextVector, bool]:
    """Context estimate for one reading; the flag says whether it was clamped."""
    values = getattr(sensor_vector, "values", sensor_vector)
    ctx, mask = infer_contexts(model, np.asarray(values, dtype=float)[None, :])
    return ContextVector.from_array(ctx[0]), bool(mask.any())


def fine_tune(model: ContextInferenceModel, recent_real, repository_x, repository_c,
              config: AdaptationConfig | None = None, rng: np.random.Generator | None = None) -> list:
    """Refine encoder, predictor and discriminator in place.

    ``recent_real`` are unlabelled readings; ``repository_x``/``repository_c``
    are labelled rows (contexts normalised). Runs ``config.ft_epochs`` at
    ``lr * ft_lr_scale`` with the reversal at full strength. Returns the new
    history records.
    """
    config = config or AdaptationConfig()
    recent_real = np.asarray(recent_real, dtype=float)
    if recent_real.size == 0:
        raise InsufficientData("fine-tuning needs recent real measurements")
    recent_real = np.atleast_2d(recent_real)
    repository_x = np.asarray(repository_x, dtype=float).reshape(-1, recent_real.shape[1])
    repository_c = np.asarray(repository_c, dtype=float).reshape(len(repository_x), -1)
    if config.ft_epochs <= 0:
        return []
    rng = rng if rng is not None else np.random.default_rng(config.seed + 2)
    rom_sum = model.rom.checksum()
    state = nn.OptimizerState(lr=config.lr * config.ft_lr_scale)
    model.reversal.lam = 1.0
    start = len(model.history)
    for epoch in range(config.ft_epochs):
        record = _run_epoch(model, repository_x, repository_c, recent_real, state, rng,
                            config.batch_size)
        record.update(stage="fine_tune", epoch=epoch, lam=model.reversal.lam)
        model.history.append(record)
    if model.rom.checksum() != rom_sum:
        raise FrozenViolation("simulator parameters changed during fine-tuning")
    return model.history[start:]


def write_history_csv(model: ContextInferenceModel, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for rec in model.history:
            writer.writerow({k: rec.get(k, "") for k in HISTORY_FIELDS})
