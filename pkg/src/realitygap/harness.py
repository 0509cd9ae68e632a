"""Experiment protocol: split, drift injection, LoI A/B/C runs and metrics.

A run samples ``M`` contexts from the design envelope and splits them
50/20/30. Train contexts give labelled simulated rows (and a small set of
unlabelled real rows), validation contexts become a time-ordered real stream
with drifts injected, and test contexts are measured under the regime active
at the end of the stream.
"""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import adaptation
from .adaptation import AdaptationConfig, ContextInferenceModel
from .errors import ConfigInvalid, MissingInput, ShapeMismatch
from .repository import Repository
from .rga import RgaConfig, RgaMonitor, compute_gap, initialize
from .rom import ReducedOrderSimulator, RomConfig, pretrain_rom
from .truss import (CONTEXT_NAMES, ContextRanges, NoiseSpec, TrussModel, apply_noise,
                    sample_contexts, solve_many)

log = logging.getLogger(__name__)

LEVELS = ("A", "B", "C")
DRIFT_KINDS = ("context_shift", "noise_inflation", "sensor_bias")
METRIC_FIELDS = ("seed", "loi", "physics", "error", "rg", "ad", "censored", "ad_events")


@dataclass(frozen=True)
class DriftSpec:
    """One injected drift over the fraction ``[onset, end)`` of the stream.

    ``context_shift`` multiplies ``variable`` of the true context by
    ``magnitude``; ``noise_inflation`` multiplies the noise sigma;
    ``sensor_bias`` adds ``magnitude`` mm to ``channels`` (all if None).
    """

    kind: str = "context_shift"
    onset: float = 0.5
    magnitude: float = 0.7
    variable: str = "support_factor"
    channels: tuple | None = None
    end: float = 1.0

    def __post_init__(self):
        if self.kind not in DRIFT_KINDS:
            raise ConfigInvalid(f"unknown drift kind {self.kind!r}")
        if not 0.0 < self.onset < 1.0:
            raise ConfigInvalid("drift onset must lie in (0, 1)")
        if not self.onset < self.end <= 1.0:
            raise ConfigInvalid("drift end must lie in (onset, 1]")
        if self.kind == "context_shift" and self.variable not in CONTEXT_NAMES:
            raise ConfigInvalid(f"unknown context variable {self.variable!r}")
        if self.kind == "noise_inflation" and self.magnitude < 0:
            raise ConfigInvalid("noise inflation factor must be >= 0")

    def active(self, frac: float) -> bool:
        return self.onset <= frac < self.end or (self.end == 1.0 and frac >= self.onset)


@dataclass
class ExperimentPlan:
    M: int = 5000
    fractions: tuple = (0.5, 0.2, 0.3)
    seeds: tuple = tuple(range(10))
    real_train_rows: int = 500
    drifts: tuple = (DriftSpec(),)
    ranges: ContextRanges = field(default_factory=ContextRanges)
    design_ranges: ContextRanges = field(default_factory=lambda: ContextRanges((
        (20.0, 120.0, "kN"), (0.2, 0.8, "-"), (0.8, 1.0, "-"), (0.85, 1.0, "-"))))
    truss: dict = field(default_factory=dict)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    rga: RgaConfig = field(default_factory=RgaConfig)
    rom: RomConfig = field(default_factory=RomConfig)
    rom_samples: int = 5000

    def __post_init__(self):
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigInvalid("split fractions must be three numbers summing to 1")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigInvalid("seeds must be distinct")
        if not (np.all(self.design_ranges.lows >= self.ranges.lows - 1e-12)
                and np.all(self.design_ranges.highs <= self.ranges.highs + 1e-12)):
            raise ConfigInvalid("design envelope must lie inside the simulator ranges")

    def simulator(self) -> TrussModel:
        from .truss import truss_from_config

        return truss_from_config(self.truss, ranges=self.ranges)

    def with_physics(self, physics: bool) -> "ExperimentPlan":
        gamma = self.adaptation.gamma if physics else 0.0
        if physics and gamma == 0.0:
            gamma = AdaptationConfig().gamma
        return replace(self, adaptation=replace(self.adaptation, gamma=gamma))


@dataclass
class Dataset:
    seed: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    contexts: np.ndarray
    source_x: np.ndarray
    source_c: np.ndarray
    target_x: np.ndarray
    target_ids: np.ndarray
    stream_x: np.ndarray
    stream_c: np.ndarray
    onsets: list
    test_x: np.ndarray
    test_c: np.ndarray

    def hash(self) -> str:
        h = hashlib.sha256()
        for a in (self.contexts, self.source_x, self.target_x, self.stream_x, self.test_x):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def split_indices(n: int, fractions, rng: np.random.Generator):
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def _regime(plan: ExperimentPlan, frac: float):
    """(context multipliers, noise spec) for the drifts active at ``frac``."""
    scale = np.ones(len(CONTEXT_NAMES))
    sigma = plan.noise.gaussian_sigma
    d = plan.simulator().d
    bias = np.broadcast_to(np.asarray(plan.noise.sensor_bias, dtype=float), (d,)).copy()
    for drift in plan.drifts:
        if not drift.active(frac):
            continue
        if drift.kind == "context_shift":
            scale[CONTEXT_NAMES.index(drift.variable)] *= drift.magnitude
        elif drift.kind == "noise_inflation":
            sigma *= drift.magnitude
        else:
            channels = list(range(d)) if drift.channels is None else list(drift.channels)
            bias[channels] += drift.magnitude
    return scale, replace(plan.noise, gaussian_sigma=sigma, sensor_bias=bias)


def build_dataset(plan: ExperimentPlan, seed: int) -> Dataset:
    sim = plan.simulator()
    rng = np.random.default_rng(seed)
    contexts = sample_contexts(plan.design_ranges, rng, plan.M)
    train, val, test = split_indices(plan.M, plan.fractions, rng)
    if plan.real_train_rows > len(train):
        raise ConfigInvalid("more real training rows requested than training contexts")
    noise_seed = 7919 * (seed + 1)

    source_c = contexts[train]
    source_x = solve_many(sim, source_c)
    target_ids = rng.choice(len(train), size=plan.real_train_rows, replace=False)
    base_noise = replace(plan.noise, rng_seed=noise_seed)
    target_x = np.stack([apply_noise(source_x[i], base_noise, k) for k, i in enumerate(target_ids)]) \
        if len(target_ids) else np.zeros((0, sim.d))

    n_val = len(val)
    stream_c = np.empty((n_val, len(CONTEXT_NAMES)))
    stream_x = np.empty((n_val, sim.d))
    offset = plan.real_train_rows
    for t in range(n_val):
        scale, noise = _regime(plan, t / n_val)
        c = contexts[val[t]] * scale
        if not sim.ranges.contains(c):
            raise ConfigInvalid(f"drifted context {c} leaves the simulator ranges")
        stream_c[t] = c
        stream_x[t] = apply_noise(solve_many(sim, c)[0], replace(noise, rng_seed=noise_seed), offset + t)
    onsets = [int(np.ceil(d.onset * n_val)) for d in plan.drifts]

    scale, noise = _regime(plan, 1.0)
    test_c = contexts[test] * scale
    if not sim.ranges.contains(test_c):
        raise ConfigInvalid("drifted test contexts leave the simulator ranges")
    clean = solve_many(sim, test_c)
    offset += n_val
    test_x = np.stack([apply_noise(y, replace(noise, rng_seed=noise_seed), offset + k)
                       for k, y in enumerate(clean)])
    return Dataset(seed, train, val, test, contexts, source_x, sim.ranges.normalize(source_c),
                   target_x, train[target_ids], stream_x, stream_c, onsets, test_x, test_c)


# -- metrics -------------------------------------------------------------------

def compute_error_metric(predictions, truths, ranges) -> float:
    """Range-weighted mean squared error of normalised contexts (dimensionless).

    ``ranges`` is a ContextRanges or any sequence of ``(low, high)`` pairs.
    """
    if isinstance(ranges, ContextRanges):
        lows, widths = ranges.lows, ranges.widths
    else:
        b = np.asarray([r[:2] for r in ranges], dtype=float)
        lows, widths = b[:, 0], b[:, 1] - b[:, 0]
    p = np.atleast_2d(np.asarray(predictions, dtype=float))
    q = np.atleast_2d(np.asarray(truths, dtype=float))
    if p.shape != q.shape or p.shape[1] != len(lows):
        raise ShapeMismatch(f"prediction/truth shapes differ: {p.shape} vs {q.shape}")
    weights = widths / widths.sum()
    per_var = np.mean(((p - lows) / widths - (q - lows) / widths) ** 2, axis=0)
    return float(np.sum(weights * per_var))


def compute_rg_metric(real_stream, sim_stream) -> float:
    """Mean squared sensor difference over all samples and sensors (mm^2)."""
    a = np.asarray(real_stream, dtype=float)
    b = np.asarray(sim_stream, dtype=float)
    if a.shape != b.shape:
        raise ShapeMismatch(f"stream shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def detection_delays(detections, onsets, horizon: int):
    """Delay from each onset to the first detection before the next onset.

    Returns (delays, censored flags); an undetected drift is censored at the
    number of samples left before the next onset or the end of the stream.
    """
    delays, censored = [], []
    bounds = list(onsets[1:]) + [horizon]
    for onset, stop in zip(onsets, bounds):
        hits = [t for t in detections if onset <= t < stop]
        if hits:
            delays.append(hits[0] - onset)
            censored.append(False)
        else:
            delays.append(stop - onset)
            censored.append(True)
    return delays, censored


# -- running ----------------------------------------------------------------------

def pretrain_shared_rom(plan: ExperimentPlan) -> ReducedOrderSimulator:
    """Surrogate trained on contexts spanning the full simulator ranges."""
    sim = plan.simulator()
    rng = np.random.default_rng(plan.rom.seed)
    contexts = sample_contexts(plan.ranges, rng, plan.rom_samples)
    return pretrain_rom(plan.ranges.normalize(contexts), solve_many(sim, contexts), plan.rom)


def evaluate_model(model: ContextInferenceModel, sim: TrussModel, data: Dataset):
    pred, _ = adaptation.infer_contexts(model, data.test_x)
    error = compute_error_metric(pred, data.test_c, sim.ranges)
    rg = compute_rg_metric(data.test_x, solve_many(sim, pred))
    return error, rg


def initial_state(plan: ExperimentPlan, sim: TrussModel, rom, data: Dataset):
    repo = Repository(sim.ranges, sim.d)
    repo.extend_labeled(data.source_c, data.source_x, "design_sim", provenance=f"train-split seed={data.seed}")
    for k, y in enumerate(data.target_x):
        from .repository import RepositoryRecord

        repo.append(RepositoryRecord(k, "real_measurement", y, provenance="train-split"))
    schema = {"context_variables": CONTEXT_NAMES, "ranges": sim.ranges, "sensor_count": sim.d}
    report = initialize(schema, repo, sim, replace(plan.rga, min_design_pairs=len(data.source_x)),
                        np.random.default_rng(data.seed), plan.design_ranges)
    cfg = replace(plan.adaptation, seed=data.seed)
    model = adaptation.train_initial(report.corpus, rom, cfg)
    ctx, _ = adaptation.infer_contexts(model, data.target_x)
    for k, (y, c) in enumerate(zip(data.target_x, ctx)):
        repo.record_gap(compute_gap(y, solve_many(sim, c)[0]).values, k)
    return model, repo, report


@dataclass
class SeedResult:
    seed: int
    physics: bool
    rows: list
    traces: dict
    monitors: dict


def run_seed(plan: ExperimentPlan, seed: int, rom: ReducedOrderSimulator, physics: bool,
             levels=LEVELS, out_dir=None) -> SeedResult:
    """Train once, then evaluate each requested LoI on independent copies."""
    plan = plan.with_physics(physics)
    sim = plan.simulator()
    data = build_dataset(plan, seed)
    base_model, base_repo, _ = initial_state(plan, sim, rom, data)
    rows, traces, monitors = [], {}, {}
    for level in levels:
        model = base_model.copy()
        repo = _clone_repository(base_repo)
        ad, censored, events = float("nan"), False, []
        if level in ("B", "C"):
            log_path = None
            if out_dir is not None:
                log_path = Path(out_dir) / f"events_{level}_{'phys' if physics else 'nophys'}_{seed}.jsonl"
            mon = RgaMonitor(model, sim, repo, plan.rga, replace(plan.adaptation, seed=seed),
                             np.random.default_rng(10_000 + seed), recalibrate=True,
                             expand=(level == "C"), log_path=log_path)
            for t, y in enumerate(data.stream_x):
                mon.process(y, t)
            mon.close()
            delays, cens = detection_delays(mon.detections, data.onsets, len(data.stream_x))
            events = list(zip(delays, cens))
            ad, censored = float(np.mean(delays)), any(cens)
            traces[level] = mon.trace
            monitors[level] = mon
        error, rg = evaluate_model(model, sim, data)
        rows.append({"seed": seed, "loi": level, "physics": int(physics), "error": error, "rg": rg,
                     "ad": ad, "censored": int(censored),
                     "ad_events": ";".join(f"{d}{'*' if c else ''}" for d, c in events)})
    return SeedResult(seed, physics, rows, traces, monitors)


def _clone_repository(repo: Repository) -> Repository:
    import copy

    clone = copy.copy(repo)
    for attr in ("_records", "_labeled_ids", "_ctx_rows", "_real_ids", "_gaps", "_journal"):
        setattr(clone, attr, list(getattr(repo, attr)))
    clone._last_t = dict(repo._last_t)
    clone._saved_path = None
    return clone


@dataclass
class MetricReport:
    loi: str
    physics: bool
    rows: list

    def _values(self, key):
        return np.array([r[key] for r in self.rows], dtype=float)

    def summary(self) -> dict:
        out = {}
        for key in ("error", "rg", "ad"):
            v = self._values(key)
            if np.all(np.isnan(v)):
                out[key] = (float("nan"), float("nan"))
            else:
                out[key] = (float(np.nanmean(v)), float(np.nanstd(v)))
        return out


def run_loi(plan: ExperimentPlan, level: str, physics: bool = True,
            rom: ReducedOrderSimulator | None = None) -> MetricReport:
    if level not in LEVELS:
        raise ConfigInvalid(f"unknown level {level!r}")
    rom = rom or pretrain_shared_rom(plan)
    rows = []
    for seed in sorted(plan.seeds):
        rows += run_seed(plan, seed, rom, physics, levels=(level,)).rows
    return MetricReport(level, physics, rows)


# -- reporting -------------------------------------------------------------------

def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


def write_metrics_csv(rows, path) -> None:
    rows = sorted(rows, key=lambda r: (r["loi"], r["physics"], r["seed"]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r["seed"], r["loi"], r["physics"], _fmt(r["error"]), _fmt(r["rg"]),
                        _fmt(r["ad"]), r["censored"], r.get("ad_events", "")])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({"seed": int(r["seed"]), "loi": r["loi"], "physics": int(r["physics"]),
                    "error": float(r["error"]), "rg": float(r["rg"]),
                    "ad": float(r["ad"]) if r["ad"] else float("nan"),
                    "censored": int(r["censored"]), "ad_events": r.get("ad_events", "")})
    return out


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "status", "max_delta", "threshold"])
        for e in trace:
            w.writerow([e["t"], e["status"], repr(e["delta_max"]),
                        "" if e["threshold_max"] is None else repr(e["threshold_max"])])


def report(paths, out_dir) -> Path:
    """Merge metrics CSVs into ``table.csv`` (LoI rows x physics/metric
    columns, mean and std over seeds), ``metrics_long.csv`` and gnuplot
    ``.dat`` series for every ``trace_*.csv`` found next to the inputs."""
    out_dir = Path(out_dir)
    rows = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise MissingInput(f"missing metrics file: {p}")
        rows += read_metrics_csv(p)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, out_dir / "metrics_long.csv")

    header = ["loi"]
    for phys in ("without_physics", "with_physics"):
        for m in ("error", "rg", "ad"):
            header += [f"{phys}_{m}_mean", f"{phys}_{m}_std"]
    table = out_dir / "table.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for level in sorted({r["loi"] for r in rows}):
            line = [level]
            for phys in (0, 1):
                sel = [r for r in rows if r["loi"] == level and r["physics"] == phys]
                for m in ("error", "rg", "ad"):
                    v = np.array([r[m] for r in sel], dtype=float)
                    if len(v) == 0 or np.all(np.isnan(v)):
                        line += ["", ""]
                    else:
                        line += [f"{np.nanmean(v):.6g}", f"{np.nanstd(v):.6g}"]
            w.writerow(line)

    for p in paths:
        for trace in sorted(Path(p).parent.glob("trace_*.csv")):
            with open(trace, newline="") as fh:
                lines = list(csv.DictReader(fh))
            with open(out_dir / (trace.stem + ".dat"), "w") as fh:
                fh.write("# t max_delta threshold out_of_sync\n")
                for e in lines:
                    fh.write(f"{e['t']} {e['max_delta']} {e['threshold'] or 'nan'} "
                             f"{int(e['status'] == 'out-of-sync')}\n")
    return table
