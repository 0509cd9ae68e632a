"""Reality gap analysis: initialisation queries, gap tracking, out-of-sync
detection with recalibration, and gated repository expansion.
"""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import adaptation
from .adaptation import AdaptationConfig, ContextInferenceModel, TrainingCorpus
from .errors import SchemaInsufficient, ShapeMismatch, SimulatorUnavailable
from .repository import Repository
from .truss import CONTEXT_NAMES, ContextRanges, TrussModel, sample_contexts, solve, solve_many

log = logging.getLogger(__name__)

IN_SYNC, OUT_OF_SYNC, WARMING_UP = "in-sync", "out-of-sync", "warming-up"


@dataclass
class RgaConfig:
    window: int = 50
    k: float = 3.0
    warmup_min: int = 10
    persistence: int = 2
    k_repo: float = 3.0
    tau_ctx: float = 0.15
    metric: str = "euclidean"
    cooldown: int = 100
    min_design_pairs: int = 2500
    probe: int = 20

    def __post_init__(self):
        if not self.window >= self.warmup_min >= 2:
            raise ValueError("need window >= warmup_min >= 2")
        if self.k <= 0 or self.k_repo <= 0:
            raise ValueError("UCB multipliers must be > 0")
        if self.tau_ctx < 0:
            raise ValueError("tau_ctx must be >= 0")
        if self.persistence < 1:
            raise ValueError("persistence must be >= 1")
        if self.metric != "euclidean":
            raise ValueError(f"unsupported context metric {self.metric!r}")

    @classmethod
    def from_mapping(cls, cfg: dict | None) -> "RgaConfig":
        return cls(**dict(cfg or {}))


@dataclass(frozen=True)
class RealityGapVector:
    values: np.ndarray
    timestamp: int = 0

    def __post_init__(self):
        if np.any(np.asarray(self.values) < 0):
            raise ValueError("gap components are squared errors and cannot be negative")


def compute_gap(y_real, y_sim, t: int = 0) -> RealityGapVector:
    """Per-sensor squared error (mm^2)."""
    a = np.asarray(getattr(y_real, "values", y_real), dtype=float)
    b = np.asarray(getattr(y_sim, "values", y_sim), dtype=float)
    if a.shape != b.shape:
        raise ShapeMismatch(f"gap inputs differ in shape: {a.shape} vs {b.shape}")
    return RealityGapVector((a - b) ** 2, t)


class GapWindow:
    """Sliding window of the last ``size`` gap vectors with per-sensor
    mean / sample std, recomputed from the buffer on every change."""

    def __init__(self, d: int, size: int = 50, k: float = 3.0, warmup_min: int = 10):
        self.d, self.size, self.k, self.warmup_min = d, size, k, warmup_min
        self._buf: deque = deque(maxlen=size)
        self.mean = np.zeros(d)
        self.std = np.zeros(d)

    def __len__(self) -> int:
        return len(self._buf)

    @property
    def ready(self) -> bool:
        return len(self._buf) >= self.warmup_min

    def push(self, delta) -> None:
        delta = np.asarray(getattr(delta, "values", delta), dtype=float)
        if delta.shape != (self.d,):
            raise ShapeMismatch("gap vector width mismatch")
        self._buf.append(delta)
        self._refresh()

    def clear(self) -> None:
        self._buf.clear()
        self._refresh()

    def _refresh(self) -> None:
        if not self._buf:
            self.mean, self.std = np.zeros(self.d), np.zeros(self.d)
            return
        arr = np.array(self._buf)
        self.mean = arr.mean(axis=0)
        self.std = arr.std(axis=0, ddof=1) if len(arr) > 1 else np.zeros(self.d)

    def thresholds(self) -> np.ndarray:
        return self.mean + self.k * self.std

    def contents(self) -> np.ndarray:
        return np.array(self._buf).reshape(-1, self.d)


@dataclass
class SyncState:
    persistence: int = 2
    status: str = WARMING_UP
    streak: int = 0
    last_trigger: int | None = None


@dataclass
class StepOutcome:
    t: int
    delta: np.ndarray
    context: np.ndarray
    clamped: bool
    y_sim: np.ndarray
    status: str
    violation: bool
    threshold: np.ndarray


def check_violation(delta, window: GapWindow) -> tuple[bool, np.ndarray]:
    """Any sensor above its window upper bound (window excludes ``delta``)."""
    thr = window.thresholds()
    return bool(np.any(np.asarray(delta) > thr)), thr


def update_sync(delta, window: GapWindow, state: SyncState) -> tuple[bool, np.ndarray]:
    """Detector half of ``step``: test ``delta`` against the window, update
    the streak and status, then push ``delta``."""
    delta = np.asarray(getattr(delta, "values", delta), dtype=float)
    if window.ready:
        violation, thr = check_violation(delta, window)
        state.streak = state.streak + 1 if violation else 0
        state.status = OUT_OF_SYNC if state.streak >= state.persistence else IN_SYNC
    else:
        violation, thr = False, np.full(window.d, np.inf)
        state.streak = 0
        state.status = WARMING_UP
    window.push(delta)
    return violation, thr


def step(y_real, model: ContextInferenceModel, simulator: TrussModel, window: GapWindow,
         state: SyncState, t: int = 0) -> StepOutcome:
    """Infer context, simulate it with the full solver, update detection state."""
    y = np.asarray(getattr(y_real, "values", y_real), dtype=float)
    context, clamped = adaptation.infer_contexts(model, y[None, :])
    y_sim = solve(simulator, context[0]).values
    delta = compute_gap(y, y_sim, t).values
    violation, thr = update_sync(delta, window, state)
    return StepOutcome(t, delta, context[0], bool(clamped.any()), y_sim, state.status, violation, thr)


# -- initialisation (Q1-Q4) -------------------------------------------------

@dataclass
class InitReport:
    entries: list = field(default_factory=list)
    generated: int = 0
    corpus: TrainingCorpus | None = None

    def add(self, query: str, response: str, action: str) -> None:
        self.entries.append({"query": query, "response": response, "action": action})


def check_schema(dt_schema: dict) -> list[str]:
    """Names of missing or invalid digital-twin schema entries."""
    problems = []
    names = dt_schema.get("context_variables")
    if not names or tuple(names) != CONTEXT_NAMES:
        problems.append("context_variables")
    ranges = dt_schema.get("ranges")
    if not isinstance(ranges, ContextRanges):
        problems.append("ranges")
    count = dt_schema.get("sensor_count")
    if not isinstance(count, int) or count < 1:
        problems.append("sensor_count")
    return problems


def initialize(dt_schema: dict, repository: Repository, simulator: TrussModel | None,
               config: RgaConfig, rng: np.random.Generator, design_ranges: ContextRanges | None = None,
               target_rows=None) -> InitReport:
    """Run the start-up queries and assemble the training corpus.

    Design-phase pairs missing from the repository are generated with the
    simulator by sampling ``design_ranges`` (defaults to the schema ranges).
    Real rows come from ``target_rows`` if given, else from the repository.
    """
    report = InitReport()
    problems = check_schema(dt_schema)
    if problems:
        report.add("Q1 schema", f"insufficient: {', '.join(problems)}", "calibration paused")
        raise SchemaInsufficient(f"digital twin schema lacks {', '.join(problems)}")
    if simulator is not None and simulator.d != dt_schema["sensor_count"]:
        raise SchemaInsufficient("simulator sensor count disagrees with schema")
    report.add("Q1 schema", "sufficient", "none")

    have = repository.count()
    report.add("Q2 design data", f"{have} labelled pairs available",
               "none" if have >= config.min_design_pairs else "request simulations")
    shortfall = max(config.min_design_pairs - have, 0)
    if shortfall:
        if simulator is None:
            raise SimulatorUnavailable("no simulator to generate design-phase data")
        ranges = design_ranges or dt_schema["ranges"]
        contexts = sample_contexts(ranges, rng, shortfall)
        sensors = solve_many(simulator, contexts)
        repository.extend_labeled(dt_schema["ranges"].normalize(contexts), sensors, "design_sim",
                                  provenance="initialize")
        report.generated = shortfall
        report.add("Q3 simulate", f"{shortfall} pairs generated", "stored in repository")

    x, c, _ = repository.labeled_arrays()
    if target_rows is None:
        target_rows = np.array([r.sensors for r in repository.query_real()]).reshape(-1, repository.d)
    report.corpus = TrainingCorpus(x, c, target_rows, dt_schema["ranges"])
    report.add("Q4 corpus", f"{len(x)} labelled + {len(target_rows)} real rows", "corpus assembled")
    return report


# -- recalibration (T1) and repository expansion (T2) -----------------------

@dataclass
class RecalibrationEvent:
    t: int
    suppressed: bool
    rg_before: float = float("nan")
    rg_after: float = float("nan")


def probe_rg(model: ContextInferenceModel, simulator: TrussModel, rows) -> float:
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.size == 0:
        return float("nan")
    ctx, _ = adaptation.infer_contexts(model, rows)
    return float(np.mean((rows - solve_many(simulator, ctx)) ** 2))


def repository_sample(repository: Repository, n: int, rng: np.random.Generator,
                      inferred_share: float = 0.5):
    """Labelled rows for fine-tuning: newest inferred pairs first (up to
    ``inferred_share`` of ``n``), the rest drawn from design-phase pairs."""
    xi, ci, _ = repository.labeled_arrays(kinds=("inferred_pair",))
    take = min(len(xi), int(round(inferred_share * n)))
    xi, ci = xi[len(xi) - take:], ci[len(ci) - take:]
    xd, cd, _ = repository.labeled_arrays(kinds=("design_sim",))
    m = min(n - take, len(xd))
    pick = rng.choice(len(xd), size=m, replace=False) if m else np.zeros(0, int)
    return np.concatenate([xd[pick], xi]), np.concatenate([cd[pick], ci])


def trigger_recalibration(state: SyncState, model: ContextInferenceModel, recent_real,
                          repository: Repository, window: GapWindow, simulator: TrussModel,
                          config: RgaConfig, adapt_config: AdaptationConfig, t: int,
                          rng: np.random.Generator) -> RecalibrationEvent:
    """Fine-tune on the recent real buffer plus a repository sample.

    Triggers closer than ``config.cooldown`` samples to the previous one are
    suppressed. Either way the violation streak is reset.
    """
    state.streak = 0
    if state.last_trigger is not None and t - state.last_trigger < config.cooldown:
        return RecalibrationEvent(t, suppressed=True)
    recent = np.atleast_2d(np.asarray(recent_real, dtype=float))
    probe = recent[-config.probe:]
    before = probe_rg(model, simulator, probe)
    rx, rc = repository_sample(repository, len(recent), rng)
    adaptation.fine_tune(model, recent, rx, rc, adapt_config, rng)
    after = probe_rg(model, simulator, probe)
    state.last_trigger = t
    state.status = IN_SYNC
    window.clear()
    return RecalibrationEvent(t, False, before, after)


@dataclass
class GateDecision:
    action: str  # "insert" | "reject_gap" | "reject_duplicate"
    distance: float = float("nan")
    record_id: int | None = None


def gate_repository_insert(delta, context, y_sim, repository: Repository, config: RgaConfig,
                           t: int = 0) -> GateDecision:
    """Store (context, y_sim) only if every sensor gap is within the
    repository's upper bound and the context is farther than ``tau_ctx``
    from every stored context. ``context`` is in physical units."""
    delta = np.asarray(getattr(delta, "values", delta), dtype=float)
    bound = repository.gap_stats().upper_bound(config.k_repo)
    if np.any(delta > bound):
        return GateDecision("reject_gap")
    c_norm = repository.ranges.normalize(np.asarray(getattr(context, "as_array", lambda: context)()))
    if len(repository.query_labeled(limit=1)):
        _, dist = repository.nearest_context(c_norm)
    else:
        dist = float("inf")
    if dist <= config.tau_ctx:
        return GateDecision("reject_duplicate", dist)
    rid = repository.extend_labeled(c_norm[None, :], np.asarray(y_sim)[None, :], "inferred_pair",
                                    t=t, provenance=f"gate@{t}")[0]
    repository.record_gap(delta, t)
    return GateDecision("insert", dist, rid)


# -- orchestration ------------------------------------------------------------

class RgaMonitor:
    """Runs the per-sample loop for one asset stream.

    ``recalibrate`` enables T1 (LoI B); ``expand`` additionally enables T2
    (LoI C). With both off the loop only measures the gap (LoI A).
    """

    def __init__(self, model: ContextInferenceModel, simulator: TrussModel, repository: Repository,
                 config: RgaConfig, adapt_config: AdaptationConfig, rng: np.random.Generator,
                 recalibrate: bool = True, expand: bool = False, log_path=None):
        self.model, self.simulator, self.repository = model, simulator, repository
        self.config, self.adapt_config, self.rng = config, adapt_config, rng
        self.recalibrate, self.expand = recalibrate, expand
        self.window = GapWindow(simulator.d, config.window, config.k, config.warmup_min)
        self.state = SyncState(config.persistence)
        self.recent = deque(maxlen=adapt_config.ft_buffer)
        self.events: list[RecalibrationEvent] = []
        self.detections: list[int] = []
        self.trace: list[dict] = []
        self._log = open(log_path, "w") if log_path else None

    def process(self, y_real, t: int) -> StepOutcome:
        y = np.asarray(getattr(y_real, "values", y_real), dtype=float)
        self.recent.append(y)
        out = step(y, self.model, self.simulator, self.window, self.state, t)
        entry = {"t": t, "status": out.status, "delta_max": float(out.delta.max()),
                 "delta_mean": float(out.delta.mean()),
                 "threshold_max": float(np.max(out.threshold)) if np.all(np.isfinite(out.threshold)) else None,
                 "clamped": out.clamped}
        if out.status == OUT_OF_SYNC:
            self.detections.append(t)
            if self.recalibrate:
                event = trigger_recalibration(self.state, self.model, np.array(self.recent),
                                              self.repository, self.window, self.simulator,
                                              self.config, self.adapt_config, t, self.rng)
                self.events.append(event)
                entry["trigger"] = "suppressed" if event.suppressed else "recalibrated"
                if not event.suppressed:
                    entry["rg_before"], entry["rg_after"] = event.rg_before, event.rg_after
            else:
                self.state.streak = 0
        if self.expand:
            decision = gate_repository_insert(out.delta, out.context, out.y_sim, self.repository,
                                              self.config, t)
            entry["gate"] = decision.action
        self.trace.append(entry)
        if self._log:
            self._log.write(json.dumps(entry, sort_keys=True) + "\n")
        return out

    def close(self) -> None:
        if self._log:
            self._log.close()
            self._log = None
