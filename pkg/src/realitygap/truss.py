"""Context-parameterised planar truss solver.

The same direct-stiffness model plays two roles: clean ``solve`` output is the
digital twin's high-fidelity simulation, and ``measure_real`` wraps it with
sensor gain, bias and Gaussian noise to stand in for the physical asset.

Units: coordinates in m, moduli in Pa, areas in m^2, loads in kN, sensor
readings in mm (displacement along the global axis, +x right, +y up).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

from .errors import ContextOutOfRange, ShapeMismatch, SingularStiffness

CONTEXT_NAMES = ("load_magnitude", "load_position", "thermal_factor", "support_factor")
CONTEXT_DIM = len(CONTEXT_NAMES)


@dataclass(frozen=True)
class ContextVector:
    load_magnitude: float
    load_position: float
    thermal_factor: float
    support_factor: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in CONTEXT_NAMES], dtype=float)

    @classmethod
    def from_array(cls, values) -> "ContextVector":
        values = np.asarray(values, dtype=float).ravel()
        if values.shape != (CONTEXT_DIM,):
            raise ShapeMismatch(f"context needs {CONTEXT_DIM} values, got {values.shape}")
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class ContextRanges:
    """Per-variable (min, max, unit) bounds, in ``CONTEXT_NAMES`` order."""

    bounds: tuple = (
        (20.0, 120.0, "kN"),
        (0.2, 0.8, "-"),
        (0.8, 1.0, "-"),
        (0.5, 1.0, "-"),
    )

    def __post_init__(self):
        if len(self.bounds) != CONTEXT_DIM:
            raise ShapeMismatch(f"expected {CONTEXT_DIM} bounds, got {len(self.bounds)}")
        for name, (lo, hi, _) in zip(CONTEXT_NAMES, self.bounds):
            if not lo < hi:
                raise ValueError(f"range for {name} must satisfy min < max, got ({lo}, {hi})")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ContextRanges":
        default = cls()
        bounds = []
        for name, (lo, hi, unit) in zip(CONTEXT_NAMES, default.bounds):
            entry = mapping.get(name, {})
            if isinstance(entry, (list, tuple)):
                entry = {"min": entry[0], "max": entry[1]}
            bounds.append((float(entry.get("min", lo)), float(entry.get("max", hi)),
                           str(entry.get("unit", unit))))
        return cls(tuple(bounds))

    def to_mapping(self) -> dict:
        return {n: {"min": lo, "max": hi, "unit": u}
                for n, (lo, hi, u) in zip(CONTEXT_NAMES, self.bounds)}

    @property
    def lows(self) -> np.ndarray:
        return np.array([b[0] for b in self.bounds], dtype=float)

    @property
    def highs(self) -> np.ndarray:
        return np.array([b[1] for b in self.bounds], dtype=float)

    @property
    def widths(self) -> np.ndarray:
        return self.highs - self.lows

    @property
    def units(self) -> tuple:
        return tuple(b[2] for b in self.bounds)

    def normalize(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.lows) / self.widths

    def denormalize(self, values) -> np.ndarray:
        return np.asarray(values, dtype=float) * self.widths + self.lows

    def contains(self, values, atol: float = 1e-12) -> bool:
        values = np.asarray(values, dtype=float)
        return bool(np.all(values >= self.lows - atol) and np.all(values <= self.highs + atol))

    def clip(self, values) -> tuple[np.ndarray, np.ndarray]:
        """Clip to bounds; also return the boolean mask of clipped entries."""
        values = np.asarray(values, dtype=float)
        clipped = np.clip(values, self.lows, self.highs)
        return clipped, clipped != values


@dataclass(frozen=True)
class SensorVector:
    values: np.ndarray
    timestamp: int = 0
    domain_tag: str = "simulated"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or not np.all(np.isfinite(values)):
            raise ValueError("sensor values must be a finite 1-D array")
        if self.domain_tag not in ("simulated", "real"):
            raise ValueError(f"unknown domain tag {self.domain_tag!r}")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class NoiseSpec:
    gaussian_sigma: float = 0.05
    sensor_gain: float | Sequence[float] = 1.02
    sensor_bias: float | Sequence[float] = 0.05
    rng_seed: int = 0

    def __post_init__(self):
        if self.gaussian_sigma < 0:
            raise ValueError("gaussian_sigma must be >= 0")

    @classmethod
    def ideal(cls) -> "NoiseSpec":
        return cls(gaussian_sigma=0.0, sensor_gain=1.0, sensor_bias=0.0)


@dataclass
class TrussModel:
    """Pin-jointed planar truss.

    ``members`` rows are ``(node_i, node_j, area, youngs_modulus)``; ``supports``
    rows are ``(node, fix_x, fix_y, support_adjacent)`` where the last flag
    marks nodes whose incident members are scaled by the support factor.
    ``sensor_nodes`` rows are ``(node, axis)`` with axis 0 = x, 1 = y.
    ``load_chord`` lists the nodes (ordered along the chord) that receive the
    moving load.
    """

    nodes: np.ndarray
    members: list
    supports: list
    sensor_nodes: list
    load_chord: list
    ranges: ContextRanges = field(default_factory=ContextRanges)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 2:
            raise ShapeMismatch("nodes must be an (n, 2) array")
        n = len(self.nodes)
        self.members = [(int(i), int(j), float(a), float(e)) for i, j, a, e in self.members]
        self.supports = [(int(s[0]), bool(s[1]), bool(s[2]), bool(s[3]) if len(s) > 3 else True)
                         for s in self.supports]
        self.sensor_nodes = [(int(nd), int(ax)) for nd, ax in self.sensor_nodes]
        self.load_chord = [int(i) for i in self.load_chord]
        if not self.sensor_nodes:
            raise ValueError("at least one sensor channel is required")
        for nd, ax in self.sensor_nodes:
            if not 0 <= nd < n or ax not in (0, 1):
                raise ValueError(f"invalid sensor channel ({nd}, {ax})")
        for nd in self.load_chord:
            if not 0 <= nd < n:
                raise ValueError(f"load chord node {nd} does not exist")

        support_nodes = {s[0] for s in self.supports if s[3]}
        ndof = 2 * n
        self._k_rest = np.zeros((ndof, ndof))
        self._k_support = np.zeros((ndof, ndof))
        for i, j, area, modulus in self.members:
            dx, dy = self.nodes[j] - self.nodes[i]
            length = np.hypot(dx, dy)
            if not length > 0:
                raise ValueError(f"member ({i}, {j}) has zero length")
            c, s = dx / length, dy / length
            t = np.array([-c, -s, c, s])
            ke = (modulus * area / length) * np.outer(t, t)
            dofs = [2 * i, 2 * i + 1, 2 * j, 2 * j + 1]
            target = self._k_support if (i in support_nodes or j in support_nodes) else self._k_rest
            target[np.ix_(dofs, dofs)] += ke

        fixed = set()
        for node, fx, fy, _ in self.supports:
            if fx:
                fixed.add(2 * node)
            if fy:
                fixed.add(2 * node + 1)
        self._free = np.array([k for k in range(ndof) if k not in fixed], dtype=int)
        self._sensor_dofs = np.array([2 * nd + ax for nd, ax in self.sensor_nodes], dtype=int)
        chord_x = self.nodes[self.load_chord, 0]
        self._chord_s = (chord_x - chord_x[0]) / (chord_x[-1] - chord_x[0]) if len(chord_x) > 1 else np.zeros(1)

    @property
    def d(self) -> int:
        return len(self.sensor_nodes)

    @property
    def ndof(self) -> int:
        return 2 * len(self.nodes)

    def stiffness(self, thermal_factor: float = 1.0, support_factor: float = 1.0) -> np.ndarray:
        """Global stiffness matrix before boundary conditions (N/m)."""
        return thermal_factor * (self._k_rest + support_factor * self._k_support)

    def load_vector(self, load_magnitude: float, load_position: float) -> np.ndarray:
        """Nodal forces in N; the vertical load is split linearly between the
        two chord nodes bracketing ``load_position``."""
        f = np.zeros(self.ndof)
        p = -1e3 * load_magnitude
        if len(self.load_chord) == 1:
            f[2 * self.load_chord[0] + 1] = p
            return f
        k = int(np.clip(np.searchsorted(self._chord_s, load_position, side="right") - 1,
                        0, len(self._chord_s) - 2))
        s0, s1 = self._chord_s[k], self._chord_s[k + 1]
        w = (load_position - s0) / (s1 - s0)
        f[2 * self.load_chord[k] + 1] += (1.0 - w) * p
        f[2 * self.load_chord[k + 1] + 1] += w * p
        return f


def _as_context_array(context) -> np.ndarray:
    if isinstance(context, ContextVector):
        return context.as_array()
    arr = np.asarray(context, dtype=float)
    if arr.shape[-1] != CONTEXT_DIM:
        raise ShapeMismatch(f"context needs {CONTEXT_DIM} values, got shape {arr.shape}")
    return arr


def solve_displacements(model: TrussModel, context) -> np.ndarray:
    """Full nodal displacement vector in m for one context."""
    c = _as_context_array(context)
    if not model.ranges.contains(c):
        raise ContextOutOfRange(f"context {c} outside declared ranges")
    load, pos, thermal, support = c
    free = model._free
    k_ff = model.stiffness(thermal, support)[np.ix_(free, free)]
    try:
        factor = scipy.linalg.cho_factor(k_ff, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularStiffness("reduced stiffness matrix is not positive definite") from exc
    # cho_factor succeeds on some near-singular mechanisms; check the pivots too
    diag = np.abs(np.diag(factor[0]))
    if diag.min() <= 1e-8 * diag.max():
        raise SingularStiffness("reduced stiffness matrix is numerically singular")
    u = np.zeros(model.ndof)
    u[free] = scipy.linalg.cho_solve(factor, model.load_vector(load, pos)[free], check_finite=False)
    return u


def solve(model: TrussModel, context, t: int = 0) -> SensorVector:
    """Clean sensor readings (mm) for ``context``."""
    u = solve_displacements(model, context)
    return SensorVector(1e3 * u[model._sensor_dofs], timestamp=t, domain_tag="simulated")


def solve_many(model: TrussModel, contexts) -> np.ndarray:
    """Clean readings for an ``(n, 4)`` array of contexts, shape ``(n, d)``."""
    contexts = np.atleast_2d(_as_context_array(contexts))
    return np.stack([solve(model, c).values for c in contexts]) if len(contexts) else np.zeros((0, model.d))


def _noise_terms(noise: NoiseSpec, d: int):
    gain = np.broadcast_to(np.asarray(noise.sensor_gain, dtype=float), (d,))
    bias = np.broadcast_to(np.asarray(noise.sensor_bias, dtype=float), (d,))
    return gain, bias


def apply_noise(clean: np.ndarray, noise: NoiseSpec, t: int) -> np.ndarray:
    """gain * clean + bias + N(0, sigma^2), reproducible from (rng_seed, t)."""
    clean = np.asarray(clean, dtype=float)
    gain, bias = _noise_terms(noise, clean.shape[-1])
    out = gain * clean + bias
    if noise.gaussian_sigma > 0:
        rng = np.random.default_rng([int(noise.rng_seed), int(t)])
        out = out + noise.gaussian_sigma * rng.standard_normal(clean.shape[-1])
    return out


def measure_real(model: TrussModel, context, noise: NoiseSpec, t: int) -> SensorVector:
    clean = solve(model, context).values
    return SensorVector(apply_noise(clean, noise, t), timestamp=t, domain_tag="real")


def sample_context(ranges: ContextRanges, rng: np.random.Generator) -> ContextVector:
    return ContextVector.from_array(rng.uniform(ranges.lows, ranges.highs))


def sample_contexts(ranges: ContextRanges, rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.uniform(ranges.lows, ranges.highs, size=(n, CONTEXT_DIM))


def pratt_truss(n_panels: int = 8, span: float = 40.0, height: float = 5.0,
                modulus: float = 200e9, area: float = 0.005, sensors: str = "default",
                ranges: ContextRanges | None = None) -> TrussModel:
    """Pratt truss with inclined end posts, pinned left support and roller right.

    Lower chord nodes are ``0..n_panels``; upper chord nodes sit above lower
    nodes ``1..n_panels-1``. Diagonals slope down toward midspan.

    ``sensors`` is ``"default"`` (vertical displacement at interior lower
    chord nodes plus the upper nodes two or more panels in from each end,
    12 channels for 8 panels) or ``"all_vertical"`` (every unsupported node,
    ``2 * n_panels - 2`` channels, so 22 panels give 42).
    """
    if n_panels < 4 or n_panels % 2:
        raise ValueError("n_panels must be an even number >= 4")
    dx = span / n_panels
    lower = [(i * dx, 0.0) for i in range(n_panels + 1)]
    upper = [(i * dx, height) for i in range(1, n_panels)]
    nodes = np.array(lower + upper)
    up = {i: n_panels + i for i in range(1, n_panels)}  # upper node above lower i

    members = []
    for i in range(n_panels):
        members.append((i, i + 1))
    for i in range(1, n_panels - 1):
        members.append((up[i], up[i + 1]))
    for i in range(1, n_panels):
        members.append((i, up[i]))
    members.append((0, up[1]))
    members.append((n_panels, up[n_panels - 1]))
    half = n_panels // 2
    for i in range(1, half):
        members.append((up[i], i + 1))
    for i in range(half + 1, n_panels):
        members.append((up[i], i - 1))
    members = [(i, j, area, modulus) for i, j in members]

    supports = [(0, True, True, True), (n_panels, False, True, True)]
    if sensors == "default":
        channels = [(i, 1) for i in range(1, n_panels)] + [(up[i], 1) for i in range(2, n_panels - 1)]
    elif sensors == "all_vertical":
        channels = [(i, 1) for i in range(1, n_panels)] + [(up[i], 1) for i in range(1, n_panels)]
    else:
        raise ValueError(f"unknown sensor layout {sensors!r}")
    return TrussModel(nodes, members, supports, channels, list(range(n_panels + 1)),
                      ranges=ranges or ContextRanges())


def two_bar_truss(length: float = 5.0, angle_deg: float = 45.0, modulus: float = 200e9,
                  area: float = 0.005, ranges: ContextRanges | None = None) -> TrussModel:
    """Symmetric two-bar truss with both feet pinned; one sensor at the apex (y)."""
    th = np.radians(angle_deg)
    half = length * np.cos(th)
    nodes = np.array([[0.0, 0.0], [2 * half, 0.0], [half, length * np.sin(th)]])
    members = [(0, 2, area, modulus), (1, 2, area, modulus)]
    supports = [(0, True, True, True), (1, True, True, True)]
    return TrussModel(nodes, members, supports, [(2, 1)], [2], ranges=ranges or ContextRanges())


def truss_from_config(cfg: dict | None, ranges: ContextRanges | None = None) -> TrussModel:
    cfg = dict(cfg or {})
    return pratt_truss(
        n_panels=int(cfg.get("n_panels", 8)),
        span=float(cfg.get("span", 40.0)),
        height=float(cfg.get("height", 5.0)),
        modulus=float(cfg.get("youngs_modulus", 200e9)),
        area=float(cfg.get("area", 0.005)),
        sensors=str(cfg.get("sensors", "default")),
        ranges=ranges,
    )


def noise_from_config(cfg: dict | None) -> NoiseSpec:
    cfg = dict(cfg or {})
    return NoiseSpec(
        gaussian_sigma=float(cfg.get("gaussian_sigma", 0.05)),
        sensor_gain=cfg.get("sensor_gain", 1.02),
        sensor_bias=cfg.get("sensor_bias", 0.05),
        rng_seed=int(cfg.get("rng_seed", 0)),
    )


def write_sensor_csv(path, vectors: Iterable[SensorVector]) -> None:
    """CSV with columns t, domain_tag, s1..sd."""
    vectors = list(vectors)
    d = len(vectors[0]) if vectors else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "domain_tag"] + [f"s{i + 1}" for i in range(d)])
        for v in vectors:
            writer.writerow([v.timestamp, v.domain_tag] + [repr(float(x)) for x in v.values])


def read_sensor_csv(path) -> list[SensorVector]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [SensorVector(np.array([float(x) for x in r[2:]]), int(r[0]), r[1]) for r in rows[1:]]
