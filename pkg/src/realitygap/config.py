"""YAML configuration for experiment runs.

Every key is optional; omitted keys keep the library defaults. Layout::

    experiment: {M, fractions, seeds, real_train_rows, rom_samples}
    truss: {n_panels, span, height, youngs_modulus, area, sensors}
    ranges: {load_magnitude: [min, max], ...}
    design_ranges: {...}
    noise: {gaussian_sigma, sensor_gain, sensor_bias}
    drifts: [{kind, onset, end, magnitude, variable, channels}, ...]
    rom: {...}   adaptation: {...}   rga: {...}
"""
from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import yaml

from .adaptation import AdaptationConfig
from .errors import ConfigInvalid, MissingInput
from .harness import DriftSpec, ExperimentPlan
from .rga import RgaConfig
from .rom import RomConfig
from .truss import ContextRanges, noise_from_config

SECTIONS = {"experiment", "truss", "ranges", "design_ranges", "noise", "drifts", "rom",
            "adaptation", "rga"}
EXPERIMENT_KEYS = {"M", "fractions", "seeds", "real_train_rows", "rom_samples"}


def plan_from_mapping(cfg: dict | None) -> ExperimentPlan:
    cfg = dict(cfg or {})
    unknown = set(cfg) - SECTIONS
    if unknown:
        raise ConfigInvalid(f"unknown config sections: {sorted(unknown)}")
    exp = dict(cfg.get("experiment") or {})
    if set(exp) - EXPERIMENT_KEYS:
        raise ConfigInvalid(f"unknown experiment keys: {sorted(set(exp) - EXPERIMENT_KEYS)}")
    try:
        plan = ExperimentPlan()
        kwargs = {}
        if "M" in exp:
            kwargs["M"] = int(exp["M"])
        if "fractions" in exp:
            kwargs["fractions"] = tuple(float(f) for f in exp["fractions"])
        if "seeds" in exp:
            seeds = exp["seeds"]
            kwargs["seeds"] = tuple(range(seeds)) if isinstance(seeds, int) else tuple(int(s) for s in seeds)
        if "real_train_rows" in exp:
            kwargs["real_train_rows"] = int(exp["real_train_rows"])
        if "rom_samples" in exp:
            kwargs["rom_samples"] = int(exp["rom_samples"])
        if "truss" in cfg:
            kwargs["truss"] = dict(cfg["truss"] or {})
        if "ranges" in cfg:
            kwargs["ranges"] = ContextRanges.from_mapping(cfg["ranges"] or {})
        if "design_ranges" in cfg:
            base = ContextRanges.from_mapping({}) if "ranges" not in kwargs else kwargs["ranges"]
            merged = {**base.to_mapping(), **_range_entries(cfg["design_ranges"] or {})}
            kwargs["design_ranges"] = ContextRanges.from_mapping(merged)
        elif "ranges" in kwargs:
            kwargs["design_ranges"] = _narrow(plan.design_ranges, kwargs["ranges"])
        if "noise" in cfg:
            kwargs["noise"] = noise_from_config(cfg["noise"])
        if "drifts" in cfg:
            kwargs["drifts"] = tuple(_drift(d) for d in (cfg["drifts"] or []))
        if "rom" in cfg:
            kwargs["rom"] = RomConfig.from_mapping(cfg["rom"])
        if "adaptation" in cfg:
            kwargs["adaptation"] = AdaptationConfig.from_mapping(cfg["adaptation"])
        if "rga" in cfg:
            kwargs["rga"] = RgaConfig.from_mapping(cfg["rga"])
        return replace(plan, **kwargs)
    except ConfigInvalid:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigInvalid(str(exc)) from exc


def _range_entries(mapping: dict) -> dict:
    out = {}
    for name, entry in mapping.items():
        if isinstance(entry, (list, tuple)):
            entry = {"min": entry[0], "max": entry[1]}
        out[name] = entry
    return out


def _narrow(design: ContextRanges, ranges: ContextRanges) -> ContextRanges:
    """Intersect the default design envelope with custom simulator ranges."""
    bounds = []
    for (dlo, dhi, _), (lo, hi, unit) in zip(design.bounds, ranges.bounds):
        nlo, nhi = max(dlo, lo), min(dhi, hi)
        bounds.append((nlo, nhi, unit) if nlo < nhi else (lo, hi, unit))
    return ContextRanges(tuple(bounds))


def _drift(entry: dict) -> DriftSpec:
    entry = dict(entry)
    if "channels" in entry and entry["channels"] is not None:
        entry["channels"] = tuple(int(c) for c in entry["channels"])
    return DriftSpec(**entry)


def load_plan(path=None) -> ExperimentPlan:
    """Plan from a YAML file, or the defaults when ``path`` is None."""
    if path is None:
        return ExperimentPlan()
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"{path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigInvalid(f"{path}: top level must be a mapping")
    return plan_from_mapping(data)
