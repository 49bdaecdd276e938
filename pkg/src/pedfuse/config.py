"""Layered configuration: built-in defaults <- YAML/JSON file <- command line.

The file is a nested mapping with three sections::

    weights:              # factor information / robust kernel
      profile: default    # default | sensor (matched to the simulator noise)
      range_sigma: 0.1
      cauchy_c: 1.0
    solver:               # SolverConfig fields
      max_iterations: 100
    pipeline:             # PipelineOptions fields
      loop_radius: 2.0
      incremental: false

Command-line overrides use dotted keys, e.g. ``--set solver.rel_tol=1e-8``.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Iterable, Optional

import yaml

from .factors import FactorWeights
from .frontend import LoopParams
from .graph import SolverConfig
from .pipeline import PipelineOptions
from .sim import NoiseModel

DEFAULTS: dict = {
    "weights": {"profile": "default"},
    "solver": {},
    "pipeline": {},
}

_PIPELINE_SCALARS = ("motion", "adaptive", "init_scale", "loop_mode", "loop_radius", "anchors", "range_window",
                     "robust", "incremental", "incremental_period")


class ConfigError(ValueError):
    pass


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_file(path) -> dict:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(data) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    return data


def parse_overrides(items: Iterable[str]) -> dict:
    """``["solver.max_iterations=50"]`` -> ``{"solver": {"max_iterations": 50}}``."""
    out: dict = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) < 2 or parts[0] not in DEFAULTS:
            raise ConfigError(f"override key {key!r} must start with one of {sorted(DEFAULTS)}")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def layered(path=None, overrides: Iterable[str] = (), cli: Optional[dict] = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        cfg = merge(cfg, load_file(path))
    cfg = merge(cfg, parse_overrides(overrides))
    if cli:
        cfg = merge(cfg, cli)
    return cfg


def build_weights(cfg: dict, motion: str = "pdr") -> FactorWeights:
    w = dict(cfg.get("weights", {}))
    profile = w.pop("profile", "default")
    if profile == "sensor":
        from .experiments import sensor_weights

        base = sensor_weights(NoiseModel(), motion, robust=w.get("robust", True), cauchy_c=w.get("cauchy_c", 1.0))
    elif profile == "default":
        base = FactorWeights()
    else:
        raise ConfigError(f"unknown weights profile {profile!r}")
    if not w:
        return base
    try:
        over = FactorWeights.from_config(w)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid weights: {exc}") from None
    # only the families named in the file replace the profile's
    fields = {"motion": "motion_information", "scale": "scale_sigma", "prior": "prior_sigma"}
    kw = {name: getattr(over if key in w else base, name) for name, key in fields.items()}
    loop_keys = ("loop_sigma", "ble_loop_sigma", "wifi_loop_sigma")
    kw["ble_loop"] = over.ble_loop if any(k in w for k in loop_keys[:2]) else base.ble_loop
    kw["wifi_loop"] = over.wifi_loop if any(k in w for k in (loop_keys[0], loop_keys[2])) else base.wifi_loop
    kw["range"] = over.range if any(k in w for k in ("range_sigma", "cauchy_c", "robust")) else base.range
    return FactorWeights(**kw)


def build_options(cfg: dict) -> PipelineOptions:
    p = dict(cfg.get("pipeline", {}))
    kw = {k: p.pop(k) for k in _PIPELINE_SCALARS if k in p}
    if "loop_sources" in p:
        kw["loop_sources"] = tuple(p.pop("loop_sources"))
    if "loop_params" in p:
        kw["loop_params"] = LoopParams(**p.pop("loop_params"))
    if "anchor_init" in p:
        kw["anchor_init"] = {int(k): v for k, v in p.pop("anchor_init").items()}
    if p:
        raise ConfigError(f"unknown pipeline keys {sorted(p)}")
    try:
        solver = SolverConfig.from_config(cfg.get("solver", {}))
        unknown = set(cfg.get("solver", {})) - set(SolverConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown solver keys {sorted(unknown)}")
        return PipelineOptions(weights=build_weights(cfg, kw.get("motion", "pdr")), solver=solver, **kw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
