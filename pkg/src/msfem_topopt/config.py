"""Problem configuration, presets and validation.

A configuration is a nested JSON document.  Presets supply complete documents;
user files and ``section.key=value`` overrides are merged on top of them.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, asdict
from fractions import Fraction
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class Load:
    kind: str  # "point" | "edge"
    location: Any  # (x, y) for point loads, edge name for distributed loads
    component: int  # 0 = x, 1 = y
    magnitude: float


@dataclass
class Geometry:
    L: float = 2.0
    B: float = 1.0
    Mx: int = 4
    My: int = 8
    n: int = 40


@dataclass
class Material:
    Emax: float = 1.0
    Emin: float = 1e-9
    nu: float = 0.3
    plane: str = "stress"


@dataclass
class Layout:
    kind: str = "single"  # single | layers | slices
    fractions: list = field(default_factory=lambda: [1.0])


@dataclass
class FilterConfig:
    kind: str = "neighbourhood"  # neighbourhood | pde
    rmin: float = 4.0  # in units of h


@dataclass
class ProjectionConfig:
    mode: str = "single"  # single | robust
    eta: list = field(default_factory=lambda: [0.5])
    kappa: float = 1.0
    # continuation stages: list of [p, beta]
    stages: list = field(default_factory=lambda: [[1, 64], [2, 64], [3, 64], [4, 64], [5, 64]])
    stage_max_iter: int = 50
    change_tol: float = 1e-3
    change_window: int = 3


@dataclass
class SolverConfig:
    kind: str = "msfem"  # msfem | direct
    lambda_threshold: float = 6.5e-4
    tol: float = 1e-6
    policy: str = "heuristic"  # constant | heuristic | heuristic-warm
    threshold_pct: float = 25.0
    max_iter: int = 500
    max_modes: int = 200


@dataclass
class OptimizerConfig:
    vf: float = 0.5
    max_iter: int = 200
    seed: int | None = None
    init: str = "uniform"  # uniform | random
    stop_on_convergence: bool = True  # False runs the full max_iter budget


@dataclass
class ProblemConfig:
    preset: str = "custom"
    problem: str = "double-clamped"  # double-clamped | cantilever-distributed | cantilever-concentrated | custom
    geometry: Geometry = field(default_factory=Geometry)
    material: Material = field(default_factory=Material)
    supports: str = "double-clamped"  # double-clamped | cantilever | none
    loads: list = field(default_factory=list)
    layout: Layout = field(default_factory=Layout)
    filter: FilterConfig = field(default_factory=FilterConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    benchmark: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "geometry": Geometry,
    "material": Material,
    "layout": Layout,
    "filter": FilterConfig,
    "projection": ProjectionConfig,
    "solver": SolverConfig,
    "optimizer": OptimizerConfig,
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


_SINGLE_STAGES = [[p, 64.0] for p in (1, 2, 3, 4, 5)]


def _double_clamped(Mx, n, **extra):
    doc = {
        "problem": "double-clamped",
        "geometry": {"L": 2.0, "B": 1.0, "Mx": Mx, "My": 2 * Mx, "n": n},
        "supports": "double-clamped",
        "loads": [{"kind": "point", "location": [1.0, 0.5], "component": 1, "magnitude": -0.01}],
    }
    return _merge(doc, extra)


_ROBUST = {
    "mode": "robust",
    "eta": [0.3, 0.5, 0.7],
    "kappa": 1.0,
    "stages": [[1.5, 16.0], [5.0, 16.0], [5.0, 64.0]],
    "stage_max_iter": 100,
}

PRESETS: dict[str, dict] = {
    # single design, basis-update experiment setup
    "doubleclamped-single-Mx4": _double_clamped(
        4, 40,
        projection={"mode": "single", "eta": [0.5], "stages": _SINGLE_STAGES, "stage_max_iter": 50},
        solver={"tol": 1e-5, "policy": "heuristic", "lambda_threshold": 6.69e-4},
    ),
    "doubleclamped-single": _double_clamped(
        4, 40,
        projection={"mode": "single", "eta": [0.5], "stages": _SINGLE_STAGES, "stage_max_iter": 50},
        solver={"tol": 1e-6},
    ),
    "doubleclamped-robust-Mx16": _double_clamped(
        16, 40, projection=dict(_ROBUST), solver={"tol": 1e-6}, optimizer={"max_iter": 300},
    ),
    "doubleclamped-robust-Mx4": _double_clamped(
        4, 40, projection=dict(_ROBUST), solver={"tol": 1e-6}, optimizer={"max_iter": 300},
    ),
    "cantilever-distributed": {
        "problem": "cantilever-distributed",
        "geometry": {"L": 2.0, "B": 1.0, "Mx": 4, "My": 8, "n": 40},
        "supports": "cantilever",
        "loads": [{"kind": "edge", "location": "right", "component": 0, "magnitude": 0.01}],
        "projection": dict(_ROBUST),
        "optimizer": {"max_iter": 300},
    },
    "cantilever-distributed-3layer": {
        "problem": "cantilever-distributed",
        "geometry": {"L": 2.0, "B": 1.0, "Mx": 18, "My": 36, "n": 40},
        "supports": "cantilever",
        "loads": [{"kind": "edge", "location": "right", "component": 0, "magnitude": 0.01}],
        "layout": {"kind": "layers", "fractions": ["6/18", "6/18", "6/18"]},
        "filter": {"kind": "pde", "rmin": 4.0},
        "projection": dict(_ROBUST),
        "optimizer": {"max_iter": 300},
    },
    "cantilever-concentrated": {
        "problem": "cantilever-concentrated",
        "geometry": {"L": 2.0, "B": 1.0, "Mx": 24, "My": 48, "n": 40},
        "supports": "cantilever",
        "loads": [{"kind": "point", "location": [2.0, 0.0], "component": 1, "magnitude": -0.01}],
        "layout": {"kind": "slices", "fractions": [1.0]},
        "filter": {"kind": "pde", "rmin": 6.0},
        "projection": dict(_ROBUST, stages=[[1.5, 8.0], [5.0, 8.0], [5.0, 32.0]]),
        "solver": {"lambda_threshold": 5e-4},
        "optimizer": {"vf": 0.3, "max_iter": 300},
    },
    # analysis benchmark with the filtered cross tile
    "cross-benchmark": _double_clamped(
        8, 20,
        material={"Emin": 1e-9},
        solver={"tol": 1e-8, "policy": "constant"},
        benchmark={
            "tile": "cross",
            "shape": "x",
            "bar_width": 0.2,
            "filtered": True,
            "rmin": 4.0,
            "p": 3.0,
            "lambdas": [3e-4, 1e-3, 3e-3, 1e-2],
            "emins": [1e-3, 1e-6, 1e-9, 1e-12],
        },
    ),
}


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``a.b=value`` strings; values are parsed as JSON when possible."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: {p} is not a section")
        node[parts[-1]] = _coerce(value)
    return doc


def _fraction(value, key) -> Fraction:
    try:
        if isinstance(value, str):
            return Fraction(value)
        return Fraction(value).limit_denominator(10**6)
    except (ValueError, ZeroDivisionError, TypeError) as exc:
        raise ConfigError(f"{key}: cannot read {value!r} as a fraction") from exc


def from_dict(doc: dict) -> ProblemConfig:
    """Validate a configuration document and build a :class:`ProblemConfig`."""
    doc = copy.deepcopy(doc)
    preset = doc.pop("preset", "custom")
    if preset != "custom":
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r}; known: {sorted(PRESETS)}")
        doc = _merge(PRESETS[preset], doc)
    cfg = ProblemConfig(preset=preset)
    for key, value in doc.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected an object")
            cls = _SECTIONS[key]
            known = cls.__dataclass_fields__
            for sub in value:
                if sub not in known:
                    raise ConfigError(f"{key}.{sub}: unknown key")
            setattr(cfg, key, cls(**{**asdict(cls()), **value}))
        elif key == "loads":
            loads = []
            for i, ld in enumerate(value):
                try:
                    loads.append(Load(**ld))
                except TypeError as exc:
                    raise ConfigError(f"loads[{i}]: {exc}") from exc
            cfg.loads = loads
        elif key in ("problem", "supports", "benchmark"):
            setattr(cfg, key, value)
        else:
            raise ConfigError(f"{key}: unknown key")
    validate(cfg)
    return cfg


def validate(cfg: ProblemConfig) -> None:
    g = cfg.geometry
    for k in ("Mx", "My", "n"):
        v = getattr(g, k)
        if not isinstance(v, int) or v < 1:
            raise ConfigError(f"geometry.{k}: must be a positive integer, got {v!r}")
    if not (g.L > 0 and g.B > 0):
        raise ConfigError("geometry: L and B must be positive")
    if not math.isclose(g.B / g.Mx, g.L / g.My, rel_tol=1e-12):
        raise ConfigError("geometry: coarse cells must be square (B/Mx == L/My)")
    m = cfg.material
    if not (0 <= m.nu < 0.5):
        raise ConfigError(f"material.nu: must lie in [0, 0.5), got {m.nu}")
    if not (0 < m.Emin < m.Emax):
        raise ConfigError("material: need 0 < Emin < Emax")
    if m.plane not in ("stress", "strain"):
        raise ConfigError(f"material.plane: {m.plane!r}")
    if cfg.supports not in ("double-clamped", "cantilever", "none"):
        raise ConfigError(f"supports: unknown support set {cfg.supports!r}")
    lay = cfg.layout
    if lay.kind not in ("single", "layers", "slices"):
        raise ConfigError(f"layout.kind: {lay.kind!r}")
    if lay.kind == "layers":
        fr = [_fraction(v, "layout.fractions") for v in lay.fractions]
        if not fr or sum(fr) != 1:
            raise ConfigError(f"layout.fractions: must sum to 1, got {lay.fractions}")
        if any(f <= 0 for f in fr):
            raise ConfigError("layout.fractions: entries must be positive")
        rows = [f * g.Mx for f in fr]
        if any(r.denominator != 1 for r in rows):
            raise ConfigError(
                f"layout.fractions: each layer must span a whole number of coarse rows (Mx={g.Mx})"
            )
    f = cfg.filter
    if f.kind not in ("neighbourhood", "pde"):
        raise ConfigError(f"filter.kind: {f.kind!r}")
    if f.rmin <= 0:
        raise ConfigError("filter.rmin: must be positive")
    if f.kind == "neighbourhood" and lay.kind != "single":
        raise ConfigError("filter.kind: neighbourhood filter supports only the single-tile layout")
    pr = cfg.projection
    if pr.mode not in ("single", "robust"):
        raise ConfigError(f"projection.mode: {pr.mode!r}")
    if not pr.eta:
        raise ConfigError("projection.eta: empty threshold set")
    if list(pr.eta) != sorted(pr.eta):
        raise ConfigError("projection.eta: thresholds must be sorted ascending")
    if any(not (0 <= e <= 1) for e in pr.eta):
        raise ConfigError("projection.eta: thresholds must lie in [0, 1]")
    if pr.mode == "single" and len(pr.eta) != 1:
        raise ConfigError("projection.eta: single mode takes exactly one threshold")
    if pr.kappa < 0:
        raise ConfigError("projection.kappa: must be non-negative")
    if not pr.stages:
        raise ConfigError("projection.stages: empty schedule")
    ps = [s[0] for s in pr.stages]
    bs = [s[1] for s in pr.stages]
    if ps != sorted(ps) or bs != sorted(bs):
        raise ConfigError("projection.stages: p and beta must be non-decreasing")
    if any(b <= 0 for b in bs) or any(p < 1 for p in ps):
        raise ConfigError("projection.stages: need beta > 0 and p >= 1")
    s = cfg.solver
    if s.kind not in ("msfem", "direct"):
        raise ConfigError(f"solver.kind: {s.kind!r}")
    if s.policy not in ("constant", "heuristic", "heuristic-warm"):
        raise ConfigError(f"solver.policy: {s.policy!r}")
    for k in ("lambda_threshold", "tol", "threshold_pct"):
        if not getattr(s, k) > 0:
            raise ConfigError(f"solver.{k}: must be positive")
    o = cfg.optimizer
    if not (0 < o.vf <= 1):
        raise ConfigError("optimizer.vf: must lie in (0, 1]")
    if o.init not in ("uniform", "random"):
        raise ConfigError(f"optimizer.init: {o.init!r}")
    if not isinstance(o.stop_on_convergence, bool):
        raise ConfigError(f"optimizer.stop_on_convergence must be true or false, got {o.stop_on_convergence!r}")
    for i, ld in enumerate(cfg.loads):
        if ld.kind not in ("point", "edge"):
            raise ConfigError(f"loads[{i}].kind: {ld.kind!r}")
        if ld.component not in (0, 1):
            raise ConfigError(f"loads[{i}].component: must be 0 or 1")


def layer_rows(cfg: ProblemConfig) -> list[int]:
    """Coarse rows per layer, listed from the top of the domain downwards."""
    lay = cfg.layout
    Mx = cfg.geometry.Mx
    if lay.kind == "single":
        return [Mx]
    if lay.kind == "slices":
        return [1] * Mx
    return [int(_fraction(v, "layout.fractions") * Mx) for v in lay.fractions]


def parse_config(source: str | Path | dict | None = None, overrides: list[str] | None = None) -> ProblemConfig:
    """Load a config from a JSON file, a preset name or a dict, then apply overrides."""
    if source is None:
        doc: dict = {}
    elif isinstance(source, dict):
        doc = source
    elif str(source) in PRESETS:
        doc = {"preset": str(source)}
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if overrides:
        doc = apply_overrides(doc, overrides)
    return from_dict(doc)
