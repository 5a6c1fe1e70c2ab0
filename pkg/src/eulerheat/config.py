"""Scenario files: loading, validation, default resolution and hashing.

A scenario is one YAML document. :func:`resolve` fills every default so the
resolved mapping (recorded in each run manifest) is the complete description
of a run; :func:`scenario_hash` fingerprints it.
"""
from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .fields import DepositionKernel, PeriodicGrid
from .loops import LoopEnsemble, WindingLoop
from .trial import TrigField, TrialFields

__all__ = [
    "ConfigError",
    "builtin_names",
    "load_scenario",
    "resolve",
    "apply_overrides",
    "scenario_hash",
    "setup_hash",
    "build_ensemble",
    "build_trials",
    "build_grid",
    "build_kernel",
    "time_levels",
]


class ConfigError(ValueError):
    """Scenario validation failure; the message names the offending key."""


DEFAULTS: dict[str, Any] = {
    "description": "",
    "seed": 0,
    "K": 16,
    "grid": {"n": 64},
    "kernel": {"kind": "bspline2", "width": 1.5},
    "time": {"T": 0.05, "dt": 1e-4},
    "M": None,                      # None -> max(4K+4, 4n)
    "ensemble": None,
    "pde": None,
    "corruption": None,
    "trials": {"zero": True, "constant": None, "graph_exact": None, "random": None},
    "certify": {"n": None, "r_multipliers": [1.0, 2.0, 4.0], "tol": 1e-6, "scale_tol": True},
    "identity": {"M": None, "dt": None, "T": None},
    "output": {"snapshot_every": 50},
}

TOP_KEYS = set(DEFAULTS) | {"name", "dim"}
RANDOM_TRIAL_DEFAULTS = {"count": 10, "n_terms": 3, "k_max": 2, "amp": 0.5, "rate_max": 4.0}
RANDOM_ENSEMBLE_DEFAULTS = {"n_loops": 3, "K": 3, "amp": 0.02, "windings": None}
PDE_DEFAULTS = {"b": None, "rho": "deposit", "nu": 0.0, "cfl": 0.9}


def builtin_names() -> list[str]:
    root = resources.files("eulerheat") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_scenario(name_or_path: str | Path) -> dict:
    """Read a scenario by builtin name or file path and return it resolved."""
    path = Path(name_or_path)
    if path.suffix in (".yaml", ".yml") or path.exists():
        if not path.exists():
            raise ConfigError(f"scenario file {path} does not exist")
        text = path.read_text()
        origin = str(path)
    else:
        entry = resources.files("eulerheat") / "scenarios" / f"{name_or_path}.yaml"
        if not entry.is_file():
            raise ConfigError(f"unknown builtin scenario {name_or_path!r}; available: {', '.join(builtin_names())}")
        text = entry.read_text()
        origin = f"builtin:{name_or_path}"
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{origin}: invalid YAML: {exc}") from exc
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{origin}: top level must be a mapping")
    return resolve(raw)


def _merge(defaults: Mapping, given: Mapping | None, where: str) -> dict:
    given = {} if given is None else given
    if not isinstance(given, Mapping):
        raise ConfigError(f"{where} must be a mapping")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}; allowed {sorted(defaults)}")
    out = copy.deepcopy(dict(defaults))
    out.update(copy.deepcopy(dict(given)))
    return out


def _positive(value, where: str, kind=float):
    try:
        ok = kind(value) == value if kind is int else True
        value = kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where} must be a {kind.__name__}, got {value!r}") from None
    if not ok or not value > 0:
        raise ConfigError(f"{where} must be a positive {kind.__name__}, got {value!r}")
    return value


def resolve(raw: Mapping) -> dict:
    """Validate ``raw`` and return a fully-defaulted copy."""
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
    if "name" not in raw or not isinstance(raw["name"], str):
        raise ConfigError("scenario needs a string 'name'")
    name = raw["name"]
    cfg: dict[str, Any] = {"name": name}
    cfg["dim"] = _positive(raw.get("dim"), f"{name}: dim", int)
    for key, default in DEFAULTS.items():
        if isinstance(default, Mapping):
            cfg[key] = _merge(default, raw.get(key), f"{name}: {key}")
        else:
            cfg[key] = copy.deepcopy(raw.get(key, default))
    cfg["seed"] = int(cfg["seed"])
    cfg["K"] = _positive(cfg["K"], f"{name}: K", int)
    cfg["grid"]["n"] = _positive(cfg["grid"]["n"], f"{name}: grid.n", int)
    if cfg["grid"]["n"] < 8:
        raise ConfigError(f"{name}: grid.n must be >= 8, got {cfg['grid']['n']}")
    try:
        DepositionKernel(**cfg["kernel"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: kernel: {exc}") from None
    T = _positive(cfg["time"]["T"], f"{name}: time.T")
    dt = _positive(cfg["time"]["dt"], f"{name}: time.dt")
    steps = round(T / dt)
    if abs(steps * dt - T) > 1e-9 * T:
        raise ConfigError(f"{name}: time.T={T} is not a whole number of steps of dt={dt}")
    cfg["time"] = {"T": T, "dt": dt}

    if cfg["ensemble"] is None and cfg["pde"] is None:
        raise ConfigError(f"{name}: needs an 'ensemble' or a 'pde' section")
    if cfg["ensemble"] is not None:
        cfg["ensemble"] = _resolve_ensemble(cfg["ensemble"], cfg, name)
    if cfg["pde"] is not None:
        cfg["pde"] = _resolve_pde(cfg["pde"], cfg, name)

    K_used = 0
    if cfg["ensemble"] is not None:
        K_used = build_ensemble(cfg).K
    need = max(4 * K_used + 4, 4 * cfg["grid"]["n"])
    if cfg["M"] is None:
        cfg["M"] = need
    cfg["M"] = _positive(cfg["M"], f"{name}: M", int)
    if cfg["ensemble"] is not None and cfg["M"] < need:
        raise ConfigError(f"{name}: M={cfg['M']} is below max(4K+4, 4n) = {need}")

    if cfg["corruption"] is not None:
        corr = _merge({"B_scale": 1.0}, cfg["corruption"], f"{name}: corruption")
        corr["B_scale"] = _positive(corr["B_scale"], f"{name}: corruption.B_scale")
        cfg["corruption"] = corr

    trials = cfg["trials"]
    trials["zero"] = bool(trials["zero"])
    if trials["random"] is not None:
        trials["random"] = _merge(RANDOM_TRIAL_DEFAULTS, trials["random"], f"{name}: trials.random")
        trials["random"]["count"] = _positive(trials["random"]["count"], f"{name}: trials.random.count", int)
    if trials["graph_exact"] is not None:
        trials["graph_exact"] = _merge({"eps": 0.05, "k": 1, "x1_offset": 0.0}, trials["graph_exact"],
                                       f"{name}: trials.graph_exact")
    if trials["constant"] is not None and len(trials["constant"]) != cfg["dim"]:
        raise ConfigError(f"{name}: trials.constant must have {cfg['dim']} entries")

    cert = cfg["certify"]
    if cert["n"] is not None:
        cert["n"] = _positive(cert["n"], f"{name}: certify.n", int)
    cert["r_multipliers"] = [float(m) for m in cert["r_multipliers"]]
    if not cert["r_multipliers"] or min(cert["r_multipliers"]) < 1.0:
        raise ConfigError(f"{name}: certify.r_multipliers must be non-empty and >= 1 (r below r0 is refused)")
    cert["tol"] = _positive(cert["tol"], f"{name}: certify.tol")
    cert["scale_tol"] = bool(cert["scale_tol"])

    ident = cfg["identity"]
    ident["M"] = cfg["M"] if ident["M"] is None else _positive(ident["M"], f"{name}: identity.M", int)
    ident["dt"] = dt if ident["dt"] is None else _positive(ident["dt"], f"{name}: identity.dt")
    ident["T"] = T if ident["T"] is None else _positive(ident["T"], f"{name}: identity.T")

    cfg["output"]["snapshot_every"] = _positive(cfg["output"]["snapshot_every"], f"{name}: output.snapshot_every", int)
    return cfg


def _resolve_ensemble(spec, cfg, name):
    if not isinstance(spec, Mapping):
        raise ConfigError(f"{name}: ensemble must be a mapping")
    if "random" in spec:
        if set(spec) != {"random"}:
            raise ConfigError(f"{name}: a random ensemble takes no other keys")
        rnd = _merge(RANDOM_ENSEMBLE_DEFAULTS, spec["random"], f"{name}: ensemble.random")
        rnd["n_loops"] = _positive(rnd["n_loops"], f"{name}: ensemble.random.n_loops", int)
        rnd["K"] = _positive(rnd["K"], f"{name}: ensemble.random.K", int)
        spec = {"random": rnd}
    elif "loops" not in spec:
        raise ConfigError(f"{name}: ensemble needs 'loops' or 'random'")
    probe = dict(cfg, ensemble=spec)
    try:
        ens = build_ensemble(probe)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: ensemble: {exc}") from None
    if ens.dim != cfg["dim"]:
        raise ConfigError(f"{name}: ensemble loops are {ens.dim}-D but dim={cfg['dim']}")
    if ens.K > cfg["K"]:
        raise ConfigError(f"{name}: a loop uses mode {ens.K} above the truncation K={cfg['K']}")
    return spec if "random" in spec else ens.to_dict()


def _resolve_pde(spec, cfg, name):
    pde = _merge(PDE_DEFAULTS, spec, f"{name}: pde")
    if pde["b"] is None:
        raise ConfigError(f"{name}: pde.b (initial reduced field) is required")
    try:
        TrigField.from_dict(pde["b"], cfg["dim"], cfg["dim"])
        if pde["rho"] != "deposit":
            TrigField.from_dict(pde["rho"], cfg["dim"], 1)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: pde initial data: {exc}") from None
    if pde["rho"] == "deposit" and cfg["ensemble"] is None:
        raise ConfigError(f"{name}: pde.rho='deposit' needs an ensemble")
    pde["nu"] = float(pde["nu"])
    if pde["nu"] < 0:
        raise ConfigError(f"{name}: pde.nu must be >= 0")
    pde["cfl"] = _positive(pde["cfl"], f"{name}: pde.cfl")
    if pde["cfl"] > 1:
        raise ConfigError(f"{name}: pde.cfl must be <= 1")
    return pde


def apply_overrides(cfg: Mapping, n=None, dt=None, M=None, seed=None) -> dict:
    """Return a re-validated copy with CLI overrides applied."""
    raw = copy.deepcopy(dict(cfg))
    if n is not None:
        raw["grid"]["n"] = int(n)
        if raw.get("M") is not None and raw["M"] < 4 * int(n) and M is None:
            raw["M"] = None
    if dt is not None:
        raw["time"]["dt"] = float(dt)
        raw["identity"]["dt"] = float(dt)
    if M is not None:
        raw["M"] = int(M)
        raw["identity"]["M"] = int(M)
    if seed is not None:
        raw["seed"] = int(seed)
    return resolve(raw)


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=float)


def scenario_hash(cfg: Mapping) -> str:
    return hashlib.sha256(_canonical(cfg).encode()).hexdigest()[:16]


def setup_hash(cfg: Mapping) -> str:
    """Fingerprint of the physical setup shared by loop-side and grid-side runs."""
    keys = ("dim", "ensemble", "grid", "kernel", "time", "M")
    return hashlib.sha256(_canonical({k: cfg.get(k) for k in keys}).encode()).hexdigest()[:16]


def _random_ensemble(spec: Mapping, dim: int, seed: int) -> LoopEnsemble:
    rng = np.random.default_rng(seed)
    windings = spec.get("windings") or [list(np.eye(dim, dtype=int)[i % dim]) for i in range(spec["n_loops"])]
    loops = []
    for i in range(spec["n_loops"]):
        modes = {}
        for k in range(1, spec["K"] + 1):
            c = (rng.normal(size=dim) + 1j * rng.normal(size=dim)) * spec["amp"] / k**2
            modes[k] = c
        loops.append(WindingLoop.from_modes(windings[i % len(windings)], rng.uniform(0, 1, size=dim), modes))
    weights = rng.uniform(0.5, 1.5, size=len(loops))
    return LoopEnsemble(tuple(loops), weights / weights.sum())


def build_ensemble(cfg: Mapping) -> LoopEnsemble:
    spec = cfg["ensemble"]
    if spec is None:
        raise ConfigError(f"{cfg['name']}: scenario has no ensemble")
    if "random" in spec:
        return _random_ensemble(spec["random"], cfg["dim"], cfg["seed"])
    return LoopEnsemble.from_dict(spec)


def build_grid(cfg: Mapping, n: int | None = None) -> PeriodicGrid:
    return PeriodicGrid(cfg["dim"], cfg["grid"]["n"] if n is None else int(n))


def build_kernel(cfg: Mapping) -> DepositionKernel:
    return DepositionKernel(**cfg["kernel"])


def time_levels(T: float, dt: float) -> np.ndarray:
    return np.arange(round(T / dt) + 1) * dt


def build_trials(cfg: Mapping) -> list[TrialFields]:
    """Trial pairs in a fixed order: zero, constant, graph-exact, then random seeds."""
    spec = cfg["trials"]
    d = cfg["dim"]
    out = []
    if spec["zero"]:
        out.append(TrialFields.zero(d))
    if spec["constant"] is not None:
        out.append(TrialFields.constant(spec["constant"]))
    if spec["graph_exact"] is not None:
        ge = spec["graph_exact"]
        out.append(TrialFields.graph_exact(float(ge["eps"]), int(ge["k"]), float(ge["x1_offset"]), dim=d))
    if spec["random"] is not None:
        rnd = spec["random"]
        for i in range(rnd["count"]):
            out.append(TrialFields.random(d, cfg["seed"] + i, rnd["n_terms"], rnd["k_max"], rnd["amp"], rnd["rate_max"]))
    return out
