"""Run orchestration: loop-side and grid-side trajectories, certification, identity checks.

Every run writes into one output directory:

``manifest.json``
    resolved scenario, hashes, versions, thread count, output index.
``diagnostics.csv``
    one row per time step (see :data:`DIAGNOSTIC_COLUMNS`).
``snapshots/step_XXXXXX.npz``
    grid snapshots every ``output.snapshot_every`` steps and at the last step.
``report.csv`` / ``verdict.json``
    certification rows per (trial, r, t) and the summary verdict.
``identity.csv``
    per-loop identity residuals and component series.

All CSV rows carry the scenario hash and the setup hash.
"""
from __future__ import annotations

import csv
import json
import logging
import platform
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import __version__
from .config import (ConfigError, build_ensemble, build_grid, build_kernel, build_trials, scenario_hash,
                     setup_hash, time_levels)
from .energy import DualTestPair, energy, energy_dual_lower_bound, metric_norms
from .entropy import certify_many, estimate_r0, loop_identity_check
from .fields import (GridFields, cauchy_schwarz_gap, deposit, divergence_residual, load_snapshot, save_snapshot,
                     support_mask)
from .loops import LoopEnsemble, min_separation
from .pde import ReducedState, compute_momentum, conservative_residual, solve, to_fields
from .trial import TrigField

log = logging.getLogger(__name__)

__all__ = [
    "DIAGNOSTIC_COLUMNS",
    "ProvenanceError",
    "loop_trajectory",
    "pde_trajectory",
    "run_loops",
    "run_pde",
    "run_certify",
    "run_identity",
    "compare",
    "read_csv",
    "load_run_snapshots",
]

DIAGNOSTIC_COLUMNS = [
    "scenario_hash", "setup_hash", "step", "t", "mass", "circulation", "energy", "dual_bound",
    "cs_lhs", "cs_rhs", "div_raw", "div_rel", "norm_primal", "norm_dual", "pairing",
    "kinetic", "dFdt", "dissipation_residual", "min_separation",
]


class ProvenanceError(ValueError):
    """Raised when outputs from unrelated setups are compared."""


def _versions() -> dict:
    return {"eulerheat": __version__, "numpy": np.__version__, "python": platform.python_version()}


def _hashes(cfg: Mapping) -> dict:
    return {"scenario_hash": scenario_hash(cfg), "setup_hash": setup_hash(cfg)}


def _apply_corruption(fields: GridFields, cfg: Mapping) -> GridFields:
    corr = cfg.get("corruption")
    if corr is None or fields.t <= 0 or corr["B_scale"] == 1.0:
        return fields
    meta = dict(fields.meta, corrupted_B_scale=corr["B_scale"])
    return GridFields(fields.grid, fields.rho, fields.B * corr["B_scale"], fields.P, fields.t, meta)


def loop_trajectory(cfg: Mapping, n: int | None = None, threads: int = 1) -> Iterator[GridFields]:
    """Deposit the exactly evolved ensemble at every time level."""
    ensemble = build_ensemble(cfg)
    grid = build_grid(cfg, n)
    kernel = build_kernel(cfg)
    M = max(cfg["M"], 4 * grid.n)
    for t in time_levels(cfg["time"]["T"], cfg["time"]["dt"]):
        fields = deposit(ensemble, float(t), grid, kernel, M, threads=threads)
        fields.meta.update({"source": "loops", "kernel": kernel.to_dict(), "M": M})
        yield _apply_corruption(fields, cfg)


def _initial_state(cfg: Mapping, n: int | None = None) -> ReducedState:
    grid = build_grid(cfg, n)
    x = grid.mesh()
    pde = cfg["pde"]
    b = TrigField.from_dict(pde["b"], grid.dim, grid.dim).value(0.0, x)
    if pde["rho"] == "deposit":
        M = max(cfg["M"], 4 * grid.n)
        rho = deposit(build_ensemble(cfg), 0.0, grid, build_kernel(cfg), M).rho
    else:
        rho = TrigField.from_dict(pde["rho"], grid.dim, 1).value(0.0, x)[0]
    return ReducedState(grid, b, rho, 0.0)


def pde_trajectory(cfg: Mapping, n: int | None = None) -> Iterator[GridFields]:
    if cfg["pde"] is None:
        raise ConfigError(f"{cfg['name']}: scenario has no pde section")
    pde = cfg["pde"]
    state = _initial_state(cfg, n)
    for st in solve(state, cfg["time"]["T"], cfg["time"]["dt"], nu=pde["nu"], cfl=pde["cfl"]):
        fields = to_fields(st, nu=pde["nu"])
        fields.meta["scheme"] = "explicit-central"
        yield _apply_corruption(fields, cfg)


def _kinetic(fields: GridFields) -> float:
    mask = support_mask(fields.rho)
    rho = np.where(mask, fields.rho, 1.0)
    return fields.grid.integrate(np.where(mask, np.sum(fields.P**2, axis=0) / rho, 0.0))


def _diagnostics(fields: GridFields, ensemble: LoopEnsemble | None, M: int) -> dict:
    mask = support_mask(fields.rho)
    rho = np.where(mask, fields.rho, 1.0)
    v = np.where(mask, fields.P / rho, 0.0)
    G = compute_momentum(fields.rho, fields.B, fields.grid)
    primal, dual, pairing = metric_norms(v, G, fields.rho, fields.grid)
    div_raw, div_rel = divergence_residual(fields)
    row = {
        "t": fields.t,
        "mass": fields.mass(),
        "circulation": " ".join(repr(float(c)) for c in fields.circulation()),
        "energy": energy(fields),
        "dual_bound": energy_dual_lower_bound(fields, [DualTestPair.optimal(fields)]),
        "div_raw": div_raw,
        "div_rel": div_rel,
        "norm_primal": primal,
        "norm_dual": dual,
        "pairing": pairing,
        "kinetic": _kinetic(fields),
        "cs_lhs": "", "cs_rhs": "", "min_separation": "",
    }
    if ensemble is not None and fields.meta.get("source") == "loops":
        lhs, rhs = cauchy_schwarz_gap(ensemble, fields, fields.t)
        row.update(cs_lhs=lhs, cs_rhs=rhs, min_separation=min_separation(ensemble.evolved(fields.t), M))
    return row


class _Writer:
    """CSV writer that stamps every row with the run hashes."""

    def __init__(self, path: Path, columns: Sequence[str], hashes: Mapping):
        self.path = path
        self.columns = list(columns)
        self.hashes = dict(hashes)
        self._fh = open(path, "w", newline="")
        self._csv = csv.DictWriter(self._fh, fieldnames=self.columns, lineterminator="\n")
        self._csv.writeheader()

    def write(self, row: Mapping):
        out = {k: _fmt(row.get(k, "")) for k in self.columns}
        out.update(self.hashes)
        self._csv.writerow(out)

    def close(self):
        self._fh.close()


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_manifest(out: Path, cfg: Mapping, command: str, threads: int, outputs: list, **extra) -> dict:
    manifest = {
        **_hashes(cfg),
        "command": command,
        "scenario": cfg,
        "versions": _versions(),
        "threads": threads,
        "outputs": sorted(outputs),
        **extra,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=float) + "\n")
    return manifest


def _run_trajectory(cfg, out, trajectory, ensemble, command, threads, extra_manifest=None):
    out = Path(out)
    (out / "snapshots").mkdir(parents=True, exist_ok=True)
    hashes = _hashes(cfg)
    every = cfg["output"]["snapshot_every"]
    n_steps = len(time_levels(cfg["time"]["T"], cfg["time"]["dt"])) - 1
    rows, outputs = [], ["diagnostics.csv"]
    window: list[GridFields] = []
    residuals = []
    for step, fields in enumerate(trajectory):
        row = _diagnostics(fields, ensemble, cfg["M"])
        row["step"] = step
        rows.append(row)
        if step % every == 0 or step == n_steps:
            name = f"snapshots/step_{step:06d}.npz"
            save_snapshot(out / name, fields, step=step, **hashes)
            outputs.append(name)
        window = (window + [fields])[-3:]
        if len(window) == 3:
            ind, cont = conservative_residual(window)
            residuals.append({"step": step - 1, "t": window[1].t, "induction": ind, "continuity": cont})
    dt = cfg["time"]["dt"]
    for k in range(1, len(rows) - 1):
        dF = (rows[k + 1]["energy"] - rows[k - 1]["energy"]) / (2 * dt)
        rows[k]["dFdt"] = dF
        rows[k]["dissipation_residual"] = abs(dF + rows[k]["kinetic"])
    writer = _Writer(out / "diagnostics.csv", DIAGNOSTIC_COLUMNS, hashes)
    for row in rows:
        writer.write(row)
    writer.close()
    res_writer = _Writer(out / "residuals.csv", ["scenario_hash", "setup_hash", "step", "t", "induction", "continuity"], hashes)
    for row in residuals:
        res_writer.write(row)
    res_writer.close()
    outputs.append("residuals.csv")
    summary = _summarize(rows, residuals)
    manifest = _write_manifest(out, cfg, command, threads, outputs, summary=summary, **(extra_manifest or {}))
    log.info("%s: wrote %d steps to %s", command, len(rows), out)
    return manifest


def _finite_or_none(value):
    """JSON has no infinity; an empty minimum (no close approach) is recorded as null."""
    return float(value) if np.isfinite(value) else None


def _summarize(rows, residuals) -> dict:
    mass = np.array([r["mass"] for r in rows])
    F = np.array([r["energy"] for r in rows])
    rel = [r["dissipation_residual"] / max(r["kinetic"], 1e-300) for r in rows[1:-1] if r["kinetic"] > 0]
    out = {
        "steps": len(rows) - 1,
        "mass_drift": float(np.max(np.abs(mass - mass[0]))),
        "energy_initial": float(F[0]),
        "energy_final": float(F[-1]),
        "max_dissipation_relative": float(max(rel)) if rel else 0.0,
        "max_induction_residual": float(max((r["induction"] for r in residuals), default=0.0)),
        "max_continuity_residual": float(max((r["continuity"] for r in residuals), default=0.0)),
    }
    seps = [r["min_separation"] for r in rows if r["min_separation"] != ""]
    if seps:
        out["min_separation"] = _finite_or_none(min(seps))
    return out


def run_loops(cfg: Mapping, out, threads: int = 1) -> dict:
    """Exact loop evolution, deposition and per-step diagnostics."""
    if cfg["ensemble"] is None:
        raise ConfigError(f"{cfg['name']}: evolve-loops needs an ensemble")
    ensemble = build_ensemble(cfg)
    return _run_trajectory(cfg, out, loop_trajectory(cfg, threads=threads), ensemble, "evolve-loops", threads)


def run_pde(cfg: Mapping, out, threads: int = 1) -> dict:
    """Grid solver trajectory with the same diagnostics and conservative residuals."""
    ensemble = build_ensemble(cfg) if cfg["ensemble"] is not None else None
    extra = {"pde": {"nu": cfg["pde"]["nu"], "scheme": "explicit-central", "cfl": cfg["pde"]["cfl"]}}
    if ensemble is not None:
        sigma = build_kernel(cfg).width * build_grid(cfg).h
        sep = min_separation(ensemble.evolved(cfg["time"]["T"]), cfg["M"])
        extra["exploratory"] = bool(sep <= 4 * sigma)
        extra["loop_min_separation_at_T"] = _finite_or_none(sep)
    return _run_trajectory(cfg, out, pde_trajectory(cfg), None, "run-pde", threads, extra)


def load_run_snapshots(run_dir) -> tuple[dict, list[GridFields]]:
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    paths = sorted((run_dir / "snapshots").glob("step_*.npz"))
    if not paths:
        raise FileNotFoundError(f"{run_dir}: no snapshots")
    snaps = [load_snapshot(p) for p in paths]
    for snap in snaps:
        if snap.meta.get("scenario_hash") != manifest["scenario_hash"]:
            raise ProvenanceError(f"{run_dir}: snapshot hash does not match the manifest")
    return manifest, snaps


def _certify_source(cfg, source, threads):
    """Trajectory and a label for the configured certification source."""
    n = cfg["certify"]["n"]
    if source is None:
        source = "loops" if cfg["ensemble"] is not None else "pde"
    if source == "loops":
        return loop_trajectory(cfg, n=n, threads=threads), {"source": "loops", "n": n or cfg["grid"]["n"]}
    if source == "pde":
        return pde_trajectory(cfg, n=n), {"source": "pde", "n": n or cfg["grid"]["n"]}
    manifest, snaps = load_run_snapshots(source)
    if manifest["setup_hash"] != setup_hash(cfg):
        raise ProvenanceError(f"run {source} was produced from a different setup ({manifest['setup_hash']})")
    return iter(snaps), {"source": str(source), "n": snaps[0].grid.n, "from_hash": manifest["scenario_hash"]}


def run_certify(cfg: Mapping, out, source=None, threads: int = 1) -> dict:
    """Certify the dissipative inequality for every configured trial and ``r`` multiplier."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    trials = build_trials(cfg)
    if not trials:
        raise ConfigError(f"{cfg['name']}: no trial fields configured")
    cert = cfg["certify"]
    trajectory, provenance = _certify_source(cfg, source, threads)
    estimates = [estimate_r0(tr, cfg["time"]["T"]) for tr in trials]
    reports = certify_many(trajectory, trials, r_multipliers=cert["r_multipliers"], tol=cert["tol"],
                           scale_tol=cert["scale_tol"], r0_estimates=estimates)
    hashes = _hashes(cfg)
    writer = _Writer(out / "report.csv", ["scenario_hash", "setup_hash", "trial", "family", "r", "t", "E", "D", "R", "margin"], hashes)
    entries = []
    for idx, (trial, est, rep) in enumerate(zip(trials, estimates, reports)):
        for row in rep.rows():
            writer.write({"trial": idx, "family": trial.family, **row})
        entries.append({
            "trial": idx, "family": trial.family, "params": trial.params, "r0": est.to_dict(),
            "r_values": rep.r_values, "tol": rep.tol, "min_margin": rep.min_margin(), "passed": rep.passed,
            "E_max": float(np.max(rep.E)), "E0": float(rep.E[0]),
        })
    writer.close()
    verdict = {
        **hashes,
        "verdict": "PASS" if all(e["passed"] for e in entries) else "FAIL",
        "provenance": provenance,
        "trials": entries,
    }
    (out / "verdict.json").write_text(json.dumps(verdict, indent=2, sort_keys=True, default=float) + "\n")
    _write_manifest(out, cfg, "certify", threads, ["report.csv", "verdict.json"], provenance=provenance)
    return verdict


def run_identity(cfg: Mapping, out, threads: int = 1) -> dict:
    """Per-loop entropy identity for every configured trial; single-loop scenarios only."""
    if cfg["ensemble"] is None:
        raise ConfigError(f"{cfg['name']}: identity needs a loop ensemble")
    ensemble = build_ensemble(cfg)
    if len(ensemble.loops) != 1:
        raise ConfigError(f"{cfg['name']}: identity is per loop; scenario has {len(ensemble.loops)} loops")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ident = cfg["identity"]
    times = time_levels(ident["T"], ident["dt"])
    hashes = _hashes(cfg)
    columns = ["scenario_hash", "setup_hash", "trial", "family", "t", "dEdt", "dissipation", "remainder", "residual"]
    for name in ("dE1", "dE2", "dE3"):
        columns += [f"{name}_fd", f"{name}_closed"] + ([f"{name}_split"] if name != "dE3" else [])
    writer = _Writer(out / "identity.csv", columns, hashes)
    summary = []
    for idx, trial in enumerate(build_trials(cfg)):
        rep = loop_identity_check(ensemble.loops[0], times, trial, ident["M"])
        for row in rep.rows():
            writer.write({"trial": idx, "family": trial.family, **row})
        summary.append({"trial": idx, "family": trial.family, "params": trial.params,
                        "max_residual": float(np.max(rep.residual)), "component_errors": rep.component_errors()})
    writer.close()
    _write_manifest(out, cfg, "identity", threads, ["identity.csv"], summary=summary)
    return {**hashes, "trials": summary}


def compare(run_a, run_b) -> dict:
    """Compare the final reduced fields of two runs of the same setup on the shared support."""
    man_a, snaps_a = load_run_snapshots(run_a)
    man_b, snaps_b = load_run_snapshots(run_b)
    if man_a["setup_hash"] != man_b["setup_hash"]:
        raise ProvenanceError(f"refusing to compare runs of different setups: {man_a['setup_hash']} vs {man_b['setup_hash']}")
    fa, fb = snaps_a[-1], snaps_b[-1]
    if fa.grid != fb.grid or abs(fa.t - fb.t) > 1e-12:
        raise ProvenanceError("final snapshots differ in grid or time")
    mask = support_mask(fa.rho) & support_mask(fb.rho)
    diff = np.abs(fa.reduced_b() - fb.reduced_b())[:, mask]
    return {
        "setup_hash": man_a["setup_hash"],
        "runs": [{"dir": str(run_a), "scenario_hash": man_a["scenario_hash"], "command": man_a["command"]},
                 {"dir": str(run_b), "scenario_hash": man_b["scenario_hash"], "command": man_b["command"]}],
        "t": fa.t,
        "b_sup_diff_on_support": float(diff.max()) if diff.size else 0.0,
        "energy": [energy(fa), energy(fb)],
    }
