"""Energy ``F = int |B|^2 / (2 rho)``, its dual bound, metric norms and dissipation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fields import GridFields, PeriodicGrid, support_mask
from .trial import TrigField

__all__ = [
    "DualTestPair",
    "energy",
    "energy_dual_lower_bound",
    "metric_norms",
    "DissipationReport",
    "dissipation_identity",
]


def _checked_ratio(fields: GridFields, vacuum_tol: float = 1e-8):
    mask = support_mask(fields.rho)
    magnitude = np.sqrt(np.sum(fields.B**2, axis=0))
    top = float(np.max(magnitude)) if magnitude.size else 0.0
    if np.any(~mask & (magnitude > vacuum_tol * max(top, 1e-300))):
        raise ValueError("B is non-negligible where rho is below the vacuum floor")
    return mask, np.where(mask, fields.rho, 1.0)


def energy(fields: GridFields) -> float:
    mask, rho = _checked_ratio(fields)
    return fields.grid.integrate(np.where(mask, 0.5 * np.sum(fields.B**2, axis=0) / rho, 0.0))


@dataclass
class DualTestPair:
    """Admissible pair with ``theta + |Theta|^2 / 2 <= 0`` at every cell."""

    theta: np.ndarray
    Theta: np.ndarray

    def __post_init__(self):
        excess = self.theta + 0.5 * np.sum(self.Theta**2, axis=0)
        if np.any(excess > 1e-12 * max(1.0, float(np.max(np.abs(self.theta))))):
            raise ValueError(f"inadmissible pair: theta + |Theta|^2/2 reaches {float(np.max(excess)):.3e}")

    @classmethod
    def from_field(cls, Theta: TrigField, grid: PeriodicGrid, slack: float = 0.0, t: float = 0.0) -> "DualTestPair":
        if slack < 0:
            raise ValueError("slack must be nonnegative")
        values = Theta.value(t, grid.mesh())
        return cls(-0.5 * np.sum(values**2, axis=0) - slack, values)

    @classmethod
    def optimal(cls, fields: GridFields) -> "DualTestPair":
        """The saturating choice ``Theta = B / rho``, ``theta = -|Theta|^2 / 2``."""
        Theta = fields.reduced_b()
        return cls(-0.5 * np.sum(Theta**2, axis=0), Theta)


def energy_dual_lower_bound(fields: GridFields, pairs: Sequence[DualTestPair]) -> float:
    """``max`` over pairs of ``int theta rho + Theta . B``."""
    if not pairs:
        raise ValueError("need at least one test pair")
    values = [fields.grid.integrate(p.theta * fields.rho + np.sum(p.Theta * fields.B, axis=0)) for p in pairs]
    return float(max(values))


def metric_norms(v: np.ndarray, G: np.ndarray, rho: np.ndarray, grid: PeriodicGrid) -> tuple[float, float, float]:
    """``(||v||_rho, ||G||*_rho, int G.v)``; Fenchel: pairing <= (primal^2 + dual^2) / 2."""
    mask = support_mask(rho)
    safe = np.where(mask, rho, 1.0)
    primal = np.sqrt(grid.integrate(np.sum(v**2, axis=0) * rho))
    dual = np.sqrt(grid.integrate(np.where(mask, np.sum(G**2, axis=0) / safe, 0.0)))
    pairing = grid.integrate(np.sum(G * v, axis=0))
    return float(primal), float(dual), float(pairing)


@dataclass
class DissipationReport:
    times: np.ndarray
    F: np.ndarray
    dFdt: np.ndarray
    dissipation: np.ndarray   # int |P|^2 / rho
    residual: np.ndarray

    @property
    def relative(self) -> np.ndarray:
        return self.residual / np.maximum(np.abs(self.dissipation), 1e-300)


def _kinetic(fields: GridFields) -> float:
    mask = support_mask(fields.rho)
    rho = np.where(mask, fields.rho, 1.0)
    return fields.grid.integrate(np.where(mask, np.sum(fields.P**2, axis=0) / rho, 0.0))


def dissipation_identity(trajectory: Sequence[GridFields]) -> DissipationReport:
    """Residual of ``dF/dt = -int |P|^2 / rho`` at interior time levels (central differences)."""
    if len(trajectory) < 3:
        raise ValueError("need at least three snapshots")
    times = np.array([f.t for f in trajectory])
    steps = np.diff(times)
    if np.any(steps <= 0) or np.max(np.abs(steps - steps[0])) > 1e-9 * max(1.0, steps[0]):
        raise ValueError("snapshots must be uniformly spaced in time")
    F = np.array([energy(f) for f in trajectory])
    dFdt = (F[2:] - F[:-2]) / (2.0 * steps[0])
    diss = np.array([_kinetic(f) for f in trajectory[1:-1]])
    return DissipationReport(times[1:-1], F, dFdt, diss, np.abs(dFdt + diss))
