"""Explicit grid solver for the reduced degenerate parabolic system.

The reduced field ``b = B / rho`` obeys ``d_t b^i = b^j b^k d_jk b^i``; the
companion density is carried by the continuity equation with velocity
``v = (b . grad) b`` using a conservative first-order upwind flux.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np

from .fields import GridFields, PeriodicGrid, support_mask

__all__ = [
    "ReducedState",
    "BlowupError",
    "max_stable_dt",
    "reduced_velocity",
    "step_nonconservative",
    "solve",
    "to_fields",
    "compute_momentum",
    "conservative_residual",
]


class BlowupError(RuntimeError):
    """Raised when the explicit solver produces non-finite values."""


@dataclass
class ReducedState:
    grid: PeriodicGrid
    b: np.ndarray                 # (d, n, ..., n)
    rho: np.ndarray | None = None
    t: float = 0.0

    def __post_init__(self):
        if self.b.shape != (self.grid.dim,) + self.grid.shape:
            raise ValueError(f"b has shape {self.b.shape}, expected {(self.grid.dim,) + self.grid.shape}")
        if not np.all(np.isfinite(self.b)):
            raise ValueError("b has non-finite entries")
        if self.rho is not None:
            if self.rho.shape != self.grid.shape:
                raise ValueError("rho does not match the grid")
            if np.any(self.rho < 0):
                raise ValueError("rho must be nonnegative")


def _shift(f, offset, axis, grid):
    return np.roll(f, -offset, axis=f.ndim - grid.dim + axis)


def _hessian_contraction(b: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    """``b^j b^k d_jk b^i`` with central and 4-point cross second differences."""
    h2 = grid.h**2
    d = grid.dim
    out = np.zeros_like(b)
    for j in range(d):
        second = (_shift(b, 1, j, grid) - 2.0 * b + _shift(b, -1, j, grid)) / h2
        out += b[j] ** 2 * second
        for k in range(j + 1, d):
            pp = _shift(_shift(b, 1, j, grid), 1, k, grid)
            pm = _shift(_shift(b, 1, j, grid), -1, k, grid)
            mp = _shift(_shift(b, -1, j, grid), 1, k, grid)
            mm = _shift(_shift(b, -1, j, grid), -1, k, grid)
            out += 2.0 * b[j] * b[k] * (pp - pm - mp + mm) / (4.0 * h2)
    return out


def _laplacian(b, grid):
    return sum(_shift(b, 1, j, grid) - 2.0 * b + _shift(b, -1, j, grid) for j in range(grid.dim)) / grid.h**2


def reduced_velocity(b: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    """``v = (b . grad) b`` by central differences."""
    return sum(b[j] * grid.ddx(b, j) for j in range(grid.dim))


def max_stable_dt(state: ReducedState, nu: float = 0.0) -> float:
    """Heuristic explicit bound ``h^2 / (2 d (max|b|^2 + nu))``."""
    peak = float(np.max(np.sum(state.b**2, axis=0)))
    return state.grid.h**2 / (2.0 * state.grid.dim * (peak + nu)) if peak + nu > 0 else math.inf


def _upwind_continuity(rho, v, dt, grid):
    new = rho.copy()
    for j in range(grid.dim):
        v_face = 0.5 * (v[j] + _shift(v[j], 1, j, grid))
        flux = np.where(v_face > 0, v_face * rho, v_face * _shift(rho, 1, j, grid))
        new -= dt / grid.h * (flux - _shift(flux, -1, j, grid))
    return new


def step_nonconservative(state: ReducedState, dt: float, nu: float = 0.0) -> ReducedState:
    """One forward-Euler step; ``nu`` adds an optional ``nu * Laplacian(b)`` regularisation."""
    limit = max_stable_dt(state, nu)
    if dt > limit * (1 + 1e-12):
        raise ValueError(f"dt={dt:g} exceeds the explicit stability bound {limit:g}")
    grid = state.grid
    rhs = _hessian_contraction(state.b, grid)
    if nu:
        rhs = rhs + nu * _laplacian(state.b, grid)
    b_new = state.b + dt * rhs
    rho_new = None
    if state.rho is not None:
        v = reduced_velocity(state.b, grid)
        rho_new = _upwind_continuity(state.rho, v, dt, grid)
    if not np.all(np.isfinite(b_new)) or (rho_new is not None and not np.all(np.isfinite(rho_new))):
        raise BlowupError(f"non-finite values after step at t={state.t + dt:g}")
    return ReducedState(grid, b_new, rho_new, state.t + dt)


def solve(state: ReducedState, T: float, dt_out: float, nu: float = 0.0, cfl: float = 0.9) -> Iterator[ReducedState]:
    """Yield states at ``t0, t0 + dt_out, ...`` up to ``T`` using uniform substeps."""
    n_out = int(round(T / dt_out))
    if abs(n_out * dt_out - T) > 1e-9 * max(T, 1.0):
        raise ValueError("T must be a whole number of output intervals")
    t0 = state.t
    yield state
    for k in range(1, n_out + 1):
        target = t0 + k * dt_out
        sub = max(1, math.ceil(dt_out / (cfl * max_stable_dt(state, nu))))
        h = (target - state.t) / sub
        for _ in range(sub):
            state = step_nonconservative(state, h, nu)
        state = replace(state, t=target)
        yield state


def to_fields(state: ReducedState, nu: float = 0.0) -> GridFields:
    """``(rho, B = rho b, P = rho v)``; needs a companion density."""
    if state.rho is None:
        raise ValueError("state carries no density")
    v = reduced_velocity(state.b, state.grid)
    meta = {"source": "pde", "nu": nu}
    return GridFields(state.grid, state.rho.copy(), state.rho * state.b, state.rho * v, t=state.t, meta=meta)


def compute_momentum(rho: np.ndarray, B: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    """``P^i = d_j (B^i B^j / rho)`` with central differences; the ratio is 0 off the support."""
    mask = support_mask(rho)
    inv = np.where(mask, 1.0 / np.where(mask, rho, 1.0), 0.0)
    d = grid.dim
    P = np.zeros_like(B)
    for i in range(d):
        for j in range(d):
            P[i] += grid.ddx(B[i] * B[j] * inv, j)
    return P


def conservative_residual(trajectory: Sequence[GridFields]) -> tuple[float, float]:
    """Max-norm residuals of the induction and continuity equations at interior time levels."""
    if len(trajectory) < 3:
        raise ValueError("need at least three snapshots")
    grid = trajectory[0].grid
    if any(f.grid != grid for f in trajectory):
        raise ValueError("snapshots live on different grids")
    times = np.array([f.t for f in trajectory])
    steps = np.diff(times)
    if np.any(steps <= 0) or np.max(np.abs(steps - steps[0])) > 1e-9 * max(1.0, steps[0]):
        raise ValueError("snapshots must be uniformly spaced in time")
    dt = steps[0]
    induction = continuity = 0.0
    for k in range(1, len(trajectory) - 1):
        f = trajectory[k]
        mask = support_mask(f.rho)
        inv = np.where(mask, 1.0 / np.where(mask, f.rho, 1.0), 0.0)
        dB = (trajectory[k + 1].B - trajectory[k - 1].B) / (2 * dt)
        drho = (trajectory[k + 1].rho - trajectory[k - 1].rho) / (2 * dt)
        flux_div = np.zeros_like(f.B)
        for i in range(grid.dim):
            for j in range(grid.dim):
                flux_div[i] += grid.ddx((f.B[i] * f.P[j] - f.P[i] * f.B[j]) * inv, j)
        div_P = sum(grid.ddx(f.P[j], j) for j in range(grid.dim))
        induction = max(induction, float(np.max(np.abs(dB + flux_div))))
        continuity = max(continuity, float(np.max(np.abs(drho + div_P))))
    return induction, continuity
