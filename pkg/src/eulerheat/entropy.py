"""Relative entropy, the Q_r form and the dissipative-solution certifier.

Grid-side quantities are integrated over cells with ``rho`` above the vacuum
floor. Loop-side quantities are trapezoid sums over uniform ``s`` samples of
exactly evolved loops; they serve as independent oracles for the grid side.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .fields import GridFields, support_mask
from .loops import LoopEnsemble, WindingLoop, evolve_exact, sample
from .trial import TrialFields

SAFETY_FACTOR = 1.1

__all__ = [
    "l_operators",
    "q_matrix",
    "q_form",
    "R0Estimate",
    "estimate_r0",
    "relative_entropy",
    "remainder_R",
    "dissipation",
    "EntropyReport",
    "entropy_series",
    "margins",
    "certify",
    "certify_many",
    "LoopTerms",
    "loop_terms",
    "ensemble_terms",
    "IdentityReport",
    "loop_identity_check",
]


def _eval(trial: TrialFields, t: float, x, tables=(None, None)):
    b, bt, Jb = trial.b.evaluate(t, x, tables[0])
    v, _, Jv = trial.v.evaluate(t, x, tables[1])
    return b, v, bt, Jb, Jv


def _matvec(J, u):
    # J: (d, d, ...), u: (d, ...) -> J @ u pointwise
    return np.einsum("ij...,j...->i...", J, u)


def _l_from(b, v, bt, Jb, Jv):
    vv = np.sum(v * v, axis=0)
    # D*_t(|b|^2/2) = b.b_t + v^j b^i d_j b^i
    dt_half_b2 = np.sum(b * bt, axis=0) + np.sum(b * _matvec(Jb, v), axis=0)
    # (b.grad)(b.v) = b^j (v^i d_j b^i + b^i d_j v^i)
    b_grad_bv = np.sum(v * _matvec(Jb, b), axis=0) + np.sum(b * _matvec(Jv, b), axis=0)
    L1 = vv + dt_half_b2 - b_grad_bv
    L2 = -(bt + _matvec(Jb, v)) + _matvec(Jv, b)
    L3 = -v + _matvec(Jb, b)
    return L1, L2, L3


def l_operators(trial: TrialFields, t: float, x):
    """``(L1, L2, L3)`` at points ``x`` of shape (d, ...) or (d,)."""
    return _l_from(*_eval(trial, t, x))


def q_matrix(trial: TrialFields, r: float, t: float, x) -> np.ndarray:
    """``Q_r`` at points ``x``; shape (..., 2d, 2d)."""
    x = np.asarray(x, dtype=float)
    d = trial.dim
    Jb = np.moveaxis(trial.b.jacobian(t, x), (0, 1), (-2, -1))
    Jv = np.moveaxis(trial.v.jacobian(t, x), (0, 1), (-2, -1))
    eye = np.eye(d)
    top = np.concatenate([-(Jv + np.swapaxes(Jv, -1, -2)) + r * eye, Jb - np.swapaxes(Jb, -1, -2)], axis=-1)
    bottom = np.concatenate([np.swapaxes(Jb, -1, -2) - Jb, np.broadcast_to(2.0 * eye, Jb.shape)], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def _q_form_from(Jb, Jv, r, U1, U2):
    sym = -2.0 * np.sum(U1 * _matvec(Jv, U1), axis=0) + r * np.sum(U1 * U1, axis=0)
    # U1^T (Jb - Jb^T) U2 counted twice (both off-diagonal blocks)
    cross = 2.0 * (np.sum(U1 * _matvec(Jb, U2), axis=0) - np.sum(U2 * _matvec(Jb, U1), axis=0))
    return sym + cross + 2.0 * np.sum(U2 * U2, axis=0)


def q_form(trial: TrialFields, r: float, t: float, x, U1, U2) -> np.ndarray:
    """``U^T Q_r U`` with ``U = (U1, U2)``, evaluated blockwise without forming Q."""
    return _q_form_from(trial.b.jacobian(t, x), trial.v.jacobian(t, x), r, U1, U2)


@dataclass
class R0Estimate:
    r0: float               # certified value, bisection result times the safety factor
    r_bisect: float
    lambda_min_at_r0: float
    n_t: int
    n_x: int
    capped: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _sample_points(trial: TrialFields, T: float, n_t: int | None, n_x: int | None):
    if n_x is None:
        n_x = max(16, 8 * max(trial.k_max, 1))
    if n_t is None:
        n_t = 11
    ts = np.linspace(0.0, T, n_t) if T > 0 else np.zeros(1)
    axis = np.arange(n_x) / n_x
    x = np.stack(np.meshgrid(*([axis] * trial.dim), indexing="ij")).reshape(trial.dim, -1)
    return ts, x, n_t, n_x


def lambda_min_samples(trial: TrialFields, r: float, T: float, n_t: int | None = None, n_x: int | None = None) -> np.ndarray:
    ts, x, _, _ = _sample_points(trial, T, n_t, n_x)
    return np.concatenate([np.linalg.eigvalsh(q_matrix(trial, r, t, x))[:, 0] for t in ts])


def estimate_r0(trial: TrialFields, T: float, n_t: int | None = None, n_x: int | None = None,
                rel_tol: float = 1e-7, cap: float = 1e8) -> R0Estimate:
    """Smallest sampled ``r`` with ``lambda_min(Q_r) >= 1``, bisected, then times 1.1."""
    ts, x, n_t, n_x = _sample_points(trial, T, n_t, n_x)
    # Q_r = Q_0 + r I_{2d:d}: precompute Q_0 once.
    Q0 = np.concatenate([q_matrix(trial, 0.0, t, x) for t in ts])
    d = trial.dim
    shift = np.zeros((2 * d, 2 * d))
    shift[:d, :d] = np.eye(d)

    def worst(r):
        return float(np.min(np.linalg.eigvalsh(Q0 + r * shift)[:, 0]))

    lo, hi = 0.0, 1.0
    capped = False
    if worst(0.0) >= 1.0:
        hi = 0.0
    else:
        while worst(hi) < 1.0:
            lo, hi = hi, 2.0 * hi
            if hi > cap:
                capped = True
                break
        while hi - lo > rel_tol * max(hi, 1e-12):
            mid = 0.5 * (lo + hi)
            if worst(mid) >= 1.0:
                hi = mid
            else:
                lo = mid
    r0 = SAFETY_FACTOR * hi
    return R0Estimate(r0=r0, r_bisect=hi, lambda_min_at_r0=worst(r0), n_t=n_t, n_x=n_x, capped=capped)


def _supported(fields: GridFields, vacuum_tol: float = 1e-8):
    mask = support_mask(fields.rho)
    scale = float(np.max(np.abs(fields.B))) if fields.B.size else 0.0
    if np.any(~mask & (np.sqrt(np.sum(fields.B**2, axis=0)) > vacuum_tol * max(scale, 1e-300))):
        raise ValueError("B is non-negligible on vacuum cells (rho below floor); input is not a consistent measure pair")
    return mask, np.where(mask, fields.rho, 1.0)


def relative_entropy(fields: GridFields, trial: TrialFields) -> float:
    """Grid quadrature of ``|B - rho b*|^2 / (2 rho)``."""
    mask, rho = _supported(fields)
    b = trial.b.value(fields.t, fields.grid.mesh())
    U1 = fields.B - rho * b
    return fields.grid.integrate(np.where(mask, 0.5 * np.sum(U1 * U1, axis=0) / rho, 0.0))


def remainder_R(fields: GridFields, trial: TrialFields) -> float:
    """Grid quadrature of ``rho L1 + B.L2 + P.L3``."""
    L1, L2, L3 = l_operators(trial, fields.t, fields.grid.mesh())
    dens = fields.rho * L1 + np.sum(fields.B * L2, axis=0) + np.sum(fields.P * L3, axis=0)
    return fields.grid.integrate(dens)


def dissipation(fields: GridFields, trial: TrialFields, r: float) -> float:
    """Grid quadrature of ``U^T Q_r U / (2 rho)`` with ``U = (B - rho b*, P - rho v*)``."""
    mask, rho = _supported(fields)
    x = fields.grid.mesh()
    b = trial.b.value(fields.t, x)
    v = trial.v.value(fields.t, x)
    U1 = fields.B - rho * b
    U2 = fields.P - rho * v
    dens = q_form(trial, r, fields.t, x, U1, U2) / (2.0 * rho)
    return fields.grid.integrate(np.where(mask, dens, 0.0))


@dataclass
class EntropyReport:
    times: np.ndarray
    E: np.ndarray
    D0: np.ndarray                 # dissipation integrand at r = 0; D_r = D0 + r E
    R: np.ndarray
    r_values: list
    margin: dict                   # r -> array over times
    tol: float
    r0: float | None = None
    trial: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(bool(np.all(m >= -self.tol)) for m in self.margin.values())

    def min_margin(self) -> float:
        return float(min(np.min(m) for m in self.margin.values()))

    def dissipation(self, r: float) -> np.ndarray:
        return self.D0 + r * self.E

    def rows(self):
        for r in self.r_values:
            D = self.dissipation(r)
            for k, t in enumerate(self.times):
                yield {"t": float(t), "r": float(r), "E": float(self.E[k]), "D": float(D[k]),
                       "R": float(self.R[k]), "margin": float(self.margin[r][k])}


def _series_one(fields: GridFields, trial: TrialFields, x: np.ndarray, mask: np.ndarray, rho: np.ndarray, tables):
    b, v, bt, Jb, Jv = _eval(trial, fields.t, x, tables)
    U1 = fields.B - rho * b
    U2 = fields.P - rho * v
    E = fields.grid.integrate(np.where(mask, 0.5 * np.sum(U1 * U1, axis=0) / rho, 0.0))
    D0 = fields.grid.integrate(np.where(mask, _q_form_from(Jb, Jv, 0.0, U1, U2) / (2.0 * rho), 0.0))
    L1, L2, L3 = _l_from(b, v, bt, Jb, Jv)
    R = fields.grid.integrate(fields.rho * L1 + np.sum(fields.B * L2, axis=0) + np.sum(fields.P * L3, axis=0))
    return E, D0, R


def entropy_series(trajectory: Iterable[GridFields], trials: Sequence[TrialFields]):
    """One pass over ``trajectory``; returns ``times`` and per-trial ``(E, D0, R)`` arrays."""
    times = []
    acc = [([], [], []) for _ in trials]
    grid = x = None
    for fields in trajectory:
        if grid is None:
            grid = fields.grid
            x = grid.mesh()
            tables = [(trial.b.tables(x), trial.v.tables(x)) for trial in trials]
        elif fields.grid != grid:
            raise ValueError("trajectory mixes grids")
        times.append(fields.t)
        mask, rho = _supported(fields)
        for store, trial, tab in zip(acc, trials, tables):
            for lst, val in zip(store, _series_one(fields, trial, x, mask, rho, tab)):
                lst.append(val)
    times = np.asarray(times)
    return times, [tuple(np.asarray(a) for a in store) for store in acc]


def _check_uniform(times: np.ndarray):
    if times.size < 2:
        raise ValueError("need at least two time levels")
    steps = np.diff(times)
    if np.any(steps <= 0) or np.max(np.abs(steps - steps[0])) > 1e-9 * max(1.0, abs(steps[0])):
        raise ValueError("time levels must be uniformly spaced and increasing")


def margins(times, E, D0, R, r: float) -> np.ndarray:
    """``E(0) - [E(t) e^{-r t} + int_0^t e^{-r t'} (D_r - R) dt']`` at each time level.

    The bracket ``D_r - R`` is interpolated linearly between time levels and
    integrated exactly against the exponential weight.
    """
    times = np.asarray(times, dtype=float)
    tau = times - times[0]
    g = D0 + r * E - R
    dt = np.diff(tau)
    x = r * dt
    if r == 0:
        phi0 = dt
        phi1 = 0.5 * dt * dt
    else:
        phi0 = -np.expm1(-x) / r
        small = x < 1e-3
        series = dt * dt * (0.5 - x / 3.0 + x * x / 8.0 - x**3 / 30.0)
        exact = (-np.expm1(-x) - x * np.exp(-x)) / (r * r)
        phi1 = np.where(small, series, exact)
    pieces = np.exp(-r * tau[:-1]) * (g[:-1] * phi0 + (g[1:] - g[:-1]) / dt * phi1)
    integral = np.concatenate([[0.0], np.cumsum(pieces)])
    return E[0] - (E * np.exp(-r * tau) + integral)


def certify_many(trajectory: Iterable[GridFields], trials: Sequence[TrialFields], r_multipliers=(1.0, 2.0, 4.0),
                 tol: float = 1e-6, r_values: Sequence[float] | None = None, scale_tol: bool = True,
                 r0_estimates: Sequence[R0Estimate] | None = None) -> list[EntropyReport]:
    """Certify several trials against one trajectory in a single pass.

    ``r`` values are ``r_multipliers * r0`` per trial unless absolute
    ``r_values`` are given. With ``scale_tol`` the tolerance is
    ``tol * max(1, E(0))``.
    """
    times, series = entropy_series(trajectory, trials)
    _check_uniform(times)
    T = float(times[-1] - times[0])
    reports = []
    for idx, (trial, (E, D0, R)) in enumerate(zip(trials, series)):
        est = r0_estimates[idx] if r0_estimates is not None else estimate_r0(trial, T)
        rs = [float(m) * est.r0 for m in r_multipliers] if r_values is None else [float(r) for r in r_values]
        low = [r for r in rs if r < est.r0 * (1 - 1e-12)]
        if low:
            raise ValueError(f"r values {low} are below the estimated r0={est.r0:.6g}; the inequality is not claimed there")
        budget = tol * max(1.0, float(E[0])) if scale_tol else tol
        reports.append(EntropyReport(times, E, D0, R, rs, {r: margins(times, E, D0, R, r) for r in rs}, budget,
                                     r0=est.r0, trial=trial.to_dict()))
    return reports


def certify(trajectory: Iterable[GridFields], trial: TrialFields, r_values: Sequence[float], tol: float,
            r0: R0Estimate | None = None, scale_tol: bool = False) -> EntropyReport:
    """Evaluate the dissipative inequality margin for each ``r``; refuses ``r`` below ``r0``."""
    return certify_many(trajectory, [trial], r_values=r_values, tol=tol, scale_tol=scale_tol,
                        r0_estimates=None if r0 is None else [r0])[0]


@dataclass
class LoopTerms:
    """Loop-side integrals at one time, all per unit ensemble weight."""

    entropy: float          # int |X_s - b*|^2 / 2
    dissipation: float      # int W^T Q_r W / 2
    remainder: float        # int L1 + X_s.L2 + X_t.L3
    E1: float
    E2: float
    E3: float
    dE1: float              # -int |X_t|^2
    dE1_split: float        # L' bookkeeping form
    dE2: float
    dE2_split: float        # L'' bookkeeping form
    dE3: float


def loop_terms(loop: WindingLoop, t: float, trial: TrialFields, M: int, r: float = 0.0) -> LoopTerms:
    """Evaluate the per-loop entropy budget for the exactly evolved loop at time ``t``."""
    smp = sample(evolve_exact(loop, t), M)
    X = smp.positions.T
    Xs = smp.tangents.T
    Xt = smp.velocities.T
    b, v, bt, Jb, Jv = _eval(trial, t, X)
    Ws = Xs - b
    Wt = Xt - v
    L1, L2, L3 = l_operators(trial, t, X)
    dot = lambda a, c: np.sum(a * c, axis=0)  # noqa: E731
    curl_b = Jb - np.swapaxes(Jb, 0, 1)       # (d_j b_i - d_i b_j) at [i, j]
    sym_v = Jv + np.swapaxes(Jv, 0, 1)
    # L' and L'' from the term-by-term split of dE/dt
    L1p = dot(v, v) - dot(b, _matvec(Jv, b))
    L2p = _matvec(sym_v, b)
    L3p = -v
    L1pp = dot(b, _matvec(curl_b, v))
    L2pp = -bt - _matvec(curl_b, v)
    L3pp = _matvec(curl_b, b)
    mean = np.mean
    return LoopTerms(
        entropy=float(mean(0.5 * dot(Ws, Ws))),
        dissipation=float(mean(0.5 * q_form(trial, r, t, X, Ws, Wt))),
        remainder=float(mean(L1 + dot(Xs, L2) + dot(Xt, L3))),
        E1=float(mean(0.5 * dot(Xs, Xs))),
        E2=float(mean(-dot(Xs, b))),
        E3=float(mean(0.5 * dot(b, b))),
        dE1=float(-mean(dot(Xt, Xt))),
        dE1_split=float(mean(-dot(Wt, Wt) + L1p + dot(Xs, L2p) + dot(Xt, L3p) + 0.5 * dot(Ws, _matvec(sym_v, Ws)))),
        dE2=float(mean(-dot(Xs, _matvec(curl_b, Xt)) - dot(Xs, bt))),
        dE2_split=float(mean(-dot(Ws, _matvec(curl_b, Wt)) + L1pp + dot(Xs, L2pp) + dot(Xt, L3pp))),
        dE3=float(mean(dot(bt + _matvec(Jb, Xt), b))),
    )


def ensemble_terms(ensemble: LoopEnsemble, t: float, trial: TrialFields, M: int, r: float = 0.0) -> dict:
    """Weighted sums over the ensemble of ``entropy``, ``dissipation`` and ``remainder``."""
    out = {"entropy": 0.0, "dissipation": 0.0, "remainder": 0.0}
    for w, loop in zip(ensemble.weights, ensemble.loops):
        terms = loop_terms(loop, t, trial, M, r)
        for key in out:
            out[key] += w * getattr(terms, key)
    return out


@dataclass
class IdentityReport:
    times: np.ndarray
    dEdt: np.ndarray            # central difference of the exact-loop entropy
    dissipation: np.ndarray     # int W^T Q W / 2
    remainder: np.ndarray
    residual: np.ndarray
    components: dict            # name -> (fd series, closed-form series, split-form series)

    def component_errors(self) -> dict:
        out = {}
        for name, (fd, closed, split) in self.components.items():
            out[name] = float(np.max(np.abs(fd - closed)))
            if split is not None:
                out[name + "_split"] = float(np.max(np.abs(fd - split)))
        return out

    def rows(self):
        for k, t in enumerate(self.times):
            row = {"t": float(t), "dEdt": float(self.dEdt[k]), "dissipation": float(self.dissipation[k]),
                   "remainder": float(self.remainder[k]), "residual": float(self.residual[k])}
            for name, (fd, closed, split) in self.components.items():
                row[f"{name}_fd"] = float(fd[k])
                row[f"{name}_closed"] = float(closed[k])
                if split is not None:
                    row[f"{name}_split"] = float(split[k])
            yield row


def loop_identity_check(loop: WindingLoop, times, trial: TrialFields, M: int) -> IdentityReport:
    """Check ``dE/dt + int W^T Q W / 2 - R = 0`` along an exactly evolved loop.

    ``times`` must be uniform; the identity is tested at the interior levels
    with ``dE/dt`` from central differences of the sampled entropy.
    """
    times = np.asarray(times, dtype=float)
    _check_uniform(times)
    if times.size < 3:
        raise ValueError("need at least three time levels for central differences")
    dt = times[1] - times[0]
    terms = [loop_terms(loop, t, trial, M) for t in times]
    get = lambda name: np.array([getattr(tm, name) for tm in terms])  # noqa: E731
    central = lambda arr: (arr[2:] - arr[:-2]) / (2.0 * dt)  # noqa: E731
    inner = slice(1, -1)
    dEdt = central(get("entropy"))
    diss = get("dissipation")[inner]
    rem = get("remainder")[inner]
    components = {
        "dE1": (central(get("E1")), get("dE1")[inner], get("dE1_split")[inner]),
        "dE2": (central(get("E2")), get("dE2")[inner], get("dE2_split")[inner]),
        "dE3": (central(get("E3")), get("dE3")[inner], None),
    }
    return IdentityReport(times[inner], dEdt, diss, rem, np.abs(dEdt + diss - rem), components)
