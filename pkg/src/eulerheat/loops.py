"""Closed loops on the flat torus and their evolution under the 1-D heat equation.

A loop is stored as ``X(s) = mean + N s + sum_k c_k exp(2 pi i k s)`` with an
integer winding vector ``N`` and Hermitian Fourier coefficients, so that
``X(s + 1) = X(s) + N``. Under ``dX/dt = d^2X/ds^2`` every mode decays
independently, which makes the exact flow a diagonal multiplier.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

TWO_PI = 2.0 * np.pi

__all__ = [
    "WindingLoop",
    "LoopEnsemble",
    "LoopSamples",
    "winding_line",
    "graph_loop",
    "evolve_exact",
    "evolve_fd",
    "sample",
    "loop_energy",
    "min_separation",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class WindingLoop:
    """Spectral loop with winding vector ``winding`` and modes ``coeffs[j]`` at ``ks[j]``.

    Both ``k`` and ``-k`` are stored; ``coeffs`` at ``-k`` is the conjugate of
    the one at ``k``.
    """

    winding: np.ndarray
    mean: np.ndarray
    ks: np.ndarray
    coeffs: np.ndarray

    def __post_init__(self):
        winding = np.asarray(self.winding)
        if winding.ndim != 1 or winding.size < 1:
            raise ValueError("winding must be a non-empty integer vector")
        if not np.all(np.equal(np.mod(winding, 1), 0)):
            raise ValueError(f"winding must be integer, got {winding.tolist()}")
        d = winding.size
        mean = np.asarray(self.mean, dtype=float)
        if mean.shape != (d,):
            raise ValueError(f"mean has shape {mean.shape}, expected ({d},)")
        ks = np.asarray(self.ks, dtype=np.int64).reshape(-1)
        coeffs = np.asarray(self.coeffs, dtype=complex).reshape(ks.size, d)
        if np.any(ks == 0):
            raise ValueError("mode k=0 is not allowed; use `mean` for the constant part")
        if len(set(ks.tolist())) != ks.size:
            raise ValueError("duplicate mode numbers")
        lookup = {int(k): c for k, c in zip(ks, coeffs)}
        for k, c in lookup.items():
            partner = lookup.get(-k)
            if partner is None or not np.allclose(partner, np.conj(c), rtol=0.0, atol=1e-14):
                raise ValueError(f"mode {k} lacks a conjugate partner at {-k}")
        order = np.argsort(ks, kind="stable")
        object.__setattr__(self, "winding", _frozen(winding.astype(np.int64)))
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "ks", _frozen(ks[order]))
        object.__setattr__(self, "coeffs", _frozen(coeffs[order]))

    @property
    def dim(self) -> int:
        return int(self.winding.size)

    @property
    def K(self) -> int:
        """Highest stored frequency (0 for a straight winding line)."""
        return int(np.max(np.abs(self.ks))) if self.ks.size else 0

    @classmethod
    def from_modes(cls, winding, mean, modes: Mapping[int, Sequence[complex]] | None = None) -> "WindingLoop":
        """Build a loop from positive (or signed) modes; missing conjugates are filled in."""
        d = len(winding)
        full: dict[int, np.ndarray] = {}
        for k, c in (modes or {}).items():
            k = int(k)
            c = np.asarray(c, dtype=complex).reshape(d)
            if k in full and not np.allclose(full[k], c, rtol=0.0, atol=1e-14):
                raise ValueError(f"mode {k} given twice with different values")
            full[k] = c
            if -k not in full:
                full[-k] = np.conj(c)
        ks = np.array(sorted(full), dtype=np.int64)
        coeffs = np.array([full[k] for k in ks], dtype=complex).reshape(ks.size, d)
        return cls(np.asarray(winding), np.asarray(mean, dtype=float), ks, coeffs)

    def to_dict(self) -> dict:
        positive = self.ks > 0
        return {
            "winding": self.winding.tolist(),
            "mean": self.mean.tolist(),
            "modes": [
                {"k": int(k), "re": c.real.tolist(), "im": c.imag.tolist()}
                for k, c in zip(self.ks[positive], self.coeffs[positive])
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "WindingLoop":
        modes = {}
        for entry in data.get("modes", []):
            re = np.asarray(entry["re"], dtype=float)
            im = np.asarray(entry.get("im", np.zeros_like(re)), dtype=float)
            modes[int(entry["k"])] = re + 1j * im
        winding = data["winding"]
        mean = data.get("mean", [0.0] * len(winding))
        return cls.from_modes(winding, mean, modes)

    def evaluate(self, s) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Lifted positions, first and second s-derivatives at parameters ``s``; each (len(s), d)."""
        s = np.asarray(s, dtype=float).reshape(-1)
        X = self.mean[None, :] + s[:, None] * self.winding[None, :]
        dX = np.broadcast_to(self.winding.astype(float), X.shape).copy()
        ddX = np.zeros_like(X)
        if self.ks.size:
            phase = np.exp(1j * TWO_PI * np.outer(s, self.ks))  # (M, m)
            w = 1j * TWO_PI * self.ks
            X += (phase @ self.coeffs).real
            dX += (phase @ (w[:, None] * self.coeffs)).real
            ddX += (phase @ ((w**2)[:, None] * self.coeffs)).real
        return X, dX, ddX


@dataclass(frozen=True, eq=False)
class LoopEnsemble:
    loops: tuple
    weights: np.ndarray

    def __post_init__(self):
        loops = tuple(self.loops)
        if not loops:
            raise ValueError("ensemble needs at least one loop")
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if weights.size != len(loops):
            raise ValueError(f"{len(loops)} loops but {weights.size} weights")
        if np.any(weights < 0):
            raise ValueError("weights must be nonnegative")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {weights.sum()!r}, expected 1")
        dims = {loop.dim for loop in loops}
        if len(dims) != 1:
            raise ValueError(f"loops have mixed dimensions {sorted(dims)}")
        object.__setattr__(self, "loops", loops)
        object.__setattr__(self, "weights", _frozen(weights))

    @property
    def dim(self) -> int:
        return self.loops[0].dim

    @property
    def K(self) -> int:
        return max(loop.K for loop in self.loops)

    @classmethod
    def single(cls, loop: WindingLoop) -> "LoopEnsemble":
        return cls((loop,), np.ones(1))

    def evolved(self, t: float) -> "LoopEnsemble":
        return LoopEnsemble(tuple(evolve_exact(loop, t) for loop in self.loops), self.weights)

    def circulation(self) -> np.ndarray:
        return sum(w * loop.winding for w, loop in zip(self.weights, self.loops))

    def to_dict(self) -> dict:
        return {"loops": [loop.to_dict() for loop in self.loops], "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, data: Mapping) -> "LoopEnsemble":
        loops = tuple(WindingLoop.from_dict(entry) for entry in data["loops"])
        weights = data.get("weights")
        if weights is None:
            weights = np.full(len(loops), 1.0 / len(loops))
        return cls(loops, np.asarray(weights, dtype=float))


@dataclass(frozen=True, eq=False)
class LoopSamples:
    """Uniform samples of a loop. ``lifted`` is unwrapped; ``positions`` lives in [0,1)^d."""

    s: np.ndarray
    lifted: np.ndarray
    tangents: np.ndarray
    velocities: np.ndarray
    winding: np.ndarray

    @property
    def M(self) -> int:
        return int(self.s.size)

    @property
    def positions(self) -> np.ndarray:
        return np.mod(self.lifted, 1.0)


def winding_line(winding, mean) -> WindingLoop:
    """Straight closed geodesic ``X(s) = mean + N s``."""
    return WindingLoop.from_modes(winding, mean, {})


def graph_loop(eps: float, k: int = 1, mean=(0.0, 0.5), dim: int = 2) -> WindingLoop:
    """Graph ``x2 = mean2 + eps sin(2 pi k x1)`` wound once along x1."""
    if dim < 2:
        raise ValueError("graph loops need dim >= 2")
    winding = np.zeros(dim, dtype=int)
    winding[0] = 1
    c = np.zeros(dim, dtype=complex)
    c[1] = eps / 2j
    mean = np.asarray(mean, dtype=float)
    if mean.size != dim:
        mean = np.concatenate([mean, np.full(dim - mean.size, 0.5)])[:dim]
    return WindingLoop.from_modes(winding, mean, {k: c})


def evolve_exact(loop: WindingLoop, t: float) -> WindingLoop:
    """Exact heat flow: mode ``k`` is damped by ``exp(-4 pi^2 k^2 t)``."""
    if t < 0:
        raise ValueError(f"time must be nonnegative, got {t}")
    if t == 0 or loop.ks.size == 0:
        return loop
    decay = np.exp(-(TWO_PI**2) * loop.ks.astype(float) ** 2 * t)
    return WindingLoop(loop.winding, loop.mean, loop.ks, loop.coeffs * decay[:, None])


def sample(loop: WindingLoop, M: int) -> LoopSamples:
    """Evaluate positions, tangents and velocities (= second s-derivative) on ``s_m = m/M``."""
    M = int(M)
    if M < 4 * loop.K + 4:
        raise ValueError(f"M={M} does not resolve modes up to K={loop.K}; need M >= {4 * loop.K + 4}")
    s = np.arange(M) / M
    X, dX, ddX = loop.evaluate(s)
    return LoopSamples(s, X, dX, ddX, loop.winding.copy())


def evolve_fd(samples: LoopSamples, dt: float, steps: int) -> LoopSamples:
    """Explicit central-difference heat stepping of the periodic lift ``X(s) - N s``."""
    M = samples.M
    if M < 8:
        raise ValueError(f"need at least 8 samples, got {M}")
    ds = 1.0 / M
    if dt <= 0 or dt > 0.5 * ds * ds:
        raise ValueError(f"dt={dt:g} violates the explicit stability bound ds^2/2={0.5 * ds * ds:g}")
    ramp = samples.s[:, None] * samples.winding[None, :]
    Y = samples.lifted - ramp
    mu = dt / (ds * ds)
    for _ in range(int(steps)):
        Y = Y + mu * (np.roll(Y, -1, axis=0) - 2.0 * Y + np.roll(Y, 1, axis=0))
    tangents = samples.winding[None, :] + (np.roll(Y, -1, axis=0) - np.roll(Y, 1, axis=0)) / (2.0 * ds)
    velocities = (np.roll(Y, -1, axis=0) - 2.0 * Y + np.roll(Y, 1, axis=0)) / (ds * ds)
    return LoopSamples(samples.s.copy(), Y + ramp, tangents, velocities, samples.winding.copy())


def loop_energy(loop: WindingLoop) -> float:
    """``0.5 * int |X'|^2 ds`` by Parseval."""
    base = 0.5 * float(np.dot(loop.winding, loop.winding))
    if loop.ks.size == 0:
        return base
    power = np.sum(np.abs(loop.coeffs) ** 2, axis=1)
    return base + float(np.sum(2.0 * np.pi**2 * loop.ks.astype(float) ** 2 * power))


def _toroidal_min(a: np.ndarray, b: np.ndarray, chunk: int = 256) -> float:
    best = np.inf
    for start in range(0, a.shape[0], chunk):
        diff = a[start:start + chunk, None, :] - b[None, :, :]
        diff -= np.round(diff)
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        best = min(best, float(dist.min()))
    return best


def _self_min(smp: LoopSamples, fold_ratio: float, chunk: int = 256) -> float:
    """Closest approach of two samples whose chord is shorter than ``fold_ratio`` times the arc between them."""
    lifted = smp.lifted
    closed = np.vstack([lifted, lifted[:1] + smp.winding])
    seg = np.sqrt(np.sum(np.diff(closed, axis=0) ** 2, axis=1))
    cum = np.concatenate([[0.0], np.cumsum(seg)[:-1]])
    total = float(seg.sum())
    P = smp.positions
    best = np.inf
    for start in range(0, P.shape[0], chunk):
        diff = P[start:start + chunk, None, :] - P[None, :, :]
        diff -= np.round(diff)
        chord = np.sqrt(np.sum(diff * diff, axis=-1))
        along = np.abs(cum[start:start + chunk, None] - cum[None, :])
        arc = np.minimum(along, total - along)
        fold = chord < fold_ratio * arc
        if fold.any():
            best = min(best, float(chord[fold].min()))
    return best


def min_separation(ensemble: LoopEnsemble | Iterable[WindingLoop], M: int, fold_ratio: float = 0.5) -> float:
    """Smallest toroidal distance between samples of distinct loops, or of one loop folding back.

    A pair of samples on the same loop counts only when its toroidal distance
    is below ``fold_ratio`` times the shorter arc length between them, so
    neighbouring samples along a smooth arc never register; a loop with no
    such pair and no partner returns ``inf``.
    """
    loops = ensemble.loops if isinstance(ensemble, LoopEnsemble) else tuple(ensemble)
    smps = [sample(loop, max(M, 4 * loop.K + 4)) for loop in loops]
    pts = [smp.positions for smp in smps]
    best = np.inf
    for a, P in enumerate(pts):
        best = min(best, _self_min(smps[a], fold_ratio))
        for Q in pts[a + 1:]:
            best = min(best, _toroidal_min(P, Q))
    return float(best)
