"""Closed-form trigonometric trial fields with exact first derivatives.

A :class:`TrigField` is a finite sum of terms
``amp * exp(-rate t) * cos(2 pi k.x + phase)``, vector-valued through ``amp``.
Values, time derivatives and Jacobians are all exact, so downstream
quadrature errors are not mixed with differentiation errors.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

TWO_PI = 2.0 * np.pi

__all__ = ["TrigField", "TrialFields"]


@dataclass(frozen=True, eq=False)
class TrigField:
    amps: np.ndarray     # (Q, m)
    ks: np.ndarray       # (Q, d) integer wave vectors
    phases: np.ndarray   # (Q,)
    rates: np.ndarray    # (Q,)

    def __post_init__(self):
        ks = np.asarray(self.ks, dtype=float)
        if ks.ndim != 2:
            raise ValueError("ks must be (Q, d)")
        Q = ks.shape[0]
        amps = np.asarray(self.amps, dtype=float)
        amps = amps.reshape(Q, -1) if Q else amps.reshape(0, amps.shape[-1] if amps.ndim == 2 else 1)
        object.__setattr__(self, "ks", ks)
        object.__setattr__(self, "amps", amps)
        object.__setattr__(self, "phases", np.asarray(self.phases, dtype=float).reshape(Q))
        object.__setattr__(self, "rates", np.asarray(self.rates, dtype=float).reshape(Q))

    @property
    def dim(self) -> int:
        return self.ks.shape[1]

    @property
    def components(self) -> int:
        return self.amps.shape[1]

    @property
    def k_max(self) -> int:
        return int(np.max(np.abs(self.ks))) if self.ks.size else 0

    @classmethod
    def zero(cls, dim: int, components: int | None = None) -> "TrigField":
        m = dim if components is None else components
        return cls(np.zeros((0, m)), np.zeros((0, dim)), np.zeros(0), np.zeros(0))

    @classmethod
    def constant(cls, value) -> "TrigField":
        value = np.asarray(value, dtype=float).reshape(1, -1)
        return cls(value, np.zeros((1, value.shape[1])), np.zeros(1), np.zeros(1))

    def tables(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Time-independent ``cos`` and ``sin`` of every term's phase at points ``x``; each (Q, ...)."""
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.dim:
            raise ValueError(f"points have leading dimension {x.shape[0]}, field is {self.dim}-D")
        arg = TWO_PI * np.tensordot(self.ks, x, axes=(1, 0)) + self.phases.reshape((-1,) + (1,) * (x.ndim - 1))
        return np.cos(arg), np.sin(arg)

    def _parts(self, t: float, x, tables=None):
        x = np.asarray(x, dtype=float)
        cos, sin = self.tables(x) if tables is None else tables
        decay = np.exp(-self.rates * t).reshape((-1,) + (1,) * (x.ndim - 1))
        return x.shape[1:], decay * cos, decay * sin

    def value(self, t: float, x) -> np.ndarray:
        """Field at points ``x`` of shape (d, ...); returns (m, ...)."""
        shape, c, _ = self._parts(t, x)
        if not self.ks.shape[0]:
            return np.zeros((self.components,) + shape)
        return np.tensordot(self.amps.T, c, axes=(1, 0))

    def dt(self, t: float, x) -> np.ndarray:
        shape, c, _ = self._parts(t, x)
        if not self.ks.shape[0]:
            return np.zeros((self.components,) + shape)
        return np.tensordot((-self.rates[:, None] * self.amps).T, c, axes=(1, 0))

    def jacobian(self, t: float, x) -> np.ndarray:
        """``J[i, j] = d f_i / d x_j``, shape (m, d, ...)."""
        shape, _, s = self._parts(t, x)
        if not self.ks.shape[0]:
            return np.zeros((self.components, self.dim) + shape)
        coef = -TWO_PI * self.amps[:, :, None] * self.ks[:, None, :]  # (Q, m, d)
        return np.tensordot(coef, s, axes=(0, 0))

    def evaluate(self, t: float, x, tables=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(value, dt, jacobian)`` sharing one evaluation of the trigonometric factors."""
        shape, c, s = self._parts(t, x, tables)
        if not self.ks.shape[0]:
            z = np.zeros((self.components,) + shape)
            return z, z.copy(), np.zeros((self.components, self.dim) + shape)
        value = np.tensordot(self.amps.T, c, axes=(1, 0))
        dt = np.tensordot((-self.rates[:, None] * self.amps).T, c, axes=(1, 0))
        coef = -TWO_PI * self.amps[:, :, None] * self.ks[:, None, :]
        return value, dt, np.tensordot(coef, s, axes=(0, 0))

    def scaled(self, factor: float) -> "TrigField":
        return TrigField(self.amps * factor, self.ks, self.phases, self.rates)

    def to_dict(self) -> dict:
        return {
            "terms": [
                {"amp": a.tolist(), "k": k.astype(int).tolist(), "phase": float(p), "rate": float(r)}
                for a, k, p, r in zip(self.amps, self.ks, self.phases, self.rates)
            ]
        }

    @classmethod
    def from_dict(cls, data: Mapping, dim: int, components: int | None = None) -> "TrigField":
        terms = data.get("terms", [])
        if not terms:
            return cls.zero(dim, components)
        amps = [np.atleast_1d(np.asarray(t["amp"], dtype=float)) for t in terms]
        ks = [np.asarray(t.get("k", [0] * dim), dtype=float) for t in terms]
        for k in ks:
            if k.shape != (dim,):
                raise ValueError(f"wave vector {k.tolist()} is not {dim}-D")
        return cls(
            np.array(amps),
            np.array(ks),
            np.array([float(t.get("phase", 0.0)) for t in terms]),
            np.array([float(t.get("rate", 0.0)) for t in terms]),
        )


@dataclass(frozen=True, eq=False)
class TrialFields:
    """Trial pair ``(b*, v*)`` together with the family name and parameters that produced it."""

    b: TrigField
    v: TrigField
    family: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.b.dim != self.v.dim or self.b.components != self.b.dim or self.v.components != self.v.dim:
            raise ValueError("b* and v* must both be d-vector fields on the same torus")

    @property
    def dim(self) -> int:
        return self.b.dim

    @property
    def k_max(self) -> int:
        return max(self.b.k_max, self.v.k_max)

    def scaled(self, factor: float) -> "TrialFields":
        return TrialFields(self.b.scaled(factor), self.v.scaled(factor), self.family, {**self.params, "scale": factor})

    @classmethod
    def zero(cls, dim: int) -> "TrialFields":
        return cls(TrigField.zero(dim), TrigField.zero(dim), "zero", {})

    @classmethod
    def constant(cls, b0) -> "TrialFields":
        b0 = np.asarray(b0, dtype=float)
        return cls(TrigField.constant(b0), TrigField.zero(b0.size), "constant", {"b0": b0.tolist()})

    @classmethod
    def graph_exact(cls, eps: float, k: int = 1, x1_offset: float = 0.0, dim: int = 2) -> "TrialFields":
        """Tangent and velocity fields of the heat-evolved graph ``x2 = c + eps sin(2 pi k x1)``.

        ``b = (1, 2 pi k eps e^{-4 pi^2 k^2 t} cos(2 pi k (x1 - x1_offset)))`` and
        ``v = (b . grad) b``; together they solve the reduced equations exactly.
        """
        rate = (TWO_PI * k) ** 2
        kvec = np.zeros(dim)
        kvec[0] = k
        e1 = np.zeros(dim)
        e1[0] = 1.0
        e2 = np.zeros(dim)
        e2[1] = 1.0
        phase = -TWO_PI * k * x1_offset
        b = TrigField(np.array([e1, TWO_PI * k * eps * e2]), np.array([np.zeros(dim), kvec]),
                      np.array([0.0, phase]), np.array([0.0, rate]))
        v = TrigField(np.array([rate * eps * e2]), np.array([kvec]), np.array([phase + np.pi / 2]), np.array([rate]))
        return cls(b, v, "graph-exact", {"eps": eps, "k": k, "x1_offset": x1_offset})

    @classmethod
    def random(cls, dim: int, seed: int, n_terms: int = 3, k_max: int = 2, amp: float = 0.5,
               rate_max: float = 4.0) -> "TrialFields":
        """Random trigonometric pair: ``n_terms`` modes each for b* and v*, plus a constant part of b*."""
        rng = np.random.default_rng(seed)

        def draw(include_constant: bool) -> TrigField:
            ks = []
            while len(ks) < n_terms:
                k = rng.integers(-k_max, k_max + 1, size=dim)
                if np.any(k != 0):
                    ks.append(k)
            amps = rng.uniform(-amp, amp, size=(n_terms, dim))
            phases = rng.uniform(0.0, TWO_PI, size=n_terms)
            rates = rng.uniform(0.0, rate_max, size=n_terms)
            if include_constant:
                ks.append(np.zeros(dim, dtype=int))
                amps = np.vstack([amps, rng.uniform(-amp, amp, size=(1, dim))])
                phases = np.append(phases, 0.0)
                rates = np.append(rates, 0.0)
            return TrigField(amps, np.array(ks, dtype=float), phases, rates)

        b = draw(True)
        v = draw(False)
        return cls(b, v, "random", {"seed": int(seed), "n_terms": n_terms, "k_max": k_max, "amp": amp, "rate_max": rate_max})

    def to_dict(self) -> dict:
        return {"family": self.family, "params": self.params, "b": self.b.to_dict(), "v": self.v.to_dict()}

    @classmethod
    def from_dict(cls, data: Mapping, dim: int) -> "TrialFields":
        return cls(TrigField.from_dict(data.get("b", {}), dim), TrigField.from_dict(data.get("v", {}), dim),
                   data.get("family", "custom"), dict(data.get("params", {})))
