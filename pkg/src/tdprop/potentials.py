"""External potential models ``V(x, t)``.

Every model is an immutable dataclass with a vectorised ``eval(x, t)``.
Models that know their own time derivative override ``eval_dt``; the rest
fall back to a central difference.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class TimeDerivativeProbe:
    eta: float = 1e-4


class PotentialModel:
    kind = "abstract"
    is_static = False
    is_zero = False
    has_analytic_dt = False

    def eval(self, x, t):
        raise NotImplementedError

    def eval_dt(self, x, t, probe: TimeDerivativeProbe | None = None):
        if self.is_static:
            return np.zeros_like(np.asarray(x, dtype=float))
        eta = (probe or TimeDerivativeProbe()).eta
        return (self.eval(x, t + eta) - self.eval(x, t - eta)) / (2 * eta)

    def __call__(self, x, t):
        return self.eval(x, t)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        d.update(asdict(self))
        return d


@dataclass(frozen=True)
class Zero(PotentialModel):
    kind = "zero"
    is_static = True
    is_zero = True
    has_analytic_dt = True

    def eval(self, x, t):
        return np.zeros_like(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class Constant(PotentialModel):
    c: float = 0.0
    kind = "constant"
    is_static = True
    has_analytic_dt = True

    def eval(self, x, t):
        return np.full_like(np.asarray(x, dtype=float), self.c)


@dataclass(frozen=True)
class HarmonicWell(PotentialModel):
    """``(k/2) (x - x0)**2``."""

    k: float = 1.0
    x0: float = 0.0
    kind = "harmonic"
    is_static = True
    has_analytic_dt = True

    def eval(self, x, t):
        x = np.asarray(x, dtype=float)
        return 0.5 * self.k * (x - self.x0) ** 2


@dataclass(frozen=True)
class SquareWell(PotentialModel):
    """``-depth`` on ``[a, b]``, zero elsewhere."""

    depth: float = 1.0
    a: float = 0.0
    b: float = 1.0
    kind = "square"
    is_static = True
    has_analytic_dt = True

    def eval(self, x, t):
        x = np.asarray(x, dtype=float)
        return np.where((x >= self.a) & (x <= self.b), -self.depth, 0.0)


@dataclass(frozen=True)
class SinusoidalDrive(PotentialModel):
    """``v0 * shape(x) * sin(omega t)``.

    ``shape="linear-ramp"`` is ``(2x - L)/L`` (a uniform field along x);
    ``shape="uniform"`` is 1 everywhere, which commutes with every static
    Hamiltonian and is handy as an exactly solvable control.
    """

    v0: float = 1.0
    omega: float = 1.0
    length: float = 1.0
    shape: str = "linear-ramp"
    kind = "sinusoidal"
    has_analytic_dt = True

    def __post_init__(self):
        if self.shape not in ("linear-ramp", "uniform"):
            raise ValueError(f"unknown drive shape {self.shape!r}")

    def profile(self, x):
        x = np.asarray(x, dtype=float)
        if self.shape == "uniform":
            return np.ones_like(x)
        return (2.0 * x - self.length) / self.length

    def eval(self, x, t):
        return self.v0 * self.profile(x) * np.sin(self.omega * t)

    def eval_dt(self, x, t, probe=None):
        return self.v0 * self.profile(x) * self.omega * np.cos(self.omega * t)


@dataclass(frozen=True)
class Tabulated(PotentialModel):
    """Static potential interpolated from grid values (order 1: linear, 3: cubic spline)."""

    grid: tuple = ()
    values: tuple = ()
    order: int = 1
    kind = "tabulated"
    is_static = True
    has_analytic_dt = True

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if g.ndim != 1 or g.shape != v.shape or g.size < 2:
            raise ValueError("tabulated potential needs matching 1D grid/values, at least 2 points")
        if np.any(np.diff(g) <= 0):
            raise ValueError("tabulated grid must be strictly increasing")
        if self.order not in (1, 3):
            raise ValueError("interpolation order must be 1 or 3")
        object.__setattr__(self, "grid", tuple(map(float, g)))
        object.__setattr__(self, "values", tuple(map(float, v)))

    def eval(self, x, t):
        x = np.asarray(x, dtype=float)
        if self.order == 1:
            return np.interp(x, self.grid, self.values)
        from scipy.interpolate import CubicSpline
        return CubicSpline(self.grid, self.values)(x)


@dataclass(frozen=True)
class Composite(PotentialModel):
    parts: tuple = field(default_factory=tuple)
    kind = "composite"

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))

    @property
    def is_static(self):
        return all(p.is_static for p in self.parts)

    @property
    def is_zero(self):
        return all(p.is_zero for p in self.parts)

    @property
    def has_analytic_dt(self):
        return all(p.has_analytic_dt for p in self.parts)

    def eval(self, x, t):
        out = np.zeros_like(np.asarray(x, dtype=float))
        for p in self.parts:
            out = out + p.eval(x, t)
        return out

    def eval_dt(self, x, t, probe=None):
        out = np.zeros_like(np.asarray(x, dtype=float))
        for p in self.parts:
            out = out + p.eval_dt(x, t, probe)
        return out

    def to_dict(self):
        return {"kind": self.kind, "parts": [p.to_dict() for p in self.parts]}


_KINDS = {cls.kind: cls for cls in (Zero, Constant, HarmonicWell, SquareWell,
                                    SinusoidalDrive, Tabulated, Composite)}


def potential_from_dict(d: dict) -> PotentialModel:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in _KINDS:
        raise ValueError(f"unknown potential kind {kind!r}; expected one of {sorted(_KINDS)}")
    if kind == "composite":
        return Composite(tuple(potential_from_dict(p) for p in d.get("parts", [])))
    return _KINDS[kind](**d)


def _check(model, x, length):
    x = np.asarray(x, dtype=float)
    if length is not None:
        tol = 1e-12 * length
        if np.any(x < -tol) or np.any(x > length + tol):
            raise ValueError(f"x outside the domain [0, {length}]")
    return x


def evaluate(model: PotentialModel, x, t: float, length: float | None = None):
    """``V(x, t)`` with domain and finiteness checks."""
    x = _check(model, x, length)
    v = model.eval(x, t)
    if not np.all(np.isfinite(v)):
        raise FloatingPointError(f"{model.kind} potential is not finite at t={t!r}")
    return v


def evaluate_dt(model: PotentialModel, x, t: float, probe: TimeDerivativeProbe | None = None,
                length: float | None = None):
    x = _check(model, x, length)
    v = model.eval_dt(x, t, probe)
    if not np.all(np.isfinite(v)):
        raise FloatingPointError(f"{model.kind} potential derivative is not finite at t={t!r}")
    return v


def weighted_sum(model: PotentialModel, times: Sequence[float], coeffs: Sequence[float]):
    """Static callable ``x -> sum_j c_j V(x, t_j)``."""
    times = [float(t) for t in times]
    coeffs = [float(c) for c in coeffs]

    def field(x):
        out = np.zeros_like(np.asarray(x, dtype=float))
        for c, t in zip(coeffs, times):
            out = out + c * model.eval(x, t)
        return out

    return field
