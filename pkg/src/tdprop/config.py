"""YAML run configuration.

Quantities may be bare numbers (read in the ``units`` system) or strings
such as ``"5 eV"``, ``"200 THz"``, ``"1.98 nm"``, ``"5 fs"``.  Everything is
converted to atomic units during validation; the rest of the package never
sees SI values.

Minimal example::

    mesh: {length: 1.98 nm, n_elements: 20}
    potential:
      - {kind: harmonic, k: 0.01}
      - {kind: sinusoidal, v0: 5 eV, frequency: 200 THz}
    scheme: {name: gauss-sum, p: 1, delta: 5 fs, periods: 8}
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Annotated, Literal, Optional, Union

import yaml
from pydantic import (BaseModel, BeforeValidator, ConfigDict, Field, ValidationError,
                      ValidationInfo, model_validator)

from . import potentials as pot
from .units import UnitError, to_atomic


class ConfigError(ValueError):
    """Invalid configuration; ``messages`` lists every violation."""

    def __init__(self, messages):
        self.messages = list(messages)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.messages))


def _quantity(dimension):
    def conv(value, info: ValidationInfo):
        system = (info.context or {}).get("units", "atomic")
        try:
            return to_atomic(value, dimension, system)
        except UnitError as exc:
            raise ValueError(str(exc)) from None
    return BeforeValidator(conv)


Length = Annotated[float, _quantity("length")]
Energy = Annotated[float, _quantity("energy")]
Time = Annotated[float, _quantity("time")]
Frequency = Annotated[float, _quantity("frequency")]
Momentum = Annotated[float, _quantity("momentum")]
Stiffness = Annotated[float, _quantity("stiffness")]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class MeshSection(_Section):
    length: Annotated[Length, Field(gt=0)]
    n_elements: int = Field(ge=2)
    order: Literal[1, 2] = 2
    quadrature_points: Optional[int] = Field(default=None, ge=1, le=12)


class ZeroPart(_Section):
    kind: Literal["zero"]


class ConstantPart(_Section):
    kind: Literal["constant"]
    c: Energy = 0.0


class HarmonicPart(_Section):
    kind: Literal["harmonic"]
    k: Stiffness = 1.0
    x0: Optional[Length] = None          # default: centre of the box


class SquarePart(_Section):
    kind: Literal["square"]
    depth: Energy = 1.0
    a: Length = 0.0
    b: Length = 1.0


class SinusoidalPart(_Section):
    kind: Literal["sinusoidal"]
    v0: Energy
    frequency: Optional[Frequency] = Field(default=None, gt=0)
    omega: Optional[Frequency] = Field(default=None, gt=0)
    shape: Literal["linear-ramp", "uniform"] = "linear-ramp"

    @model_validator(mode="after")
    def _one_rate(self):
        if (self.frequency is None) == (self.omega is None):
            raise ValueError("give exactly one of frequency, omega")
        return self

    @property
    def angular(self) -> float:
        return self.omega if self.omega is not None else 2 * math.pi * self.frequency


class TabulatedPart(_Section):
    kind: Literal["tabulated"]
    grid: list[Length]
    values: list[Energy]
    order: Literal[1, 3] = 1


Part = Annotated[Union[ZeroPart, ConstantPart, HarmonicPart, SquarePart, SinusoidalPart, TabulatedPart],
                 Field(discriminator="kind")]


class SchemeSection(_Section):
    name: Literal["rectangular", "gauss-sum", "gauss-product"] = "gauss-sum"
    p: int = Field(default=1, ge=1, le=64)
    delta: Optional[Annotated[Time, Field(gt=0)]] = None
    steps: Optional[int] = Field(default=None, ge=1)
    t_end: Optional[Annotated[Time, Field(gt=0)]] = None
    periods: Optional[float] = Field(default=None, gt=0)
    spectral_m: Optional[int] = Field(default=None, ge=1)
    backend: Literal["dense", "feast"] = "dense"
    n_orbitals: int = Field(default=2, ge=1)

    @model_validator(mode="after")
    def _exactly_one(self):
        errs = []
        if (self.delta is None) == (self.steps is None):
            errs.append("give exactly one of delta, steps")
        if (self.t_end is None) == (self.periods is None):
            errs.append("give exactly one of t_end, periods")
        if errs:
            raise ValueError("; ".join(errs))
        return self


class NonlinearSection(_Section):
    enabled: bool = False
    softening: Annotated[Length, Field(gt=0)] = 0.1
    strength: float = Field(default=1.0, ge=0)
    spin_factor: Literal[1, 2] = 2
    impulse: Momentum = 0.0
    s_factor: float = Field(default=1.0, ge=0, le=1)
    predictor_passes: int = Field(default=1, ge=1)
    corrector_passes: int = Field(default=1, ge=0)
    tolerance: float = Field(default=0.0, ge=0)


class OutputSection(_Section):
    prefix: str = "run"
    stride: int = Field(default=1, ge=1)
    density_every: int = Field(default=0, ge=0)
    checkpoint: bool = True
    figures: bool = True
    verbosity: Literal["quiet", "info", "debug"] = "info"


class EigSection(_Section):
    emin: Optional[Energy] = None
    emax: Optional[Energy] = None
    m: Optional[int] = Field(default=None, ge=1)
    n_points: int = Field(default=8, ge=2, le=64)


class RunConfig(_Section):
    units: Literal["atomic", "si"] = "atomic"
    mesh: MeshSection
    potential: list[Part] = Field(default_factory=list)
    scheme: SchemeSection
    nonlinear: NonlinearSection = NonlinearSection()
    output: OutputSection = OutputSection()
    eig: EigSection = EigSection()

    @model_validator(mode="after")
    def _cross(self):
        drives = [p for p in self.potential if isinstance(p, SinusoidalPart)]
        if self.scheme.periods is not None and not drives:
            raise ValueError("scheme.periods needs a sinusoidal potential part")
        if self.scheme.spectral_m is not None and self.scheme.spectral_m < self.scheme.n_orbitals:
            raise ValueError("scheme.spectral_m must be at least n_orbitals")
        if self.nonlinear.enabled and not (self.scheme.name == "rectangular"
                                           or (self.scheme.name == "gauss-sum" and self.scheme.p == 1)):
            raise ValueError("nonlinear runs support the rectangular scheme or gauss-sum with p = 1")
        n_dof = self.mesh.n_elements * self.mesh.order - 1
        if self.scheme.n_orbitals > n_dof:
            raise ValueError(f"scheme.n_orbitals exceeds the {n_dof} mesh unknowns")
        if self.t_end is not None and self.scheme.delta is not None:
            n = self.t_end / self.scheme.delta
            if abs(n - round(n)) > 1e-8 * max(1.0, n):
                raise ValueError(f"total time is {n:.6g} steps; it must be a whole number of scheme.delta")
        return self

    # derived quantities ------------------------------------------------

    @property
    def period(self) -> float | None:
        drives = [p for p in self.potential if isinstance(p, SinusoidalPart)]
        return 2 * math.pi / drives[0].angular if drives else None

    @property
    def t_end(self) -> float | None:
        if self.scheme.t_end is not None:
            return self.scheme.t_end
        if self.scheme.periods is not None and self.period is not None:
            return self.scheme.periods * self.period
        return None

    @property
    def delta(self) -> float:
        if self.scheme.delta is not None:
            return self.scheme.delta
        return self.t_end / self.scheme.steps

    def potential_model(self) -> pot.PotentialModel:
        L = self.mesh.length
        parts = []
        for p in self.potential:
            if isinstance(p, ZeroPart):
                parts.append(pot.Zero())
            elif isinstance(p, ConstantPart):
                parts.append(pot.Constant(p.c))
            elif isinstance(p, HarmonicPart):
                parts.append(pot.HarmonicWell(p.k, L / 2 if p.x0 is None else p.x0))
            elif isinstance(p, SquarePart):
                parts.append(pot.SquareWell(p.depth, p.a, p.b))
            elif isinstance(p, SinusoidalPart):
                parts.append(pot.SinusoidalDrive(p.v0, p.angular, L, p.shape))
            else:
                parts.append(pot.Tabulated(tuple(p.grid), tuple(p.values), p.order))
        if not parts:
            return pot.Zero()
        return parts[0] if len(parts) == 1 else pot.Composite(tuple(parts))

    def canonical(self) -> dict:
        return self.model_dump(mode="json")

    def digest(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def echo(self) -> dict:
        """Converted values worth printing in output headers."""
        out = {"length_bohr": repr(self.mesh.length), "n_dof": self.mesh.n_elements * self.mesh.order - 1,
               "delta_au": repr(self.delta), "t_end_au": repr(self.t_end)}
        for i, p in enumerate(self.potential):
            if isinstance(p, SinusoidalPart):
                out[f"potential{i}_v0_hartree"] = repr(p.v0)
                out[f"potential{i}_omega_au"] = repr(p.angular)
        return out


def _format(err) -> str:
    loc = ".".join(str(x) for x in err["loc"]) or "<root>"
    msg = err["msg"].removeprefix("Value error, ")
    if err["type"] == "extra_forbidden":
        msg = "unknown key"
    elif err["type"] == "missing":
        msg = "missing required key"
    return f"{loc}: {msg}"


def config_from_dict(data) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(["<root>: expected a mapping"])
    units = data.get("units", "atomic")
    if units not in ("atomic", "si"):
        units = "atomic"     # the schema reports the bad value
    try:
        cfg = RunConfig.model_validate(data, context={"units": units})
    except ValidationError as exc:
        raise ConfigError([_format(e) for e in exc.errors()]) from None
    if cfg.t_end is None:
        raise ConfigError(["scheme: total time could not be determined"])
    return cfg


def parse_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"<root>: YAML syntax error: {exc}"]) from None
    return config_from_dict(data)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
