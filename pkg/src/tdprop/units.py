"""Conversion between SI-style inputs and atomic units (hbar = m_e = e = 1)."""

from __future__ import annotations

import math
import re

from scipy import constants as C

HARTREE_EV = C.physical_constants["Hartree energy in eV"][0]
HARTREE_J = C.physical_constants["Hartree energy"][0]
BOHR_M = C.physical_constants["Bohr radius"][0]
AU_TIME_S = C.physical_constants["atomic unit of time"][0]
AU_MOMENTUM = C.physical_constants["atomic unit of momentum"][0]

# dimension -> {unit: factor to atomic units}
UNITS = {
    "length": {"bohr": 1.0, "au": 1.0, "m": 1 / BOHR_M, "nm": 1e-9 / BOHR_M, "angstrom": 1e-10 / BOHR_M,
               "A": 1e-10 / BOHR_M},
    "energy": {"hartree": 1.0, "Ha": 1.0, "au": 1.0, "eV": 1 / HARTREE_EV, "J": 1 / HARTREE_J},
    "time": {"au": 1.0, "s": 1 / AU_TIME_S, "fs": 1e-15 / AU_TIME_S, "as": 1e-18 / AU_TIME_S},
    "frequency": {"au": 1.0, "Hz": AU_TIME_S, "THz": 1e12 * AU_TIME_S, "PHz": 1e15 * AU_TIME_S},
    "momentum": {"au": 1.0, "kg*m/s": 1 / AU_MOMENTUM},
    "stiffness": {"au": 1.0, "hartree/bohr^2": 1.0, "eV/nm^2": (1 / HARTREE_EV) * (BOHR_M / 1e-9) ** 2},
}

SI_BASE = {"length": "m", "energy": "J", "time": "s", "frequency": "Hz", "momentum": "kg*m/s",
           "stiffness": None}

_QUANTITY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*([A-Za-z][\w*/^]*)?\s*$")


class UnitError(ValueError):
    pass


def to_atomic(value, dimension: str, system: str = "atomic") -> float:
    """Convert a number or a ``"<number> <unit>"`` string to atomic units.

    Bare numbers are read in ``system`` units ("atomic" or "si").
    """
    table = UNITS[dimension]
    if isinstance(value, bool):
        raise UnitError(f"expected a {dimension}, got a boolean")
    if isinstance(value, (int, float)):
        if system == "atomic":
            return float(value)
        base = SI_BASE[dimension]
        if base is None:
            raise UnitError(f"bare numbers for {dimension} need explicit units in SI mode")
        return float(value) * table[base]
    if not isinstance(value, str):
        raise UnitError(f"cannot read {value!r} as a {dimension}")
    m = _QUANTITY.match(value)
    if not m:
        raise UnitError(f"cannot parse quantity {value!r}")
    number, unit = float(m.group(1)), m.group(2)
    if unit is None:
        return to_atomic(number, dimension, system)
    if unit not in table:
        for dim, t in UNITS.items():
            if unit in t:
                raise UnitError(f"unit mismatch: {value!r} has dimension {dim}, expected {dimension}")
        raise UnitError(f"unknown unit {unit!r} in {value!r}")
    return number * table[unit]


def angular_frequency(f_atomic: float) -> float:
    return 2.0 * math.pi * f_atomic
