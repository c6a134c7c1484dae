"""Mean-field (Hartree) dynamics on the 1D mesh.

Densities live on the element Gauss points, where the FEM integral of
``|psi_h|^2`` is exact; the Hartree field is built there and assembled
straight into a Galerkin matrix.  The Coulomb kernel is softened to
``1 / sqrt(x**2 + a**2)``.

Energy functional (atomic units, occupation ``f`` = spin factor)::

    E = f sum_j <psi_j | T + V_ex | psi_j> + (s^2 g / 2) int (W * n) n

with ``n = f sum_j |psi_j|^2`` and kernel strength ``g``; it satisfies
``dE/dt = int (dV_ex/dt) n`` along the dynamics ``H = T + V_ex + s^2 g W*n``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from . import lattice
from .spectral import SpectralDecomposition, apply_expm, dense_solve

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SoftKernel:
    softening: float = 0.1
    strength: float = 1.0

    def __post_init__(self):
        if not self.softening > 0:
            raise ValueError("softening length must be positive")

    def __call__(self, x):
        return self.strength / np.sqrt(np.asarray(x, dtype=float) ** 2 + self.softening**2)


@dataclass(frozen=True)
class DensityField:
    points: np.ndarray
    weights: np.ndarray
    values: np.ndarray
    spin_factor: int
    length: float

    def integral(self) -> float:
        return float(np.sum(self.weights * self.values))


def density_from_states(state, mesh, spin_factor: int = 2, n_points: int | None = None) -> DensityField:
    """``n = spin_factor * sum_j |psi_j|^2`` at the element quadrature points."""
    if spin_factor not in (1, 2):
        raise ValueError("spin factor must be 1 or 2")
    quad = lattice.element_quadrature(mesh, n_points)
    E = lattice.interpolation_matrix(mesh, n_points)
    vals = E @ state.psi
    n = spin_factor * np.sum(np.abs(vals) ** 2, axis=1)
    return DensityField(quad.flat_points, quad.flat_weights, n, spin_factor, mesh.length)


@lru_cache(maxsize=16)
def _kernel_matrix(points_key: bytes, n: int, softening: float) -> np.ndarray:
    x = np.frombuffer(points_key, dtype=float, count=n)
    return 1.0 / np.sqrt((x[:, None] - x[None, :]) ** 2 + softening**2)


@dataclass(frozen=True)
class HartreeField:
    """``v_H(x) = g int W(x - y) n(y) dy``, evaluable anywhere."""

    density: DensityField
    kernel: SoftKernel

    def at_points(self) -> np.ndarray:
        d = self.density
        Wm = _kernel_matrix(d.points.tobytes(), d.points.size, float(self.kernel.softening))
        return self.kernel.strength * (Wm @ (d.weights * d.values))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        d = self.density
        mass = d.weights * d.values
        flat = x.reshape(-1)
        out = self.kernel(flat[:, None] - d.points[None, :]) @ mass
        return out.reshape(x.shape)


def hartree_potential(n: DensityField, kernel: SoftKernel) -> HartreeField:
    return HartreeField(n, kernel)


def assemble_hartree(mesh, field: HartreeField, n_points: int | None = None) -> sp.csr_matrix:
    quad = lattice.element_quadrature(mesh, n_points)
    if field.density.points.size == quad.flat_points.size and np.array_equal(field.density.points, quad.flat_points):
        vals = field.at_points()
    else:
        vals = field(quad.flat_points)
    return lattice.assemble_from_values(mesh, vals, n_points)


@lru_cache(maxsize=16)
def _position_decomposition(key: tuple) -> SpectralDecomposition:
    mesh = lattice.build_mesh(*key)
    X = lattice.assemble_potential(mesh, lambda x: x)
    pencil = lattice.OperatorPencil(X, lattice.assemble_mass(mesh), 0.0)
    return dense_solve(pencil)


def impulse_kick(state, mesh, impulse: float):
    """Multiply every orbital by ``exp(-i I x)``.

    Realised as ``exp(-i I S^{-1} X)`` with ``X`` the Galerkin position
    matrix, which is exactly S-unitary on the discrete space.
    """
    if impulse == 0:
        return state.copy()
    decomp = _position_decomposition(mesh.key)
    return state.advanced(apply_expm(decomp, impulse, state.psi), 0.0)


@dataclass(frozen=True)
class SCFOptions:
    """Pass counts for the midpoint density.

    ``midpoint="half-step"`` takes the density of a predicted half-step
    state; ``"average"`` uses the mean of the densities at ``t`` and
    ``t + delta``, whose fixed point conserves the discrete energy exactly
    when ``V_ex`` is static.
    """

    predictor_passes: int = 1
    corrector_passes: int = 1
    tolerance: float = 0.0   # density change that ends the corrector loop early; 0 runs all passes
    midpoint: str = "half-step"

    def __post_init__(self):
        if self.midpoint not in ("half-step", "average"):
            raise ValueError("midpoint must be 'half-step' or 'average'")


class NonlinearModel:
    """External potential + Hartree coupling with a fixed spin factor."""

    def __init__(self, mesh, external, kernel: SoftKernel, spin_factor: int = 2,
                 n_points: int | None = None, solver=None):
        self.mesh = mesh
        self.external = external
        self.kernel = kernel
        self.spin_factor = spin_factor
        self.n_points = n_points
        self.solver = solver

    def density(self, state) -> DensityField:
        return density_from_states(state, self.mesh, self.spin_factor, self.n_points)

    def hamiltonian(self, t: float, density: DensityField | None) -> lattice.OperatorPencil:
        base = lattice.hamiltonian_at(self.mesh, self.external, t, self.n_points)
        if density is None or self.kernel.strength == 0:
            return base
        VH = assemble_hartree(self.mesh, hartree_potential(density, self.kernel), self.n_points)
        return lattice.OperatorPencil((base.H + VH).tocsr(), base.S, t)

    def _exp(self, pencil, theta, psi):
        decomp = (self.solver or dense_solve)(pencil)
        return apply_expm(decomp, theta, psi)

    def energy(self, state, t: float | None = None, s_factor: float = 1.0) -> float:
        return total_energy(state, self.mesh, self.external, self.kernel,
                            state.t if t is None else t, s_factor, self.spin_factor, self.n_points)


def _mix(a: DensityField, b: DensityField) -> DensityField:
    return DensityField(a.points, a.weights, 0.5 * (a.values + b.values), a.spin_factor, a.length)


def nonlinear_midpoint_step(model: NonlinearModel, delta: float, state, scf: SCFOptions = SCFOptions()):
    """Gauss-1 step with the Hamiltonian frozen at ``t + delta/2``.

    Predictor: a half step built from the density at ``t`` gives the
    midpoint density, then a full step with ``H(t + delta/2)``.  Each
    corrector pass rebuilds the midpoint density (see :class:`SCFOptions`)
    and repeats the full step from ``t``.
    """
    if not delta > 0:
        raise ValueError("time step must be positive")
    t = state.t
    t_mid = t + 0.5 * delta
    n_now = model.density(state)
    if model.kernel.strength == 0:
        pencil = model.hamiltonian(t_mid, None)
        return state.advanced(model._exp(pencil, delta, state.psi), delta)

    def half_step_density(n_ref):
        psi_half = model._exp(model.hamiltonian(t + 0.25 * delta, n_ref), 0.5 * delta, state.psi)
        return model.density(state.advanced(psi_half, 0.5 * delta))

    n_ref = n_now
    for _ in range(max(1, scf.predictor_passes)):
        n_mid = half_step_density(n_ref)
        n_ref = _mix(n_now, n_mid)

    psi_new = model._exp(model.hamiltonian(t_mid, n_mid), delta, state.psi)
    for _ in range(scf.corrector_passes):
        if scf.midpoint == "average":
            n_next = _mix(n_now, model.density(state.advanced(psi_new, delta)))
        else:
            n_next = half_step_density(_mix(n_now, n_mid))
        change = float(np.max(np.abs(n_next.values - n_mid.values)))
        n_mid = n_next
        psi_new = model._exp(model.hamiltonian(t_mid, n_mid), delta, state.psi)
        if scf.tolerance and change <= scf.tolerance:
            break
    else:
        if scf.tolerance and scf.corrector_passes:
            log.warning("corrector stopped after %d passes above tolerance", scf.corrector_passes)
    return state.advanced(psi_new, delta)


def nonlinear_rectangular_step(model: NonlinearModel, delta: float, state):
    """Left-endpoint step: ``H(t, n(t))`` frozen over ``delta``."""
    if not delta > 0:
        raise ValueError("time step must be positive")
    pencil = model.hamiltonian(state.t, model.density(state))
    return state.advanced(model._exp(pencil, delta, state.psi), delta)


def total_energy(state, mesh, external, kernel: SoftKernel, t: float, s_factor: float = 1.0,
                 spin_factor: int = 2, n_points: int | None = None) -> float:
    """Mean-field energy; see the module docstring for the normalisation."""
    if not 0 <= s_factor <= 1:
        raise ValueError("s_factor must lie in [0, 1]")
    psi = state.psi
    if not np.any(psi):
        return 0.0
    pencil = lattice.hamiltonian_at(mesh, external, t, n_points)
    linear = spin_factor * float(np.sum(np.einsum("ij,ij->j", psi.conj(), pencil.H @ psi).real))
    if s_factor == 0 or kernel.strength == 0:
        return linear
    n = density_from_states(state, mesh, spin_factor, n_points)
    vh = hartree_potential(n, kernel).at_points()
    return linear + 0.5 * s_factor**2 * float(np.sum(n.weights * vh * n.values))


def power_integral(state, mesh, external, t: float, spin_factor: int = 2, n_points=None, probe=None) -> float:
    """``int (dV_ex/dt)(x, t) n(x) dx``."""
    n = density_from_states(state, mesh, spin_factor, n_points)
    dv = external.eval_dt(n.points, t, probe)
    return float(np.sum(n.weights * dv * n.values))
