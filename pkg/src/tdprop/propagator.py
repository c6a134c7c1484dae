"""Time-ordered evolution through spectral exponentials.

Three discretisations of ``U(t0 + delta, t0)`` are provided:

* rectangular: freeze ``H`` at the left end of each step;
* Gauss weighted sum: exponentiate ``sum_j xi w_j H(t_j)`` once per step;
* exponential product: ``exp(-i xi w_p H(t_p)) ... exp(-i xi w_1 H(t_1))``,
  earliest node applied first.

Atomic units throughout, so the exponent of a factor is ``xi * w_j * H``.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from . import lattice
from .potentials import weighted_sum
from .spectral import SpectralSolver, apply_expm, dense_solve

log = logging.getLogger(__name__)

SCHEMES = ("rectangular", "gauss-sum", "gauss-product")


@dataclass(frozen=True)
class QuadratureRule:
    kind: str                 # "gauss" or "rectangular"
    p: int
    nodes: np.ndarray
    weights: np.ndarray


def gauss_legendre_rule(p: int) -> QuadratureRule:
    if not 1 <= int(p) <= 64:
        raise ValueError(f"Gauss-Legendre rule needs 1 <= p <= 64, got {p!r}")
    x, w = np.polynomial.legendre.leggauss(int(p))
    return QuadratureRule("gauss", int(p), x, w)


def rectangular_rule(p: int) -> QuadratureRule:
    """``p`` equally spaced interior points with unit weights.

    Nodes are returned on (-1, 1) for symmetry with the Gauss rule; only
    :func:`map_nodes` gives them meaning.
    """
    if int(p) < 0:
        raise ValueError("rectangular rule needs p >= 0")
    p = int(p)
    x = -1.0 + 2.0 * np.arange(1, p + 1) / (p + 1)
    return QuadratureRule("rectangular", p, x, np.ones(p))


def map_nodes(rule: QuadratureRule, t0: float, delta: float) -> tuple[np.ndarray, float]:
    """Physical times of the rule's nodes on ``[t0, t0 + delta]`` and the scale ``xi``.

    For the rectangular rule the spacing is ``delta / (p + 1)`` and the
    interior points are ``t0 + j * spacing`` for ``j = 1..p``.
    """
    if delta <= 0:
        raise ValueError("time step must be positive")
    if rule.kind == "gauss":
        return 0.5 * delta * rule.nodes + (2.0 * t0 + delta) / 2.0, 0.5 * delta
    spacing = delta / (rule.p + 1)
    return t0 + spacing * np.arange(1, rule.p + 1), spacing


@dataclass
class StateBlock:
    """Orbitals as columns of ``psi`` at time ``t``."""

    psi: np.ndarray
    t: float
    S: sp.spmatrix = field(repr=False)

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=complex)
        if self.psi.ndim == 1:
            self.psi = self.psi[:, None]

    @property
    def n(self) -> int:
        return self.psi.shape[0]

    @property
    def n_orbitals(self) -> int:
        return self.psi.shape[1]

    def norms(self) -> np.ndarray:
        """S-norm of every orbital."""
        sq = np.einsum("ij,ij->j", self.psi.conj(), self.S @ self.psi).real
        return np.sqrt(np.maximum(sq, 0.0))

    def copy(self) -> "StateBlock":
        return StateBlock(self.psi.copy(), self.t, self.S)

    def advanced(self, psi: np.ndarray, dt: float) -> "StateBlock":
        return StateBlock(psi, self.t + dt, self.S)


@dataclass(frozen=True)
class SchemeSpec:
    scheme: str
    p: int = 1
    delta: float = 1.0
    spectral_m: int | None = None
    backend: str = "dense"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.p < 1 and self.scheme != "rectangular":
            raise ValueError("p must be at least 1")

    def rule(self) -> QuadratureRule:
        return gauss_legendre_rule(self.p)


def _solver(spectral_m, solver):
    return solver if solver is not None else SpectralSolver(spectral_m)


def _expm_step(pencil, theta, state, spectral_m=None, solver=None):
    decomp = _solver(spectral_m, solver)(pencil)
    return apply_expm(decomp, theta, state.psi)


def step_rectangular(pencil, delta: float, state: StateBlock, spectral_m=None, solver=None) -> StateBlock:
    """Advance by ``exp(-i delta H(t))`` with ``pencil`` assembled at ``state.t``."""
    if delta == 0:
        return state.copy()
    return state.advanced(_expm_step(pencil, delta, state, spectral_m, solver), delta)


def weighted_hamiltonian(mesh, potential, t0: float, delta: float, rule: QuadratureRule,
                         n_points=None) -> lattice.OperatorPencil:
    """``sum_j (xi w_j / delta) H(t_j)``; the kinetic part is reproduced exactly."""
    times, xi = map_nodes(rule, t0, delta)
    coeffs = xi * rule.weights / delta
    K = lattice.assemble_kinetic(mesh)
    S = lattice.assemble_mass(mesh)
    if getattr(potential, "is_zero", False):
        return lattice.OperatorPencil(K.copy(), S, t0 + 0.5 * delta)
    V = lattice.assemble_potential(mesh, weighted_sum(potential, times, coeffs), n_points)
    H = (K + V).tocsr()
    return lattice.OperatorPencil(H, S, t0 + 0.5 * delta)


def step_gauss_weighted_sum(mesh, potential, t0: float, delta: float, rule: QuadratureRule,
                            state: StateBlock, spectral_m=None, solver=None, n_points=None) -> StateBlock:
    if rule.kind != "gauss":
        raise ValueError("the weighted-sum step needs a Gauss-Legendre rule")
    pencil = weighted_hamiltonian(mesh, potential, t0, delta, rule, n_points)
    return state.advanced(_expm_step(pencil, delta, state, spectral_m, solver), delta)


def step_exp_product(mesh, potential, t0: float, delta: float, rule: QuadratureRule,
                     state: StateBlock, spectral_m=None, solver=None, n_points=None) -> StateBlock:
    """Time-ordered product of per-node exponentials.

    With a rectangular rule this is ``p + 1`` left-endpoint sub-steps of
    length ``delta / (p + 1)``.
    """
    times, xi = map_nodes(rule, t0, delta)
    if rule.kind == "rectangular":
        times = np.concatenate([[t0], times])
        weights = np.ones(rule.p + 1)
    else:
        weights = rule.weights
    solve = _solver(spectral_m, solver)
    psi = state.psi
    for tj, wj in zip(times, weights):
        pencil = lattice.hamiltonian_at(mesh, potential, tj, n_points)
        psi = apply_expm(solve(pencil), xi * wj, psi)
    return state.advanced(psi, delta)


def advance(spec: SchemeSpec, mesh, potential, state: StateBlock, solver=None, n_points=None) -> StateBlock:
    """One macro-step of ``spec`` starting at ``state.t``."""
    t0 = state.t
    if spec.scheme == "rectangular":
        pencil = lattice.hamiltonian_at(mesh, potential, t0, n_points)
        return step_rectangular(pencil, spec.delta, state, spec.spectral_m, solver)
    rule = spec.rule()
    if spec.scheme == "gauss-sum":
        return step_gauss_weighted_sum(mesh, potential, t0, spec.delta, rule, state,
                                       spec.spectral_m, solver, n_points)
    return step_exp_product(mesh, potential, t0, spec.delta, rule, state,
                            spec.spectral_m, solver, n_points)


def n_steps(total: float, delta: float, t0: float = 0.0) -> int:
    """Number of steps of ``delta`` covering ``[t0, total]``; must be an integer."""
    span = total - t0
    n = round(span / delta)
    if n < 0 or not math.isclose(n * delta, span, rel_tol=1e-10, abs_tol=1e-12 * max(1.0, abs(total))):
        raise ValueError(f"interval length {span!r} is not a multiple of the step {delta!r}")
    return int(n)


class PropagationError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"propagation failed at step {step}: {cause}")
        self.step = step


def propagate(spec: SchemeSpec, mesh, potential, state0: StateBlock, t_end: float,
              observers: Sequence[Callable] = (), solver=None, n_points=None,
              stepper: Callable | None = None, recorder=None):
    """Apply ``spec`` repeatedly from ``state0.t`` to ``t_end``; return the trajectory.

    Observers are called as ``obs(k, state)`` at every macro-step boundary,
    ``k = 0`` included, after the recorder.  ``stepper(state) -> state``
    replaces the linear step (the nonlinear driver uses it).  Times are
    recomputed as ``t0 + k delta`` so that a run split at a grid point
    reproduces the single run.
    """
    from .observables import Recorder

    t0 = state0.t
    n = n_steps(t_end, spec.delta, t0)
    if solver is None and spec.backend == "feast":
        solver = SpectralSolver(spec.spectral_m, backend="feast")
    if recorder is None:
        recorder = Recorder(lambda s: lattice.hamiltonian_at(mesh, potential, s.t, n_points),
                            state0.n_orbitals, metadata=scheme_metadata(spec, mesh))
    observers = [recorder, *observers]
    state = state0.copy()
    for obs in observers:
        obs(0, state)
    for k in range(1, n + 1):
        try:
            if stepper is not None:
                state = stepper(state)
            else:
                state = advance(spec, mesh, potential, state, solver, n_points)
            state.t = t0 + k * spec.delta
            for obs in observers:
                obs(k, state)
        except Exception as exc:  # noqa: BLE001 - re-raised with the step index
            raise PropagationError(k, exc) from exc
    traj = recorder.trajectory
    traj.final_state = state
    return traj


def scheme_metadata(spec: SchemeSpec, mesh) -> dict:
    return {"scheme": spec.scheme, "p": spec.p, "delta": repr(float(spec.delta)),
            "spectral_m": "full" if spec.spectral_m is None else spec.spectral_m,
            "mesh": mesh.signature()}


def ground_states(mesh, potential, n_orbitals: int, t: float = 0.0, n_points=None) -> StateBlock:
    """Lowest ``n_orbitals`` eigenvectors of ``H(t)`` as an initial block."""
    pencil = lattice.hamiltonian_at(mesh, potential, t, n_points)
    d = dense_solve(pencil, n_orbitals)
    psi = d.vectors.astype(complex)
    # fix the sign so that results do not depend on LAPACK's choice
    idx = np.argmax(np.abs(psi), axis=0)
    psi = psi * np.sign(psi[idx, np.arange(psi.shape[1])].real)[None, :]
    return StateBlock(psi, t, pencil.S)


# binary checkpoint: <q N> <q N_e> <d t> then column-major little-endian complex128
_HEADER = struct.Struct("<qqd")


def write_checkpoint(path, state: StateBlock) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(state.n, state.n_orbitals, float(state.t)))
        fh.write(np.asfortranarray(state.psi).astype("<c16").tobytes(order="F"))


def read_checkpoint(path, S) -> StateBlock:
    with open(path, "rb") as fh:
        raw = fh.read()
    n, ne, t = _HEADER.unpack_from(raw)
    payload = np.frombuffer(raw, dtype="<c16", offset=_HEADER.size)
    if payload.size != n * ne:
        raise ValueError(f"checkpoint payload has {payload.size} values, header says {n}x{ne}")
    psi = payload.reshape((n, ne), order="F").astype(complex)
    return StateBlock(psi, t, S)
