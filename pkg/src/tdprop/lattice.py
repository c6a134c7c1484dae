"""Uniform 1D Lagrange finite elements on [0, L] with homogeneous Dirichlet ends.

All matrices act on the interior degrees of freedom only; the two boundary
nodes are eliminated.  Units are atomic (hbar = m = 1) unless the caller
passes other values to :func:`assemble_kinetic`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class Mesh1D:
    length: float
    n_elements: int
    order: int
    node_coords: np.ndarray = field(repr=False, compare=False)

    @property
    def h(self) -> float:
        return self.length / self.n_elements

    @property
    def n_nodes(self) -> int:
        return self.n_elements * self.order + 1

    @property
    def n_dof(self) -> int:
        return self.n_elements * self.order - 1

    @property
    def dof_coords(self) -> np.ndarray:
        return self.node_coords[1:-1]

    @property
    def key(self) -> tuple:
        return (float(self.length), int(self.n_elements), int(self.order))

    def signature(self) -> str:
        return f"P{self.order}-L{self.length!r}-ne{self.n_elements}"


@dataclass(frozen=True)
class OperatorPencil:
    """Discrete Hamiltonian ``H`` and overlap ``S`` assembled at ``t``."""

    H: sp.csr_matrix
    S: sp.csr_matrix
    t: float

    @property
    def n(self) -> int:
        return self.H.shape[0]


def build_mesh(length: float, n_elements: int, order: int = 2) -> Mesh1D:
    if not np.isfinite(length) or length <= 0:
        raise ValueError(f"domain length must be positive, got {length!r}")
    if order not in (1, 2):
        raise ValueError(f"element order must be 1 or 2, got {order!r}")
    if int(n_elements) != n_elements or n_elements < 2:
        raise ValueError(f"need at least 2 elements, got {n_elements!r}")
    n_elements = int(n_elements)
    coords = np.linspace(0.0, float(length), n_elements * order + 1)
    coords.setflags(write=False)
    return Mesh1D(float(length), n_elements, int(order), coords)


# reference element [-1, 1]; local node order is left, (mid), right
def _shape(order: int, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if order == 1:
        phi = np.stack([(1 - xi) / 2, (1 + xi) / 2], axis=-1)
        dphi = np.stack([-0.5 * np.ones_like(xi), 0.5 * np.ones_like(xi)], axis=-1)
    else:
        phi = np.stack([xi * (xi - 1) / 2, 1 - xi**2, xi * (xi + 1) / 2], axis=-1)
        dphi = np.stack([xi - 0.5, -2 * xi, xi + 0.5], axis=-1)
    return phi, dphi


@dataclass(frozen=True)
class ElementQuadrature:
    """Gauss-Legendre points of every element, flattened element-major."""

    points: np.ndarray      # (n_el, q) physical coordinates
    weights: np.ndarray     # (n_el, q) physical weights (include h/2)
    phi: np.ndarray         # (q, nloc)
    dphi: np.ndarray        # (q, nloc) derivative w.r.t. x
    connectivity: np.ndarray  # (n_el, nloc) global node indices

    @property
    def flat_points(self) -> np.ndarray:
        return self.points.ravel()

    @property
    def flat_weights(self) -> np.ndarray:
        return self.weights.ravel()


def default_quadrature_points(order: int) -> int:
    # exact for V linear in x against phi_i phi_j, i.e. degree 2*order + 1
    return order + 2


@lru_cache(maxsize=64)
def _element_quadrature(key: tuple, n_points: int) -> ElementQuadrature:
    length, n_el, order = key
    h = length / n_el
    xi, wi = np.polynomial.legendre.leggauss(n_points)
    phi, dphi = _shape(order, xi)
    left = np.arange(n_el) * h
    points = left[:, None] + (xi[None, :] + 1) * (h / 2)
    weights = np.broadcast_to(wi * (h / 2), (n_el, n_points)).copy()
    conn = np.arange(n_el)[:, None] * order + np.arange(order + 1)[None, :]
    for a in (points, weights, phi, dphi, conn):
        a.setflags(write=False)
    return ElementQuadrature(points, weights, phi, dphi * (2 / h), conn)


def element_quadrature(mesh: Mesh1D, n_points: int | None = None) -> ElementQuadrature:
    if n_points is None:
        n_points = default_quadrature_points(mesh.order)
    if n_points < 1:
        raise ValueError("need at least one quadrature point per element")
    return _element_quadrature(mesh.key, int(n_points))


@lru_cache(maxsize=64)
def _pattern(key: tuple):
    """Shared CSR pattern of the interior matrices and the slot of every local entry."""
    length, n_el, order = key
    nloc = order + 1
    conn = np.arange(n_el)[:, None] * order + np.arange(nloc)[None, :]
    n_in = n_el * order - 1
    r = np.repeat(conn, nloc, axis=1).reshape(n_el, nloc, nloc) - 1
    c = np.repeat(conn[:, None, :], nloc, axis=1) - 1
    keep = (r >= 0) & (r < n_in) & (c >= 0) & (c < n_in)
    flat = np.unique(r[keep] * n_in + c[keep])
    rows, cols = np.divmod(flat, n_in)
    indptr = np.searchsorted(rows, np.arange(n_in + 1)).astype(np.int32)
    slot = np.full(r.shape, -1, dtype=np.int64)
    slot[keep] = np.searchsorted(flat, r[keep] * n_in + c[keep])
    for a in (indptr, cols, slot):
        a.setflags(write=False)
    return indptr, cols.astype(np.int32), slot, n_in


def _scatter(mesh: Mesh1D, quad: ElementQuadrature, local: np.ndarray) -> sp.csr_matrix:
    """Sum (n_el, nloc, nloc) element matrices and drop the Dirichlet nodes."""
    indptr, indices, slot, n_in = _pattern(mesh.key)
    keep = slot >= 0
    data = np.bincount(slot[keep], weights=local[keep], minlength=indices.size)
    return sp.csr_matrix((data, indices, indptr), shape=(n_in, n_in))


def same_pattern_sum(A: sp.csr_matrix, B: sp.csr_matrix) -> sp.csr_matrix:
    """``A + B`` for two matrices on the shared mesh pattern."""
    if A.indices is B.indices or (np.array_equal(A.indptr, B.indptr) and np.array_equal(A.indices, B.indices)):
        return sp.csr_matrix((A.data + B.data, A.indices, A.indptr), shape=A.shape)
    return (A + B).tocsr()


def _full_mass(mesh: Mesh1D) -> sp.csr_matrix:
    quad = element_quadrature(mesh, mesh.order + 1)
    local = np.einsum("eq,qa,qb->eab", quad.weights, quad.phi, quad.phi)
    conn = quad.connectivity
    nloc = conn.shape[1]
    rows = np.repeat(conn, nloc, axis=1).ravel()
    cols = np.tile(conn, (1, nloc)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes,) * 2).tocsr()


@lru_cache(maxsize=64)
def _kinetic_cached(key: tuple, coeff: float) -> sp.csr_matrix:
    mesh = build_mesh(*key)
    quad = element_quadrature(mesh, mesh.order + 1)
    local = coeff * np.einsum("eq,qa,qb->eab", quad.weights, quad.dphi, quad.dphi)
    return _scatter(mesh, quad, local)


@lru_cache(maxsize=64)
def _mass_cached(key: tuple) -> sp.csr_matrix:
    mesh = build_mesh(*key)
    quad = element_quadrature(mesh, mesh.order + 1)
    local = np.einsum("eq,qa,qb->eab", quad.weights, quad.phi, quad.phi)
    return _scatter(mesh, quad, local)


def assemble_kinetic(mesh: Mesh1D, hbar: float = 1.0, mass: float = 1.0) -> sp.csr_matrix:
    """Stiffness matrix scaled by hbar**2 / (2 m)."""
    return _kinetic_cached(mesh.key, hbar**2 / (2.0 * mass))


def assemble_mass(mesh: Mesh1D) -> sp.csr_matrix:
    return _mass_cached(mesh.key)


def full_mass_matrix(mesh: Mesh1D) -> sp.csr_matrix:
    """Mass matrix including the boundary nodes (before elimination)."""
    return _full_mass(mesh)


def assemble_from_values(mesh: Mesh1D, values: np.ndarray, n_points: int | None = None) -> sp.csr_matrix:
    """Galerkin matrix of a field given at the element quadrature points.

    ``values`` has shape ``(n_elements, q)`` or the flattened equivalent.
    """
    quad = element_quadrature(mesh, n_points)
    vals = np.asarray(values, dtype=float).reshape(quad.points.shape)
    bad = ~np.isfinite(vals)
    if bad.any():
        elem = int(np.argwhere(bad)[0, 0])
        x0, x1 = elem * mesh.h, (elem + 1) * mesh.h
        raise FloatingPointError(
            f"potential is not finite in element {elem} ([{x0:.6g}, {x1:.6g}])"
        )
    local = np.einsum("eq,qa,qb->eab", quad.weights * vals, quad.phi, quad.phi)
    return _scatter(mesh, quad, local)


def assemble_potential(mesh: Mesh1D, potential, n_points: int | None = None) -> sp.csr_matrix:
    """Galerkin matrix ``int V phi_i phi_j`` of a static spatial function.

    ``potential`` is any vectorised callable ``V(x)``.
    """
    quad = element_quadrature(mesh, n_points)
    vals = np.asarray(potential(quad.points), dtype=float)
    vals = np.broadcast_to(vals, quad.points.shape)
    return assemble_from_values(mesh, vals, n_points)


def hamiltonian_at(mesh: Mesh1D, potential_model, t: float, n_points: int | None = None) -> OperatorPencil:
    """Assemble ``H(t) = kinetic + V(., t)`` and the overlap ``S``."""
    K = assemble_kinetic(mesh)
    S = assemble_mass(mesh)
    if potential_model is None or getattr(potential_model, "is_zero", False):
        return OperatorPencil(K.copy(), S, float(t))
    V = assemble_potential(mesh, lambda x: potential_model.eval(x, t), n_points)
    return OperatorPencil(same_pattern_sum(K, V), S, float(t))


def interpolation_matrix(mesh: Mesh1D, n_points: int | None = None) -> sp.csr_matrix:
    """Map interior nodal coefficients to values at the element quadrature points."""
    return _interp_cached(mesh.key, int(n_points or default_quadrature_points(mesh.order)))


@lru_cache(maxsize=64)
def _interp_cached(key: tuple, n_points: int) -> sp.csr_matrix:
    mesh = build_mesh(*key)
    quad = element_quadrature(mesh, n_points)
    n_el, q = quad.points.shape
    nloc = quad.connectivity.shape[1]
    rows = np.repeat(np.arange(n_el * q), nloc)
    cols = np.repeat(quad.connectivity, q, axis=0).ravel()
    vals = np.tile(quad.phi, (n_el, 1)).ravel()
    E = sp.coo_matrix((vals, (rows, cols)), shape=(n_el * q, mesh.n_nodes)).tocsr()
    return E[:, 1:-1].tocsr()
