"""Scalar diagnostics along a trajectory and their CSV form."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

FLOAT_FMT = "{:.17g}"


def orbital_energy(state, pencil, imag_tol: float = 1e-10) -> np.ndarray:
    """``E_j = psi_j^H H psi_j`` for every orbital (real part)."""
    psi = state.psi
    if psi.shape[0] != pencil.H.shape[0]:
        raise ValueError(f"state has {psi.shape[0]} rows, Hamiltonian is {pencil.H.shape[0]}")
    e = np.einsum("ij,ij->j", psi.conj(), pencil.H @ psi)
    scale = max(1.0, float(np.max(np.abs(e.real)))) if e.size else 1.0
    if e.size and np.max(np.abs(e.imag)) > imag_tol * scale:
        log.warning("orbital energy has imaginary residual %.3e", np.max(np.abs(e.imag)))
    return e.real


def leakage(state) -> float:
    """Largest norm loss ``1 - |psi_j|_S^2`` over the orbitals."""
    n = state.norms()
    return float(np.max(1.0 - n**2)) if n.size else 0.0


def induced_dipole(n_t, n_0, length: float | None = None) -> float:
    """``int (x - x_c) (n_t - n_0) dx`` with ``x_c = L/2``.

    Both densities must be sampled at the same points; ``length`` defaults
    to the one stored on the density.
    """
    if n_t.points.shape != n_0.points.shape or not np.array_equal(n_t.points, n_0.points):
        raise ValueError("densities live on different meshes")
    L = n_t.length if length is None else length
    return float(np.sum(n_t.weights * (n_t.points - 0.5 * L) * (n_t.values - n_0.values)))


@dataclass
class Trajectory:
    n_orbitals: int
    metadata: dict = field(default_factory=dict)
    times: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    total_energy: list = field(default_factory=list)
    dipole: list = field(default_factory=list)
    max_leakage: list = field(default_factory=list)
    norms: list = field(default_factory=list)
    final_state: object = field(default=None, repr=False)

    def append(self, t, energies, total_energy, dipole, max_leakage, norms):
        if self.times and not t > self.times[-1]:
            raise ValueError("trajectory times must be strictly increasing")
        self.times.append(float(t))
        self.energies.append(np.asarray(energies, dtype=float).copy())
        self.total_energy.append(float(total_energy))
        self.dipole.append(float(dipole))
        self.max_leakage.append(float(max_leakage))
        self.norms.append(np.asarray(norms, dtype=float).copy())

    def __len__(self):
        return len(self.times)

    def columns(self) -> list[str]:
        ne = self.n_orbitals
        return (["t"] + [f"E_{j + 1}" for j in range(ne)] + ["total_energy", "dipole", "max_leakage"]
                + [f"norm_{j + 1}" for j in range(ne)])

    def array(self) -> np.ndarray:
        rows = [np.concatenate([[t], e, [te, d, lk], nm]) for t, e, te, d, lk, nm in
                zip(self.times, self.energies, self.total_energy, self.dipole, self.max_leakage, self.norms)]
        return np.array(rows).reshape(len(rows), len(self.columns()))

    def to_csv(self, path_or_buf=None) -> str:
        buf = io.StringIO()
        for k in sorted(self.metadata):
            buf.write(f"# {k}={self.metadata[k]}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns())
        for row in self.array():
            w.writerow([FLOAT_FMT.format(v) for v in row])
        text = buf.getvalue()
        if path_or_buf is not None:
            with open(path_or_buf, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(path, newline="") as fh:
            lines = fh.read().splitlines()
        meta = {}
        body = []
        for line in lines:
            if line.startswith("# "):
                k, _, v = line[2:].partition("=")
                meta[k] = v
            else:
                body.append(line)
        rows = list(csv.reader(body))
        header, data = rows[0], np.array([[float(v) for v in r] for r in rows[1:]])
        ne = sum(1 for h in header if h.startswith("E_"))
        traj = cls(ne, meta)
        for r in data.reshape(-1, len(header)):
            traj.append(r[0], r[1:1 + ne], r[1 + ne], r[2 + ne], r[3 + ne], r[4 + ne:])
        return traj


class Recorder:
    """Observer that fills a :class:`Trajectory` at every macro-step boundary.

    ``hamiltonian_fn(state) -> OperatorPencil`` gives ``H`` at ``state.t``;
    ``energy_fn(state) -> float`` supplies the total energy column (NaN if
    absent); ``density_fn(state) -> DensityField`` enables the dipole column.
    """

    def __init__(self, hamiltonian_fn, n_orbitals, stride=1, energy_fn=None,
                 density_fn=None, metadata=None, snapshot_fn=None):
        self.hamiltonian_fn = hamiltonian_fn
        self.stride = max(1, int(stride))
        self.energy_fn = energy_fn
        self.density_fn = density_fn
        self.snapshot_fn = snapshot_fn
        self.trajectory = Trajectory(n_orbitals, dict(metadata or {}))
        self._n0 = None

    def __call__(self, k, state):
        if k % self.stride:
            return
        pencil = self.hamiltonian_fn(state)
        e = orbital_energy(state, pencil)
        total = self.energy_fn(state) if self.energy_fn else float("nan")
        dip = 0.0
        if self.density_fn is not None:
            n = self.density_fn(state)
            if self._n0 is None:
                self._n0 = n
            dip = induced_dipole(n, self._n0)
            if self.snapshot_fn is not None:
                self.snapshot_fn(k, state.t, n)
        self.trajectory.append(state.t, e, total, dip, leakage(state), state.norms())
