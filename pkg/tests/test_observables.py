import numpy as np
import pytest

from tdprop import hartree as H, lattice, observables as ob, potentials as P, propagator as pr
from oracles import box_eigenvalues


@pytest.fixture(scope="module")
def box():
    mesh = lattice.build_mesh(1.0, 60, 2)
    return mesh, pr.ground_states(mesh, P.Zero(), 3)


def test_orbital_energy_is_rayleigh_quotient(box):
    mesh, s0 = box
    pen = lattice.hamiltonian_at(mesh, P.Zero(), 0.0)
    np.testing.assert_allclose(ob.orbital_energy(s0, pen), box_eigenvalues(1.0, 3), rtol=1e-6)
    mixed = pr.StateBlock((s0.psi[:, 0] + s0.psi[:, 1]) / np.sqrt(2), 0.0, s0.S)
    assert ob.orbital_energy(mixed, pen)[0] == pytest.approx(box_eigenvalues(1.0, 2).mean(), rel=1e-6)


def test_orbital_energy_shape_mismatch(box):
    mesh, s0 = box
    other = lattice.hamiltonian_at(lattice.build_mesh(1.0, 10, 2), P.Zero(), 0.0)
    with pytest.raises(ValueError):
        ob.orbital_energy(s0, other)


def test_constant_shift_moves_energy(box):
    mesh, s0 = box
    a = ob.orbital_energy(s0, lattice.hamiltonian_at(mesh, P.Zero(), 0.0))
    b = ob.orbital_energy(s0, lattice.hamiltonian_at(mesh, P.Constant(0.3), 0.0))
    np.testing.assert_allclose(b - a, 0.3, atol=1e-12)


def test_dipole_of_identical_densities_is_zero(box):
    mesh, s0 = box
    n = H.density_from_states(s0, mesh)
    assert ob.induced_dipole(n, n) == 0.0


def test_dipole_of_shifted_density():
    mesh = lattice.build_mesh(20.0, 100, 2)
    a = pr.ground_states(mesh, P.HarmonicWell(1.0, 10.0), 1)
    b = pr.ground_states(mesh, P.HarmonicWell(1.0, 10.5), 1)
    na, nb = H.density_from_states(a, mesh, 2), H.density_from_states(b, mesh, 2)
    assert ob.induced_dipole(nb, na) == pytest.approx(2 * 0.5, rel=1e-6)
    assert ob.induced_dipole(na, nb) == pytest.approx(-1.0, rel=1e-6)


def test_dipole_parity_of_symmetric_states(box):
    mesh, s0 = box
    n = H.density_from_states(s0, mesh)
    zero = H.DensityField(n.points, n.weights, np.zeros_like(n.values), 2, n.length)
    assert abs(ob.induced_dipole(n, zero)) < 1e-12


def test_dipole_mesh_mismatch(box):
    mesh, s0 = box
    n = H.density_from_states(s0, mesh)
    other = lattice.build_mesh(1.0, 30, 2)
    m = H.density_from_states(pr.ground_states(other, P.Zero(), 3), other)
    with pytest.raises(ValueError):
        ob.induced_dipole(n, m)


def test_leakage_shrinks_as_m_grows():
    mesh = lattice.build_mesh(6.0, 20, 2)
    pot = P.Composite((P.HarmonicWell(0.8, 3.0), P.SinusoidalDrive(0.5, 1.0, 6.0)))
    s0 = pr.ground_states(mesh, P.HarmonicWell(0.8, 3.0), 2)
    psi = s0.psi + 0.3 * np.sin(np.arange(s0.n) * 0.7)[:, None]
    s0 = pr.StateBlock(psi / pr.StateBlock(psi, 0.0, s0.S).norms(), 0.0, s0.S)
    leaks = []
    for m in (4, 8, 16, 32, mesh.n_dof):
        traj = pr.propagate(pr.SchemeSpec("gauss-sum", 1, 0.5, spectral_m=m), mesh, pot, s0, 1.0)
        leaks.append(traj.max_leakage[-1])
    assert all(a >= b - 1e-14 for a, b in zip(leaks, leaks[1:]))
    assert leaks[0] > 1e-3 and leaks[-1] < 1e-12


def test_trajectory_rejects_non_increasing_times():
    tr = ob.Trajectory(1)
    tr.append(0.0, [1.0], 0.0, 0.0, 0.0, [1.0])
    with pytest.raises(ValueError):
        tr.append(0.0, [1.0], 0.0, 0.0, 0.0, [1.0])


def test_csv_round_trip(tmp_path, box):
    mesh, s0 = box
    traj = pr.propagate(pr.SchemeSpec("gauss-sum", 2, 0.01), mesh, P.SinusoidalDrive(1.0, 3.0, 1.0), s0, 0.05)
    traj.metadata["config_hash"] = "abc"
    path = tmp_path / "t.csv"
    text = traj.to_csv(path)
    lines = text.splitlines()
    assert lines[0].startswith("# ")
    header = [l for l in lines if not l.startswith("#")][0]
    assert header == ",".join(traj.columns())
    back = ob.Trajectory.from_csv(path)
    np.testing.assert_array_equal(back.array(), traj.array())
    assert back.metadata["config_hash"] == "abc"
    assert back.metadata["scheme"] == "gauss-sum"


def test_recorder_stride_and_energy(box):
    mesh, s0 = box
    calls = []
    rec = ob.Recorder(lambda s: lattice.hamiltonian_at(mesh, P.Zero(), s.t), 3, stride=2,
                      energy_fn=lambda s: 1.25, snapshot_fn=lambda k, t, n: calls.append(k),
                      density_fn=lambda s: H.density_from_states(s, mesh))
    pr.propagate(pr.SchemeSpec("rectangular", 1, 0.01), mesh, P.Zero(), s0, 0.05, recorder=rec)
    tr = rec.trajectory
    np.testing.assert_allclose(tr.times, [0.0, 0.02, 0.04])
    assert tr.total_energy == [1.25] * 3
    assert calls == [0, 2, 4]
    np.testing.assert_allclose(tr.dipole, 0.0, atol=1e-12)
