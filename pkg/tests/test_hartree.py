import numpy as np
import pytest

from tdprop import hartree as H, lattice, potentials as P, propagator as pr
from tdprop.observables import induced_dipole

L = 37.4165772929741
WELL = P.HarmonicWell(0.01, L / 2)


@pytest.fixture(scope="module")
def setup():
    mesh = lattice.build_mesh(L, 20, 2)
    s0 = pr.ground_states(mesh, WELL, 2)
    return mesh, s0


def model(mesh, strength=1.0, external=WELL, a=1.0):
    return H.NonlinearModel(mesh, external, H.SoftKernel(a, strength), 2)


def test_kernel_values():
    k = H.SoftKernel(0.5, 2.0)
    x = np.linspace(-5, 5, 101)
    w = k(x)
    assert w.max() == pytest.approx(2.0 / 0.5)
    assert np.all(w > 0)
    np.testing.assert_allclose(w, w[::-1])
    assert k(3.0) == pytest.approx(2.0 / np.sqrt(9.25))
    with pytest.raises(ValueError):
        H.SoftKernel(0.0)


@pytest.mark.parametrize("f", [1, 2])
def test_density_integral(setup, f):
    mesh, s0 = setup
    n = H.density_from_states(s0, mesh, f)
    assert n.integral() == pytest.approx(f * s0.n_orbitals, abs=1e-12)
    assert np.all(n.values >= 0)


def test_density_rejects_bad_spin(setup):
    mesh, s0 = setup
    with pytest.raises(ValueError):
        H.density_from_states(s0, mesh, 3)


def test_hartree_field_bounds(setup):
    mesh, s0 = setup
    n = H.density_from_states(s0, mesh, 2)
    kern = H.SoftKernel(1.0, 1.0)
    v = H.hartree_potential(n, kern)
    vals = v.at_points()
    assert np.all(vals > 0)
    assert vals.max() <= kern.strength / kern.softening * n.integral() + 1e-12
    np.testing.assert_allclose(v(n.points), vals, rtol=1e-12)
    # symmetric ground-state density gives a field symmetric about L/2
    np.testing.assert_allclose(v(np.array([5.0])), v(np.array([L - 5.0])), rtol=1e-7)


def test_hartree_matrix_is_symmetric_positive(setup):
    mesh, s0 = setup
    n = H.density_from_states(s0, mesh, 2)
    VH = H.assemble_hartree(mesh, H.hartree_potential(n, H.SoftKernel())).toarray()
    np.testing.assert_allclose(VH, VH.T, atol=1e-14)
    assert np.linalg.eigvalsh(VH).min() > 0


def test_kick_preserves_norm_and_sets_velocity(setup):
    mesh, s0 = setup
    I = 0.01
    kicked = H.impulse_kick(s0, mesh, I)
    np.testing.assert_allclose(kicked.norms(), s0.norms(), atol=1e-10)
    assert H.impulse_kick(s0, mesh, 0.0).psi is not s0.psi
    m = model(mesh)
    n0 = m.density(kicked)
    d = 0.05
    s1 = H.nonlinear_midpoint_step(m, d, kicked)
    rate = induced_dipole(m.density(s1), n0) / d
    assert rate == pytest.approx(-2 * kicked.n_orbitals * I, rel=1e-2)   # 20 elements: ~0.6% mesh error


def test_zero_strength_matches_linear_midpoint(setup):
    mesh, s0 = setup
    drive = P.Composite((WELL, P.SinusoidalDrive(0.1, 0.05, L)))
    kicked = H.impulse_kick(s0, mesh, 0.01)
    m = model(mesh, strength=0.0, external=drive)
    a = kicked
    for _ in range(10):
        t = a.t
        a = H.nonlinear_midpoint_step(m, 1.0, a)
        a.t = t + 1.0
    b = pr.propagate(pr.SchemeSpec("gauss-sum", 1, 1.0), mesh, drive, kicked, 10.0).final_state
    np.testing.assert_allclose(a.psi, b.psi, atol=1e-12)


def test_charge_and_norm_conserved(setup):
    mesh, s0 = setup
    m = model(mesh)
    st = H.impulse_kick(s0, mesh, 0.05)
    for _ in range(30):
        st = H.nonlinear_midpoint_step(m, 1.0, st)
    np.testing.assert_allclose(st.norms(), 1.0, atol=1e-12)
    assert m.density(st).integral() == pytest.approx(4.0, abs=1e-11)


def test_scf_option_validation():
    with pytest.raises(ValueError):
        H.SCFOptions(midpoint="trapezoid")
    with pytest.raises(ValueError):
        H.nonlinear_midpoint_step(None, 0.0, None)


def _drift(m, s0, delta, T, scf):
    E0 = m.energy(s0)
    st, worst = s0, 0.0
    for k in range(int(round(T / delta))):
        st = H.nonlinear_midpoint_step(m, delta, st, scf)
        st.t = (k + 1) * delta
        worst = max(worst, abs(m.energy(st) - E0))
    return worst / T


def test_energy_drift_second_order(setup):
    mesh, s0 = setup
    m = model(mesh)
    kicked = H.impulse_kick(s0, mesh, 0.05)
    d1 = _drift(m, kicked, 1.0, 20.0, H.SCFOptions())
    d2 = _drift(m, kicked, 0.5, 20.0, H.SCFOptions())
    assert d1 / d2 == pytest.approx(4.0, rel=0.3)


def test_average_corrector_conserves_at_convergence(setup):
    mesh, s0 = setup
    m = model(mesh)
    kicked = H.impulse_kick(s0, mesh, 0.05)
    avg = _drift(m, kicked, 1.0, 20.0, H.SCFOptions(1, 40, 1e-14, "average"))
    half = _drift(m, kicked, 1.0, 20.0, H.SCFOptions())
    assert avg < 1e-3 * half


def test_driven_energy_balance(setup):
    mesh, s0 = setup
    drive = P.Composite((WELL, P.SinusoidalDrive(0.05, 0.1, L)))
    m = model(mesh, external=drive)

    def mismatch(delta, T=30.0):
        st = s0.copy()
        E0 = m.energy(st)
        pw = [H.power_integral(st, mesh, drive, st.t)]
        for k in range(int(round(T / delta))):
            st = H.nonlinear_midpoint_step(m, delta, st)
            st.t = (k + 1) * delta
            pw.append(H.power_integral(st, mesh, drive, st.t))
        work = delta * (np.sum(pw) - 0.5 * (pw[0] + pw[-1]))
        return abs(m.energy(st) - E0 - work)

    a, b = mismatch(1.0), mismatch(0.5)
    assert b < a
    assert 2.8 <= a / b <= 5.2


def test_hartree_energy_grows_with_strength(setup):
    mesh, s0 = setup
    vals = [H.total_energy(s0, mesh, WELL, H.SoftKernel(1.0, g), 0.0) for g in (0.0, 0.5, 1.0, 2.0)]
    assert np.all(np.diff(vals) > 0)
    assert H.total_energy(s0, mesh, WELL, H.SoftKernel(1.0, 1.0), 0.0, s_factor=0.0) == pytest.approx(vals[0])
    with pytest.raises(ValueError):
        H.total_energy(s0, mesh, WELL, H.SoftKernel(), 0.0, s_factor=1.5)


def test_rectangular_step_freezes_left_endpoint(setup):
    mesh, s0 = setup
    m = model(mesh)
    kicked = H.impulse_kick(s0, mesh, 0.01)
    out = H.nonlinear_rectangular_step(m, 0.7, kicked)
    pen = m.hamiltonian(0.0, m.density(kicked))
    C = np.linalg.cholesky(pen.S.toarray())
    Ci = np.linalg.inv(C)
    w, V = np.linalg.eigh(Ci @ pen.H.toarray() @ Ci.T)
    expect = Ci.T @ (V @ np.diag(np.exp(-0.7j * w)) @ V.T) @ C.T @ kicked.psi
    np.testing.assert_allclose(out.psi, expect, atol=1e-11)
