import math

import numpy as np
import pytest

from tdprop import convergence as cv, lattice, potentials as P
from tdprop.propagator import SchemeSpec, StateBlock, propagate
from oracles import ode_propagate


# fitting ---------------------------------------------------------------------

def test_fit_recovers_power_law():
    h = 0.1 / 2.0 ** np.arange(6)
    fit = cv.fit_order(h, 3.0 * h**2)
    assert fit.slope == pytest.approx(2.0, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(3.0))
    assert fit.residual < 1e-12 and not fit.excluded


def test_fit_excludes_floor_points():
    h = 1.0 / 2.0 ** np.arange(7)
    e = np.maximum(h**4, 1e-6)
    fit = cv.fit_order(h, e, floor=1e-6)
    assert fit.slope == pytest.approx(4.0, abs=1e-10)
    assert len(fit.excluded) == 2
    assert list(fit.used) == [True] * 5 + [False] * 2


def test_fit_with_noise_is_close():
    rng = np.random.default_rng(3)
    h = 1.0 / 2.0 ** np.arange(6)
    e = h * np.exp(0.02 * rng.standard_normal(6))
    assert cv.fit_order(h, e).slope == pytest.approx(1.0, abs=0.05)


@pytest.mark.parametrize("h,e,floor", [
    ([1, 0.5, 0.25], [1, 0.5, 0.25], 0.0),
    ([1, 0.5, 0.25, 0.125], [1, 0.5, 1e-13, 1e-13], 1e-13),
    ([1, -0.5, 0.25, 0.125], [1, 0.5, 0.25, 0.1], 0.0),
])
def test_fit_rejects(h, e, floor):
    with pytest.raises(ValueError):
        cv.fit_order(h, e, floor)


def test_error_norm():
    S = lattice.assemble_mass(lattice.build_mesh(1.0, 4, 1))
    a = StateBlock(np.zeros((3, 2)), 0.0, S)
    v = np.zeros((3, 2), complex)
    v[:, 1] = [1, 2, 3]
    b = StateBlock(v, 0.0, S)
    expect = math.sqrt(np.real(v[:, 1].conj() @ (S @ v[:, 1])))
    assert cv.error_norm(a, b) == pytest.approx(expect)
    assert cv.error_norm(b, b) == 0.0
    with pytest.raises(ValueError):
        cv.error_norm(a, StateBlock(np.zeros((3, 1)), 0.0, S))


# reference -------------------------------------------------------------------

def test_standard_problem_shape():
    pr = cv.standard_problem()
    assert pr.mesh.n_dof == 39
    assert pr.period == pytest.approx(206.7, abs=0.1)
    assert pr.t_end == pytest.approx(pr.period)
    assert not pr.is_static
    np.testing.assert_allclose(pr.state0.norms(), 1.0, atol=1e-13)


def test_static_reference_is_single_exponential():
    pr = cv.standard_problem(periods=0.5, v0=0.0)
    pr.potential = P.HarmonicWell(0.01, pr.mesh.length / 2)
    ref = cv.reference_solution(pr)
    assert ref.crosscheck == 0.0
    s0 = pr.state0
    E = np.einsum("ij,ij->j", s0.psi.conj(), lattice.hamiltonian_at(pr.mesh, pr.potential, 0).H @ s0.psi).real
    np.testing.assert_allclose(ref.state.psi, s0.psi * np.exp(-1j * E * pr.t_end)[None, :], atol=1e-11)


@pytest.fixture(scope="module")
def quarter():
    pr = cv.standard_problem(periods=0.25)
    return pr, cv.reference_solution(pr, steps=128)


def test_reference_agrees_with_ode(quarter):
    pr, ref = quarter
    assert ref.crosscheck < 1e-9
    S = lattice.assemble_mass(pr.mesh)
    ode = ode_propagate(lambda t: lattice.hamiltonian_at(pr.mesh, pr.potential, t).H.toarray(),
                        S, pr.state0.psi, 0.0, pr.t_end, rtol=1e-13, atol=1e-14)
    assert cv.error_norm(StateBlock(ode, pr.t_end, S), ref.state) < 1e-9


def test_reference_abort():
    pr = cv.standard_problem(periods=1.0)
    with pytest.raises(cv.ReferenceError):
        cv.reference_solution(pr, steps=8)


def test_reference_size_guard():
    pr = cv.standard_problem(n_elements=300)
    with pytest.raises(cv.ReferenceError):
        cv.reference_solution(pr)


def test_reference_samples(quarter):
    pr, _ = quarter
    ref = cv.reference_solution(pr, steps=128, sample_every=32)
    assert sorted(ref.samples) == [0, 32, 64, 96, 128]
    np.testing.assert_allclose(ref.samples[0], pr.state0.psi, atol=1e-14)
    np.testing.assert_allclose(ref.samples[128], ref.state.psi, atol=1e-14)
    assert ref.sample_times[64] == pytest.approx(pr.t_end / 2)


def test_magnus_is_fourth_order(quarter):
    pr, ref = quarter
    errs = []
    for n in (128, 256):          # coarser runs are pre-asymptotic (lambda_max h > 1)
        psi, _ = cv.magnus4(pr.mesh, pr.potential, pr.state0.psi, 0.0, pr.t_end, n)
        errs.append(cv.error_norm(StateBlock(psi, pr.t_end, pr.state0.S), ref.state))
    assert math.log2(errs[0] / errs[1]) == pytest.approx(4.0, abs=0.4)


# studies --------------------------------------------------------------------

def test_static_problem_is_exact_regime():
    pr = cv.standard_problem(periods=0.5)
    pr.potential = P.HarmonicWell(0.01, pr.mesh.length / 2)
    st = cv.rectangular_order_study(pr, deltas=pr.t_end / np.array([4, 8, 16, 32]))
    assert st.regime == "exact" and st.passed is True
    assert np.all(st.errors < 1e-11)


def test_rectangular_slope_on_short_window(quarter):
    pr, ref = quarter
    st = cv.rectangular_order_study(pr, deltas=pr.t_end / np.array([16, 32, 64, 128]), ref=ref)
    assert st.passed, st.summary()


def test_commuting_drive_reaches_2p():
    pr = cv.standard_problem(periods=0.37, shape="uniform")
    ref = cv.reference_solution(pr, steps=256)
    out = cv.gauss_order_study(pr, p_list=(2,), deltas=pr.t_end / np.array([2, 4, 8, 16]), ref=ref)
    assert out[2]["gauss-sum"].slope == pytest.approx(4.0, abs=0.3)
    np.testing.assert_allclose(out[2]["gauss-sum"].errors, out[2]["gauss-product"].errors, rtol=1e-6)


def test_study_rejects_non_monotone(quarter):
    pr, ref = quarter
    with pytest.raises(ValueError):
        cv.rectangular_order_study(pr, deltas=pr.t_end / np.array([4, 16, 8, 32]), ref=ref)


def test_csv_writers(tmp_path, quarter):
    pr, ref = quarter
    st = cv.rectangular_order_study(pr, deltas=pr.t_end / np.array([16, 32, 64, 128]), ref=ref)
    cv.write_study_csv(tmp_path / "s.csv", [st], {"config_hash": "x"})
    cv.write_summary_csv(tmp_path / "m.csv", [st])
    body = (tmp_path / "s.csv").read_text().splitlines()
    assert body[0] == "# config_hash=x" and body[1] == "h,error,scheme,p" and len(body) == 6
    summ = (tmp_path / "m.csv").read_text().splitlines()
    assert summ[0].startswith("scheme,p,slope") and summ[1].startswith("rectangular,1,")


def test_witness_verdict_logic():
    w = {"energy_range": 1.0, "max_dev_coarse": 5e-3, "max_dev_fine": 5e-4}
    assert cv.witness_verdict(w)["passed"]
    w["max_dev_fine"] = 2e-3
    assert not cv.witness_verdict(w)["passed"]
