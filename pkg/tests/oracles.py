"""Independent reference computations used by the tests.

None of these touch the package's assembly or spectral code paths.
"""

from __future__ import annotations

import numpy as np
import sympy
from scipy.integrate import solve_ivp


def p1_potential_matrix_exact(potential_expr, length: float, n_elements: int) -> np.ndarray:
    """Exact ``int V phi_i phi_j`` for P1 hats on a uniform mesh (interior nodes)."""
    x = sympy.symbols("x", real=True)
    h = sympy.Rational(length) / n_elements if isinstance(length, int) else sympy.nsimplify(length) / n_elements
    V = potential_expr(x)
    n = n_elements - 1
    M = np.zeros((n, n))
    for e in range(n_elements):
        a, b = e * h, (e + 1) * h
        left = (b - x) / h
        right = (x - a) / h
        shapes = {e - 1: left, e: right}      # interior index of left node is e-1
        for i, fi in shapes.items():
            for j, fj in shapes.items():
                if 0 <= i < n and 0 <= j < n:
                    M[i, j] += float(sympy.integrate(V * fi * fj, (x, a, b)))
    return M


def expm_2x2(M: np.ndarray, theta: float) -> np.ndarray:
    """Closed form of ``exp(-i theta M)`` for a real symmetric 2x2 ``M``."""
    m0 = 0.5 * (M[0, 0] + M[1, 1])
    A = M - m0 * np.eye(2)
    r = np.sqrt(A[0, 0] ** 2 + A[0, 1] ** 2)
    if r == 0:
        return np.exp(-1j * theta * m0) * np.eye(2)
    return np.exp(-1j * theta * m0) * (np.cos(theta * r) * np.eye(2) - 1j * np.sin(theta * r) / r * A)


def ode_propagate(hamiltonian, S, psi0, t0, t1, rtol=1e-12, atol=1e-13):
    """Integrate ``i S psi' = H(t) psi`` with DOP853.

    ``hamiltonian(t)`` returns a dense matrix.  Works orbital by orbital on
    the stacked real/imaginary parts.
    """
    S = S.toarray() if hasattr(S, "toarray") else np.asarray(S)
    Sinv = np.linalg.inv(S)
    psi0 = np.asarray(psi0, dtype=complex)
    n, k = psi0.shape

    def rhs(t, y):
        z = (y[: n * k] + 1j * y[n * k:]).reshape(n, k)
        dz = -1j * (Sinv @ (hamiltonian(t) @ z))
        return np.concatenate([dz.real.ravel(), dz.imag.ravel()])

    y0 = np.concatenate([psi0.real.ravel(), psi0.imag.ravel()])
    sol = solve_ivp(rhs, (t0, t1), y0, method="DOP853", rtol=rtol, atol=atol)
    y = sol.y[:, -1]
    return (y[: n * k] + 1j * y[n * k:]).reshape(n, k)


def box_eigenvalues(length: float, count: int) -> np.ndarray:
    n = np.arange(1, count + 1)
    return n**2 * np.pi**2 / (2.0 * length**2)
