"""Eigensolvers for the generalized pencil ``H p = d S p``.

``dense_solve`` is the LAPACK reference.  ``feast_solve`` is a contour
integral subspace iteration: the spectral projector of an energy interval
is approximated by Gauss-Legendre quadrature of the resolvent
``(z S - H)^{-1} S`` along a circle, followed by Rayleigh-Ritz.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

DENSE_LIMIT = 4096


class SpectralError(RuntimeError):
    pass


@dataclass(frozen=True)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    vectors: np.ndarray
    S: sp.spmatrix = field(repr=False)
    loops: int = 0
    trace_history: tuple = ()
    residual_history: tuple = ()
    empty: bool = False
    subspace_size: int = 0

    @property
    def m(self) -> int:
        return self.eigenvalues.size

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def is_full(self) -> bool:
        return self.m == self.n


@dataclass(frozen=True)
class ContourConfig:
    emin: float
    emax: float
    n_points: int = 8
    subspace_size: int | None = None
    max_loops: int = 20
    trace_tol: float = 1e-12
    residual_tol: float = 1e-10
    radius_factor: float = 1.05
    seed: int = 0

    def __post_init__(self):
        if not self.emin < self.emax:
            raise ValueError(f"empty search interval [{self.emin}, {self.emax}]")
        if not 4 <= self.n_points <= 32:
            raise ValueError("n_points must lie in [4, 32]")
        if self.subspace_size is not None and self.subspace_size < 1:
            raise ValueError("subspace_size must be positive")


def _dense(A) -> np.ndarray:
    return A.toarray() if sp.issparse(A) else np.asarray(A)


def residuals(H, S, d: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Relative residuals ``|H p - d S p| / (|d| |S p| + eps)`` per column."""
    if P.shape[1] == 0:
        return np.zeros(0)
    SP = S @ P
    R = H @ P - SP * d[None, :]
    scale = np.abs(d) * np.linalg.norm(SP, axis=0) + np.finfo(float).eps
    return np.linalg.norm(R, axis=0) / scale


def orthonormality_error(S, P: np.ndarray) -> float:
    if P.shape[1] == 0:
        return 0.0
    G = P.conj().T @ (S @ P)
    return float(np.max(np.abs(G - np.eye(P.shape[1]))))


def dense_solve(pencil, m: int | None = None) -> SpectralDecomposition:
    """Lowest ``m`` eigenpairs (all of them when ``m`` is None)."""
    n = pencil.n
    if n > DENSE_LIMIT:
        raise SpectralError(f"dense solve refused for N={n} > {DENSE_LIMIT}")
    m = n if m is None else int(m)
    if not 0 <= m <= n:
        raise ValueError(f"cannot request {m} eigenpairs of an N={n} pencil")
    H, S = _dense(pencil.H), _dense(pencil.S)
    if m == 0:
        return SpectralDecomposition(np.zeros(0), np.zeros((n, 0)), pencil.S, empty=True)
    try:
        if m == n:
            d, P = sla.eigh(H, S, driver="gvd")
        else:
            d, P = sla.eigh(H, S, subset_by_index=(0, m - 1))
    except np.linalg.LinAlgError as exc:
        raise SpectralError(f"overlap matrix is not positive definite: {exc}") from exc
    return SpectralDecomposition(d, P, pencil.S, subspace_size=m)


def count_in_interval(pencil, emin: float, emax: float) -> int:
    """Number of eigenvalues in ``[emin, emax]`` via Sylvester inertia."""
    H, S = _dense(pencil.H), _dense(pencil.S)

    def below(sigma):
        _, D, _ = sla.ldl(H - sigma * S, hermitian=True)
        return int(np.sum(np.linalg.eigvalsh(D) < 0))

    return below(emax) - below(emin)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("TDPROP_THREADS", "1")))
    except ValueError:
        return 1


class _ContourFilter:
    """Factorised shifted systems for every contour node."""

    def __init__(self, H, S, cfg: ContourConfig, radius_scale: float = 1.0):
        self.H = sp.csc_matrix(H)
        self.S = sp.csc_matrix(S)
        self.real = not (np.iscomplexobj(self.H.data) and np.any(self.H.data.imag))
        center = 0.5 * (cfg.emin + cfg.emax)
        radius = cfg.radius_factor * radius_scale * 0.5 * (cfg.emax - cfg.emin)
        x, w = np.polynomial.legendre.leggauss(cfg.n_points)
        if self.real:
            # conjugate symmetry: upper half circle, real part taken later
            theta = 0.5 * np.pi * (1.0 + x)
            wt = 0.5 * w
        else:
            theta = np.pi * (1.0 + x)
            wt = 0.5 * w
        self.z = center + radius * np.exp(1j * theta)
        self.coef = wt * radius * np.exp(1j * theta)
        self.lu = [self._factor(z) for z in self.z]

    def _factor(self, z):
        A = (z * self.S - self.H).tocsc().astype(complex)
        lu = spla.splu(A)
        if np.any(lu.U.diagonal() == 0) or not np.all(np.isfinite(lu.U.diagonal())):
            raise np.linalg.LinAlgError("singular contour system")
        return lu

    def apply(self, Y: np.ndarray) -> np.ndarray:
        SY = (self.S @ Y).astype(complex)

        def one(k):
            return self.coef[k] * self.lu[k].solve(SY)

        if _threads() > 1:
            with ThreadPoolExecutor(_threads()) as pool:
                parts = list(pool.map(one, range(len(self.lu))))
        else:
            parts = [one(k) for k in range(len(self.lu))]
        Q = np.sum(parts, axis=0)
        return Q.real if self.real else Q


def _rayleigh_ritz(H, S, Q: np.ndarray, rank_tol: float = 1e-12):
    Bq = Q.conj().T @ (S @ Q)
    Bq = 0.5 * (Bq + Bq.conj().T)
    s, U = np.linalg.eigh(Bq)
    keep = s > rank_tol * s.max()
    B = Q @ (U[:, keep] / np.sqrt(s[keep]))
    Aq = B.conj().T @ (H @ B)
    theta, V = np.linalg.eigh(0.5 * (Aq + Aq.conj().T))
    return theta, B @ V, int(np.count_nonzero(~keep))


def _s_orthonormalize(S, X: np.ndarray) -> np.ndarray:
    if X.shape[1] == 0:
        return X
    G = X.conj().T @ (S @ X)
    L = np.linalg.cholesky(0.5 * (G + G.conj().T))
    return sla.solve_triangular(L, X.conj().T, lower=True).conj().T


def feast_solve(pencil, config: ContourConfig, warm_start: np.ndarray | None = None,
                trace_file: str | None = None) -> SpectralDecomposition:
    """All eigenpairs of ``pencil`` with eigenvalues inside ``[emin, emax]``."""
    H, S = pencil.H, pencil.S
    n = pencil.n
    rng = np.random.default_rng(config.seed)

    expected = None
    if n <= DENSE_LIMIT:
        expected = count_in_interval(pencil, config.emin, config.emax)
        if expected == 0:
            empty = SpectralDecomposition(np.zeros(0), np.zeros((n, 0)), S, empty=True)
            _dump(trace_file, [])
            return empty

    m0 = config.subspace_size
    if m0 is None:
        base = expected if expected is not None else max(1, warm_start.shape[1] if warm_start is not None else 8)
        m0 = math.ceil(1.5 * base) + 1
    m0 = min(int(m0), n)
    if expected is not None and expected > m0:
        raise SpectralError(f"interval holds {expected} eigenvalues but subspace size is {m0}")

    Y = rng.standard_normal((n, m0))
    if warm_start is not None:
        W = np.asarray(warm_start)
        if W.shape[0] != n:
            raise ValueError("warm start has the wrong number of rows")
        W = W.real if not np.iscomplexobj(H) else W
        k = min(W.shape[1], m0)
        Y[:, :k] = W[:, :k]

    try:
        filt = _ContourFilter(H, S, config)
    except (np.linalg.LinAlgError, RuntimeError):
        log.warning("contour node hit an eigenvalue; retrying with a perturbed radius")
        try:
            filt = _ContourFilter(H, S, config, radius_scale=1.01)
        except (np.linalg.LinAlgError, RuntimeError) as exc:
            raise SpectralError("shifted system singular on two contours") from exc

    traces, res_hist, rows = [], [], []
    prev = None
    d_in = np.zeros(0)
    X_in = np.zeros((n, 0))
    dropped = 0
    for loop in range(1, config.max_loops + 1):
        Q = filt.apply(Y)
        theta, X, dropped = _rayleigh_ritz(H, S, Q)
        inside = (theta >= config.emin) & (theta <= config.emax)
        d_in, X_in = theta[inside], X[:, inside]
        trace = float(np.sum(d_in))
        res = residuals(H, S, d_in, X_in)
        rmax = float(res.max()) if res.size else 0.0
        traces.append(trace)
        res_hist.append(rmax)
        rows.append((loop, int(inside.sum()), trace, rmax, dropped))
        log.debug("feast loop %d: %d inside, trace %.17g, residual %.3e", loop, inside.sum(), trace, rmax)
        if dropped:
            log.debug("reduced overlap lost rank: %d of %d directions discarded", dropped, Q.shape[1])
        scale = max(1.0, float(np.sum(np.abs(d_in))))
        if prev is not None and prev[1] == d_in.size:
            if abs(trace - prev[0]) <= config.trace_tol * scale and rmax <= config.residual_tol:
                break
        prev = (trace, d_in.size)
        Y = X
    else:
        log.warning("feast did not converge in %d loops (residual %.3e)", config.max_loops, res_hist[-1])

    _dump(trace_file, rows)
    X_in = _s_orthonormalize(S, X_in)
    if d_in.size == 0:
        return SpectralDecomposition(d_in, X_in, S, loops=loop, trace_history=tuple(traces),
                                     residual_history=tuple(res_hist), empty=True, subspace_size=m0)
    if expected is not None and d_in.size != expected:
        log.warning("feast found %d eigenvalues, inertia count says %d", d_in.size, expected)
    order = np.argsort(d_in)
    return SpectralDecomposition(d_in[order], X_in[:, order], S, loops=loop,
                                 trace_history=tuple(traces), residual_history=tuple(res_hist),
                                 subspace_size=m0)


def _dump(path, rows):
    if not path:
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["loop", "n_inside", "trace", "max_residual", "dropped_directions"])
        for r in rows:
            w.writerow([r[0], r[1], f"{r[2]:.17g}", f"{r[3]:.17g}", r[4]])


def apply_expm(decomp: SpectralDecomposition, theta: float, block: np.ndarray) -> np.ndarray:
    """``P exp(-i theta D) P^H S block``; ``theta`` already includes the 1/hbar."""
    block = np.asarray(block)
    P = decomp.vectors
    if block.shape[0] != P.shape[0]:
        raise ValueError(f"block has {block.shape[0]} rows, decomposition has {P.shape[0]}")
    coeffs = P.conj().T @ (decomp.S @ block)
    phase = np.exp(-1j * theta * decomp.eigenvalues)
    if block.ndim == 1:
        return P @ (phase * coeffs)
    return P @ (phase[:, None] * coeffs)


def subspace_angle(A: np.ndarray, B: np.ndarray, S) -> float:
    """Largest principal angle between two S-orthonormal column spaces."""
    if A.shape[1] == 0 and B.shape[1] == 0:
        return 0.0
    C = A.conj().T @ (S @ B)
    sv = np.linalg.svd(C, compute_uv=False)
    return float(np.arccos(np.clip(sv.min(), -1.0, 1.0)))


class SpectralSolver:
    """Produces decompositions for the propagator, optionally warm-started.

    ``backend="dense"`` uses LAPACK; ``backend="feast"`` runs the contour
    solver over an interval recentred on the previous step's spectrum.
    ``m=None`` means the full spectrum (only possible with the dense backend).
    """

    def __init__(self, m: int | None = None, backend: str = "dense", n_points: int = 8):
        if backend not in ("dense", "feast"):
            raise ValueError(f"unknown spectral backend {backend!r}")
        if backend == "feast" and m is None:
            raise ValueError("the contour backend needs a finite number of states")
        self.m = m
        self.backend = backend
        self.n_points = n_points
        self._prev: SpectralDecomposition | None = None
        self._upper: float | None = None
        self.loop_counts: list[int] = []

    def __call__(self, pencil) -> SpectralDecomposition:
        if self.backend == "dense":
            return dense_solve(pencil, self.m)
        return self._feast(pencil)

    def _feast(self, pencil) -> SpectralDecomposition:
        m = self.m
        if self._prev is None:
            prev = dense_solve(pencil, min(m + 1, pencil.n))
            d = prev.eigenvalues
            upper = 0.5 * (d[m - 1] + d[m]) if d.size > m else d[-1] + 1.0
            lower = d[0] - max(1.0, abs(d[0]))
            warm = None
        else:
            d = self._prev.eigenvalues
            lower = d[0] - max(1.0, abs(d[0]))
            upper = self._upper
            warm = self._prev.vectors
        for _ in range(4):
            cfg = ContourConfig(lower, upper, n_points=self.n_points, subspace_size=math.ceil(1.5 * m) + 1)
            out = feast_solve(pencil, cfg, warm_start=warm)
            if out.m >= m:
                break
            upper += (upper - lower) * 0.25
        else:
            raise SpectralError(f"contour solver could not capture {m} states")
        self.loop_counts.append(out.loops)
        out = SpectralDecomposition(out.eigenvalues[:m], out.vectors[:, :m], out.S, out.loops,
                                    out.trace_history, out.residual_history, subspace_size=out.subspace_size)
        self._prev = out
        self._upper = upper
        return out
