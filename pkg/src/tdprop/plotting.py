"""Figures written next to the CSV outputs (Agg backend, no timestamps)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

golden = (np.sqrt(5) - 1.0) / 2.0
fig_width = 5.0

params = {
    "figure.figsize": [fig_width, fig_width * golden],
    "figure.dpi": 120,
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "lines.linewidth": 1.2,
    "lines.markersize": 4,
    "svg.hashsalt": "tdprop",
}

# strip the Software key so reruns give identical PNG bytes
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def energy_figure(traj, path):
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        t = np.asarray(traj.times)
        E = np.asarray(traj.energies)
        for j in range(E.shape[1]):
            ax.plot(t, E[:, j], label=f"orbital {j + 1}")
        ax.set_xlabel("t (a.u.)")
        ax.set_ylabel("energy expectation (Ha)")
        ax.legend(frameon=False)
        return _save(fig, path)


def dipole_figure(traj, path):
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        ax.plot(traj.times, traj.dipole, color="k")
        ax.axhline(0.0, color="0.7", lw=0.6)
        ax.set_xlabel("t (a.u.)")
        ax.set_ylabel("induced dipole (a.u.)")
        return _save(fig, path)


def convergence_figure(studies, path):
    """Log-log error against step with the fitted lines."""
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        for st in studies:
            line, = ax.loglog(st.deltas, st.errors, "o-", label=f"{st.scheme} p={st.p}  slope {st.slope:.2f}")
            if st.fit is not None:
                h = np.asarray(st.deltas)
                ax.loglog(h, np.exp(st.fit.intercept) * h**st.fit.slope, ":", color=line.get_color())
        ax.set_xlabel(r"$\Delta$ (a.u.)")
        ax.set_ylabel("error at final time")
        ax.legend(frameon=False)
        return _save(fig, path)


def witness_figure(w, path, visible=1e-3):
    """Traces on top, ``|trace - reference|`` on a log axis below."""
    with plt.rc_context(params):
        fig, (ax, dx) = plt.subplots(2, 1, sharex=True, figsize=(fig_width, 1.6 * fig_width * golden))
        ax.plot(w["t"], w["reference"], color="k", lw=2.0, alpha=0.5, label="reference")
        ax.plot(w["t"], w["coarse"], "--", label="coarse rectangular")
        ax.plot(w["t"], w["fine"], ":", label="fine rectangular")
        ax.set_ylabel("HOMO energy (Ha)")
        ax.legend(frameon=False)
        ref = np.asarray(w["reference"])
        floor = 1e-16
        dx.semilogy(w["t"], np.abs(np.asarray(w["coarse"]) - ref) + floor, "--")
        dx.semilogy(w["t"], np.abs(np.asarray(w["fine"]) - ref) + floor, ":")
        dx.axhline(visible * w["energy_range"], color="0.5", lw=0.8)
        dx.set_xlabel("t (a.u.)")
        dx.set_ylabel("deviation (Ha)")
        return _save(fig, path)


def spectrum_figure(index, values, path, analytic=None):
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        ax.plot(index, values, "o", label="computed")
        if analytic is not None:
            ax.plot(index, analytic, "x", label="analytic")
        ax.set_xlabel("index")
        ax.set_ylabel("eigenvalue (Ha)")
        ax.legend(frameon=False)
        return _save(fig, path)
