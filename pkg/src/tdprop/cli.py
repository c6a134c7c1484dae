"""Command-line entry point: ``tdprop run|converge|eig <config.yaml>``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 numerical failure.
Errors are also written to stderr as a one-line JSON record.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, convergence, hartree, lattice, plotting, spectral
from .config import ConfigError, load_config
from .observables import FLOAT_FMT, Recorder
from .propagator import PropagationError, SchemeSpec, ground_states, propagate, scheme_metadata, write_checkpoint
from .units import UnitError, to_atomic

log = logging.getLogger("tdprop")

NUMERICAL = (PropagationError, spectral.SpectralError, convergence.ReferenceError, FloatingPointError,
             np.linalg.LinAlgError, ArithmeticError)


class UsageError(ValueError):
    pass


def _header(cfg, extra=None) -> dict:
    meta = {"tool": f"tdprop {__version__}", "config_hash": cfg.digest()}
    meta.update(cfg.echo())
    meta.update(extra or {})
    return meta


def _write_rows(path, header, rows, metadata):
    with open(path, "w", newline="") as fh:
        for k in sorted(metadata):
            fh.write(f"# {k}={metadata[k]}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([FLOAT_FMT.format(v) if isinstance(v, float) else v for v in r])


def _setup(cfg):
    mesh = lattice.build_mesh(cfg.mesh.length, cfg.mesh.n_elements, cfg.mesh.order)
    model = cfg.potential_model()
    return mesh, model, cfg.mesh.quadrature_points


def _spec(cfg):
    s = cfg.scheme
    return SchemeSpec(s.name, s.p, cfg.delta, s.spectral_m, s.backend)


# --- run -------------------------------------------------------------------

def cmd_run(cfg, out_dir: Path) -> int:
    mesh, model, nq = _setup(cfg)
    spec = _spec(cfg)
    nl = cfg.nonlinear
    state0 = ground_states(mesh, model, cfg.scheme.n_orbitals, 0.0, nq)
    solver = spectral.SpectralSolver(spec.spectral_m, backend=spec.backend)
    prefix = out_dir / cfg.output.prefix
    meta = _header(cfg, scheme_metadata(spec, mesh))

    snapshots = []

    def snap(k, t, n):
        if cfg.output.density_every and k % cfg.output.density_every == 0:
            snapshots.extend((k, t, float(x), float(v)) for x, v in zip(n.points, n.values))

    if nl.enabled:
        kernel = hartree.SoftKernel(nl.softening, nl.strength * nl.s_factor**2)
        nm = hartree.NonlinearModel(mesh, model, kernel, nl.spin_factor, nq, solver)
        if nl.impulse:
            state0 = hartree.impulse_kick(state0, mesh, nl.impulse)
        scf = hartree.SCFOptions(nl.predictor_passes, nl.corrector_passes, nl.tolerance)
        if spec.scheme == "rectangular":
            def stepper(s):
                return hartree.nonlinear_rectangular_step(nm, spec.delta, s)
        else:
            def stepper(s):
                return hartree.nonlinear_midpoint_step(nm, spec.delta, s, scf)
        # s**2 is folded into the kernel strength above, so the energy uses s = 1
        rec = Recorder(lambda s: nm.hamiltonian(s.t, nm.density(s)), state0.n_orbitals,
                       cfg.output.stride, energy_fn=lambda s: nm.energy(s),
                       density_fn=nm.density, metadata=meta, snapshot_fn=snap)
    else:
        stepper = None

        def energy(s):
            return hartree.total_energy(s, mesh, model, hartree.SoftKernel(1.0, 0.0), s.t, 0.0,
                                        nl.spin_factor, nq)
        rec = Recorder(lambda s: lattice.hamiltonian_at(mesh, model, s.t, nq), state0.n_orbitals,
                       cfg.output.stride, energy_fn=energy,
                       density_fn=lambda s: hartree.density_from_states(s, mesh, nl.spin_factor, nq),
                       metadata=meta, snapshot_fn=snap)

    traj = propagate(spec, mesh, model, state0, cfg.t_end, solver=solver, n_points=nq,
                     stepper=stepper, recorder=rec)
    traj.to_csv(f"{prefix}_trajectory.csv")
    written = [f"{prefix}_trajectory.csv"]
    if snapshots:
        _write_rows(f"{prefix}_density.csv", ["step", "t", "x", "n"], snapshots, meta)
        written.append(f"{prefix}_density.csv")
    if cfg.output.checkpoint:
        write_checkpoint(f"{prefix}_final.chk", traj.final_state)
        written.append(f"{prefix}_final.chk")
    if cfg.output.figures:
        written.append(plotting.energy_figure(traj, f"{prefix}_energy.png"))
        if nl.enabled or np.max(np.abs(traj.dipole)) > 1e-10:
            written.append(plotting.dipole_figure(traj, f"{prefix}_dipole.png"))
    leak = max(traj.max_leakage)
    log.info("run finished: %d records, max leakage %.3e", len(traj), leak)
    for w in written:
        print(w)
    return 0


# --- converge --------------------------------------------------------------

def _parse_deltas(values, units):
    if not values:
        return None
    try:
        out = np.array([to_atomic(v if any(c.isalpha() for c in v) else float(v), "time", units)
                        for v in values])
    except (UnitError, ValueError) as exc:
        raise UsageError(f"--deltas: {exc}") from None
    return out


def cmd_converge(cfg, out_dir: Path, study: str, p_list=None, deltas=None, witness=False) -> int:
    if study == "B" and cfg.scheme.name == "rectangular":
        raise UsageError("study B applies to the Gauss schemes; the config requests the rectangular scheme")
    if cfg.nonlinear.enabled:
        raise UsageError("convergence studies are defined for linear runs only")
    mesh, model, _ = _setup(cfg)
    period = cfg.period or cfg.t_end
    problem = convergence.DrivenProblem(mesh, model, cfg.scheme.n_orbitals, period, cfg.t_end,
                                        name=cfg.output.prefix)
    d = _parse_deltas(deltas, cfg.units)
    prefix = out_dir / f"{cfg.output.prefix}_study_{study}"
    ref = convergence.reference_solution(problem)
    meta = _header(cfg, {"study": study, "reference": ref.description,
                         "reference_crosscheck": FLOAT_FMT.format(ref.crosscheck)})
    if study == "A":
        studies = [convergence.rectangular_order_study(problem, d, ref)]
    else:
        p_list = p_list or [cfg.scheme.p]
        res = convergence.gauss_order_study(problem, p_list, d, ref)
        studies = [res[p][s] for p in p_list for s in res[p]]
    convergence.write_study_csv(f"{prefix}.csv", studies, meta)
    convergence.write_summary_csv(f"{prefix}_summary.csv", studies, meta)
    if cfg.output.figures:
        plotting.convergence_figure(studies, f"{prefix}.png")
    for st in studies:
        s = st.summary()
        verdict = {True: "PASS", False: "FAIL", None: "n/a"}[s["passed"]]
        exp = "" if s["expected"] is None else f" expected {s['expected']:g}+-{s['tolerance']:g}"
        print(f"study {study} {s['scheme']} p={s['p']} slope={s['slope']:.3f}{exp} "
              f"regime={s['regime']} {verdict}")
    if witness and study == "A":
        if cfg.period is None:
            raise UsageError("--witness needs a sinusoidal drive")
        w = convergence.divergence_witness(problem, ref_steps_per_period=480)
        v = convergence.witness_verdict(w)
        convergence.write_witness_csv(f"{prefix}_witness.csv", w, meta)
        if cfg.output.figures:
            plotting.witness_figure(w, f"{prefix}_witness.png")
        print(f"witness max HOMO deviation coarse={w['max_dev_coarse']:.3e} fine={w['max_dev_fine']:.3e} "
              f"threshold={v['threshold']:.3e} {'PASS' if v['passed'] else 'FAIL'}")
    return 0


# --- eig -------------------------------------------------------------------

def _analytic(cfg, m):
    kinds = [p.kind for p in cfg.potential]
    n = np.arange(1, m + 1)
    L = cfg.mesh.length
    if not kinds or kinds == ["zero"]:
        return n**2 * math.pi**2 / (2 * L**2)
    if kinds == ["harmonic"]:
        return math.sqrt(cfg.potential[0].k) * (n - 0.5)
    return None


def cmd_eig(cfg, out_dir: Path) -> int:
    mesh, model, nq = _setup(cfg)
    pencil = lattice.hamiltonian_at(mesh, model, 0.0, nq)
    e = cfg.eig
    m = e.m or cfg.scheme.n_orbitals
    dense = spectral.dense_solve(pencil)
    lo = e.emin if e.emin is not None else dense.eigenvalues[0] - 0.05 * abs(dense.eigenvalues[0]) - 1e-3
    if e.emax is not None:
        hi = e.emax
    elif m < dense.m:
        hi = 0.5 * (dense.eigenvalues[m - 1] + dense.eigenvalues[m])
    else:
        hi = dense.eigenvalues[-1] + 1e-3
    if not hi > lo:
        raise UsageError(f"eig interval [{lo}, {hi}] is empty or reversed")
    prefix = out_dir / f"{cfg.output.prefix}_eig"
    meta = _header(cfg, {"emin": FLOAT_FMT.format(lo), "emax": FLOAT_FMT.format(hi)})
    conf = spectral.ContourConfig(lo, hi, n_points=e.n_points)
    cold = spectral.feast_solve(pencil, conf)
    header = ["index", "dense", "feast", "rel_diff", "residual", "analytic"]
    if cold.empty:
        _write_rows(f"{prefix}.csv", header, [], meta)
        _write_rows(f"{prefix}_summary.csv", ["key", "value"], [("count", 0), ("empty", "true")], meta)
        print(f"no eigenvalues in [{lo:.6g}, {hi:.6g}]")
        return 0
    inside = (dense.eigenvalues >= lo) & (dense.eigenvalues <= hi)
    dref = dense.eigenvalues[inside]
    res = spectral.residuals(pencil.H, pencil.S, cold.eigenvalues, cold.vectors)
    ana = _analytic(cfg, max(cold.m, 1) + int(np.argmax(inside)))
    first = int(np.argmax(inside))
    rows = []
    for i in range(cold.m):
        a = float(ana[first + i]) if ana is not None and first + i < len(ana) else ""
        rel = abs(cold.eigenvalues[i] - dref[i]) / max(abs(dref[i]), 1e-300) if i < dref.size else float("nan")
        rows.append((first + i + 1, float(dref[i]) if i < dref.size else float("nan"),
                     float(cold.eigenvalues[i]), float(rel), float(res[i]), a))
    # warm-start demo: H(delta) from the H(0) subspace
    later = lattice.hamiltonian_at(mesh, model, cfg.delta, nq)
    warm = spectral.feast_solve(later, conf, warm_start=cold.vectors)
    colder = spectral.feast_solve(later, conf)
    angle = spectral.subspace_angle(cold.vectors, dense.vectors[:, inside], pencil.S) if dref.size == cold.m \
        else float("nan")
    summary = [("count", cold.m), ("empty", "false"), ("loops_cold", cold.loops),
               ("loops_warm_next_step", warm.loops), ("loops_cold_next_step", colder.loops),
               ("max_rel_diff", max(r[3] for r in rows)), ("max_residual", float(res.max())),
               ("orthonormality_error", spectral.orthonormality_error(pencil.S, cold.vectors)),
               ("subspace_angle", float(angle))]
    _write_rows(f"{prefix}.csv", header, rows, meta)
    _write_rows(f"{prefix}_summary.csv", ["key", "value"], summary, meta)
    if cfg.output.figures:
        plotting.spectrum_figure([r[0] for r in rows], [r[2] for r in rows], f"{prefix}.png",
                                 None if ana is None else [r[5] for r in rows])
    print(f"{cold.m} eigenvalues in [{lo:.6g}, {hi:.6g}]; loops cold={cold.loops} warm={warm.loops}; "
          f"max rel diff {max(r[3] for r in rows):.2e}")
    return 0


# --- entry -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tdprop", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"tdprop {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", help="YAML configuration file")
    common.add_argument("--out-dir", default=".", help="directory for CSV and figure outputs")
    common.add_argument("--verbose", "-v", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="propagate and write the trajectory")
    c = sub.add_parser("converge", parents=[common], help="order-of-convergence study")
    c.add_argument("--study", choices=["A", "B"], required=True)
    c.add_argument("--p", type=int, nargs="+", help="Gauss node counts for study B")
    c.add_argument("--deltas", nargs="+", help="step sizes (numbers in config units or '<x> fs')")
    c.add_argument("--witness", action="store_true", help="also emit the HOMO divergence traces (study A)")
    sub.add_parser("eig", parents=[common], help="contour eigensolver against the dense solver")
    return ap


def _fail(kind, exc, code):
    rec = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        rec["messages"] = exc.messages
    print(json.dumps(rec), file=sys.stderr)
    return code


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        cfg = load_config(args.config)
    except OSError as exc:
        return _fail("validation", exc, 1)
    except ConfigError as exc:
        return _fail("validation", exc, 1)
    level = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}[cfg.output.verbosity]
    logging.basicConfig(level=logging.DEBUG if args.verbose else level,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.command == "run":
            return cmd_run(cfg, out)
        if args.command == "converge":
            return cmd_converge(cfg, out, args.study, args.p, args.deltas, args.witness)
        return cmd_eig(cfg, out)
    except UsageError as exc:
        return _fail("validation", exc, 1)
    except NUMERICAL as exc:
        return _fail("numerical", exc, 2)
    except ValueError as exc:
        return _fail("validation", exc, 1)


if __name__ == "__main__":
    sys.exit(main())
