"""Command-line front end: ``porodec run | study | analyze``.

Exit codes: 0 success, 1 error, 2 assertion failure (``--assert``), 3 divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from . import delaylab as dl
from . import meshkit as mk
from . import studies as st
from .config import PRESETS, ConfigError, RunConfig
from .models import ToyTwoField, build_from_config, coupling_constants
from .steppers import SCHEMES, SEMI_EXPLICIT, DivergenceDetected, integrate, trajectory_rows

EXIT_OK, EXIT_ERROR, EXIT_ASSERT, EXIT_DIVERGED = 0, 1, 2, 3
DEFAULT_PRESETS = {"two-field": "poro-5.1", "network": "network-5.2", "toy": "toy-5.3"}
GROWTH_FACTOR = 10.0


class AssertionFailed(Exception):
    pass


# --------------------------------------------------------------- helpers

def _load_config(args, model=None):
    if args.config and args.preset:
        raise ConfigError("use either --preset or --config, not both")
    if args.config:
        cfg = RunConfig.from_file(args.config)
    else:
        cfg = RunConfig.from_preset(args.preset or DEFAULT_PRESETS.get(model, "toy-5.3"))
    cfg = cfg.with_overrides(args.set)
    if model is not None:
        have = cfg.get("run", "model", "two-field")
        if have != model:
            raise ConfigError(f"configuration describes model {have!r}, not {model!r}")
    return cfg


def _out_dir(args, default):
    root = args.out or os.environ.get("PORODEC_OUT") or "porodec-out"
    path = Path(root) if args.out else Path(root) / default
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from None
    return path


def _emit(args, record):
    if getattr(args, "json_lines", False):
        print(json.dumps(st._jsonable(record), sort_keys=True))
    else:
        for key, val in record.items():
            print(f"{key}: {val}")


def _base_meta(args, cfg=None):
    meta = {"version": __version__, "argv": sys.argv[1:] if args.argv is None else args.argv}
    if cfg is not None:
        meta["config_source"] = cfg.source
        meta["config"] = cfg.to_text()
    return meta


def _sizes(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _floats(text):
    out = []
    for v in text.split(","):
        v = v.strip()
        if "/" in v:
            a, b = v.split("/")
            out.append(float(a) / float(b))
        elif v:
            out.append(float(v))
    return out


# ------------------------------------------------------------------- run

def cmd_run(args):
    cfg = _load_config(args, args.model)
    scheme = args.scheme or cfg.get("time", "scheme", SEMI_EXPLICIT)
    if scheme not in SCHEMES:
        raise ConfigError(f"time.scheme must be one of {SCHEMES}, got {scheme!r}")
    T = cfg.get("time", "T", 1.0)
    tau = cfg.get("time", "tau", 0.01)
    capture = args.capture_every or cfg.get("time", "capture_every")
    out = _out_dir(args, f"run-{args.model}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore" if args.quiet else "default", UserWarning)
        system = build_from_config(cfg)
    meta = _base_meta(args, cfg)
    meta.update({"model": args.model, "scheme": scheme, "T": T, "tau": tau,
                 "system": system.metadata})
    if args.dump_mesh and getattr(system, "mesh", None) is not None:
        mk.dump_text(system.mesh, out / "mesh.txt")
        meta["mesh_dump"] = "mesh.txt"
    status = "ok"
    try:
        traj = integrate(system, scheme, tau, T, capture_every=capture)
    except DivergenceDetected as exc:
        traj, status = exc.trajectory, "diverged"
        meta["divergence"] = {"step": exc.step, "t": exc.t, "max_norm": exc.norm}
    if status == "ok" and scheme == SEMI_EXPLICIT:
        growth = _growth(traj)
        if growth > GROWTH_FACTOR:
            verdict = dl.stability_test(system)
            meta["stability"] = {"rho": verdict.rho, "classification": verdict.classification}
            if verdict.classification == "unstable":
                status = "diverged"
                meta["divergence"] = {"reason": "unstable coupling with observed growth",
                                      "growth": growth}
    header, rows = trajectory_rows(traj)
    n_norm = 2 + len(traj.state_norm_names)
    st.write_csv(out / "trajectory.csv", header[:n_norm], [r[:n_norm] for r in rows])
    st.write_csv(out / "residuals.csv", header[:2] + header[n_norm:], [r[:2] + r[n_norm:] for r in rows])
    if args.dump_states:
        np.savez(out / "states.npz", times=traj.times, **traj.states)
    (out / "config.ini").write_text(cfg.to_text(), encoding="utf-8")
    meta.update({"status": status, "steps": traj.n_steps, "max_residual": float(traj.residuals.max()),
                 "solve_time": traj.solve_time, "setup_time": traj.setup_time,
                 "outputs": ["trajectory.csv", "residuals.csv", "config.ini"]})
    st.write_metadata(out / "metadata.json", meta)
    _emit(args, {"status": status, "model": args.model, "scheme": scheme, "steps": traj.n_steps,
                 "max_residual": float(traj.residuals.max()), "out": str(out)})
    return EXIT_DIVERGED if status == "diverged" else EXIT_OK


def _growth(traj):
    norms = traj.state_norms
    first = max(float(np.max(norms[0])), 1e-300)
    return float(np.max(norms[-1])) / first


# ----------------------------------------------------------------- study

def _check(cond, message, failures):
    if not cond:
        failures.append(message)


def cmd_study(args):
    out = _out_dir(args, f"study-{args.kind}")
    meta = _base_meta(args)
    failures = []
    n_jobs = args.threads
    summary = {"study": args.kind, "out": str(out)}
    if args.kind == "convergence":
        cfg = _load_config(args, "two-field") if (args.config or args.preset or args.set) else "poro-5.1-desk"
        study = st.ConvergenceStudy(cfg, sizes=_sizes(args.sizes or "8,16,32"),
                                    taus=_floats(args.taus or "1/16,1/32,1/64,1/128"),
                                    ref_n=args.ref_n or 64, ref_tau=_floats(args.ref_tau or "1/512")[0],
                                    T=args.T or 1.0, n_jobs=n_jobs)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            study.fit()
        st.write_csv(out / "convergence.csv", study.header, study.rows())
        st.write_csv(out / "eoc.csv", ("scheme", "error", "parameter", "eoc_lsq", "eoc_pairwise_1",
                                       "eoc_pairwise_2", "eoc_pairwise_3"),
                     [r + ("",) * (7 - len(r)) for r in study.eoc_rows()])
        meta.update(study.metadata())
        for (scheme, err, var), e in study.eoc_.items():
            if err in ("err_p_c", "err_u_a"):
                summary[f"eoc_{scheme}_{err}_{var}"] = e.lsq
                _check(0.8 <= e.lsq <= 1.2, f"EOC {scheme} {err} in {var} = {e.lsq:.3f}", failures)
        gap = study.scheme_gaps()
        summary["max_scheme_gap"] = gap
        _check(gap <= 0.05, f"scheme errors differ by {100 * gap:.1f}%", failures)
    elif args.kind == "network-convergence":
        cfg = _load_config(args, "network") if (args.config or args.preset or args.set) else "network-conv"
        study = st.NetworkConvergenceStudy(cfg, sizes=_sizes(args.sizes or "4,8,16"),
                                           ref_n=args.ref_n or 32,
                                           ref_tau=_floats(args.ref_tau or "1/64")[0],
                                           T=args.T or 1.0, n_jobs=n_jobs).fit()
        st.write_csv(out / "network_convergence.csv", study.header, study.rows())
        meta.update(study.metadata())
        summary["eoc_combined"] = study.eoc_.lsq
        _check(0.7 <= study.eoc_.lsq <= 1.3, f"combined EOC = {study.eoc_.lsq:.3f}", failures)
    elif args.kind == "sweep":
        cfg = _load_config(args, "toy")
        omegas = _floats(args.omegas) if args.omegas else None
        sweep = st.CouplingSweep(omegas, taus=_floats(args.taus or "1e-2,1e-3"), T=args.T or 1.0,
                                 p0=cfg.get("toy", "p0", 1.0), n_jobs=n_jobs).fit()
        st.write_csv(out / "sweep.csv", sweep.header, sweep.rows())
        meta.update(sweep.metadata())
        for tau, b in sweep.boundary_.items():
            summary[f"boundary_tau_{tau!r}"] = b
            _check(b is not None and 0.20 <= b <= 0.23, f"boundary at tau={tau} is {b}", failures)
    elif args.kind == "runtime":
        cfg = _load_config(args, "network")
        bench = st.RuntimeBenchmark(cfg, sizes=_sizes(args.sizes or "4,5"), reps=args.reps,
                                    T=args.T or cfg.get("time", "T", 10.0)).fit()
        st.write_csv(out / "runtime.csv", bench.header, bench.rows())
        meta.update(bench.metadata())
        for row in bench.rows_:
            summary[f"reduction_pct_k{row['k']}"] = row["reduction_pct"]
            _check(row["reduction_pct"] > 0, f"no reduction at k={row['k']}", failures)
    elif args.kind == "delay-gap":
        cfg = _load_config(args, "toy")
        system = build_from_config(cfg)
        table = dl.delay_gap_experiment(system, _floats(args.taus or "1/8,1/16,1/32"),
                                        fine_factor=args.fine_factor, T=args.T or 1.0,
                                        history=args.history)
        table.to_csv(out / "delay_gap.csv")
        meta.update(table.metadata)
        meta["omega"] = cfg.get("toy", "omega")
        summary["ratios"] = [float(r) for r in table.ratios]
        for r in table.ratios:
            _check(1.6 <= r <= 2.4, f"gap ratio {r:.3f}", failures)
    elif args.kind == "projection":
        errors, eoc = st.projection_study(_sizes(args.sizes or "8,16,32"), form=args.form)
        sizes = _sizes(args.sizes or "8,16,32")
        st.write_csv(out / "projection.csv", ("n", "h", "error"),
                     [(n, 1.0 / n, e) for n, e in zip(sizes, errors)])
        meta.update({"study": "projection", "form": args.form, "eoc_lsq": eoc.lsq})
        summary["eoc"] = eoc.lsq
        _check(0.85 <= eoc.lsq <= 1.15, f"projection EOC = {eoc.lsq:.3f}", failures)
    meta["summary"] = summary
    meta["assertions"] = {"checked": bool(args.assert_), "failures": failures}
    st.write_metadata(out / "metadata.json", meta)
    summary["status"] = "assertion failed" if (args.assert_ and failures) else "ok"
    _emit(args, summary)
    if args.assert_ and failures:
        for f in failures:
            print(f"assertion failed: {f}", file=sys.stderr)
        return EXIT_ASSERT
    return EXIT_OK


# --------------------------------------------------------------- analyze

def cmd_analyze(args):
    cfg = _load_config(args)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        system = build_from_config(cfg)
    record = {"analysis": args.kind, "model": cfg.get("run", "model", "two-field")}
    if isinstance(system, ToyTwoField):
        record["omega"] = system.omega
    if args.kind == "stability":
        v = dl.stability_test(system)
        record.update({"rho": v.rho, "classification": v.classification, "margin": v.margin})
    elif args.kind == "constants":
        cc = coupling_constants(system)
        record.update(cc.as_dict())
        if isinstance(system, ToyTwoField):
            record["C_d_over_omega"] = cc.C_d / abs(system.omega) if system.omega else None
            record["weak_coupling_omega_bound"] = float(np.sqrt(cc.c_a * cc.c_c / 14.0))
            record["stability_omega_bound"] = float(1.0 / np.sqrt(21.0))
    elif args.kind == "splicing":
        tau = args.tau or cfg.get("time", "tau", 0.01)
        dae = dl.DelayDAE.from_system(system, tau, args.history)
        record.update({"history": args.history, "tau": tau, "residual": dl.splicing_check(dae)})
    _emit(args, record)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _common(p):
    p.add_argument("--preset", help=f"named preset ({', '.join(sorted(PRESETS))})")
    p.add_argument("--config", help="sectioned key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one configuration entry (repeatable)")
    p.add_argument("--json-lines", action="store_true", help="print single-line JSON records")


def build_parser():
    parser = argparse.ArgumentParser(prog="porodec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"porodec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="integrate one model and write trajectory CSVs")
    run.add_argument("model", choices=sorted(DEFAULT_PRESETS))
    _common(run)
    run.add_argument("--scheme", choices=SCHEMES)
    run.add_argument("--capture-every", type=int)
    run.add_argument("--dump-mesh", action="store_true", help="write mesh.txt")
    run.add_argument("--dump-states", action="store_true", help="write captured states to states.npz")
    run.add_argument("--out")
    run.add_argument("--quiet", action="store_true", help="silence model warnings")
    run.set_defaults(func=cmd_run)

    study = sub.add_parser("study", help="convergence, sweep, runtime and delay-gap experiments")
    study.add_argument("kind", choices=("convergence", "network-convergence", "sweep", "runtime",
                                        "delay-gap", "projection"))
    _common(study)
    study.add_argument("--sizes", help="comma-separated mesh sizes n (runtime: exponents k)")
    study.add_argument("--taus", help="comma-separated step sizes (fractions allowed)")
    study.add_argument("--omegas", help="comma-separated coupling values for the sweep")
    study.add_argument("--ref-n", type=int)
    study.add_argument("--ref-tau")
    study.add_argument("--T", type=float)
    study.add_argument("--reps", type=int, default=3)
    study.add_argument("--fine-factor", type=int, default=256)
    study.add_argument("--history", choices=("constant", "cubic-blend"), default="constant")
    study.add_argument("--form", choices=("a", "b"), default="b")
    study.add_argument("--threads", type=int, default=1, help="worker threads (1 = sequential)")
    study.add_argument("--assert", dest="assert_", action="store_true",
                       help="exit 2 if the study's acceptance bands fail")
    study.add_argument("--out")
    study.set_defaults(func=cmd_study)

    an = sub.add_parser("analyze", help="stability, splicing and coupling-constant reports")
    an.add_argument("kind", choices=("stability", "splicing", "constants"))
    _common(an)
    an.add_argument("--history", choices=("constant", "cubic-blend"), default="constant")
    an.add_argument("--tau", type=float)
    an.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = list(argv) if argv is not None else None
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # noqa: BLE001 - crash exit code
        print(f"crash: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
