"""Experiment harness: self-convergence ladders, the coupling sweep and runtime tables.

Errors between solutions on different (nested) meshes are computed on the
finest mesh: every fine cell lies inside one coarse cell, so gradients are
compared at fine centroids and values at the three fine edge midpoints, which
is exact for the piecewise polynomial differences involved.
"""

from __future__ import annotations

import csv
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator

from . import femkit as fk
from . import meshkit as mk
from .config import RunConfig
from .models import build_network, build_toy, build_two_field, coupling_constants
from .steppers import IMPLICIT, SEMI_EXPLICIT, DivergenceDetected, integrate, propagate
from ._validation import check_sizes

WEAK_COUPLING_OMEGA = 0.2046
STABILITY_OMEGA = 1.0 / math.sqrt(21.0)
ERROR_CAP = math.inf


# ------------------------------------------------------------------ records

@dataclass
class ErrorRecord:
    """Relative errors at ``T`` of one ladder point against the reference."""

    n: int
    h: float
    tau: float
    scheme: str
    err_u_a: float
    err_p_c: float
    err_p_b_accum: float
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("err_u_a", "err_p_c", "err_p_b_accum"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class SweepRecord:
    omega: float
    tau: float
    rel_error: float
    diverged: bool
    rho: float

    def __post_init__(self):
        if self.diverged and self.rel_error != ERROR_CAP:
            raise ValueError("a diverged run must carry the error cap")

    @property
    def converged(self):
        return not self.diverged and self.rel_error <= 1.0


@dataclass(frozen=True)
class EOC:
    pairwise: tuple
    lsq: float


def compute_eoc(errors, params):
    """Pairwise ``log(e_i/e_{i+1}) / log(p_i/p_{i+1})`` and the least-squares slope."""
    e = np.asarray(errors, dtype=float)
    p = np.asarray(params, dtype=float)
    if e.shape != p.shape or e.size < 2:
        raise ValueError("need at least two errors, one per parameter")
    if np.any(e <= 0) or not np.all(np.isfinite(e)):
        raise ValueError("errors must be positive and finite")
    if np.any(p <= 0) or np.any(np.diff(p) >= 0):
        raise ValueError("parameters must be positive and strictly decreasing")
    le, lp = np.log(e), np.log(p)
    pairwise = tuple(float(v) for v in np.diff(le) / np.diff(lp))
    slope = float(np.polyfit(lp, le, 1)[0])
    return EOC(pairwise, slope)


def energy_norms(system, vector, which):
    """``sqrt(x^T M x)`` for ``which`` in a, b, c, y; tiny negative round-off is clamped."""
    mats = {"a": system.K_a, "c": system.M_c}
    if hasattr(system, "K_b"):
        mats["b"] = system.K_b
    if hasattr(system, "M_y"):
        mats["y"] = system.M_y
    if which not in mats:
        raise ValueError(f"no {which!r} norm for this system; available: {sorted(mats)}")
    M = mats[which]
    x = np.asarray(vector, dtype=float)
    if x.shape != (M.ncols,):
        raise ValueError(f"vector of length {x.size} does not match a {M.shape} matrix")
    q = float(x @ (M @ x))
    if q < 0:
        if abs(q) <= 1e-14 * float(x @ x):
            return 0.0
        raise ValueError(f"matrix is not positive semidefinite along this vector (x^T M x = {q:.3e})")
    return math.sqrt(q)


# ------------------------------------------------------ cross-mesh sampling

class CrossMeshSampler:
    """Evaluate finite element functions of nested coarse meshes on a fine mesh."""

    def __init__(self, fine_mesh):
        self.fine = fine_mesh
        self.centroids = fine_mesh.centroids
        self.mid, w = fk.quadrature_points(fine_mesh, fk.MIDPOINT_RULE)
        self.mid_weights = w
        self.areas = fine_mesh.areas
        self._cells = {}

    def coarse_cells(self, mesh):
        key = id(mesh)
        if key not in self._cells:
            cells = mesh.locate(self.centroids)
            lam = mesh.barycentric(np.repeat(cells, 3), self.fine.vertices[self.fine.cells].reshape(-1, 2))
            if lam.min() < -1e-9:
                raise mk.MeshError("mesh ladder is not nested: a fine cell straddles coarse cells")
            self._cells[key] = (mesh, cells)
        return self._cells[key][1]

    def values(self, mesh, dofmap, vec):
        """Values at the fine edge midpoints: ``(nc, 3)`` or ``(nc, 3, 2)``."""
        cells = np.repeat(self.coarse_cells(mesh), 3)
        out = fk.evaluate_at_points(mesh, dofmap, vec, self.mid.reshape(-1, 2), cells=cells)
        return out.reshape(self.mid.shape[:2] + out.shape[1:])

    def gradients(self, mesh, dofmap, vec):
        """Gradient (P1) or Jacobian (vector P1) on every fine cell."""
        return fk.evaluate_at_points(mesh, dofmap, vec, self.centroids, derivative=True,
                                     cells=self.coarse_cells(mesh))

    def l2_sq(self, vals):
        sq = vals**2 if vals.ndim == 2 else (vals**2).sum(axis=-1)
        return float((sq * self.mid_weights).sum())

    def elastic_sq(self, J, lam, mu):
        div = J[:, 0, 0] + J[:, 1, 1]
        dens = 2 * mu * (J[:, 0, 0] ** 2 + J[:, 1, 1] ** 2) + mu * (J[:, 0, 1] + J[:, 1, 0]) ** 2 \
            + lam * div**2
        return float((dens * self.areas).sum())

    def grad_sq(self, G, coeff=1.0):
        return float(coeff * ((G**2).sum(axis=1) * self.areas).sum())


def _ratio(num_sq, den_sq):
    num_sq = max(num_sq, 0.0)
    return math.sqrt(num_sq / den_sq) if den_sq > 0 else math.sqrt(num_sq)


# -------------------------------------------------------- two-field ladder

def _config(preset, overrides=()):
    cfg = RunConfig.from_preset(preset) if isinstance(preset, str) else preset
    return cfg.with_overrides(list(overrides))


def _stride(tau, ref_tau):
    k = tau / ref_tau
    if abs(k - round(k)) > 1e-9 * k:
        raise ValueError(f"tau = {tau} is not a multiple of the reference step {ref_tau}")
    return int(round(k))


def _check_reference(sizes, taus, ref_n, ref_tau):
    if ref_n <= max(sizes) or ref_tau >= min(taus):
        raise ValueError("the reference must be finer than every ladder point")
    if ref_n % max(sizes):
        raise ValueError("non-nested ladder: reference n must be a multiple of every n")
    for n in sizes:
        if ref_n % n or (ref_n // n) & (ref_n // n - 1):
            raise ValueError(f"non-nested ladder: n = {n} does not refine to {ref_n}")
    if ref_n < 4 * max(sizes) or ref_tau > min(taus) / 4:
        warnings.warn("reference is less than 4x finer than the finest ladder point", stacklevel=3)


def _two_field_point(cfg, n, tau, T, scheme, sampler, ref, ref_tau):
    sys_ = build_two_field(cfg.with_overrides([f"mesh.n={n}"]))
    start = time.perf_counter()
    traj = integrate(sys_, scheme, tau, T, capture_every=1)
    wall = time.perf_counter() - start
    params = sys_.params
    mesh, u_map, p_map = sys_.mesh, sys_.u_map, sys_.p_map
    u = traj.final("u")
    Ju = sampler.gradients(mesh, u_map, u)
    err_u = _ratio(sampler.elastic_sq(Ju - ref["Ju"], params.lam, params.mu), ref["u_a_sq"])
    pv = sampler.values(mesh, p_map, traj.final("p"))
    err_pc = _ratio(params.inv_M * sampler.l2_sq(pv - ref["p_vals"]), ref["p_c_sq"])
    stride = _stride(tau, ref_tau)
    k = params.kappa_over_nu_of(0)
    num = den = 0.0
    for step in range(1, traj.n_steps + 1):
        Gp = sampler.gradients(mesh, p_map, traj.states["p"][step])
        Gr = ref["p_grads"][step * stride]
        num += tau * sampler.grad_sq(Gp - Gr, k)
        den += tau * sampler.grad_sq(Gr, k)
    return ErrorRecord(n, mesh.h, tau, scheme, err_u, err_pc, _ratio(num, den), wall,
                       {"max_residual": float(traj.residuals.max())})


class ConvergenceStudy(BaseEstimator):
    """Self-convergence of both Euler schemes against a fine implicit reference."""

    def __init__(self, preset="poro-5.1-desk", sizes=(8, 16, 32),
                 taus=(1 / 16, 1 / 32, 1 / 64, 1 / 128), ref_n=64, ref_tau=1 / 512, T=1.0,
                 schemes=(SEMI_EXPLICIT, IMPLICIT), overrides=(), n_jobs=1):
        self.preset = preset
        self.sizes = sizes
        self.taus = taus
        self.ref_n = ref_n
        self.ref_tau = ref_tau
        self.T = T
        self.schemes = schemes
        self.overrides = overrides
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        sizes = check_sizes(self.sizes)
        taus = sorted((float(t) for t in self.taus), reverse=True)
        _check_reference(sizes, taus, self.ref_n, self.ref_tau)
        cfg = self._config()
        start = time.perf_counter()
        sampler, ref = self.build_reference(taus)
        self.reference_time_ = time.perf_counter() - start
        jobs = [(n, tau, s) for n in sizes for tau in taus for s in self.schemes]
        self.records_ = Parallel(n_jobs=self.n_jobs, prefer="threads")(
            delayed(_two_field_point)(self._config(), n, tau, self.T, s, sampler, ref, self.ref_tau)
            for n, tau, s in jobs)
        self.eoc_ = self._eoc_table(sizes, taus)
        return self

    def _config(self):
        return _config(self.preset, self.overrides).with_overrides([f"time.T={self.T!r}"])

    def build_reference(self, taus):
        """Implicit reference run sampled on its own mesh; returns ``(sampler, ref)``."""
        cfg = self._config()
        ref_sys = build_two_field(cfg.with_overrides([f"mesh.n={self.ref_n}"]))
        stride = math.gcd(*[_stride(t, self.ref_tau) for t in taus])
        ref_traj = integrate(ref_sys, IMPLICIT, self.ref_tau, self.T, capture_every=stride)
        sampler = CrossMeshSampler(ref_sys.mesh)
        prm = ref_sys.params
        rm, ru, rp = ref_sys.mesh, ref_sys.u_map, ref_sys.p_map
        Ju = sampler.gradients(rm, ru, ref_traj.final("u"))
        p_vals = sampler.values(rm, rp, ref_traj.final("p"))
        # reference gradients keyed by reference step number
        grads = {}
        for idx, t in enumerate(ref_traj.times):
            grads[int(round(t / self.ref_tau))] = sampler.gradients(rm, rp, ref_traj.states["p"][idx])
        ref = {"Ju": Ju, "u_a_sq": sampler.elastic_sq(Ju, prm.lam, prm.mu), "p_vals": p_vals,
               "p_c_sq": prm.inv_M * sampler.l2_sq(p_vals), "p_grads": grads}
        return sampler, ref

    def record(self, n, tau, scheme):
        for r in self.records_:
            if r.n == n and abs(r.tau - tau) < 1e-14 and r.scheme == scheme:
                return r
        raise KeyError((n, tau, scheme))

    def _eoc_table(self, sizes, taus):
        table = {}
        for s in self.schemes:
            n_f, tau_f = max(sizes), min(taus)
            table[(s, "err_p_c", "tau")] = compute_eoc(
                [self.record(n_f, t, s).err_p_c for t in taus], taus)
            table[(s, "err_p_b_accum", "tau")] = compute_eoc(
                [self.record(n_f, t, s).err_p_b_accum for t in taus], taus)
            hs = [1.0 / n for n in sizes]
            table[(s, "err_u_a", "h")] = compute_eoc([self.record(n, tau_f, s).err_u_a for n in sizes], hs)
        return table

    def scheme_gaps(self):
        """Largest relative difference between the two schemes' errors per ladder point."""
        worst = 0.0
        if len(self.schemes) < 2:
            return worst
        a, b = self.schemes[:2]
        for r in self.records_:
            if r.scheme != a:
                continue
            o = self.record(r.n, r.tau, b)
            for name in ("err_u_a", "err_p_c", "err_p_b_accum"):
                x, y = getattr(r, name), getattr(o, name)
                worst = max(worst, abs(x - y) / max(x, y))
        return worst

    header = ("scheme", "n", "h", "tau", "err_u_a", "err_p_c", "err_p_b_accum")

    def rows(self):
        return [(r.scheme, r.n, r.h, r.tau, r.err_u_a, r.err_p_c, r.err_p_b_accum)
                for r in self.records_]

    def eoc_rows(self):
        return [(s, q, var, e.lsq, *e.pairwise) for (s, q, var), e in self.eoc_.items()]

    def metadata(self):
        return {"study": "convergence", "preset": _preset_name(self.preset), "sizes": list(self.sizes),
                "taus": list(self.taus), "T": self.T,
                "reference": {"scheme": IMPLICIT, "n": self.ref_n, "tau": self.ref_tau},
                "error_norms": {"err_u_a": "a-norm at T / reference a-norm at T",
                                "err_p_c": "c-norm at T / reference c-norm at T",
                                "err_p_b_accum": "sqrt(sum tau |e|_b^2) / same for reference"},
                "eoc": "least-squares slope over the ladder (pairwise slopes also listed)",
                "cross_mesh": "fine-mesh centroid gradients and edge-midpoint values"}


def convergence_study(preset="poro-5.1-desk", sizes=(8, 16, 32), taus=(1 / 16, 1 / 32, 1 / 64, 1 / 128),
                      ref_n=64, ref_tau=1 / 512, T=1.0, **kwargs):
    """Run :class:`ConvergenceStudy`; returns ``(records, eoc_table)``."""
    study = ConvergenceStudy(preset, sizes, taus, ref_n, ref_tau, T, **kwargs).fit()
    return study.records_, study.eoc_


def _preset_name(preset):
    return preset if isinstance(preset, str) else preset.source


# ---------------------------------------------------------- network ladder

def _network_errors(sys_, traj, sampler, ref, tau, ref_tau):
    prm = sys_.params
    mesh = sys_.mesh
    Ju = sampler.gradients(mesh, sys_.u_map, traj.final("u"))
    e_u = sampler.elastic_sq(Ju - ref["Ju"], prm.lam, prm.mu)
    e_p = 0.0
    for i in range(sys_.m):
        pv = fk.evaluate_at_points(mesh, sys_.q_map, traj.final("p")[i], sampler.centroids,
                                   cells=sampler.coarse_cells(mesh))
        e_p += prm.inv_M * float((((pv - ref["p"][i]) ** 2) * sampler.areas).sum())
    stride = _stride(tau, ref_tau)
    e_y = den_y = 0.0
    for step in range(1, traj.n_steps + 1):
        for i in range(sys_.m):
            yv = sampler.values(mesh, sys_.y_map, traj.states["y"][step][i])
            yr = ref["y"][step * stride][i]
            e_y += tau * sampler.l2_sq(yv - yr)
            den_y += tau * sampler.l2_sq(yr)
    rel_u = _ratio(e_u, ref["u_a_sq"])
    rel_p = _ratio(e_p, ref["p_c_sq"])
    rel_y = _ratio(e_y, den_y)
    return rel_u, rel_p, rel_y, math.sqrt(rel_u**2 + rel_p**2 + rel_y**2)


class NetworkConvergenceStudy(BaseEstimator):
    """Combined error of the network scheme along a ladder with ``tau = h``."""

    def __init__(self, preset="network-conv", sizes=(4, 8, 16), ref_n=32, ref_tau=1 / 64, T=1.0,
                 scheme=SEMI_EXPLICIT, overrides=(), n_jobs=1):
        self.preset = preset
        self.sizes = sizes
        self.ref_n = ref_n
        self.ref_tau = ref_tau
        self.T = T
        self.scheme = scheme
        self.overrides = overrides
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        sizes = check_sizes(self.sizes)
        taus = [1.0 / n for n in sizes]
        _check_reference(sizes, taus, self.ref_n, self.ref_tau)
        cfg = _config(self.preset, self.overrides).with_overrides([f"time.T={self.T!r}"])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            ref_sys = build_network(cfg.with_overrides([f"mesh.n={self.ref_n}"]))
        ref_traj = integrate(ref_sys, IMPLICIT, self.ref_tau, self.T, capture_every=1)
        sampler = CrossMeshSampler(ref_sys.mesh)
        prm = ref_sys.params
        rm = ref_sys.mesh
        Ju = sampler.gradients(rm, ref_sys.u_map, ref_traj.final("u"))
        p_ref = [fk.evaluate_at_points(rm, ref_sys.q_map, pi, sampler.centroids,
                                       cells=sampler.coarse_cells(rm)) for pi in ref_traj.final("p")]
        y_ref = [[sampler.values(rm, ref_sys.y_map, yi) for yi in Y] for Y in ref_traj.states["y"]]
        ref = {"Ju": Ju, "u_a_sq": sampler.elastic_sq(Ju, prm.lam, prm.mu), "p": p_ref,
               "p_c_sq": prm.inv_M * sum(float((p**2 * sampler.areas).sum()) for p in p_ref),
               "y": y_ref}

        def point(n, tau):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)
                sys_ = build_network(cfg.with_overrides([f"mesh.n={n}"]))
            start = time.perf_counter()
            traj = integrate(sys_, self.scheme, tau, self.T, capture_every=1)
            wall = time.perf_counter() - start
            rel_u, rel_p, rel_y, comb = _network_errors(sys_, traj, sampler, ref, tau, self.ref_tau)
            return ErrorRecord(n, 1.0 / n, tau, self.scheme, rel_u, rel_p, 0.0, wall,
                               {"err_y_accum": rel_y, "combined": comb,
                                "max_residual": float(traj.residuals.max())})

        self.records_ = Parallel(n_jobs=self.n_jobs, prefer="threads")(
            delayed(point)(n, t) for n, t in zip(sizes, taus))
        self.eoc_ = compute_eoc([r.extra["combined"] for r in self.records_], [r.h for r in self.records_])
        return self

    header = ("scheme", "n", "h", "tau", "err_u_a", "err_p_c", "err_y_accum", "combined")

    def rows(self):
        return [(r.scheme, r.n, r.h, r.tau, r.err_u_a, r.err_p_c, r.extra["err_y_accum"],
                 r.extra["combined"]) for r in self.records_]

    def metadata(self):
        return {"study": "network-convergence", "preset": _preset_name(self.preset),
                "sizes": list(self.sizes), "tau": "h", "T": self.T,
                "reference": {"scheme": IMPLICIT, "n": self.ref_n, "tau": self.ref_tau},
                "combined": "sqrt(rel_u_a^2 + rel_p_c^2 + rel_y_accum^2)",
                "eoc_lsq": self.eoc_.lsq if hasattr(self, "eoc_") else None}


# ---------------------------------------------------------- coupling sweep

def _sweep_omega(omega, taus, T, p0, ref_tau):
    toy = build_toy(omega, p0)
    rho = 21.0 * omega**2
    ref = propagate(toy, IMPLICIT, ref_tau, T)
    z_ref = np.concatenate((ref.u, ref.p))
    out = []
    for tau in taus:
        try:
            st = propagate(toy, SEMI_EXPLICIT, tau, T)
        except DivergenceDetected:
            out.append(SweepRecord(omega, tau, ERROR_CAP, True, rho))
            continue
        z = np.concatenate((st.u, st.p))
        err = float(np.linalg.norm(z - z_ref) / np.linalg.norm(z_ref))
        out.append(SweepRecord(omega, tau, err, False, rho))
    return out


class CouplingSweep(BaseEstimator):
    """Semi-explicit error on the toy over a grid of coupling strengths."""

    def __init__(self, omegas=None, taus=(1e-2, 1e-3), T=1.0, p0=1.0, ref_factor=64, n_jobs=1):
        self.omegas = omegas
        self.taus = taus
        self.T = T
        self.p0 = p0
        self.ref_factor = ref_factor
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        omegas = self.omegas if self.omegas is not None else default_omegas()
        taus = sorted((float(t) for t in self.taus), reverse=True)
        self.ref_tau_ = min(taus) / self.ref_factor
        chunks = Parallel(n_jobs=self.n_jobs, prefer="threads")(
            delayed(_sweep_omega)(float(w), taus, self.T, self.p0, self.ref_tau_) for w in omegas)
        self.records_ = [r for chunk in chunks for r in chunk]
        self.boundary_ = {tau: sweep_boundary(self.records_, tau) for tau in taus}
        return self

    header = ("omega", "tau", "rel_error", "diverged", "rho", "weak_coupling_bound", "stability_bound")

    def rows(self):
        return [(r.omega, r.tau, r.rel_error, int(r.diverged), r.rho, WEAK_COUPLING_OMEGA,
                 STABILITY_OMEGA) for r in self.records_]

    def metadata(self):
        return {"study": "sweep", "model": "toy", "p0": self.p0, "T": self.T, "taus": list(self.taus),
                "reference": {"scheme": IMPLICIT, "tau": getattr(self, "ref_tau_", None)},
                "rel_error": "Euclidean norm of stacked (u, p) difference at T / reference norm",
                "divergence": "max-norm above 1e12; error recorded as inf",
                "boundary": {repr(k): v for k, v in getattr(self, "boundary_", {}).items()},
                "thresholds": {"weak_coupling": WEAK_COUPLING_OMEGA, "stability": STABILITY_OMEGA}}


def default_omegas():
    return [round(0.02 * k, 2) for k in range(16)]


def sweep_boundary(records, tau):
    """Largest omega before the first non-converged one at this ``tau``."""
    rows = sorted((r for r in records if abs(r.tau - tau) <= 1e-15), key=lambda r: r.omega)
    last = None
    for r in rows:
        if not r.converged:
            break
        last = r.omega
    return last


def coupling_sweep(omegas=None, taus=(1e-2, 1e-3), T=1.0, **kwargs):
    """Run :class:`CouplingSweep`; returns the list of :class:`SweepRecord`."""
    return CouplingSweep(omegas, taus, T, **kwargs).fit().records_


# ------------------------------------------------------------------ runtime

class RuntimeBenchmark(BaseEstimator):
    """Median solve-loop time of both schemes with ``h = tau = 2^-k``; runs are sequential."""

    def __init__(self, preset="network-5.2", sizes=(4, 5), reps=3, T=10.0, overrides=()):
        self.preset = preset
        self.sizes = sizes
        self.reps = reps
        self.T = T
        self.overrides = overrides

    def fit(self, X=None, y=None):
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        cfg = _config(self.preset, self.overrides)
        self.rows_ = []
        self.trajectories_ = {}
        for k in check_sizes(self.sizes):
            n = 2**k
            tau = 1.0 / n
            start = time.perf_counter()
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)
                sys_ = build_network(cfg.with_overrides([f"mesh.n={n}"]))
            assembly = time.perf_counter() - start
            solve = {SEMI_EXPLICIT: [], IMPLICIT: []}
            total = {SEMI_EXPLICIT: [], IMPLICIT: []}
            for _ in range(self.reps):
                for scheme in (SEMI_EXPLICIT, IMPLICIT):
                    traj = integrate(sys_, scheme, tau, self.T, capture_every=1)
                    solve[scheme].append(traj.solve_time)
                    total[scheme].append(traj.total_time)
                    self.trajectories_[(k, scheme)] = traj
            semi, impl = float(np.median(solve[SEMI_EXPLICIT])), float(np.median(solve[IMPLICIT]))
            steps = self.trajectories_[(k, SEMI_EXPLICIT)].n_steps
            self.rows_.append({
                "k": k, "h": 1.0 / n, "tau": tau, "steps": steps, "assembly_time": assembly,
                "semi_explicit": semi, "implicit": impl,
                "semi_explicit_total": float(np.median(total[SEMI_EXPLICIT])),
                "implicit_total": float(np.median(total[IMPLICIT])),
                "reduction_pct": 100.0 * (impl - semi) / impl,
                "semi_explicit_per_step": semi / steps, "implicit_per_step": impl / steps,
                "max_residual": max(float(self.trajectories_[(k, s)].residuals.max())
                                    for s in (SEMI_EXPLICIT, IMPLICIT)),
            })
        return self

    header = ("k", "h", "tau", "steps", "assembly_time", "semi_explicit", "implicit",
              "semi_explicit_total", "implicit_total", "reduction_pct", "semi_explicit_per_step",
              "implicit_per_step", "max_residual")

    def rows(self):
        return [tuple(r[h] for h in self.header) for r in self.rows_]

    def metadata(self):
        return {"study": "runtime", "preset": _preset_name(self.preset), "sizes": list(self.sizes),
                "reps": self.reps, "T": self.T, "statistic": "median",
                "timed": "solve loop (factorization included in *_total, assembly excluded)",
                "execution": "sequential"}


def runtime_benchmark(preset="network-5.2", sizes=(4, 5), reps=3, T=10.0, **kwargs):
    return RuntimeBenchmark(preset, sizes, reps, T, **kwargs).fit().rows_


# --------------------------------------------------------------- projection

def projection_study(sizes=(8, 16, 32), form="b"):
    """H1-seminorm (``b``) or energy (``a``) error of the elliptic projection of ``sin(pi x) sin(pi y)``."""
    from .models import PoroParams

    params = PoroParams(lam=1.0, mu=1.0, kappa_over_nu=(1.0,), inv_M=1.0, alpha=(1.0,))
    sx = lambda x, y: np.pi * np.cos(np.pi * x) * np.sin(np.pi * y)  # noqa: E731
    sy = lambda x, y: np.pi * np.sin(np.pi * x) * np.cos(np.pi * y)  # noqa: E731
    errors, hs = [], []
    for n in check_sizes(sizes):
        mesh = mk.unit_square_mesh(n)
        pts, w = fk.quadrature_points(mesh, fk.DEGREE5_RULE)
        x, y = pts[..., 0], pts[..., 1]
        if form == "b":
            dm = fk.p1_dofmap(mesh, "boundary")
            vec = fk.elliptic_projection("b", mesh, dm, lambda x, y: (sx(x, y), sy(x, y)), params)
            G = fk.evaluate_at_points(mesh, dm, vec, mesh.centroids, derivative=True)
            err = ((sx(x, y) - G[:, :1]) ** 2 + (sy(x, y) - G[:, 1:]) ** 2) * w
            errors.append(math.sqrt(float(err.sum())))
        elif form == "a":
            dm = fk.p1_vector_dofmap(mesh, "boundary")
            jac = lambda x, y: [[sx(x, y), sy(x, y)], [sx(x, y), sy(x, y)]]  # noqa: E731
            vec = fk.elliptic_projection("a", mesh, dm, jac, params)
            J = fk.evaluate_at_points(mesh, dm, vec, mesh.centroids, derivative=True)
            ex = np.array([[sx(x, y) - J[:, 0, 0:1], sy(x, y) - J[:, 0, 1:2]],
                           [sx(x, y) - J[:, 1, 0:1], sy(x, y) - J[:, 1, 1:2]]])
            div = ex[0, 0] + ex[1, 1]
            dens = 2 * params.mu * (ex[0, 0] ** 2 + ex[1, 1] ** 2) \
                + params.mu * (ex[0, 1] + ex[1, 0]) ** 2 + params.lam * div**2
            errors.append(math.sqrt(float((dens * w).sum())))
        else:
            raise ValueError("form must be 'a' or 'b'")
        hs.append(1.0 / n)
    return errors, compute_eoc(errors, hs)


# ---------------------------------------------------------------- writers

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    """Comma-separated file with a header row and LF line endings."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def write_metadata(path, meta):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(meta), fh, indent=2, sort_keys=True)
        fh.write("\n")


def record_dict(record):
    return _jsonable(asdict(record))
