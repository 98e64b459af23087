"""Delay reformulation of the two-field system.

Lagging the pressure in the elasticity equation by one delay ``tau`` turns
the semidiscrete system into the neutral delay equation

    M_c p'(t) + K_b p(t) = -D K_a^{-1} D^T p'(t - tau) + g~(t),
    g~ = g - D K_a^{-1} f',

with a history ``Phi`` on ``[-tau, 0]``.  It is solved here by the method of
steps, one delay window at a time, with implicit Euler inside each window.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from . import sparsekit as sk
from ._validation import check_positive, check_step_count
from .models import NetworkSystem, pressure_operator
from .steppers import BLOWUP, DivergenceDetected, Trajectory, _norm, integrate, IMPLICIT

MARGINAL_BAND = 1e-6
HISTORY_KINDS = ("constant", "cubic-blend", "samples")


class History:
    """History ``Phi`` on ``[-tau, 0]`` with ``Phi(-tau) = Phi(0) = p0``."""

    def __init__(self, kind, p0, tau, coeff=None, spline=None):
        self.kind = kind
        self.p0 = np.asarray(p0, dtype=float)
        self.tau = check_positive(tau, "tau")
        self.coeff = None if coeff is None else np.asarray(coeff, dtype=float)
        self._spline = spline

    @classmethod
    def constant(cls, p0, tau):
        return cls("constant", p0, tau)

    @classmethod
    def cubic_blend(cls, p0, tau, coeff):
        """``Phi(t) = p0 + coeff * t (t + tau)^2 / tau^2``; ``Phi'(0) = coeff``, ``Phi'(-tau) = 0``."""
        return cls("cubic-blend", p0, tau, coeff=coeff)

    @classmethod
    def from_samples(cls, times, values, tau, atol=1e-12):
        """Cubic spline through samples covering ``[-tau, 0]``."""
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if abs(times[0] + tau) > atol * max(1, tau) or abs(times[-1]) > atol * max(1, tau):
            raise ValueError("history samples must span [-tau, 0]")
        if np.max(np.abs(values[0] - values[-1])) > atol * (1 + np.abs(values[-1]).max()):
            raise ValueError("history must satisfy Phi(-tau) = Phi(0)")
        return cls("samples", values[-1], tau, spline=CubicSpline(times, values, axis=0))

    def _psi(self, t):
        tau = self.tau
        return t * (t + tau) ** 2 / tau**2, ((t + tau) ** 2 + 2 * t * (t + tau)) / tau**2

    def value(self, t):
        if self.kind == "constant":
            return self.p0.copy()
        if self.kind == "cubic-blend":
            return self.p0 + self.coeff * self._psi(t)[0]
        return np.asarray(self._spline(t), dtype=float)

    def derivative(self, t):
        if self.kind == "constant":
            return np.zeros_like(self.p0)
        if self.kind == "cubic-blend":
            return self.coeff * self._psi(t)[1]
        return np.asarray(self._spline(t, 1), dtype=float)

    def describe(self):
        return {"kind": self.kind, "tau": self.tau}


@dataclass
class DelayDAE:
    """Matrices, loads, delay and history of the semidiscrete delay system."""

    K_a: sk.SparseMatrix
    D: sk.SparseMatrix
    M_c: sk.SparseMatrix
    K_b: sk.SparseMatrix
    f: object
    g: object
    tau: float
    history: History
    p0: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        check_positive(self.tau, "tau")
        if abs(self.history.tau - self.tau) > 1e-14 * self.tau:
            raise ValueError("history interval does not match the delay")
        for t in (-self.tau, 0.0):
            if not np.allclose(self.history.value(t), self.p0, rtol=0, atol=1e-12 * (1 + np.abs(self.p0).max())):
                raise ValueError("history must satisfy Phi(-tau) = Phi(0) = p0")
        self._Ka = sk.factorize(self.K_a)

    @classmethod
    def from_system(cls, system, tau, history="constant"):
        """Delay system of a two-field (or toy) system; ``history`` is a kind or a :class:`History`."""
        if isinstance(system, NetworkSystem):
            raise TypeError("the delay layer handles two-field systems only")
        p0 = np.asarray(system.p0, dtype=float)
        if history == "constant":
            hist = History.constant(p0, tau)
        elif history == "cubic-blend":
            hist = History.constant(p0, tau)
            dae = cls(system.K_a, system.D, system.M_c, system.K_b, system.f, system.g, tau, hist, p0)
            coeff = sk.solve_spd(system.M_c, dae.g_tilde(0.0) - system.K_b @ p0, tol=1e-14).solution
            hist = History.cubic_blend(p0, tau, coeff)
        elif isinstance(history, History):
            hist = history
        else:
            raise ValueError(f"history must be one of {HISTORY_KINDS[:2]} or a History")
        return cls(system.K_a, system.D, system.M_c, system.K_b, system.f, system.g, tau, hist, p0,
                   {"history": hist.describe()})

    def coupling(self, x):
        """``D K_a^{-1} D^T x``."""
        return self.D @ self._Ka.solve(self.D.T @ x)

    def g_tilde(self, t):
        fdot = self.f.derivative(t)
        return self.g(t) - self.D @ self._Ka.solve(fdot)

    def displacement(self, t, p_delayed):
        return self._Ka.solve(self.f(t) + self.D.T @ p_delayed)


@dataclass(frozen=True)
class StabilityVerdict:
    rho: float
    classification: str
    margin: float


def classify(rho, band=MARGINAL_BAND):
    margin = abs(rho - 1.0)
    if margin <= band:
        return StabilityVerdict(rho, "marginal", margin)
    return StabilityVerdict(rho, "stable" if rho < 1 else "unstable", margin)


def stability_test(dae_or_system, tol=1e-12, max_iter=20000):
    """Spectral radius of ``M_c^{-1} D K_a^{-1} D^T`` and its classification."""
    apply, dim = pressure_operator(dae_or_system)
    try:
        rho = sk.spectral_radius(apply, dim, tol=tol, max_iter=max_iter)
    except sk.NoConvergenceError as exc:
        rho = exc.estimate
    return classify(float(rho))


def splicing_residual(dae, g_tilde0=None):
    """Residual vector of the splicing condition at ``t = 0``."""
    h = dae.history
    g0 = dae.g_tilde(0.0) if g_tilde0 is None else np.asarray(g_tilde0, dtype=float)
    return dae.M_c @ h.derivative(0.0) + dae.K_b @ h.value(0.0) - g0 \
        + dae.coupling(h.derivative(-dae.tau))


def splicing_check(dae, g_tilde0=None):
    """Euclidean norm of :func:`splicing_residual`."""
    return _norm(splicing_residual(dae, g_tilde0))


def method_of_steps(dae, T, inner_steps=1, guard=BLOWUP):
    """Integrate the delay system window by window.

    Inside each window implicit Euler with ``inner_steps`` sub-steps is used;
    the delayed derivative comes from backward differences of the previous
    window's inner grid (from the history on the first window).
    """
    n_windows = check_step_count(T, dae.tau)
    if int(inner_steps) != inner_steps or inner_steps < 1:
        raise ValueError("inner_steps must be a positive integer")
    inner_steps = int(inner_steps)
    tau = dae.tau
    dt = tau / inner_steps
    t0 = time.perf_counter()
    S = dae.M_c + dae.K_b * dt
    S_fac = sk.factorize(S)
    setup = time.perf_counter() - t0
    hist = dae.history
    n_total = n_windows * inner_steps
    npr, nu = dae.M_c.nrows, dae.K_a.nrows
    P = np.empty((n_total + 1, npr))
    U = np.empty((n_total + 1, nu))
    P[0] = dae.p0
    U[0] = dae.displacement(0.0, hist.value(-tau))
    residuals = np.zeros((n_total + 1, 2))
    norms = np.zeros((n_total + 1, 2))
    norms[0] = [_norm(U[0]), _norm(P[0])]
    walls = np.zeros(n_total)
    window_max = np.zeros(n_windows)

    def _trajectory(upto):
        grid = dt * np.arange(upto + 1)
        return Trajectory("method-of-steps", dt, T, grid, {"u": U[:upto + 1], "p": P[:upto + 1]},
                          residuals[:upto + 1], ("elasticity", "pressure"), norms[:upto + 1],
                          ("u", "p"), walls[:upto], setup,
                          {"delay": tau, "inner_steps": inner_steps, "history": hist.describe(),
                           "window_max_norm": window_max[:(upto + inner_steps - 1) // inner_steps]})

    for w in range(n_windows):
        for k in range(1, inner_steps + 1):
            start = time.perf_counter()
            idx = w * inner_steps + k
            t = idx * dt
            if w == 0:
                q = hist.derivative(t - tau)
                p_del = hist.value(t - tau)
            else:
                j = idx - inner_steps
                q = (P[j] - P[j - 1]) / dt
                p_del = P[j]
            b = dae.M_c @ P[idx - 1] + dt * (dae.g_tilde(t) - dae.coupling(q))
            P[idx] = S_fac.solve(b)
            b_u = dae.f(t) + dae.D.T @ p_del
            U[idx] = dae._Ka.solve(b_u)
            walls[idx - 1] = time.perf_counter() - start
            residuals[idx] = [_norm(dae.K_a @ U[idx] - b_u) / (1 + _norm(b_u)),
                              _norm(S @ P[idx] - b) / (1 + _norm(b))]
            norms[idx] = [_norm(U[idx]), _norm(P[idx])]
            mx = max(np.abs(P[idx]).max(initial=0.0), np.abs(U[idx]).max(initial=0.0))
            if not mx <= guard:
                window_max[w] = mx
                raise DivergenceDetected(idx, t, mx, _trajectory(idx))
            window_max[w] = max(window_max[w], mx)
    return _trajectory(n_total)


@dataclass
class GapTable:
    taus: np.ndarray
    gaps: np.ndarray
    ratios: np.ndarray
    metadata: dict = field(default_factory=dict)

    header = ("tau", "gap_c", "ratio_to_previous")

    def rows(self):
        out = []
        for i, (tau, gap) in enumerate(zip(self.taus, self.gaps)):
            out.append((float(tau), float(gap), float(self.ratios[i - 1]) if i > 0 else float("nan")))
        return out

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.header)
            for row in self.rows():
                writer.writerow([repr(v) for v in row])


def delay_gap_experiment(system, taus, fine_factor=256, T=1.0, history="constant"):
    """Sup-over-grid c-norm gap between the delay solution and the original system.

    For every delay ``tau`` the original system is integrated by implicit
    Euler with step ``tau / fine_factor`` and the delay system by the method
    of steps with ``fine_factor`` inner steps, so both share one grid.
    """
    taus = np.asarray(sorted(taus, reverse=True), dtype=float)
    gaps = []
    for tau in taus:
        dt = tau / fine_factor
        ref = integrate(system, IMPLICIT, dt, T, capture_every=1)
        dae = DelayDAE.from_system(system, tau, history)
        delay = method_of_steps(dae, T, fine_factor)
        diff = delay.states["p"] - ref.states["p"]
        Mc = system.M_c
        gap = max(np.sqrt(max(float(d @ (Mc @ d)), 0.0)) for d in diff)
        gaps.append(gap)
    gaps = np.array(gaps)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = gaps[:-1] / gaps[1:]
    meta = {"fine_factor": fine_factor, "T": T, "history": history if isinstance(history, str)
            else history.kind, "reference": "implicit Euler at tau / fine_factor",
            "norm": "c-norm, sup over the fine grid"}
    return GapTable(taus, gaps, ratios, meta)
