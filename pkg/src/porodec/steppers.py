"""Implicit and semi-explicit Euler for the two-field and network models.

The semi-explicit scheme lags the pressure in the elasticity equation, so a
step is one displacement solve followed by one pressure solve, both with
matrices factorized once per run.  The implicit scheme couples the two; it is
reduced to a symmetric positive definite pressure Schur complement that is
applied matrix-free (one ``K_a`` solve per application) and solved by CG, or
formed densely when the pressure space is small.
"""

from __future__ import annotations

import csv
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import sparsekit as sk
from ._validation import check_step_count, check_positive
from .models import NetworkSystem, TwoFieldSystem

SEMI_EXPLICIT, IMPLICIT = "semi-explicit", "implicit"
SCHEMES = (SEMI_EXPLICIT, IMPLICIT)
BLOWUP = 1e12
DENSE_SCHUR_MAX = 200
DENSE_STEP_MAX = 16
SCHUR_TOL = 1e-12


class StepError(RuntimeError):
    def __init__(self, step, cause):
        super().__init__(f"step {step} failed: {cause}")
        self.step = step
        self.cause = cause


class DivergenceDetected(RuntimeError):
    """State max-norm exceeded the blow-up threshold."""

    def __init__(self, step, t, norm, trajectory=None):
        super().__init__(f"divergence detected at step {step} (t = {t:.6g}, max-norm {norm:.3e})")
        self.step, self.t, self.norm, self.trajectory = step, t, norm, trajectory


@dataclass
class TwoFieldState:
    t: float
    u: np.ndarray
    p: np.ndarray

    def max_norm(self):
        return max(np.abs(self.u).max(initial=0.0), np.abs(self.p).max(initial=0.0))


@dataclass
class NetworkState:
    t: float
    u: np.ndarray
    y: np.ndarray
    p: np.ndarray

    def max_norm(self):
        return max(np.abs(self.u).max(initial=0.0), np.abs(self.y).max(initial=0.0),
                   np.abs(self.p).max(initial=0.0))


@dataclass
class Trajectory:
    """Output of one integration run.

    ``states`` holds the captured fields (first axis = captured time index);
    ``residuals`` and ``state_norms`` are recorded at every step, row ``n``
    belonging to ``t_n`` (row 0 is the initial state, residual 0).
    """

    scheme: str
    tau: float
    T: float
    times: np.ndarray
    states: dict
    residuals: np.ndarray
    residual_names: tuple
    state_norms: np.ndarray
    state_norm_names: tuple
    step_wall_times: np.ndarray
    setup_time: float = 0.0
    metadata: dict = field(default_factory=dict)

    @property
    def n_steps(self):
        return len(self.step_wall_times)

    @property
    def grid(self):
        return self.tau * np.arange(self.n_steps + 1)

    @property
    def solve_time(self):
        return float(self.step_wall_times.sum())

    @property
    def total_time(self):
        return self.setup_time + self.solve_time

    def final(self, name):
        return self.states[name][-1]

    def at(self, name, k):
        return self.states[name][k]


def trajectory_rows(traj):
    """Per-step rows ``(step, t, state norms..., residuals...)`` for steps 1..N."""
    header = ["step", "t"] + [f"norm_{k}" for k in traj.state_norm_names] \
        + [f"res_{k}" for k in traj.residual_names]
    rows = []
    for n in range(1, traj.n_steps + 1):
        rows.append([n, n * traj.tau, *traj.state_norms[n], *traj.residuals[n]])
    return header, rows


def write_trajectory_csv(traj, path):
    """Comma-separated per-step norms and residuals with a header row."""
    header, rows = trajectory_rows(traj)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def initial_state(system):
    if isinstance(system, NetworkSystem):
        return NetworkState(0.0, system.u0.copy(), system.y0.copy(), system.p0.copy())
    return TwoFieldState(0.0, system.u0.copy(), system.p0.copy())


def _norm(v):
    v = v.ravel()
    return math.sqrt(float(v @ v))


def _rel(r, b):
    return _norm(r) / (1.0 + _norm(b))


class TwoFieldStepper:
    """Precomputed factorizations for stepping a two-field system.

    Systems with at most ``DENSE_STEP_MAX`` unknowns are stepped through the
    dense affine map ``z -> Phi z + Psi_f f + Psi_g g`` extracted from the
    sparse step, which removes per-call overhead for long toy runs.
    """

    residual_names = ("elasticity", "pressure")

    def __init__(self, system, tau, scheme=SEMI_EXPLICIT, tol=sk.DEFAULT_TOL):
        check_positive(tau, "tau")
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
        self.system, self.tau, self.scheme, self.tol = system, float(tau), scheme, tol
        s = system
        self.Ka = sk.factorize(s.K_a)
        self.S = s.M_c + s.K_b * self.tau
        self.S_fac = sk.factorize(self.S)
        self.DT = s.D.T
        self.schur_fac = None
        if scheme == IMPLICIT and s.M_c.nrows <= DENSE_SCHUR_MAX:
            cols = self.DT.toarray()
            schur = self.S.toarray()
            if cols.size:
                schur = schur + s.D @ self.Ka.solve(cols)
            schur = 0.5 * (schur + schur.T)
            self.schur_fac = sk.factorize(sk.SparseMatrix(schur, symmetry_hint=True))
        self.cg_iterations = 0
        self.nu, self.np_ = s.K_a.nrows, s.M_c.nrows
        self.dense = None
        if self.nu + self.np_ <= DENSE_STEP_MAX:
            self._build_dense()

    def _build_dense(self):
        nu, npr = self.nu, self.np_
        zu, zp = np.zeros(nu), np.zeros(npr)

        phi = np.column_stack(
            [np.concatenate(self._solve(e[:nu], e[nu:], zu, zp)) for e in np.eye(nu + npr)])
        psi_f = np.column_stack([np.concatenate(self._solve(zu, zp, e, zp)) for e in np.eye(nu)])
        psi_g = np.column_stack([np.concatenate(self._solve(zu, zp, zu, e)) for e in np.eye(npr)])
        s = self.system
        self.dense = {"phi": phi, "psi_f": psi_f, "psi_g": psi_g, "Ka": s.K_a.toarray(),
                      "D": s.D.toarray(), "Mc": s.M_c.toarray(), "S": self.S.toarray()}

    def schur_apply(self, p):
        return self.S @ p + self.system.D @ self.Ka.solve(self.DT @ p)

    def _solve(self, u, p, f1, g1):
        s, tau = self.system, self.tau
        if self.scheme == SEMI_EXPLICIT:
            u1 = self.Ka.solve(f1 + self.DT @ p)
            p1 = self.S_fac.solve(s.M_c @ p - s.D @ (u1 - u) + tau * g1)
            return u1, p1
        rhs = tau * g1 + s.D @ u + s.M_c @ p - s.D @ self.Ka.solve(f1)
        if self.schur_fac is not None:
            p1 = self.schur_fac.solve(rhs)
        else:
            p1, _, it = sk.cg(self.schur_apply, rhs, tol=min(self.tol, SCHUR_TOL), x0=p)
            self.cg_iterations += it
        return self.Ka.solve(f1 + self.DT @ p1), p1

    def step(self, state):
        s, tau = self.system, self.tau
        t1 = state.t + tau
        f1 = s.f(t1)
        g1 = s.g(t1)
        d = self.dense
        if d is not None:
            z = d["phi"] @ np.concatenate((state.u, state.p)) + d["psi_f"] @ f1 + d["psi_g"] @ g1
            u1, p1 = z[:self.nu], z[self.nu:]
            Ka, D, Mc, S = d["Ka"], d["D"], d["Mc"], d["S"]
            pe = p1 if self.scheme == IMPLICIT else state.p
            b_u = f1 + D.T @ pe
            b_p = Mc @ state.p + tau * g1
            r_u = Ka @ u1 - b_u
            r_p = D @ (u1 - state.u) + S @ p1 - b_p
        else:
            u1, p1 = self._solve(state.u, state.p, f1, g1)
            pe = p1 if self.scheme == IMPLICIT else state.p
            b_u = f1 + self.DT @ pe
            b_p = s.M_c @ state.p + tau * g1
            r_u = s.K_a @ u1 - b_u
            r_p = s.D @ (u1 - state.u) + self.S @ p1 - b_p
        return TwoFieldState(t1, u1, p1), (_rel(r_u, b_u), _rel(r_p, b_p))


class NetworkStepper:
    """Precomputed factorizations for stepping an m-network system."""

    residual_names = ("elasticity", "flux", "pressure")

    def __init__(self, system, tau, scheme=SEMI_EXPLICIT, tol=sk.DEFAULT_TOL):
        check_positive(tau, "tau")
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
        self.system, self.tau, self.scheme, self.tol = system, float(tau), scheme, tol
        s = system
        self.m = s.m
        self.nq = s.M_c.nrows
        self.Ka = sk.factorize(s.K_a)
        self.My = sk.factorize(s.M_y)
        self.mc = s.M_c.diagonal()
        self.wq = s.M_Q.diagonal()
        self.DT = [Di.T for Di in s.D]
        self.DhT = [Dh.T for Dh in s.D_hat]
        self.L = np.diag(s.beta.sum(axis=1)) - s.beta
        bound = 2 * self.tau * np.abs(s.beta).sum(axis=1).max(initial=0.0) * np.max(self.wq / self.mc)
        if bound >= 1:
            warnings.warn("exchange terms may make the pressure Schur complement indefinite",
                          stacklevel=2)
        self.schur_fac = None
        if self.m * self.nq <= DENSE_SCHUR_MAX:
            eye = np.eye(self.m * self.nq)
            cols = np.column_stack([self.schur_apply(e) for e in eye])
            cols = 0.5 * (cols + cols.T)
            self.schur_fac = sk.factorize(sk.SparseMatrix(cols, symmetry_hint=True))
        self.cg_iterations = 0

    def _fluxes(self, P):
        rhs = np.column_stack([DhT @ p for DhT, p in zip(self.DhT, P)])
        return self.My.solve(rhs).T

    def schur_apply(self, x):
        s, tau = self.system, self.tau
        P = x.reshape(self.m, self.nq)
        Y = self._fluxes(P)
        out = self.mc * P - tau * self.wq * (self.L @ P)
        for i in range(self.m):
            out[i] += tau * (s.D_hat[i] @ Y[i])
        if self.scheme == IMPLICIT:
            w = self.Ka.solve(sum(DT @ p for DT, p in zip(self.DT, P)))
            for i in range(self.m):
                out[i] += s.D[i] @ w
        return out.ravel()

    def step(self, state):
        s, tau, m = self.system, self.tau, self.m
        t1 = state.t + tau
        f1 = s.f(t1)
        G = np.array([gi(t1) for gi in s.g])
        if self.scheme == SEMI_EXPLICIT:
            b_u = f1 + sum(DT @ p for DT, p in zip(self.DT, state.p))
            u1 = self.Ka.solve(b_u)
            B = np.array([self.mc * state.p[i] - s.D[i] @ (u1 - state.u) + tau * G[i]
                          for i in range(m)])
            rhs = B
        else:
            B = np.array([self.mc * state.p[i] + s.D[i] @ state.u + tau * G[i] for i in range(m)])
            KF = self.Ka.solve(f1)
            rhs = np.array([B[i] - s.D[i] @ KF for i in range(m)])
        if self.schur_fac is not None:
            x = self.schur_fac.solve(rhs.ravel())
        else:
            x, _, it = sk.cg(self.schur_apply, rhs.ravel(), tol=min(self.tol, SCHUR_TOL),
                             x0=state.p.ravel())
            self.cg_iterations += it
        P = x.reshape(m, self.nq)
        Y = self._fluxes(P)
        if self.scheme == IMPLICIT:
            b_u = f1 + sum(DT @ p for DT, p in zip(self.DT, P))
            u1 = self.Ka.solve(b_u)
        r_u = _rel(s.K_a @ u1 - b_u, b_u)
        r_y = max(_rel(s.M_y @ Y[i] - self.DhT[i] @ P[i], self.DhT[i] @ P[i]) for i in range(m))
        exch = self.wq * (self.L @ P)
        r_p = 0.0
        for i in range(m):
            lhs = s.D[i] @ (u1 - state.u) + self.mc * (P[i] - state.p[i]) + tau * (s.D_hat[i] @ Y[i]) \
                - tau * exch[i]
            r_p = max(r_p, _rel(lhs - tau * G[i], self.mc * state.p[i] + tau * G[i]))
        return NetworkState(t1, u1, Y, P), (r_u, r_y, r_p)


def make_stepper(system, tau, scheme=SEMI_EXPLICIT, tol=sk.DEFAULT_TOL):
    if isinstance(system, NetworkSystem):
        return NetworkStepper(system, tau, scheme, tol)
    if isinstance(system, TwoFieldSystem):
        return TwoFieldStepper(system, tau, scheme, tol)
    raise TypeError(f"cannot step a {type(system).__name__}")


_STEPPER_CACHE_ATTR = "_stepper_cache"


def _cached_stepper(system, tau, scheme):
    cache = system.__dict__.setdefault(_STEPPER_CACHE_ATTR, {})
    key = (scheme, float(tau))
    if key not in cache:
        cache[key] = make_stepper(system, tau, scheme)
    return cache[key]


def semi_explicit_step_two_field(system, state, tau):
    """One semi-explicit step; returns the new :class:`TwoFieldState`."""
    return _cached_stepper(system, tau, SEMI_EXPLICIT).step(state)[0]


def implicit_step_two_field(system, state, tau):
    return _cached_stepper(system, tau, IMPLICIT).step(state)[0]


def semi_explicit_step_network(system, state, tau):
    return _cached_stepper(system, tau, SEMI_EXPLICIT).step(state)[0]


def implicit_step_network(system, state, tau):
    return _cached_stepper(system, tau, IMPLICIT).step(state)[0]


def _state_fields(state):
    if isinstance(state, NetworkState):
        return {"u": state.u, "y": state.y, "p": state.p}
    return {"u": state.u, "p": state.p}


def default_capture_every(system, n_steps):
    if getattr(system, "mesh", None) is None:
        return 1
    return max(1, -(-n_steps // 200))


def integrate(system, scheme, tau, T, capture_every=None, tol=sk.DEFAULT_TOL, guard=BLOWUP):
    """Run ``scheme`` from the consistent initial state up to ``T``.

    Raises :class:`DivergenceDetected` when the state max-norm exceeds
    ``guard``; the partial trajectory is attached to the exception.
    """
    n_steps = check_step_count(T, tau)
    t0 = time.perf_counter()
    stepper = make_stepper(system, tau, scheme, tol)
    setup = time.perf_counter() - t0
    if capture_every is None:
        capture_every = default_capture_every(system, n_steps)
    state = initial_state(system)
    captured = {k: [v.copy()] for k, v in _state_fields(state).items()}
    times = [0.0]
    nres = len(stepper.residual_names)
    residuals = np.zeros((n_steps + 1, nres))
    fields = tuple(_state_fields(state))
    norms = np.zeros((n_steps + 1, len(fields)))
    norms[0] = [_norm(v) for v in _state_fields(state).values()]
    walls = np.zeros(n_steps)

    def _trajectory(upto):
        return Trajectory(scheme, float(tau), float(T), np.array(times),
                          {k: np.array(v) for k, v in captured.items()}, residuals[:upto + 1],
                          stepper.residual_names, norms[:upto + 1], fields, walls[:upto],
                          setup, {"capture_every": capture_every,
                                  "cg_iterations": stepper.cg_iterations})

    for n in range(1, n_steps + 1):
        start = time.perf_counter()
        try:
            new_state, res = stepper.step(state)
        except sk.SolverError as exc:
            raise StepError(n, exc) from exc
        walls[n - 1] = time.perf_counter() - start
        new_state.t = n * tau
        state = new_state
        residuals[n] = res
        vals = _state_fields(state)
        norms[n] = [_norm(v) for v in vals.values()]
        mx = state.max_norm()
        if not np.isfinite(mx) or mx > guard:
            raise DivergenceDetected(n, state.t, mx, _trajectory(n))
        if n % capture_every == 0 or n == n_steps:
            times.append(state.t)
            for k, v in vals.items():
                captured[k].append(v.copy())
    return _trajectory(n_steps)


def propagate(system, scheme, tau, T, guard=BLOWUP):
    """Final state of ``scheme`` at ``T`` without per-step diagnostics.

    Intended for long reference runs; small systems use the dense step map.
    Raises :class:`DivergenceDetected` (without a trajectory) on blow-up.
    """
    n_steps = check_step_count(T, tau)
    stepper = make_stepper(system, tau, scheme)
    state = initial_state(system)
    d = getattr(stepper, "dense", None)
    if d is None:
        for n in range(1, n_steps + 1):
            state = stepper.step(state)[0]
            state.t = n * tau
            if not state.max_norm() <= guard:
                raise DivergenceDetected(n, state.t, state.max_norm())
        return state
    phi, psi_f, psi_g = d["phi"], d["psi_f"], d["psi_g"]
    f, g = system.f, system.g
    z = np.concatenate((state.u, state.p))
    for n in range(1, n_steps + 1):
        t1 = n * tau
        z = phi @ z + psi_f @ f(t1) + psi_g @ g(t1)
        if n % 64 == 0 and not np.abs(z).max() <= guard:
            raise DivergenceDetected(n, t1, float(np.abs(z).max()))
    if not np.abs(z).max() <= guard:
        raise DivergenceDetected(n_steps, n_steps * tau, float(np.abs(z).max()))
    return TwoFieldState(n_steps * tau, z[:stepper.nu].copy(), z[stepper.nu:].copy())


class _EulerIntegrator(BaseEstimator):
    scheme = None

    def __init__(self, tau=0.01, T=1.0, capture_every=None, tol=sk.DEFAULT_TOL):
        self.tau = tau
        self.T = T
        self.capture_every = capture_every
        self.tol = tol

    def fit(self, system, y=None):
        """Integrate ``system``; the result is stored in ``trajectory_``."""
        self.trajectory_ = integrate(system, self.scheme, self.tau, self.T,
                                     capture_every=self.capture_every, tol=self.tol)
        self.n_steps_ = self.trajectory_.n_steps
        return self

    def predict(self, system=None):
        """Final state fields of the fitted run."""
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "trajectory_")
        return {k: v[-1] for k, v in self.trajectory_.states.items()}


class SemiExplicitEuler(_EulerIntegrator):
    """Semi-explicit Euler: pressure lagged by one step in the elasticity equation."""

    scheme = SEMI_EXPLICIT


class ImplicitEuler(_EulerIntegrator):
    """Fully coupled implicit Euler (baseline and reference scheme)."""

    scheme = IMPLICIT
