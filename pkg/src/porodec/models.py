"""Ready-to-step systems: two-field poroelasticity, multiple networks, and the 3+1 toy."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import femkit as fk
from . import meshkit as mk
from . import sparsekit as sk
from .config import ConfigError, Expression, RunConfig

CONSISTENCY_TOL = 1e-8


@dataclass(frozen=True)
class PoroParams:
    """Material parameters; per-network entries are tuples of length ``m``."""

    lam: float
    mu: float
    kappa_over_nu: tuple
    inv_M: float
    alpha: tuple
    beta: np.ndarray | None = None

    def __post_init__(self):
        kon = tuple(np.atleast_1d(np.asarray(self.kappa_over_nu, dtype=float)).tolist())
        alpha = tuple(np.atleast_1d(np.asarray(self.alpha, dtype=float)).tolist())
        object.__setattr__(self, "kappa_over_nu", kon)
        object.__setattr__(self, "alpha", alpha)
        m = len(kon)
        beta = np.zeros((m, m)) if self.beta is None else np.array(self.beta, dtype=float)
        object.__setattr__(self, "beta", beta)
        problems = []
        if not self.mu > 0:
            problems.append("mu (must be > 0)")
        if not self.lam >= 0:
            problems.append("lam (must be >= 0)")
        if not all(k > 0 for k in kon):
            problems.append("kappa_over_nu (must be > 0)")
        if not self.inv_M > 0:
            problems.append("inv_M (must be > 0)")
        if len(alpha) != m:
            problems.append(f"alpha (expected {m} entries, got {len(alpha)})")
        elif not all(0 <= a <= 1 for a in alpha):
            problems.append("alpha (must lie in [0, 1])")
        if beta.shape != (m, m):
            problems.append(f"beta (expected shape {(m, m)}, got {beta.shape})")
        else:
            if np.any(beta < 0):
                problems.append("beta (entries must be >= 0)")
            if np.any(np.diag(beta) != 0):
                problems.append("beta (diagonal must be zero)")
        if problems:
            raise ValueError("invalid parameters: " + ", ".join(problems))
        if m > 1 and not np.allclose(beta, beta.T, rtol=0, atol=0):
            warnings.warn("exchange rates beta are not symmetric", stacklevel=3)

    @property
    def m(self):
        return len(self.kappa_over_nu)

    def kappa_over_nu_of(self, i):
        return self.kappa_over_nu[i]

    def alpha_of(self, i):
        return self.alpha[i]


@dataclass(eq=False)
class TwoFieldSystem:
    """Matrices, loads and consistent initial data of the two-field model."""

    K_a: sk.SparseMatrix
    K_b: sk.SparseMatrix
    M_c: sk.SparseMatrix
    D: sk.SparseMatrix
    f: Callable
    g: Callable
    u0: np.ndarray
    p0: np.ndarray
    params: PoroParams | None = None
    u_map: fk.DofMap | None = None
    p_map: fk.DofMap | None = None
    mesh: mk.TriMesh | None = None
    metadata: dict = field(default_factory=dict)

    kind = "two-field"

    def __post_init__(self):
        nu, npr = self.K_a.nrows, self.M_c.nrows
        if self.K_a.shape != (nu, nu) or self.K_b.shape != (npr, npr) or self.D.shape != (npr, nu):
            raise ValueError("non-conforming matrix dimensions")
        if self.u0.shape != (nu,) or self.p0.shape != (npr,):
            raise ValueError("initial vectors do not match matrix dimensions")
        res = self.consistency_residual()
        if res > CONSISTENCY_TOL:
            raise ValueError(f"initial data not consistent (relative residual {res:.2e})")

    def consistency_residual(self):
        rhs = self.f(0.0) + self.D.T @ self.p0
        nrm = np.linalg.norm(rhs)
        r = np.linalg.norm(self.K_a @ self.u0 - rhs)
        return float(r / nrm if nrm > 0 else r)

    @property
    def sizes(self):
        return self.K_a.nrows, self.M_c.nrows

    def norm_matrix(self, which):
        return {"a": self.K_a, "b": self.K_b, "c": self.M_c}[which]


@dataclass(eq=False)
class ToyTwoField(TwoFieldSystem):
    """Finite-dimensional two-field system with coupling scale ``omega``."""

    omega: float = 0.0

    kind = "toy"

    @property
    def A(self):
        return self.K_a.toarray()

    @property
    def D_row(self):
        return self.D.toarray()

    @property
    def C(self):
        return float(self.M_c.toarray()[0, 0])

    @property
    def B(self):
        return float(self.K_b.toarray()[0, 0])


@dataclass(eq=False)
class NetworkSystem:
    """Matrices, loads and consistent initial data of the m-network model."""

    K_a: sk.SparseMatrix
    M_y: sk.SparseMatrix
    M_c: sk.SparseMatrix
    M_Q: sk.SparseMatrix
    D: list
    D_hat: list
    beta: np.ndarray
    f: Callable
    g: list
    u0: np.ndarray
    y0: np.ndarray
    p0: np.ndarray
    params: PoroParams | None = None
    u_map: fk.DofMap | None = None
    y_map: fk.DofMap | None = None
    q_map: fk.DofMap | None = None
    mesh: mk.TriMesh | None = None
    metadata: dict = field(default_factory=dict)

    kind = "network"

    def __post_init__(self):
        m = len(self.D)
        if m < 1 or len(self.D_hat) != m or len(self.g) != m:
            raise ValueError("network lists must all have length m >= 1")
        self.beta = np.asarray(self.beta, dtype=float).reshape(m, m)
        self.y0 = np.asarray(self.y0, dtype=float).reshape(m, -1)
        self.p0 = np.asarray(self.p0, dtype=float).reshape(m, -1)
        res_u = self.consistency_residual()
        if res_u > CONSISTENCY_TOL:
            raise ValueError(f"u0 not consistent with p0 (relative residual {res_u:.2e})")
        res_y = self.flux_residual()
        if res_y > 1e-8:
            raise ValueError(f"y0 not consistent with p0 (relative residual {res_y:.2e})")

    @property
    def m(self):
        return len(self.D)

    def consistency_residual(self):
        rhs = self.f(0.0) + sum(Di.T @ pi for Di, pi in zip(self.D, self.p0))
        nrm = np.linalg.norm(rhs)
        r = np.linalg.norm(self.K_a @ self.u0 - rhs)
        return float(r / nrm if nrm > 0 else r)

    def flux_residual(self):
        worst = 0.0
        for Dh, y, p in zip(self.D_hat, self.y0, self.p0):
            rhs = Dh.T @ p
            r = np.linalg.norm(self.M_y @ y - rhs) / (1.0 + np.linalg.norm(rhs))
            worst = max(worst, float(r))
        return worst

    def norm_matrix(self, which):
        return {"a": self.K_a, "c": self.M_c, "y": self.M_y}[which]


# ---------------------------------------------------------------- builders

def _mesh_from_config(cfg):
    n = cfg.get("mesh", "n", 8)
    mesh = mk.unit_square_mesh(n)
    domain = cfg.get("mesh", "domain", "square")
    if domain == "punched":
        center = (cfg.get("mesh", "hole_center_x", 0.5), cfg.get("mesh", "hole_center_y", 0.5))
        mesh = mk.punch_hole(mesh, center, cfg.get("mesh", "hole_radius", 0.25))
    elif domain != "square":
        raise ConfigError(f"mesh.domain must be 'square' or 'punched', got {domain!r}")
    return mesh


def _params_from_config(cfg, m=1):
    required = ("lambda", "mu", "kappa_over_nu", "inv_M", "alpha")
    missing = [k for k in required if not cfg.has("params", k)]
    if missing:
        raise ConfigError("missing parameters: " + ", ".join(f"params.{k}" for k in missing))
    kon = cfg.get("params", "kappa_over_nu")
    alpha = cfg.get("params", "alpha")
    if len(kon) == 1 and m > 1:
        kon = kon * m
    if len(alpha) == 1 and m > 1:
        alpha = alpha * m
    beta = np.zeros((m, m))
    for key in cfg.data.get("beta", {}):
        _, i, j = key.split("_")
        i, j = int(i) - 1, int(j) - 1
        if i >= m or j >= m:
            raise ConfigError(f"beta.{key} refers to a network beyond m = {m}")
        beta[i, j] = cfg.get("beta", key)
    return PoroParams(lam=cfg.get("params", "lambda"), mu=cfg.get("params", "mu"),
                      kappa_over_nu=kon, inv_M=cfg.get("params", "inv_M"), alpha=alpha, beta=beta)


def make_load(mesh, dofmap, expr):
    """Load provider for an expression, caching the spatial vector when separable."""
    if expr is None:
        return fk.zero_load(dofmap.size)
    if not expr.spatial:
        ones = fk.assemble_load(mesh, dofmap, lambda x, y: np.ones_like(x))
        return fk.SeparableLoad(ones, lambda t: float(expr(t=t)), None)
    if not expr.depends_on("t"):
        vec = fk.assemble_load(mesh, dofmap, lambda x, y: expr(x, y))
        return fk.SeparableLoad(vec, lambda t: 1.0, lambda t: 0.0)
    return fk.AssembledLoad(mesh, dofmap, lambda x, y, t: expr(x, y, t))


def make_vector_load(mesh, u_map, fx, fy):
    fx = fx or Expression("0")
    fy = fy or Expression("0")
    if fx.source in ("0", "0.0") and fy.source in ("0", "0.0"):
        return fk.zero_load(u_map.size)
    if fx.depends_on("t") or fy.depends_on("t"):
        return fk.AssembledLoad(mesh, u_map, lambda x, y, t: (fx(x, y, t), fy(x, y, t)))
    vec = fk.assemble_load(mesh, u_map, lambda x, y: (fx(x, y), fy(x, y)))
    return fk.SeparableLoad(vec, lambda t: 1.0, lambda t: 0.0)


def build_two_field(config, mesh=None):
    """Assemble the two-field model from a :class:`RunConfig` (or preset name)."""
    cfg = RunConfig.from_preset(config) if isinstance(config, str) else config
    mesh = mesh if mesh is not None else _mesh_from_config(cfg)
    params = _params_from_config(cfg, m=1)
    bc = cfg.get("mesh", "pressure_bc", "dirichlet")
    if bc not in ("dirichlet", "neumann"):
        raise ConfigError(f"mesh.pressure_bc must be 'dirichlet' or 'neumann', got {bc!r}")
    u_dir = "boundary" if mesh.hole is None else "outer"
    u_map = fk.p1_vector_dofmap(mesh, u_dir)
    p_map = fk.p1_dofmap(mesh, "boundary" if bc == "dirichlet" else None)
    forms = fk.assemble_p1_forms(mesh, u_map, p_map, params)
    f = make_vector_load(mesh, u_map, cfg.get("loads", "f_x"), cfg.get("loads", "f_y"))
    g = make_load(mesh, p_map, cfg.get("loads", "g"))
    p0_expr = cfg.get("initial", "p0") or cfg.get("initial", "p1") or Expression("0")
    p0 = fk.interpolate(mesh, p_map, lambda x, y: p0_expr(x, y))
    u0 = consistent_displacement(forms["K_a"], f(0.0), [forms["D"]], [p0])
    meta = {"model": "two-field", "n": mesh.n, "h": mesh.h, "pressure_bc": bc,
            "displacement_bc": "homogeneous Dirichlet on " + ("outer boundary" if mesh.hole else "boundary")}
    return TwoFieldSystem(forms["K_a"], forms["K_b"], forms["M_c"], forms["D"], f, g, u0, p0,
                          params, u_map, p_map, mesh, meta)


def consistent_displacement(K_a, f0, D_list, p_list):
    rhs = f0 + sum(Di.T @ pi for Di, pi in zip(D_list, p_list))
    return sk.solve_spd(K_a, rhs, tol=1e-13).solution


def build_network(config, mesh=None):
    """Assemble the m-network model (P1 displacement, RT0 fluxes, P0 pressures)."""
    cfg = RunConfig.from_preset(config) if isinstance(config, str) else config
    m = cfg.get("params", "m", 1)
    if m < 1:
        raise ConfigError("params.m must be at least 1")
    mesh = mesh if mesh is not None else _mesh_from_config(cfg)
    params = _params_from_config(cfg, m=m)
    if len(params.kappa_over_nu) != m:
        raise ConfigError(f"params.kappa_over_nu needs {m} entries")
    u_map = fk.p1_vector_dofmap(mesh, "outer")
    y_map = fk.rt0_dofmap(mesh)
    q_map = fk.p0_dofmap(mesh)
    K_a = fk.elasticity_stiffness(mesh, u_map, params.lam, params.mu)
    M_Q = fk.mass_matrix(mesh, q_map, 1.0)
    M_c = fk.mass_matrix(mesh, q_map, params.inv_M)
    M_y = fk.rt0_mass(mesh, y_map)
    D = [fk.divergence_coupling(mesh, u_map, q_map, params.alpha_of(i)) for i in range(m)]
    D_hat = [fk.rt0_divergence(mesh, y_map, q_map, np.sqrt(params.kappa_over_nu_of(i)))
             for i in range(m)]
    f = make_vector_load(mesh, u_map, cfg.get("loads", "f_x"), cfg.get("loads", "f_y"))
    g = []
    p0 = []
    for i in range(1, m + 1):
        gi = cfg.get("loads", f"g{i}") or cfg.get("loads", "g")
        g.append(make_load(mesh, q_map, gi))
        pi = cfg.get("initial", f"p{i}") or cfg.get("initial", "p0") or Expression("0")
        p0.append(fk.interpolate(mesh, q_map, lambda x, y, e=pi: e(x, y)))
    u0 = consistent_displacement(K_a, f(0.0), D, p0)
    y0 = [sk.solve_spd(M_y, Dh.T @ p, tol=1e-13).solution for Dh, p in zip(D_hat, p0)]
    cc = params.inv_M
    bmax = float(params.beta.max()) if m > 1 else 0.0
    meta = {"model": "network", "m": m, "n": mesh.n, "h": mesh.h,
            "domain": "punched (staircase hole)" if mesh.hole else "unit square",
            "displacement_bc": "homogeneous Dirichlet on outer square",
            "flux_bc": "zero normal trace on all boundary edges",
            "small_exchange_check": {"6*beta*(m-1)": 6 * bmax * (m - 1), "c_c": cc,
                                     "passes": 6 * bmax * (m - 1) <= cc}}
    return NetworkSystem(K_a, M_y, M_c, M_Q, D, D_hat, params.beta, f, g, u0, np.array(y0),
                         np.array(p0), params, u_map, y_map, q_map, mesh, meta)


TOY_A = np.array([[2.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 2.0]])
TOY_D = np.array([[1.0, 2.0, 3.0]])


def build_toy(omega=0.0, p0=1.0):
    """The 3+1 toy with ``f = (1, 1, 1)``, ``g = sin t`` and coupling ``omega * [1 2 3]``."""
    K_a = sk.SparseMatrix(TOY_A)
    D = sk.SparseMatrix(omega * TOY_D)
    M_c = sk.SparseMatrix(np.array([[1.0]]))
    K_b = sk.SparseMatrix(np.array([[1.0]]))
    f = fk.VectorLoad(lambda t: np.ones(3), lambda t: np.zeros(3))
    g = fk.VectorLoad(lambda t: np.array([np.sin(t)]), lambda t: np.array([np.cos(t)]))
    p = np.array([float(p0)])
    u0 = consistent_displacement(K_a, f(0.0), [D], [p])
    meta = {"model": "toy", "omega": omega, "p0": float(p0), "p0_choice": "fixed by convention"}
    return ToyTwoField(K_a, K_b, M_c, D, f, g, u0, p, None, None, None, None, meta, omega=float(omega))


def build_from_config(cfg):
    model = cfg.get("run", "model", "two-field")
    if model == "two-field":
        return build_two_field(cfg)
    if model == "network":
        return build_network(cfg)
    if model == "toy":
        return build_toy(cfg.get("toy", "omega", 0.0), cfg.get("toy", "p0", 1.0))
    raise ConfigError(f"unknown model {model!r}")


# ------------------------------------------------------- coupling constants

def pressure_operator(system):
    """Matrix-free ``x -> M_c^{-1} D K_a^{-1} D^T x`` (stacked over networks)."""
    Ka = sk.factorize(system.K_a)
    Mc = sk.factorize(system.M_c)
    D = system.D if isinstance(system.D, list) else [system.D]
    npr = system.M_c.nrows

    def apply(x):
        parts = x.reshape(len(D), npr)
        w = Ka.solve(sum(Di.T @ xi for Di, xi in zip(D, parts)))
        return np.concatenate([Mc.solve(Di @ w) for Di in D])

    return apply, len(D) * npr


@dataclass(frozen=True)
class CouplingConstants:
    c_a: float | None
    c_c: float | None
    C_d: float | None
    rho: float
    weak_coupling: str
    stability: str

    def as_dict(self):
        return {"c_a": self.c_a, "c_c": self.c_c, "C_d": self.C_d, "rho": self.rho,
                "weak_coupling": self.weak_coupling, "stability": self.stability}


TIGHT_BAND = 1e-3


def weak_coupling_verdict(C_d, c_a, c_c):
    """Compare ``C_d^2`` with ``c_a * c_c``; within 0.1 % counts as tight."""
    bound = c_a * c_c
    ratio = C_d**2 / bound
    if ratio < 1 - TIGHT_BAND:
        return "satisfied"
    if ratio <= 1 + TIGHT_BAND:
        return "satisfied (tight)"
    return "violated"


def coupling_constants(system, tol=1e-10, max_iter=20000):
    apply, dim = pressure_operator(system)
    try:
        rho = sk.spectral_radius(apply, dim, tol=tol, max_iter=max_iter)
    except sk.NoConvergenceError as exc:
        rho = exc.estimate
    stability = "stable" if rho < 1 else "unstable"
    if isinstance(system, ToyTwoField):
        c_a = float(np.linalg.eigvalsh(system.A)[0])
        c_c = float(np.linalg.eigvalsh(system.M_c.toarray())[0])
        C_d = float(np.linalg.norm(system.D_row, 2))
        weak = weak_coupling_verdict(C_d, c_a, c_c)
        return CouplingConstants(c_a, c_c, C_d, rho, weak, stability)
    # no generalized eigensolver for FEM systems: the verdict rests on rho
    weak = "satisfied (rho < 1)" if rho < 1 else "violated (rho >= 1)"
    return CouplingConstants(None, None, None, rho, weak, stability)
