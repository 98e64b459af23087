"""Finite element spaces and forms on :class:`~porodec.meshkit.TriMesh`.

Spaces: scalar P1, vector P1 (x/y interleaved per vertex), RT0 with the
unit-flux edge basis, and P0 cell indicators.  Dirichlet-type constraints
are eliminated from the numbering, so every assembled matrix acts on free
dofs only.  All bilinear forms are integrated exactly; loads use the
three-edge-midpoint rule (exact for quadratics).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import sparsekit as sk
from .meshkit import INTERIOR, OUTER, TriMesh

P1, P1_VECTOR, RT0, P0 = "P1", "P1-vector", "RT0", "P0"

# barycentric coordinates of the edge midpoints (opposite vertex 0, 1, 2)
MIDPOINT_RULE = (np.array([[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]]),
                 np.full(3, 1.0 / 3.0))

_a1, _b1 = 0.059715871789770, 0.470142064105115
_a2, _b2 = 0.797426985353087, 0.101286507323456
_w1, _w2 = 0.132394152788506, 0.125939180544827
# degree-5, 7-point rule (weights sum to 1, scale by the cell area)
DEGREE5_RULE = (np.array([[1 / 3, 1 / 3, 1 / 3],
                          [_a1, _b1, _b1], [_b1, _a1, _b1], [_b1, _b1, _a1],
                          [_a2, _b2, _b2], [_b2, _a2, _b2], [_b2, _b2, _a2]]),
                np.array([0.225, _w1, _w1, _w1, _w2, _w2, _w2]))


def quadrature_points(mesh, rule=MIDPOINT_RULE):
    """Physical points ``(ncells, nq, 2)`` and weights ``(ncells, nq)``."""
    bary, w = rule
    pts = np.einsum("qk,ckd->cqd", bary, mesh.vertices[mesh.cells])
    return pts, mesh.areas[:, None] * w[None, :]


@dataclass(frozen=True, eq=False)
class DofMap:
    """Entity-to-dof numbering with eliminated entities mapped to ``-1``."""

    kind: str
    mesh: TriMesh = field(repr=False)
    entity_dofs: np.ndarray = field(repr=False)
    n_free: int

    @property
    def n_entities(self):
        return len(self.entity_dofs)

    @property
    def n_eliminated(self):
        return int((self.entity_dofs < 0).sum())

    @property
    def size(self):
        return 2 * self.n_free if self.kind == P1_VECTOR else self.n_free

    def cell_dofs(self):
        """Per-cell local-to-global dof table (``-1`` for eliminated)."""
        m = self.mesh
        if self.kind == P1:
            return self.entity_dofs[m.cells]
        if self.kind == P1_VECTOR:
            v = self.entity_dofs[m.cells]
            out = np.empty((m.n_cells, 6), dtype=np.int64)
            out[:, 0::2] = np.where(v >= 0, 2 * v, -1)
            out[:, 1::2] = np.where(v >= 0, 2 * v + 1, -1)
            return out
        if self.kind == RT0:
            return self.entity_dofs[m.cell_edges]
        return self.entity_dofs[:, None]

    def expand(self, vec):
        """Values per entity (vertex, edge or cell) with zeros where eliminated."""
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise ValueError(f"vector of size {vec.shape} does not match {self.kind} dofmap of size {self.size}")
        if self.kind == P1_VECTOR:
            out = np.zeros((self.n_entities, 2))
            free = self.entity_dofs >= 0
            out[free] = vec.reshape(-1, 2)[self.entity_dofs[free]]
            return out
        out = np.zeros(self.n_entities)
        free = self.entity_dofs >= 0
        out[free] = vec[self.entity_dofs[free]]
        return out

    def restrict(self, values):
        """Inverse of :meth:`expand`: pick the free entities."""
        values = np.asarray(values, dtype=float)
        free = self.entity_dofs >= 0
        order = np.argsort(self.entity_dofs[free])
        picked = values[free][order]
        return picked.ravel()


def _numbering(eliminated):
    dofs = np.full(len(eliminated), -1, dtype=np.int64)
    keep = ~np.asarray(eliminated, dtype=bool)
    dofs[keep] = np.arange(keep.sum())
    return dofs, int(keep.sum())


def _dirichlet_vertices(mesh, dirichlet):
    if dirichlet in (None, "none"):
        return np.zeros(mesh.n_vertices, dtype=bool)
    if dirichlet == "boundary":
        return mesh.boundary_vertex_flags
    if dirichlet == "outer":
        return mesh.outer_vertex_flags
    raise ValueError(f"unknown Dirichlet set {dirichlet!r}")


def p1_dofmap(mesh, dirichlet="boundary"):
    dofs, n = _numbering(_dirichlet_vertices(mesh, dirichlet))
    return DofMap(P1, mesh, dofs, n)


def p1_vector_dofmap(mesh, dirichlet="boundary"):
    dofs, n = _numbering(_dirichlet_vertices(mesh, dirichlet))
    return DofMap(P1_VECTOR, mesh, dofs, n)


def rt0_dofmap(mesh):
    """RT0 with zero normal trace: only interior edges carry dofs."""
    dofs, n = _numbering(mesh.edge_tags != INTERIOR)
    return DofMap(RT0, mesh, dofs, n)


def p0_dofmap(mesh):
    dofs, n = _numbering(np.zeros(mesh.n_cells, dtype=bool))
    return DofMap(P0, mesh, dofs, n)


def p1_gradients(mesh):
    """Constant gradients of the three hat functions per cell, ``(nc, 3, 2)``."""
    v = mesh.vertices[mesh.cells]
    area2 = 2.0 * mesh.areas
    # grad(lambda_k) = rot90(v_{k+2} - v_{k+1}) / (2|T|)
    e = v[:, [2, 0, 1]] - v[:, [1, 2, 0]]
    return np.stack([-e[..., 1], e[..., 0]], axis=-1) / area2[:, None, None]


def _scatter(rows_local, cols_local, values, nrows, ncols):
    r = np.broadcast_to(rows_local, values.shape).ravel()
    c = np.broadcast_to(cols_local, values.shape).ravel()
    v = values.ravel()
    keep = (r >= 0) & (c >= 0)
    return sk.from_triplets(nrows, ncols, (r[keep], c[keep], v[keep]))


def _check_map(mesh, dofmap, kinds):
    if dofmap.mesh is not mesh:
        raise ValueError("dofmap belongs to a different mesh")
    if dofmap.kind not in kinds:
        raise ValueError(f"expected a {'/'.join(kinds)} dofmap, got {dofmap.kind}")


def elasticity_stiffness(mesh, u_map, lam, mu):
    """Matrix of ``a(u, v) = (2 mu eps(u) + lam tr eps(u) I) : eps(v)``."""
    _check_map(mesh, u_map, (P1_VECTOR,))
    G = p1_gradients(mesh)
    nc = mesh.n_cells
    B = np.zeros((nc, 3, 6))
    B[:, 0, 0::2] = G[:, :, 0]
    B[:, 1, 1::2] = G[:, :, 1]
    B[:, 2, 0::2] = G[:, :, 1]
    B[:, 2, 1::2] = G[:, :, 0]
    C = np.array([[lam + 2 * mu, lam, 0.0], [lam, lam + 2 * mu, 0.0], [0.0, 0.0, mu]])
    K = np.einsum("c,cki,kl,clj->cij", mesh.areas, B, C, B)
    dofs = u_map.cell_dofs()
    return _scatter(dofs[:, :, None], dofs[:, None, :], K, u_map.size, u_map.size)


def scalar_stiffness(mesh, p_map, coeff):
    """Matrix of ``coeff * (grad p, grad q)`` on P1."""
    _check_map(mesh, p_map, (P1,))
    G = p1_gradients(mesh)
    K = coeff * mesh.areas[:, None, None] * np.einsum("cid,cjd->cij", G, G)
    dofs = p_map.cell_dofs()
    return _scatter(dofs[:, :, None], dofs[:, None, :], K, p_map.size, p_map.size)


def mass_matrix(mesh, dofmap, coeff=1.0):
    """Consistent mass ``coeff * (p, q)`` on P1 or P0."""
    _check_map(mesh, dofmap, (P1, P0))
    if dofmap.kind == P0:
        return sk.diag(coeff * mesh.areas)
    local = (np.ones((3, 3)) + np.eye(3)) / 12.0
    M = coeff * mesh.areas[:, None, None] * local[None]
    dofs = dofmap.cell_dofs()
    return _scatter(dofs[:, :, None], dofs[:, None, :], M, dofmap.size, dofmap.size)


def divergence_coupling(mesh, u_map, q_map, alpha):
    """Matrix of ``alpha * (div u, q)``; rows are pressure dofs."""
    _check_map(mesh, u_map, (P1_VECTOR,))
    _check_map(mesh, q_map, (P1, P0))
    G = p1_gradients(mesh)
    divs = G.reshape(mesh.n_cells, 6)  # interleaved (d/dx, d/dy) per vertex
    udofs = u_map.cell_dofs()
    if q_map.kind == P0:
        vals = alpha * mesh.areas[:, None, None] * divs[:, None, :]
        qdofs = q_map.cell_dofs()
    else:
        vals = alpha * (mesh.areas / 3.0)[:, None, None] * np.repeat(divs[:, None, :], 3, axis=1)
        qdofs = q_map.cell_dofs()
    return _scatter(qdofs[:, :, None], udofs[:, None, :], vals, q_map.size, u_map.size)


def rt0_local_vectors(mesh):
    """Vectors ``x_j - P_k`` from the opposite vertex to each cell vertex, ``(nc, 3, 3, 2)``.

    Entry ``[c, k, j]`` is ``v_j - v_k``; the RT0 basis on cell ``c`` for the
    edge opposite vertex ``k`` is ``s_k (x - v_k) / (2|T|)``.
    """
    v = mesh.vertices[mesh.cells]
    return v[:, None, :, :] - v[:, :, None, :]


def rt0_mass(mesh, y_map):
    """Exact L2 mass matrix of the unit-flux RT0 basis."""
    _check_map(mesh, y_map, (RT0,))
    d = rt0_local_vectors(mesh)  # affine field (x - v_k) sampled at vertices j
    sums = d.sum(axis=2)
    # integral of f.g over T for affine f, g = |T|/12 (sum_j f_j.g_j + (sum f).(sum g))
    inner = np.einsum("ckjd,cljd->ckl", d, d) + np.einsum("ckd,cld->ckl", sums, sums)
    area = mesh.areas
    s = mesh.cell_edge_signs.astype(float)
    M = inner * (area / 12.0 / (4.0 * area**2))[:, None, None] * s[:, :, None] * s[:, None, :]
    dofs = y_map.cell_dofs()
    return _scatter(dofs[:, :, None], dofs[:, None, :], M, y_map.size, y_map.size)


def rt0_divergence(mesh, y_map, q_map, scale=1.0):
    """Matrix of ``(div(scale * z), q)`` for RT0 ``z`` and P0 ``q``."""
    _check_map(mesh, y_map, (RT0,))
    _check_map(mesh, q_map, (P0,))
    vals = scale * mesh.cell_edge_signs.astype(float)[:, None, :]
    qdofs = q_map.cell_dofs()
    ydofs = y_map.cell_dofs()
    return _scatter(qdofs[:, :, None], ydofs[:, None, :], vals, q_map.size, y_map.size)


def assemble_p1_forms(mesh, u_map, p_map, params):
    """``K_a, K_b, M_c, D`` of the two-field model on P1 x P1."""
    _check_map(mesh, u_map, (P1_VECTOR,))
    _check_map(mesh, p_map, (P1,))
    return {
        "K_a": elasticity_stiffness(mesh, u_map, params.lam, params.mu),
        "K_b": scalar_stiffness(mesh, p_map, params.kappa_over_nu_of(0)),
        "M_c": mass_matrix(mesh, p_map, params.inv_M),
        "D": divergence_coupling(mesh, u_map, p_map, params.alpha_of(0)),
    }


def assemble_rt0_forms(mesh, y_map, q_map, params, network=0):
    """``M_y`` and ``D_hat_i`` for one network on RT0 x P0."""
    if mesh.edges is None:
        raise ValueError("mesh has no edge topology")
    return {
        "M_y": rt0_mass(mesh, y_map),
        "D_hat": rt0_divergence(mesh, y_map, q_map, np.sqrt(params.kappa_over_nu_of(network))),
    }


def _evaluate_fn(fn, x, y, t=None):
    out = fn(x, y) if t is None else fn(x, y, t)
    return np.broadcast_to(np.asarray(out, dtype=float), np.broadcast(x, y).shape)


def assemble_load(mesh, dofmap, fn, t=None):
    """Load vector ``(fn, phi_k)`` by the edge-midpoint rule.

    ``fn(x, y[, t])`` returns a scalar field, or for vector P1 a pair
    ``(fx, fy)``.
    """
    pts, w = quadrature_points(mesh, MIDPOINT_RULE)
    x, y = pts[..., 0], pts[..., 1]
    dofs = dofmap.cell_dofs()
    size = dofmap.size
    if dofmap.kind == P1_VECTOR:
        raw = fn(x, y) if t is None else fn(x, y, t)
        fx = np.broadcast_to(np.asarray(raw[0], dtype=float), x.shape)
        fy = np.broadcast_to(np.asarray(raw[1], dtype=float), x.shape)
        bary = MIDPOINT_RULE[0]
        local = np.empty((mesh.n_cells, 6))
        local[:, 0::2] = np.einsum("cq,qk->ck", fx * w, bary)
        local[:, 1::2] = np.einsum("cq,qk->ck", fy * w, bary)
    elif dofmap.kind == P1:
        vals = _evaluate_fn(fn, x, y, t)
        local = np.einsum("cq,qk->ck", vals * w, MIDPOINT_RULE[0])
    elif dofmap.kind == P0:
        vals = _evaluate_fn(fn, x, y, t)
        local = (vals * w).sum(axis=1)[:, None]
    else:
        raise ValueError("loads are defined on P1 and P0 spaces only")
    keep = dofs >= 0
    return np.bincount(dofs[keep], weights=local[keep], minlength=size).astype(float)


class SeparableLoad:
    """Load ``space(x) * time(t)`` with the spatial vector assembled once."""

    def __init__(self, vector, time_factor=None, time_derivative=None):
        self.vector = np.asarray(vector, dtype=float)
        self.vector.setflags(write=False)
        self.time_factor = time_factor or (lambda t: 1.0)
        self.time_derivative = time_derivative

    def __call__(self, t):
        return float(self.time_factor(t)) * self.vector

    def derivative(self, t):
        if self.time_derivative is None:
            return finite_difference(self, t)
        return float(self.time_derivative(t)) * self.vector


class AssembledLoad:
    """General space-time load re-assembled at each requested time."""

    def __init__(self, mesh, dofmap, fn, dfn=None):
        self.mesh, self.dofmap, self.fn, self.dfn = mesh, dofmap, fn, dfn

    def __call__(self, t):
        return assemble_load(self.mesh, self.dofmap, self.fn, t)

    def derivative(self, t):
        if self.dfn is None:
            return finite_difference(self, t)
        return assemble_load(self.mesh, self.dofmap, self.dfn, t)


class VectorLoad:
    """Time-dependent vector given directly (dense toy systems)."""

    def __init__(self, fn, dfn=None):
        self.fn, self.dfn = fn, dfn

    def __call__(self, t):
        return np.asarray(self.fn(t), dtype=float)

    def derivative(self, t):
        if self.dfn is None:
            return finite_difference(self, t)
        return np.asarray(self.dfn(t), dtype=float)


def zero_load(size):
    return SeparableLoad(np.zeros(size), lambda t: 0.0, lambda t: 0.0)


def finite_difference(load, t):
    """Central difference with step ``1e-6 * max(1, |t|)``."""
    step = 1e-6 * max(1.0, abs(t))
    return (load(t + step) - load(t - step)) / (2.0 * step)


def assemble_loads(mesh, dofmaps, f, g, t):
    """Load vectors ``(f_h(t), g_h(t))``; ``None`` stands for a zero load."""
    u_map, p_map = dofmaps
    f_h = np.zeros(u_map.size) if f is None else assemble_load(mesh, u_map, f, t)
    g_h = np.zeros(p_map.size) if g is None else assemble_load(mesh, p_map, g, t)
    return f_h, g_h


def interpolate(mesh, dofmap, fn):
    """Nodal interpolant: vertex values (P1), centroid values (P0), edge fluxes (RT0)."""
    if dofmap.kind in (P1, P1_VECTOR):
        x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
    elif dofmap.kind == P0:
        x, y = mesh.centroids[:, 0], mesh.centroids[:, 1]
    else:
        mid = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
        x, y = mid[:, 0], mid[:, 1]
    raw = fn(x, y)
    if dofmap.kind in (P1_VECTOR, RT0):
        vals = np.stack([np.broadcast_to(np.asarray(raw[0], float), x.shape),
                         np.broadcast_to(np.asarray(raw[1], float), x.shape)], axis=1)
        if dofmap.kind == RT0:
            normals = mesh.edge_normals() * mesh.edge_lengths()[:, None]
            vals = (vals * normals).sum(axis=1)
    else:
        vals = np.broadcast_to(np.asarray(raw, dtype=float), x.shape)
    return dofmap.restrict(vals)


def evaluate_at_points(mesh, dofmap, vec, points, derivative=False, cells=None):
    """Evaluate a finite element function at arbitrary points.

    With ``derivative=True`` returns the gradient (P1), Jacobian (vector P1)
    or divergence (RT0).  ``cells`` may pass precomputed containing cells.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if cells is None:
        cells = mesh.locate(pts)
    values = dofmap.expand(vec)
    if dofmap.kind == P0:
        return np.zeros(len(pts)) if derivative else values[cells]
    if dofmap.kind in (P1, P1_VECTOR):
        local = values[mesh.cells[cells]]  # (N, 3) or (N, 3, 2)
        if derivative:
            G = p1_gradients(mesh)[cells]
            if dofmap.kind == P1:
                return np.einsum("nk,nkd->nd", local, G)
            return np.einsum("nki,nkd->nid", local, G)
        lam = mesh.barycentric(cells, pts)
        if dofmap.kind == P1:
            return np.einsum("nk,nk->n", lam, local)
        return np.einsum("nk,nki->ni", lam, local)
    coeff = values[mesh.cell_edges[cells]] * mesh.cell_edge_signs[cells]
    area2 = 2.0 * mesh.areas[cells]
    if derivative:
        return coeff.sum(axis=1) * 2.0 / area2
    v = mesh.vertices[mesh.cells[cells]]
    field_ = (coeff[:, :, None] * (pts[:, None, :] - v)).sum(axis=1)
    return field_ / area2[:, None]


def elliptic_projection(form, mesh, dofmap, fn_grad, params, network=0, tol=sk.DEFAULT_TOL):
    """Galerkin projection in the ``a`` (vector P1) or ``b`` (scalar P1) inner product.

    ``fn_grad(x, y)`` returns the gradient of the source (shape ``(2, ...)``)
    or for ``form='a'`` its Jacobian as nested ``[[du/dx, du/dy], [dv/dx, dv/dy]]``.
    The right-hand side uses the edge-midpoint rule (degree 2).
    """
    pts, w = quadrature_points(mesh, MIDPOINT_RULE)
    x, y = pts[..., 0], pts[..., 1]
    G = p1_gradients(mesh)
    dofs = dofmap.cell_dofs()
    if form == "b":
        _check_map(mesh, dofmap, (P1,))
        gx, gy = (np.broadcast_to(np.asarray(c, float), x.shape) for c in fn_grad(x, y))
        k = params.kappa_over_nu_of(network)
        # cell integral of grad(p) . grad(phi_k)
        ig = np.stack([(gx * w).sum(1), (gy * w).sum(1)], axis=1)
        local = k * np.einsum("cd,ckd->ck", ig, G)
        K = scalar_stiffness(mesh, dofmap, k)
    elif form == "a":
        _check_map(mesh, dofmap, (P1_VECTOR,))
        J = fn_grad(x, y)
        J = np.array([[np.broadcast_to(np.asarray(J[i][j], float), x.shape) for j in range(2)]
                      for i in range(2)])
        eps = 0.5 * (J + J.transpose(1, 0, 2, 3))
        tr = eps[0, 0] + eps[1, 1]
        sigma = 2 * params.mu * eps + params.lam * tr[None, None] * np.eye(2)[:, :, None, None]
        isig = (sigma * w[None, None]).sum(axis=-1)  # (2, 2, nc)
        # eps(phi) for component i at vertex k: sym(e_i (x) grad lambda_k)
        local = np.empty((mesh.n_cells, 6))
        for i in range(2):
            local[:, i::2] = np.einsum("dc,ckd->ck", isig[i], G)
        K = elasticity_stiffness(mesh, dofmap, params.lam, params.mu)
    else:
        raise ValueError(f"form must be 'a' or 'b', got {form!r}")
    keep = dofs >= 0
    rhs = np.bincount(dofs[keep], weights=local[keep], minlength=dofmap.size)
    return sk.solve_spd(K, rhs, tol=tol).solution
