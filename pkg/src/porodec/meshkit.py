"""Structured triangulations of the unit square.

Every square of an ``n x n`` grid is split along its bottom-left to
top-right diagonal, so uniform refinement reproduces ``unit_square_mesh(2n)``
exactly and coarse meshes are nested in fine ones.  A circular hole is cut by
dropping every cell whose centroid lies inside the disk (staircase boundary).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from collections import deque

import numpy as np

INTERIOR, OUTER, HOLE = 0, 1, 2


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Triangle mesh with edge topology.

    ``edges`` are sorted vertex pairs ``(lo, hi)`` whose global orientation
    runs from ``lo`` to ``hi``.  ``edge_cells[e] = (left, right)`` with ``-1``
    for a missing neighbour; ``cell_edges[c, k]`` is the edge opposite local
    vertex ``k`` and ``cell_edge_signs[c, k]`` is ``+1`` when cell ``c`` lies
    left of that edge.  ``edge_tags`` holds ``INTERIOR``, ``OUTER`` (on the
    square's boundary) or ``HOLE``.
    """

    vertices: np.ndarray
    cells: np.ndarray
    h: float
    n: int | None = None
    parent: np.ndarray | None = None
    hole: tuple | None = None
    grid_cells: np.ndarray | None = field(default=None, repr=False)
    edges: np.ndarray = field(init=False, repr=False)
    edge_cells: np.ndarray = field(init=False, repr=False)
    cell_edges: np.ndarray = field(init=False, repr=False)
    cell_edge_signs: np.ndarray = field(init=False, repr=False)
    edge_tags: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        for name in ("vertices", "cells"):
            getattr(self, name).setflags(write=False)
        if np.any(self.areas <= 0):
            raise MeshError("mesh has non-positive cell areas")
        edges, edge_cells, cell_edges, signs = _edge_topology(self.cells, len(self.vertices))
        tags = np.full(len(edges), INTERIOR, dtype=np.int8)
        bnd = edge_cells[:, 1] < 0
        p, q = self.vertices[edges[:, 0]], self.vertices[edges[:, 1]]
        on_side = np.zeros(len(edges), dtype=bool)
        for axis in (0, 1):
            for side in (0.0, 1.0):
                on_side |= (np.abs(p[:, axis] - side) < 1e-12) & (np.abs(q[:, axis] - side) < 1e-12)
        tags[bnd & on_side] = OUTER
        tags[bnd & ~on_side] = HOLE
        for name, val in (("edges", edges), ("edge_cells", edge_cells), ("cell_edges", cell_edges),
                          ("cell_edge_signs", signs), ("edge_tags", tags)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def areas(self):
        v = self.vertices[self.cells]
        e1, e2 = v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @property
    def centroids(self):
        return self.vertices[self.cells].mean(axis=1)

    @property
    def boundary_edge_flags(self):
        return self.edge_tags != INTERIOR

    @property
    def boundary_vertex_flags(self):
        flags = np.zeros(self.n_vertices, dtype=bool)
        flags[self.edges[self.boundary_edge_flags].ravel()] = True
        return flags

    @property
    def outer_vertex_flags(self):
        flags = np.zeros(self.n_vertices, dtype=bool)
        flags[self.edges[self.edge_tags == OUTER].ravel()] = True
        return flags

    def euler_characteristic(self):
        return self.n_vertices - self.n_edges + self.n_cells

    def edge_lengths(self):
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def edge_normals(self):
        """Unit normals pointing to the right of each oriented edge."""
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        nrm = np.stack([d[:, 1], -d[:, 0]], axis=1)
        return nrm / np.hypot(d[:, 0], d[:, 1])[:, None]

    def locate(self, points):
        """Index of a cell containing each point; raises if one is outside."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.grid_cells is not None:
            cells = _locate_structured(self, pts)
        else:
            cells = np.full(len(pts), -1)
        missing = np.flatnonzero(cells < 0)
        if missing.size:
            cells[missing] = _locate_search(self, pts[missing])
        if np.any(cells < 0):
            bad = pts[np.flatnonzero(cells < 0)[0]]
            raise MeshError(f"point ({bad[0]:.6g}, {bad[1]:.6g}) lies outside the mesh")
        return cells

    def barycentric(self, cells, points):
        v = self.vertices[self.cells[cells]]
        e1, e2 = v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        d = points - v[:, 0]
        l1 = (d[:, 0] * e2[:, 1] - d[:, 1] * e2[:, 0]) / det
        l2 = (e1[:, 0] * d[:, 1] - e1[:, 1] * d[:, 0]) / det
        return np.stack([1.0 - l1 - l2, l1, l2], axis=1)


def _edge_topology(cells, nverts):
    nc = len(cells)
    # edge opposite local vertex k joins vertices k+1 and k+2
    a = cells[:, [1, 2, 0]].ravel()
    b = cells[:, [2, 0, 1]].ravel()
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    key = lo.astype(np.int64) * nverts + hi
    uniq, inv = np.unique(key, return_inverse=True)
    edges = np.stack([uniq // nverts, uniq % nverts], axis=1).astype(np.int64)
    cell_edges = inv.reshape(nc, 3)
    # traversal a->b is counterclockwise, so the cell is left of lo->hi iff a < b
    signs = np.where(a < b, 1, -1).reshape(nc, 3).astype(np.int8)
    edge_cells = np.full((len(edges), 2), -1, dtype=np.int64)
    cell_idx = np.repeat(np.arange(nc), 3)
    flat_sign = signs.ravel()
    counts = np.bincount(inv, minlength=len(edges))
    if np.any(counts > 2):
        raise MeshError("non-manifold mesh: an edge has more than two cells")
    left = flat_sign > 0
    edge_cells[inv[left], 0] = cell_idx[left]
    edge_cells[inv[~left], 1] = cell_idx[~left]
    # boundary edges seen only from the right: flip so column 0 is the only cell
    only_right = (edge_cells[:, 0] < 0) & (edge_cells[:, 1] >= 0)
    edge_cells[only_right] = edge_cells[only_right][:, ::-1]
    return edges, edge_cells, cell_edges, signs


def _locate_structured(mesh, pts):
    n = mesh.grid_cells.shape[0]
    h = 1.0 / n
    eps = 1e-12
    inside = (pts[:, 0] >= -eps) & (pts[:, 0] <= 1 + eps) & (pts[:, 1] >= -eps) & (pts[:, 1] <= 1 + eps)
    i = np.clip(np.floor(pts[:, 0] / h).astype(int), 0, n - 1)
    j = np.clip(np.floor(pts[:, 1] / h).astype(int), 0, n - 1)
    lx, ly = pts[:, 0] - i * h, pts[:, 1] - j * h
    upper = (ly > lx).astype(int)
    cells = mesh.grid_cells[i, j, upper].copy()
    cells[~inside] = -1
    return cells


def _locate_search(mesh, pts, chunk=2048):
    out = np.full(len(pts), -1)
    v = mesh.vertices[mesh.cells]
    e1, e2 = v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    tol = 1e-10
    for s in range(0, len(pts), chunk):
        p = pts[s:s + chunk]
        d = p[:, None, :] - v[None, :, 0, :]
        l1 = (d[..., 0] * e2[None, :, 1] - d[..., 1] * e2[None, :, 0]) / det
        l2 = (e1[None, :, 0] * d[..., 1] - e1[None, :, 1] * d[..., 0]) / det
        ok = (l1 >= -tol) & (l2 >= -tol) & (l1 + l2 <= 1 + tol)
        has = ok.any(axis=1)
        out[s:s + chunk][has] = ok[has].argmax(axis=1)
    return out


def unit_square_mesh(n):
    """``n x n`` squares, each split along its rising diagonal."""
    if int(n) != n or n < 1:
        raise MeshError(f"subdivisions per side must be a positive integer, got {n}")
    n = int(n)
    xs = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    vertices = np.stack([X.ravel(), Y.ravel()], axis=1)
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    v0 = j * (n + 1) + i
    v1, v2, v3 = v0 + 1, v0 + n + 2, v0 + n + 1
    lower = np.stack([v0, v1, v2], axis=-1)
    upper = np.stack([v0, v2, v3], axis=-1)
    cells = np.stack([lower, upper], axis=2).reshape(-1, 3)
    grid = np.arange(2 * n * n).reshape(n, n, 2)
    return TriMesh(vertices=vertices, cells=cells.astype(np.int64), h=1.0 / n, n=n, grid_cells=grid)


def punch_hole(mesh, center=(0.5, 0.5), radius=0.25):
    """Remove the cells whose centroid lies strictly inside a disk."""
    center = np.asarray(center, dtype=float)
    if radius < 0:
        raise MeshError("radius must be non-negative")
    if radius == 0:
        return mesh
    dist = np.hypot(*(mesh.centroids - center).T)
    keep = dist >= radius
    if not keep.any():
        raise MeshError("hole removes every cell")
    cells = mesh.cells[keep]
    used = np.unique(cells)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    new_cells = remap[cells]
    if not _connected(new_cells):
        raise MeshError("removing the hole disconnects the mesh")
    grid = None
    if mesh.grid_cells is not None:
        cmap = np.full(mesh.n_cells, -1, dtype=np.int64)
        cmap[keep] = np.arange(keep.sum())
        grid = cmap[mesh.grid_cells]
    return TriMesh(vertices=mesh.vertices[used], cells=new_cells, h=mesh.h, n=mesh.n,
                   hole=(tuple(center), float(radius)), grid_cells=grid)


def _connected(cells):
    edges, edge_cells, _, _ = _edge_topology(cells, int(cells.max()) + 1)
    inner = edge_cells[(edge_cells >= 0).all(axis=1)]
    adj = [[] for _ in range(len(cells))]
    for a, b in inner:
        adj[a].append(b)
        adj[b].append(a)
    seen = np.zeros(len(cells), dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        c = queue.popleft()
        for d in adj[c]:
            if not seen[d]:
                seen[d] = True
                queue.append(d)
    return bool(seen.all())


def refine_uniform(mesh):
    """Split every cell into four by its edge midpoints.

    Child ``4c + k`` (``k < 3``) keeps local vertex ``k`` of parent ``c``;
    child ``4c + 3`` is the middle triangle.  ``parent`` records the map.
    """
    nv = mesh.n_vertices
    mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    vertices = np.vstack([mesh.vertices, mids])
    c = mesh.cells
    m = mesh.cell_edges + nv  # midpoint opposite local vertex k
    children = np.stack([
        np.stack([c[:, 0], m[:, 2], m[:, 1]], axis=1),
        np.stack([m[:, 2], c[:, 1], m[:, 0]], axis=1),
        np.stack([m[:, 1], m[:, 0], c[:, 2]], axis=1),
        np.stack([m[:, 0], m[:, 1], m[:, 2]], axis=1),
    ], axis=1).reshape(-1, 3)
    parent = np.repeat(np.arange(mesh.n_cells), 4)
    grid = None
    n = None
    if mesh.grid_cells is not None:
        n = 2 * mesh.n
        full = unit_square_mesh(n)
        located = _locate_structured(full, _centroids(vertices, children))
        grid = np.full(2 * n * n, -1, dtype=np.int64)
        grid[located] = np.arange(len(children))
        grid = grid.reshape(n, n, 2)
    return TriMesh(vertices=vertices, cells=children.astype(np.int64), h=mesh.h / 2, n=n,
                   parent=parent, hole=mesh.hole, grid_cells=grid)


def _centroids(vertices, cells):
    return vertices[cells].mean(axis=1)


def edge_topology(mesh):
    """Edge numbering, orientation and signed cell incidence of ``mesh``."""
    return {
        "edges": mesh.edges,
        "edge_cells": mesh.edge_cells,
        "cell_edges": mesh.cell_edges,
        "cell_edge_signs": mesh.cell_edge_signs,
        "boundary": mesh.boundary_edge_flags,
        "tags": mesh.edge_tags,
    }


def canonical_form(mesh, decimals=12):
    """Ordering-independent description used to compare meshes."""
    verts = np.round(mesh.vertices, decimals)
    cells = {tuple(sorted(map(tuple, verts[c]))) for c in mesh.cells}
    return {tuple(v) for v in verts}, cells


def dump_text(mesh, path):
    """Write vertices, cells and edges as plain text sections."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# h = {float(mesh.h)!r}\n")
        if mesh.hole is not None:
            cx, cy = (float(c) for c in mesh.hole[0])
            fh.write(f"# hole center = ({cx!r}, {cy!r}) radius = {float(mesh.hole[1])!r} (staircase)\n")
        fh.write(f"vertices {mesh.n_vertices}\n")
        for k, (x, y) in enumerate(mesh.vertices):
            fh.write(f"{k} {float(x)!r} {float(y)!r} {int(mesh.boundary_vertex_flags[k])}\n")
        fh.write(f"cells {mesh.n_cells}\n")
        for k, (a, b, c) in enumerate(mesh.cells):
            fh.write(f"{k} {a} {b} {c}\n")
        fh.write(f"edges {mesh.n_edges}\n")
        for k, ((a, b), (l, r), t) in enumerate(zip(mesh.edges, mesh.edge_cells, mesh.edge_tags)):
            fh.write(f"{k} {a} {b} {l} {r} {t}\n")
