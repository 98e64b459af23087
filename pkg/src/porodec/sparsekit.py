"""Sparse linear algebra used by every assembled form and time step.

Storage is delegated to :mod:`scipy.sparse` (CSR); the SPD direct solver is a
banded Cholesky factorization in natural ordering (LAPACK ``pbtrf``), which is
cheap for the moderate bandwidth of structured meshes.  Conjugate gradients
and the power iteration are written out here because they also act on
matrix-free operators (Schur complements).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sps

DEFAULT_TOL = 1e-10


class SolverError(RuntimeError):
    """Base class for linear solver failures."""


class NotSPDError(SolverError):
    """Raised when a Cholesky pivot is not positive."""


class NoConvergenceError(SolverError):
    """CG or power iteration ran out of iterations."""

    def __init__(self, message, residual=np.nan, iterations=0, estimate=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
        self.estimate = estimate


class SparseMatrix:
    """Immutable row-compressed matrix.

    Column indices are sorted per row and explicit zeros are dropped on
    construction.  ``symmetry_hint`` is only ever set after checking the
    entries, so a ``True`` value can be trusted by the SPD solvers.
    """

    __slots__ = ("_csr", "symmetry_hint", "_factor", "__weakref__")

    def __init__(self, matrix, symmetry_hint=None):
        csr = sps.csr_matrix(matrix, dtype=float, copy=True)
        csr.sum_duplicates()
        csr.eliminate_zeros()
        csr.sort_indices()
        csr.data.setflags(write=False)
        csr.indices.setflags(write=False)
        csr.indptr.setflags(write=False)
        self._csr = csr
        self._factor = None
        if symmetry_hint is None:
            symmetry_hint = _check_symmetric(csr)
        elif symmetry_hint and not _check_symmetric(csr):
            raise ValueError("symmetry_hint=True but the matrix is not symmetric")
        self.symmetry_hint = bool(symmetry_hint)

    @property
    def shape(self):
        return self._csr.shape

    @property
    def nrows(self):
        return self._csr.shape[0]

    @property
    def ncols(self):
        return self._csr.shape[1]

    @property
    def nnz(self):
        return self._csr.nnz

    @property
    def indptr(self):
        return self._csr.indptr

    @property
    def indices(self):
        return self._csr.indices

    @property
    def data(self):
        return self._csr.data

    def rows(self):
        """Yield ``(column_indices, values)`` per row."""
        ptr = self._csr.indptr
        for i in range(self.nrows):
            yield self._csr.indices[ptr[i]:ptr[i + 1]], self._csr.data[ptr[i]:ptr[i + 1]]

    def tocsr(self):
        return self._csr.copy()

    def toarray(self):
        return self._csr.toarray()

    def diagonal(self):
        return self._csr.diagonal()

    @property
    def T(self):
        return SparseMatrix(self._csr.T, symmetry_hint=self.symmetry_hint or None)

    def __matmul__(self, x):
        if isinstance(x, SparseMatrix):
            return SparseMatrix(self._csr @ x._csr)
        return self._csr @ np.asarray(x, dtype=float)

    def __rmatmul__(self, x):
        return np.asarray(x, dtype=float) @ self._csr

    def __mul__(self, scale):
        return SparseMatrix(self._csr * float(scale), symmetry_hint=self.symmetry_hint or None)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __add__(self, other):
        if not isinstance(other, SparseMatrix):
            return NotImplemented
        if other.shape != self.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        return SparseMatrix(self._csr + other._csr)

    def __sub__(self, other):
        return self + (-other)

    def __repr__(self):
        return f"SparseMatrix(shape={self.shape}, nnz={self.nnz}, symmetric={self.symmetry_hint})"


def _check_symmetric(csr):
    if csr.shape[0] != csr.shape[1]:
        return False
    if csr.nnz == 0:
        return True
    scale = np.abs(csr.data).max()
    diff = csr - csr.T
    if diff.nnz == 0:
        return True
    return bool(np.abs(diff.data).max() <= 1e-12 * scale)


def from_triplets(nrows, ncols, triplets):
    """Build a matrix from ``(row, col, value)`` triplets, summing duplicates.

    ``triplets`` may be a sequence of tuples or a tuple of three arrays
    ``(rows, cols, values)`` as produced by vectorized assembly.
    """
    if nrows < 0 or ncols < 0:
        raise ValueError("matrix dimensions must be non-negative")
    if isinstance(triplets, tuple) and len(triplets) == 3 and np.ndim(triplets[0]) == 1:
        rows, cols, vals = (np.asarray(a) for a in triplets)
    else:
        trip = list(triplets)
        if trip:
            rows, cols, vals = (np.asarray(a) for a in zip(*trip))
        else:
            rows = cols = np.zeros(0, dtype=int)
            vals = np.zeros(0)
    rows = rows.astype(np.int64, copy=False)
    cols = cols.astype(np.int64, copy=False)
    if rows.size and (rows.min() < 0 or rows.max() >= nrows):
        raise IndexError(f"row index out of range for {nrows} rows")
    if cols.size and (cols.min() < 0 or cols.max() >= ncols):
        raise IndexError(f"column index out of range for {ncols} columns")
    coo = sps.coo_matrix((np.asarray(vals, dtype=float), (rows, cols)), shape=(nrows, ncols))
    return SparseMatrix(coo)


def identity(n):
    return SparseMatrix(sps.identity(n, format="csr"))


def zeros(nrows, ncols):
    return SparseMatrix(sps.csr_matrix((nrows, ncols)))


def diag(values):
    return SparseMatrix(sps.diags(np.asarray(values, dtype=float), format="csr"))


@dataclass(frozen=True)
class SolveReport:
    solution: np.ndarray
    residual_norm: float
    iterations: int = 0
    factorization_reused: bool = False


class CholeskyFactor:
    """Banded Cholesky factor ``A = U^T U`` in natural ordering."""

    def __init__(self, A):
        if A.nrows != A.ncols:
            raise ValueError(f"matrix must be square, got {A.shape}")
        if not A.symmetry_hint:
            raise NotSPDError("matrix is not symmetric")
        n = A.nrows
        self.n = n
        csr = A._csr
        if n == 0:
            self._ab = np.zeros((1, 0))
            self.bandwidth = 0
            return
        d = csr.diagonal()
        if np.any(d <= 0):
            bad = int(np.flatnonzero(d <= 0)[0])
            raise NotSPDError(f"non-positive diagonal pivot at row {bad}")
        coo = csr.tocoo()
        upper = coo.col >= coo.row
        r, c, v = coo.row[upper], coo.col[upper], coo.data[upper]
        bw = int((c - r).max()) if r.size else 0
        ab = np.zeros((bw + 1, n))
        ab[bw + r - c, c] = v
        try:
            self._ab = scipy.linalg.cholesky_banded(ab, lower=False, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NotSPDError(f"Cholesky factorization failed: {exc}") from None
        self.bandwidth = bw

    def solve(self, b):
        if self.n == 0:
            return np.zeros(0)
        return scipy.linalg.cho_solve_banded((self._ab, False), np.asarray(b, dtype=float),
                                             check_finite=False)


def factorize(A):
    """Return the (cached) Cholesky factor of ``A``."""
    if A._factor is None:
        A._factor = CholeskyFactor(A)
    return A._factor


def cg(apply, b, tol=DEFAULT_TOL, maxiter=None, x0=None):
    """Plain conjugate gradients on an SPD operator.

    Stops once ``||b - A x|| <= tol * (1 + ||b||)``, checked on the true
    residual.  Returns ``(x, residual_norm, iterations)``.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    if maxiter is None:
        maxiter = max(10 * n, 100)
    target = tol * (1.0 + np.linalg.norm(b))
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - apply(x) if x0 is not None else b.copy()
    rr = r @ r
    if np.sqrt(rr) <= target:
        return x, float(np.sqrt(rr)), 0
    d = r.copy()
    for it in range(1, maxiter + 1):
        Ad = apply(d)
        dAd = d @ Ad
        if dAd <= 0:
            raise NotSPDError(f"operator not positive definite (d^T A d = {dAd:.3e})")
        alpha = rr / dAd
        x += alpha * d
        r -= alpha * Ad
        rr_new = r @ r
        if np.sqrt(rr_new) <= target:
            true_res = np.linalg.norm(b - apply(x))
            if true_res <= target:
                return x, float(true_res), it
            r = b - apply(x)
            rr_new = r @ r
            d = r.copy()
            rr = rr_new
            continue
        d = r + (rr_new / rr) * d
        rr = rr_new
    res = float(np.linalg.norm(b - apply(x)))
    raise NoConvergenceError(f"CG did not converge in {maxiter} iterations (residual {res:.3e})",
                             residual=res, iterations=maxiter)


def solve_spd(A, b, mode="direct", tol=DEFAULT_TOL, maxiter=None):
    """Solve ``A x = b`` for symmetric positive definite ``A``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    if A.nrows != A.ncols:
        raise ValueError(f"matrix must be square, got {A.shape}")
    b = np.asarray(b, dtype=float)
    if b.shape != (A.nrows,):
        raise ValueError(f"right-hand side has shape {b.shape}, expected ({A.nrows},)")
    if mode == "direct":
        reused = A._factor is not None
        x = factorize(A).solve(b)
        res = float(np.linalg.norm(b - A @ x))
        if res > tol * (1.0 + np.linalg.norm(b)):
            # one step of iterative refinement for badly scaled systems
            x = x + A._factor.solve(b - A @ x)
            res = float(np.linalg.norm(b - A @ x))
        return SolveReport(x, res, 0, reused)
    if mode == "cg":
        if not A.symmetry_hint:
            raise NotSPDError("matrix is not symmetric")
        x, res, it = cg(lambda v: A @ v, b, tol=tol, maxiter=maxiter)
        return SolveReport(x, res, it, False)
    raise ValueError(f"unknown solve mode {mode!r}; expected 'direct' or 'cg'")


def spectral_radius(apply, dim, tol=1e-10, max_iter=10000):
    """Dominant eigenvalue magnitude of a linear operator by power iteration.

    The operator is assumed to have a real dominant eigenvalue.  Starts from
    the all-ones vector and re-seeds once with ``(1, 2, ..., dim)`` if the
    iterate is annihilated.
    """
    if dim < 1:
        raise ValueError("dim must be at least 1")
    seeds = [np.ones(dim), np.arange(1.0, dim + 1.0)]
    lam = 0.0
    for seed in seeds:
        x = seed / np.linalg.norm(seed)
        y = np.asarray(apply(x), dtype=float)
        scale = np.linalg.norm(y)
        if scale == 0.0:
            continue
        for it in range(max_iter):
            lam = x @ y
            res = np.linalg.norm(y - lam * x)
            if res <= tol * abs(lam):
                return float(abs(lam))
            x = y / np.linalg.norm(y)
            y = np.asarray(apply(x), dtype=float)
            if np.linalg.norm(y) == 0.0:
                return 0.0
        raise NoConvergenceError(
            f"power iteration did not converge in {max_iter} iterations "
            f"(estimate {abs(lam):.6g}, residual {res:.3e})",
            residual=float(res), iterations=max_iter, estimate=float(abs(lam)))
    return 0.0


def block_compose(blocks: Sequence[Sequence], shapes=None):
    """Assemble a block matrix.

    ``blocks[i][j]`` is ``None``, a :class:`SparseMatrix`, or a pair
    ``(scale, SparseMatrix)``.  Block row heights and column widths are
    inferred from the present blocks, or taken from ``shapes=(heights, widths)``.
    """
    nbr = len(blocks)
    nbc = len(blocks[0]) if nbr else 0
    heights = [None] * nbr
    widths = [None] * nbc
    if shapes is not None:
        heights, widths = list(shapes[0]), list(shapes[1])
    parsed = []
    for i, row in enumerate(blocks):
        if len(row) != nbc:
            raise ValueError(f"block row {i} has {len(row)} entries, expected {nbc}")
        prow = []
        for j, blk in enumerate(row):
            if blk is None:
                prow.append(None)
                continue
            scale, mat = (blk if isinstance(blk, tuple) else (1.0, blk))
            r, c = mat.shape
            if heights[i] is None:
                heights[i] = r
            elif heights[i] != r:
                raise ValueError(f"block ({i}, {j}) has {r} rows, expected {heights[i]}")
            if widths[j] is None:
                widths[j] = c
            elif widths[j] != c:
                raise ValueError(f"block ({i}, {j}) has {c} columns, expected {widths[j]}")
            prow.append((float(scale), mat))
        parsed.append(prow)
    for i, hgt in enumerate(heights):
        if hgt is None:
            raise ValueError(f"block row {i} is empty; pass shapes= to size it")
    for j, wid in enumerate(widths):
        if wid is None:
            raise ValueError(f"block column {j} is empty; pass shapes= to size it")
    roff = np.concatenate([[0], np.cumsum(heights)]).astype(int)
    coff = np.concatenate([[0], np.cumsum(widths)]).astype(int)
    rows, cols, vals = [], [], []
    for i, prow in enumerate(parsed):
        for j, entry in enumerate(prow):
            if entry is None:
                continue
            scale, mat = entry
            coo = mat._csr.tocoo()
            rows.append(coo.row + roff[i])
            cols.append(coo.col + coff[j])
            vals.append(scale * coo.data)
    if rows:
        trip = (np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))
    else:
        trip = (np.zeros(0, int), np.zeros(0, int), np.zeros(0))
    return from_triplets(int(roff[-1]), int(coff[-1]), trip)
