"""Global sparse Laplacian, screened Poisson solves and stability diagnostics.

The discrete operator ``L`` stores one tuned stencil per row.  The screened
Poisson problem ``(I - L) F = h`` is solved directly for moderate ``N`` and
by preconditioned GMRES above that.  Errors are reported in the max norm:

* forward error ``FE = max_i |Lap f(x_i) - (L f)_i|``
* inverse error ``IE = max_i |F_i - f(x_i)|``
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .exceptions import SolverError
from .local_ops import MethodConfig, tune_rows
from .stencils import build_knn_index

DIRECT_MAX_N = 20000
JACOBI_MIN_N = 5000
EXACT_NORM_MAX_N = 2000
DENSE_EIG_MAX_N = 3000


@dataclass
class SparseOperator:
    """Row-sparse discrete Laplace-Beltrami operator.

    ``indptr``, ``neighbors`` and ``weights`` hold the rows in stencil order
    (base point first); ``matrix`` is the same data as a CSR matrix.
    """

    indptr: np.ndarray
    neighbors: np.ndarray
    weights: np.ndarray
    k_final: np.ndarray
    gamma: np.ndarray
    converged: np.ndarray
    tune_iters: np.ndarray
    config: MethodConfig
    matrix: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.indptr) - 1
        # copies: sorting the CSR indices must not reorder the stencil-order arrays
        m = sp.csr_matrix((self.weights.copy(), self.neighbors.copy(), self.indptr.copy()), shape=(n, n))
        m.sort_indices()
        self.matrix = m

    @classmethod
    def from_rows(cls, rows, config):
        ks = np.array([len(r.neighbors) for r in rows])
        indptr = np.concatenate([[0], np.cumsum(ks)])
        return cls(
            indptr=indptr,
            neighbors=np.concatenate([r.neighbors for r in rows]).astype(np.intp),
            weights=np.concatenate([r.weights for r in rows]),
            k_final=ks,
            gamma=np.array([r.gamma for r in rows]),
            converged=np.array([r.converged for r in rows]),
            tune_iters=np.array([r.tune_iters for r in rows]),
            config=config,
        )

    @classmethod
    def from_matrix(cls, matrix, config=None):
        """Wrap a square sparse matrix (e.g. read back from Matrix Market).

        Rows are stored with the diagonal entry first; tuning metadata is
        unknown and filled with ``nan`` / ``True``.
        """
        m = sp.csr_matrix(matrix)
        if m.shape[0] != m.shape[1]:
            raise ValueError(f"operator must be square, got {m.shape}")
        m.sum_duplicates()
        n = m.shape[0]
        nbrs, wts, ks = [], [], []
        for i in range(n):
            cols = m.indices[m.indptr[i] : m.indptr[i + 1]]
            vals = m.data[m.indptr[i] : m.indptr[i + 1]]
            order = np.argsort(cols != i, kind="stable")
            nbrs.append(cols[order])
            wts.append(vals[order])
            ks.append(len(cols))
        ks = np.array(ks)
        return cls(
            indptr=np.concatenate([[0], np.cumsum(ks)]),
            neighbors=np.concatenate(nbrs).astype(np.intp) if n else np.zeros(0, np.intp),
            weights=np.concatenate(wts) if n else np.zeros(0),
            k_final=ks,
            gamma=np.full(n, np.nan),
            converged=np.ones(n, dtype=bool),
            tune_iters=np.zeros(n, dtype=int),
            config=config,
        )

    @property
    def n(self):
        return len(self.indptr) - 1

    @property
    def unconverged(self):
        return np.flatnonzero(~self.converged)

    def row(self, i):
        """``(neighbors, weights)`` of row ``i`` in stencil order."""
        s = slice(self.indptr[i], self.indptr[i + 1])
        return self.neighbors[s], self.weights[s]

    def __matmul__(self, x):
        return self.matrix @ x


class SolveReport(NamedTuple):
    F: np.ndarray
    fe: float | None
    ie: float | None
    residual: float
    inf_norm_inv: float | None
    wall_time: float
    solver: str
    iterations: int


class NormEstimate(NamedTuple):
    value: float
    n_solves: int
    exact: bool


def assemble(cloud, config, index=None):
    """Assemble the ``N x N`` operator, one tuned (or fixed-size) stencil per row."""
    if index is None:
        index = build_knn_index(cloud)
    rows = tune_rows(cloud, index, np.arange(cloud.N), config)
    return SparseOperator.from_rows(rows, config)


def row_sums(op):
    return np.asarray(op.matrix.sum(axis=1)).ravel()


def forward_error(op, f, lap_f):
    """``max_i |lap_f_i - (L f)_i|``."""
    return float(np.max(np.abs(np.asarray(lap_f) - op.matrix @ np.asarray(f))))


def inverse_error(F, f):
    """``max_i |F_i - f_i|``."""
    return float(np.max(np.abs(np.asarray(F) - np.asarray(f))))


class ScreenedSystem:
    """Solver for ``(I - L) x = b`` and its transpose.

    Above ``jacobi_min`` unknowns GMRES with a cheap Jacobi preconditioner is
    tried first; it suffices for the strongly diagonal operators of
    high-dimensional manifolds, whose LU factors fill in badly.  Otherwise a
    sparse LU factorisation is used up to ``direct_max`` unknowns, and beyond
    that GMRES with an incomplete LU preconditioner started from the Jacobi
    iterate, falling back to the direct factorisation if it stalls.
    """

    JACOBI_RESTARTS = 5

    def __init__(self, op, tol=1e-10, direct_max=DIRECT_MAX_N, restart=60, maxiter=2000,
                 jacobi_min=JACOBI_MIN_N):
        self.A = (sp.identity(op.n, format="csr") - op.matrix).tocsc()
        self.tol = tol
        self.restart = restart
        self.maxiter = maxiter
        self.iterations = 0
        self._lu = None
        self._prec = {}
        self._rows = {}
        self._jacobi_ok = {}
        self.jacobi_min = jacobi_min
        self.last_solver = None
        self.kind = "direct" if op.n <= direct_max else "iterative"

    def _factor(self):
        if self._lu is None:
            self._lu = spla.splu(self.A)
        return self._lu

    def _matrix(self, trans):
        if trans not in self._rows:
            self._rows[trans] = self.A.T.tocsr() if trans else self.A.tocsr()
        return self._rows[trans]

    def _preconditioner(self, trans):
        if trans not in self._prec:
            M = self.A.T.tocsc() if trans else self.A
            try:
                ilu = spla.spilu(M, drop_tol=1e-4, fill_factor=10, permc_spec="MMD_AT_PLUS_A")
                self._prec[trans] = spla.LinearOperator(M.shape, ilu.solve)
            except RuntimeError:
                self._prec[trans] = self._jacobi(trans)
        return self._prec[trans]

    def _jacobi(self, trans):
        dinv = 1.0 / self.A.diagonal()
        return spla.LinearOperator(self.A.shape, lambda x: dinv * x)

    def _gmres(self, A, b, M, maxiter, x0=None):
        count = [0]

        def cb(_):
            count[0] += 1

        x, info = spla.gmres(
            A, b, x0=x0, rtol=self.tol, atol=0.0, restart=self.restart, maxiter=maxiter,
            M=M, callback=cb, callback_type="pr_norm",
        )
        self.iterations += count[0]
        return x, info

    def residual(self, x, b, trans=False):
        A = self.A.T if trans else self.A
        return float(np.linalg.norm(A @ x - b) / max(np.linalg.norm(b), np.finfo(float).tiny))

    def solve(self, b, trans=False, strict=True):
        """Solve the system (or its transpose).

        With ``strict`` a :class:`SolverError` is raised when the relative
        residual stays above ``tol``; otherwise the best iterate is returned.
        """
        b = np.asarray(b, dtype=float)
        x0 = None
        if self.A.shape[0] > self.jacobi_min and self._jacobi_ok.get(trans, True):
            A = self._matrix(trans)
            x, info = self._gmres(A, b, self._jacobi(trans), self.JACOBI_RESTARTS)
            res = self.residual(x, b, trans)
            if info == 0 and res <= self.tol:
                self._jacobi_ok[trans] = True
                self.last_solver = "iterative"
                return x
            # remember the failure so later solves skip this attempt
            self._jacobi_ok[trans] = False
            x0 = x
        if self.kind == "direct":
            self.last_solver = "direct"
            lu = self._factor()
            tr = "T" if trans else "N"
            x = lu.solve(b, trans=tr)
            # a couple of refinement steps recover digits lost to pivoting
            for _ in range(4):
                if self.residual(x, b, trans) <= self.tol:
                    break
                A = self.A.T if trans else self.A
                x = x + lu.solve(b - A @ x, trans=tr)
            res = self.residual(x, b, trans)
            if strict and res > self.tol:
                raise SolverError(f"direct solve reached relative residual {res:.3e}", residual=res)
            return x
        A = self._matrix(trans)
        x, info = self._gmres(A, b, self._preconditioner(trans), self.maxiter, x0=x0)
        res = self.residual(x, b, trans)
        self.last_solver = "iterative"
        if strict and (info != 0 or res > self.tol):
            try:
                lu = self._factor()
            except (RuntimeError, MemoryError) as exc:
                raise SolverError(f"GMRES stalled at relative residual {res:.3e}", residual=res) from exc
            x = lu.solve(b, trans="T" if trans else "N")
            self.last_solver = "direct"
            res = self.residual(x, b, trans)
            if res > self.tol:
                raise SolverError(f"linear solve reached relative residual {res:.3e}", residual=res)
        return x


def solve_screened_poisson(op, h, tol=1e-10, f=None, lap_f=None, norm_estimate=False, system=None, strict=True):
    """Solve ``(I - L) F = h``.

    When ``f`` (and ``lap_f``) are supplied the inverse (and forward) error
    are filled in; ``norm_estimate`` adds an estimate of ``||(I - L)^-1||_inf``.
    With ``strict=False`` a solve that misses ``tol`` returns its best
    iterate; the achieved residual is in the report.
    """
    t0 = time.perf_counter()
    system = system or ScreenedSystem(op, tol=tol)
    F = system.solve(h, strict=strict)
    solver = system.last_solver
    res = system.residual(F, h)
    norm = inf_norm_inverse(op, system=system).value if norm_estimate else None
    return SolveReport(
        F=F,
        fe=None if f is None or lap_f is None else forward_error(op, f, lap_f),
        ie=None if f is None else inverse_error(F, f),
        residual=res,
        inf_norm_inv=norm,
        wall_time=time.perf_counter() - t0,
        solver=solver,
        iterations=system.iterations,
    )


def inf_norm_inverse(op, exact=None, system=None):
    """``||(I - L)^-1||_inf``.

    Exact (dense inverse, row sums) when ``exact`` is true or by default for
    ``N <= 2000``; otherwise Higham's block 1-norm estimator applied to the
    transposed inverse, each product costing one linear solve.
    """
    if exact is None:
        exact = op.n <= EXACT_NORM_MAX_N
    if exact:
        A = np.eye(op.n) - op.matrix.toarray()
        inv = np.linalg.inv(A)
        return NormEstimate(float(np.abs(inv).sum(axis=1).max()), op.n, True)
    system = system or ScreenedSystem(op)
    count = [0]

    def solve_cols(X, trans):
        X = np.asarray(X, dtype=float)
        cols = X.reshape(op.n, -1)
        # the estimator only needs a few digits
        out = np.column_stack([system.solve(c, trans=trans, strict=False) for c in cols.T])
        count[0] += cols.shape[1]
        return out.reshape(X.shape)

    # ||A^-1||_inf = ||A^-T||_1
    inv_t = spla.LinearOperator(
        (op.n, op.n),
        matvec=lambda x: solve_cols(x, True),
        matmat=lambda X: solve_cols(X, True),
        rmatvec=lambda x: solve_cols(x, False),
        rmatmat=lambda X: solve_cols(X, False),
        dtype=float,
    )
    value = spla.onenormest(inv_t, t=2)
    return NormEstimate(float(value), count[0], False)


def _iterative_shift_invert(op, shift, tol=1e-12):
    """``(L - shift I)^-1`` by Jacobi-preconditioned GMRES, or ``None`` if that stalls.

    On high-dimensional manifolds the LU factors of ``L`` fill in badly while
    the shifted matrix is strongly diagonal, so a few GMRES sweeps suffice.
    A random probe decides which route to take.
    """
    A = (op.matrix - shift * sp.identity(op.n, format="csr")).tocsr()
    dinv = 1.0 / A.diagonal()
    M = spla.LinearOperator(A.shape, lambda x: dinv * x)

    def solve(b):
        b = np.ravel(b)
        x, info = spla.gmres(A, b, rtol=tol, atol=0.0, restart=60, maxiter=10, M=M)
        if info != 0:
            raise SolverError("Jacobi-GMRES stalled inside the shift-invert Arnoldi iteration")
        return x

    probe = np.random.default_rng(0).standard_normal(op.n)
    x, info = spla.gmres(A, probe, rtol=tol, atol=0.0, restart=60, maxiter=10, M=M)
    if info != 0 or np.linalg.norm(A @ x - probe) > 10 * tol * np.linalg.norm(probe):
        return None
    return spla.LinearOperator(A.shape, solve, dtype=float)


def leading_eigenvalues(op, count=6, shift=10.0, dense=None):
    """The ``count`` eigenvalues of ``L`` nearest ``shift``, sorted by distance to it.

    Dense for ``N <= 3000`` (or when ``dense`` is true), shift-invert Arnoldi
    otherwise, with the shifted solves done by GMRES when that converges.
    """
    if not 1 <= count <= op.n:
        raise ValueError(f"count={count} outside [1, {op.n}]")
    if dense is None:
        dense = op.n <= DENSE_EIG_MAX_N
    if dense or count >= op.n - 1:
        vals = np.linalg.eigvals(op.matrix.toarray())
    else:
        opinv = _iterative_shift_invert(op, shift) if op.n > JACOBI_MIN_N else None
        try:
            vals = spla.eigs(op.matrix.tocsc(), k=count, sigma=shift, which="LM", OPinv=opinv,
                             return_eigenvectors=False)
        except spla.ArpackNoConvergence as exc:
            raise SolverError(
                f"shift-invert Arnoldi converged for {len(exc.eigenvalues)} of {count} eigenvalues"
            ) from exc
    vals = np.asarray(vals, dtype=complex)
    order = np.lexsort((vals.imag, np.abs(vals - shift)))
    return vals[order][:count]


def export_matrix_market(op, path):
    """Write ``L`` in Matrix Market coordinate format."""
    cfg = op.config
    comment = "Laplace-Beltrami operator"
    if cfg is not None:
        comment += f": method={cfg.method} weight={cfg.weight_scheme} l={cfg.l} kappa={cfg.kappa}"
    scipy.io.mmwrite(str(path), op.matrix, comment=comment)
