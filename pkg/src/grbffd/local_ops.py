"""Local Laplace-Beltrami weights on tangent-plane stencils.

Three families of stencil weights are provided, all built from the same
normalised Monge coordinates ``theta / D`` (``D`` the stencil diameter):

* GMLS: weighted polynomial least squares, with the ``1/K`` diagonal
  weight, a smooth distance weight, or the (regularised) inverse PHS matrix
  as weight.
* RBF-FD: polyharmonic spline ``r**(2*kappa + 1)`` interpolation augmented
  with polynomials, solved through the usual saddle-point system.
* gRBF-FD: a two-step fit. GMLS regression with the ``1/K`` weight, then a
  ``1/K``-weighted ridge fit of the PHS kernel to the regression residual.

Every weight vector ``w`` approximates ``Lap f(x0) ~ sum_k w_k f(x_k)``.

The public single-stencil functions take a :class:`~grbffd.stencils.Stencil`.
:func:`tune_rows` runs the same computations batched over many base points,
growing ``K`` until the base weight is negative and dominates its neighbours.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, replace
from math import comb

import numpy as np
from scipy.linalg.lapack import dtrcon, dtrtrs

from .exceptions import ConfigurationError, DegenerateStencilError, RankDeficiencyError
from .stencils import pairwise_distances, project_offsets

METHODS = ("gmls", "rbffd", "grbffd")
SCHEMES = ("one_over_k", "smooth", "phi_inverse")
# P^T Lambda P is treated as singular above this condition number
COND_LIMIT = 1e14
# smooth weight support radius as a multiple of the stencil radius
SMOOTH_RADIUS_FACTOR = 1.5


@dataclass(frozen=True)
class MethodConfig:
    """Discretisation settings.

    ``weight_scheme`` only matters for GMLS; gRBF-FD always uses the ``1/K``
    weight and RBF-FD the inverse PHS matrix.  With ``auto=False`` every row
    uses ``k_fixed`` neighbours (``k0`` when ``k_fixed`` is unset).
    """

    method: str = "grbffd"
    weight_scheme: str = "one_over_k"
    l: int = 4
    kappa: int = 3
    delta: float = 1e-6
    k0: int = 30
    k_step: int = 2
    gamma_th: float = 3.0
    k_max: int | None = None
    auto: bool = True
    k_fixed: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")
        scheme = {"grbffd": "one_over_k", "rbffd": "phi_inverse"}.get(self.method, self.weight_scheme)
        if scheme not in SCHEMES:
            raise ConfigurationError(f"unknown weight scheme {self.weight_scheme!r}")
        object.__setattr__(self, "weight_scheme", scheme)
        if self.l < 2:
            raise ConfigurationError("polynomial degree l must be at least 2")
        if self.kappa < 1:
            raise ConfigurationError("PHS exponent kappa must be at least 1")
        if self.kappa > self.l:
            warnings.warn(
                f"kappa={self.kappa} exceeds the polynomial degree l={self.l}; "
                "the PHS term may then dominate the polynomial part",
                stacklevel=3,
            )
        if self.gamma_th <= 0:
            raise ConfigurationError("gamma_th must be positive")
        if self.delta < 0:
            raise ConfigurationError("delta must be non-negative")
        if self.k_step < 1:
            raise ConfigurationError("k_step must be positive")

    @property
    def label(self):
        if self.method == "grbffd":
            return "gRBF-FD"
        if self.method == "rbffd":
            return "RBF-FD"
        return {"one_over_k": "GMLS-1/K", "smooth": "GMLS-SW", "phi_inverse": "GMLS-PhiInv"}[self.weight_scheme]

    def n_monomials(self, d):
        return comb(self.l + d, d)

    def k_start(self):
        return self.k0 if self.auto or self.k_fixed is None else self.k_fixed

    def resolved_k_max(self, N):
        if self.k_max is not None:
            return min(self.k_max, N)
        return min(N - 1, max(10 * self.k0, 200))

    def validate(self, d, N=None):
        """Check the size constraints that depend on the dimension and cloud size."""
        m = self.n_monomials(d)
        K = self.k_start()
        if K <= m:
            raise ConfigurationError(f"initial stencil size {K} must exceed m={m} for l={self.l}, d={d}")
        if N is not None and K > N:
            raise ConfigurationError(f"initial stencil size {K} exceeds N={N}")

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass
class LaplacianRow:
    """One row of the discrete operator."""

    base: int
    neighbors: np.ndarray
    weights: np.ndarray
    gamma: float
    k_final: int
    tune_iters: int
    converged: bool = True


# ---------------------------------------------------------------------------
# building blocks


def monomial_indices(l, d):
    """Multi-indices of total degree ``<= l`` in ``d`` variables, graded lexicographic.

    Returns ``(alphas, E)`` with ``alphas`` an ``(m, d)`` integer array and ``E``
    the positions of the pure second powers (the monomials with nonzero
    Laplacian at the origin).
    """
    alphas = []
    for deg in range(l + 1):
        block = [a for a in itertools.product(range(deg, -1, -1), repeat=d) if sum(a) == deg]
        alphas.extend(sorted(block, reverse=True))
    alphas = np.array(alphas, dtype=int).reshape(-1, d)
    E = [j for j, a in enumerate(alphas) if a.sum() == 2 and a.max() == 2]
    return alphas, np.array(E, dtype=int)


def laplacian_of_monomials(alphas):
    """``Lap p_alpha`` at the origin: 2 for pure squares, 0 otherwise."""
    return np.where((alphas.sum(axis=1) == 2) & (alphas.max(axis=1) == 2), 2.0, 0.0)


def phs_laplacian_constant(kappa, d):
    """Prefactor of ``Lap r**(2 kappa + 1) = c r**(2 kappa - 1)`` in ``d`` dimensions."""
    return 4 * kappa**2 + 2 * d * kappa + d - 1


def _vandermonde(theta_n, alphas):
    # (B, K, d) x (m, d) -> (B, K, m), from a table of coordinate powers
    powers = np.ones(theta_n.shape + (alphas.max(initial=0) + 1,))
    for p in range(1, powers.shape[-1]):
        powers[..., p] = powers[..., p - 1] * theta_n
    out = powers[:, :, 0, alphas[:, 0]]
    for i in range(1, alphas.shape[1]):
        out = out * powers[:, :, i, alphas[:, i]]
    return out


def vandermonde(stencil, l):
    """``K x m`` matrix of monomials evaluated at the normalised coordinates."""
    alphas, _ = monomial_indices(l, stencil.d)
    return _vandermonde(stencil.theta_norm[None], alphas)[0]


def phs_matrix(stencil, kappa):
    """``K x K`` matrix ``r_ks**(2 kappa + 1)`` of normalised pairwise distances."""
    r = pairwise_distances(stencil.theta_norm[None])[0]
    return r ** (2 * kappa + 1)


def phs_laplacian_row(stencil, kappa, d=None):
    """Laplacian of each shifted PHS kernel evaluated at the base point."""
    d = stencil.d if d is None else d
    r0 = np.linalg.norm(stencil.theta_norm, axis=1)
    return phs_laplacian_constant(kappa, d) * r0 ** (2 * kappa - 1)


def _diag_weights(scheme, theta):
    """Diagonal weights ``(B, K)`` for the ``one_over_k`` and ``smooth`` schemes."""
    B, K, _ = theta.shape
    if scheme == "one_over_k":
        lam = np.full((B, K), 1.0 / K)
        lam[:, 0] = 1.0
        return lam
    if scheme == "smooth":
        r = np.linalg.norm(theta, axis=2)
        R = SMOOTH_RADIUS_FACTOR * r.max(axis=1, keepdims=True)
        return (1.0 - r / R) ** 2
    raise ValueError(f"{scheme!r} is not a diagonal weight")


def ridge_inverse(Phi, Lambda, delta):
    """Regularised weighted inverse ``(Phi^T Lambda Phi + delta^2 I)^-1 Phi^T Lambda``.

    A diagonal non-negative ``Lambda`` is handled through a QR factorisation
    of ``[sqrt(Lambda) Phi; delta I]``, which avoids squaring the condition
    number.  Any other ``Lambda`` goes through the normal equations, where
    ``delta = 0`` is allowed as long as ``Phi^T Lambda Phi`` is invertible.
    """
    Phi = np.asarray(Phi, dtype=float)
    Lambda = np.asarray(Lambda, dtype=float)
    K = len(Phi)
    lam = np.diag(Lambda)
    if delta > 0 and np.all(lam >= 0) and np.array_equal(Lambda, np.diag(lam)):
        sq = np.sqrt(lam)
        Q, R = np.linalg.qr(np.vstack([sq[:, None] * Phi, delta * np.eye(K)]))
        return np.linalg.solve(R, Q[:K].T) * sq
    rhs = Phi.T @ Lambda
    return np.linalg.solve(rhs @ Phi + delta**2 * np.eye(K), rhs)


def weight_matrix(scheme, stencil, Phi=None, delta=1e-6, kappa=3):
    """The ``K x K`` weight matrix used in the least-squares fits.

    ``phi_inverse`` returns the ridge inverse of the PHS matrix with an
    identity weight (``Phi`` is built from ``kappa`` when not supplied).
    """
    if scheme in ("one_over_k", "smooth"):
        return np.diag(_diag_weights(scheme, stencil.theta[None])[0])
    if scheme == "phi_inverse":
        if Phi is None:
            Phi = phs_matrix(stencil, kappa)
        return ridge_inverse(Phi, np.eye(len(Phi)), delta)
    raise ConfigurationError(f"unknown weight scheme {scheme!r}")


# ---------------------------------------------------------------------------
# batched weights


def _condition_ok(R):
    """Condition test on ``P^T Lambda P = R^T R`` from the triangular factor ``R``.

    Uses the LAPACK 1-norm condition estimate of ``R`` and squares it.
    """
    ok = np.empty(len(R), dtype=bool)
    for b in range(len(R)):
        rcond, info = dtrcon(R[b], norm="1", uplo="U")
        ok[b] = info == 0 and rcond > 0 and rcond**-2 <= COND_LIMIT
    return ok


def _safe(R, ok):
    # swap singular factors for identities so that triangular solves stay finite
    if ok.all():
        return R
    R = R.copy()
    R[~ok] = np.eye(R.shape[-1])
    return R


def _gram_solve(R, v):
    """``(R^T R)^-1 v`` for a batch of upper-triangular ``R`` and vectors ``v``."""
    out = np.empty(v.shape)
    for b in range(len(R)):
        y = dtrtrs(R[b], v[b], lower=0, trans=1)[0]
        out[b] = dtrtrs(R[b], y, lower=0, trans=0)[0]
    return out


def _ridge_row(Phi, lam, lphi, delta):
    """``lphi (Phi^T L Phi + delta^2 I)^-1 Phi^T L`` for diagonal ``L = diag(lam)``.

    The regularised Gram matrix is factored as ``R^T R`` through a QR
    factorisation of the stacked least-squares matrix ``[sqrt(L) Phi; delta I]``,
    which never breaks down for ``delta > 0`` and avoids forming the
    ill-conditioned Gram matrix.  ``Phi`` is symmetric.
    """
    B, K, _ = Phi.shape
    A = np.concatenate([np.sqrt(lam)[:, :, None] * Phi, np.broadcast_to(delta * np.eye(K), (B, K, K))], axis=1)
    R = np.linalg.qr(A, mode="r")
    x = _gram_solve(R, lphi)
    return lam * np.einsum("bkj,bj->bk", Phi, x)


def _local_system(theta, l, kappa):
    alphas, _ = monomial_indices(l, theta.shape[2])
    r = pairwise_distances(theta)
    D = r.max(axis=(1, 2))
    if np.any(D == 0.0):
        raise DegenerateStencilError("stencil with zero projected diameter")
    theta_n = theta / D[:, None, None]
    r_n = r / D[:, None, None]
    return {
        "D": D,
        "theta_n": theta_n,
        "P": _vandermonde(theta_n, alphas),
        "Phi": r_n ** (2 * kappa + 1),
        "lphi": phs_laplacian_constant(kappa, theta.shape[2]) * r_n[:, 0, :] ** (2 * kappa - 1),
        "lp": laplacian_of_monomials(alphas),
    }


def batch_weights(theta, config, _lap_poly=True):
    """Weights for a batch of stencils given raw Monge coordinates ``(B, K, d)``.

    Returns ``(w, D, ok)``: weights ``(B, K)`` in physical units, stencil
    diameters, and a mask that is ``False`` where the polynomial fit is
    numerically rank deficient (those weight rows are meaningless).
    """
    sysm = _local_system(theta, config.l, config.kappa)
    P, Phi, lphi, lp, D = sysm["P"], sysm["Phi"], sysm["lphi"], sysm["lp"], sysm["D"]
    B, K, m = P.shape
    lp = np.broadcast_to(lp if _lap_poly else np.zeros(m), (B, m))

    if config.method == "rbffd":
        Rp = np.linalg.qr(P, mode="r")
        ok = _condition_ok(Rp)
        w = _saddle_weights(Phi, P, lphi, lp, config.delta, ok)
    elif config.weight_scheme == "phi_inverse":
        # GMLS with the ridge-regularised inverse PHS matrix as (full) weight
        Q, R = np.linalg.qr(np.concatenate([Phi, np.broadcast_to(config.delta * np.eye(K), (B, K, K))], axis=1))
        Lam = np.linalg.solve(R, np.swapaxes(Q[:, :K, :], 1, 2))
        G = np.swapaxes(P, 1, 2) @ Lam @ P
        with np.errstate(divide="ignore", invalid="ignore"):
            c = np.linalg.cond(G)
        ok = np.isfinite(c) & (c <= COND_LIMIT)
        G = _safe(G, ok)
        z = np.linalg.solve(np.swapaxes(G, 1, 2), lp[..., None])[..., 0]
        w = np.einsum("bj,bjk->bk", np.einsum("bkm,bm->bk", P, z), Lam)
    else:
        lam = _diag_weights(config.weight_scheme, theta)
        Rp = np.linalg.qr(np.sqrt(lam)[:, :, None] * P, mode="r")
        ok = _condition_ok(Rp)
        Rp = _safe(Rp, ok)
        if config.method == "grbffd":
            r_row = _ridge_row(Phi, lam, lphi, config.delta)
            v = lp - np.einsum("bk,bkm->bm", r_row, P)
        else:
            r_row = 0.0
            v = lp
        # (P^T L P)^-1 v with P^T L P = Rp^T Rp
        z = _gram_solve(Rp, v)
        w = r_row + lam * np.einsum("bkm,bm->bk", P, z)
    return w / D[:, None] ** 2, D, ok


def _saddle_weights(Phi, P, lphi, lp, delta, ok):
    B, K, m = P.shape
    M = np.zeros((B, K + m, K + m))
    M[:, :K, :K] = Phi
    M[:, :K, K:] = P
    M[:, K:, :K] = np.swapaxes(P, 1, 2)
    rhs = np.concatenate([lphi, lp], axis=1)
    try:
        return np.linalg.solve(M, rhs[..., None])[:, :K, 0]
    except np.linalg.LinAlgError:
        pass
    w = np.zeros((B, K))
    for b in range(B):
        if not ok[b]:
            continue
        try:
            w[b] = np.linalg.solve(M[b], rhs[b])[:K]
        except np.linalg.LinAlgError:
            # exactly singular PHS block: fall back to the ridge form
            Lam = ridge_inverse(Phi[b], np.eye(K), delta)
            w[b] = _two_step_row(Phi[b], P[b], lphi[b], lp[b], Lam, delta)
    return w


def _two_step_row(Phi, P, lphi, lp, Lam, delta):
    """Literal two-step weights in normalised units for an arbitrary weight ``Lam``."""
    K = len(Phi)
    G = P.T @ Lam @ P
    proj = np.linalg.solve(G, P.T @ Lam)  # (P^T L P)^-1 P^T L
    phi_inv = ridge_inverse(Phi, Lam, delta)
    return lphi @ phi_inv @ (np.eye(K) - P @ proj) + lp @ proj


def _chunk_size(K, d):
    return max(8, int(4e6 // (K * K * max(d, 2))))


def stencil_weights(points, frames, neighbors, config):
    """Batched weights for ``(B, K)`` neighbour lists, chunked to bound memory."""
    B, K = neighbors.shape
    d = frames.shape[1]
    w = np.empty((B, K))
    D = np.empty(B)
    ok = np.empty(B, dtype=bool)
    step = _chunk_size(K, d)
    for s in range(0, B, step):
        theta = project_offsets(points, frames, neighbors[s : s + step])
        w[s : s + step], D[s : s + step], ok[s : s + step] = batch_weights(theta, config)
    return w, D, ok


# ---------------------------------------------------------------------------
# single-stencil API


def _one(stencil, config, **kw):
    w, _, ok = batch_weights(stencil.theta[None], config, **kw)
    if not ok[0]:
        raise RankDeficiencyError(
            f"polynomial fit of degree {config.l} is rank deficient on a {stencil.K}-point stencil",
            index=stencil.base,
        )
    return w[0]


def gmls_weights(stencil, l, scheme="one_over_k", delta=1e-6, kappa=3):
    """GMLS Laplacian weights ``(1/D^2) Lap p (P^T L P)^-1 P^T L``."""
    return _one(stencil, MethodConfig(method="gmls", weight_scheme=scheme, l=l, kappa=min(kappa, l), delta=delta))


def grbffd_weights(stencil, config):
    """Two-step gRBF-FD weights: GMLS plus the ridge-fitted PHS residual correction."""
    return _one(stencil, config.with_(method="grbffd"))


def phs_correction_weights(stencil, config):
    """The PHS residual-correction part of the gRBF-FD weights.

    ``grbffd_weights - gmls_weights`` with the ``1/K`` weight equals this row.
    """
    return _one(stencil, config.with_(method="grbffd"), _lap_poly=False)


def rbffd_weights(stencil, config):
    """Standard tangent-plane PHS+poly RBF-FD weights (saddle-point solve)."""
    return _one(stencil, config.with_(method="rbffd"))


def two_step_weights(stencil, l, kappa, Lambda, delta):
    """Two-step weights for an arbitrary ``K x K`` weight matrix ``Lambda``.

    This evaluates the closed-form expression term by term with dense solves
    and serves as a reference for the batched paths.
    """
    alphas, _ = monomial_indices(l, stencil.d)
    P = vandermonde(stencil, l)
    Phi = phs_matrix(stencil, kappa)
    lphi = phs_laplacian_row(stencil, kappa)
    lp = laplacian_of_monomials(alphas)
    return _two_step_row(Phi, P, lphi, lp, np.asarray(Lambda, dtype=float), delta) / stencil.d_k_max**2


def rbffd_coefficients(stencil, l, kappa, values):
    """Coefficients ``(a, b)`` of the PHS+poly interpolant of ``values`` on the stencil."""
    P = vandermonde(stencil, l)
    Phi = phs_matrix(stencil, kappa)
    K, m = P.shape
    M = np.block([[Phi, P], [P.T, np.zeros((m, m))]])
    sol = np.linalg.solve(M, np.concatenate([np.asarray(values, dtype=float), np.zeros(m)]))
    return sol[:K], sol[K:]


def evaluate_interpolant(stencil, l, kappa, a, b, theta):
    """Evaluate the PHS+poly interpolant at raw tangent coordinates ``theta``."""
    alphas, _ = monomial_indices(l, stencil.d)
    tn = np.atleast_2d(theta) / stencil.d_k_max
    r = np.linalg.norm(tn[:, None, :] - stencil.theta_norm[None], axis=2)
    return r ** (2 * kappa + 1) @ a + _vandermonde(tn[None], alphas)[0] @ b


def spike_ratio(weights):
    """``|w_1| / max_{k>=2} |w_k|``; ``inf`` when every neighbour weight vanishes.

    Accepts one weight vector or a ``(B, K)`` batch.
    """
    w = np.asarray(weights, dtype=float)
    single = w.ndim == 1
    w = np.atleast_2d(w)
    off = np.abs(w[:, 1:]).max(axis=1)
    with np.errstate(divide="ignore"):
        g = np.where(off > 0, np.abs(w[:, 0]) / np.where(off > 0, off, 1.0), np.inf)
    return float(g[0]) if single else g


# ---------------------------------------------------------------------------
# stencil-size tuning


def tune_rows(cloud, index, bases, config):
    """Laplacian rows for ``bases``, growing ``K`` until each row is accepted.

    A row is accepted when its base weight is negative and the spike ratio
    reaches ``config.gamma_th``.  ``K`` starts at ``config.k0`` and grows by
    ``config.k_step``; numerically rank-deficient stencils simply grow.  Rows
    still unaccepted at ``k_max`` fall back to the candidate with the most
    negative base weight and are flagged ``converged=False``.

    With ``config.auto`` false a single pass at the fixed size is made.
    """
    bases = np.atleast_1d(np.asarray(bases, dtype=np.intp))
    config.validate(cloud.d, cloud.N)
    rows = [None] * len(bases)

    if not config.auto:
        K = config.k_start()
        nbrs = index.query(bases, K)
        w, _, ok = stencil_weights(cloud.points, cloud.frames, nbrs, config)
        if not ok.all():
            bad = int(bases[np.flatnonzero(~ok)[0]])
            raise RankDeficiencyError(f"rank-deficient stencil at point {bad} with K={K}", index=bad)
        gam = spike_ratio(w)
        for j, b in enumerate(bases):
            rows[j] = LaplacianRow(int(b), nbrs[j], w[j], float(gam[j]), K, 1)
        return rows

    k_max = config.resolved_k_max(cloud.N)
    pending = np.arange(len(bases))
    best = {}
    K = config.k0
    it = 0
    # neighbour lists are fetched once for a range of K and sliced; a K-NN
    # list is a prefix of any longer K-NN list under the same tie rule
    cached = np.empty((len(bases), 0), dtype=np.intp)
    while pending.size and K <= k_max:
        it += 1
        if K > cached.shape[1]:
            width = min(max(2 * K, K + 20), k_max, cloud.N)
            cached = np.zeros((len(bases), width), dtype=np.intp)
            cached[pending] = index.query(bases[pending], width)
        nbrs = cached[pending, :K]
        w, _, ok = stencil_weights(cloud.points, cloud.frames, nbrs, config)
        w1 = w[:, 0]
        gam = spike_ratio(w)
        accept = ok & (w1 < 0) & (gam >= config.gamma_th)
        for j in np.flatnonzero(accept):
            pos = pending[j]
            rows[pos] = LaplacianRow(int(bases[pos]), nbrs[j].copy(), w[j], float(gam[j]), K, it)
        for j in np.flatnonzero(ok & ~accept):
            pos = pending[j]
            if pos not in best or w1[j] < best[pos].weights[0]:
                best[pos] = LaplacianRow(int(bases[pos]), nbrs[j].copy(), w[j], float(gam[j]), K, it, converged=False)
        pending = pending[~accept]
        K += config.k_step
    for pos in pending:
        if pos not in best:
            b = int(bases[pos])
            raise RankDeficiencyError(f"no full-rank stencil found at point {b} up to K={k_max}", index=b)
        row = best[pos]
        row.tune_iters = it
        rows[pos] = row
    return rows


def auto_tune_row(cloud, index, base, config):
    """Single-point version of :func:`tune_rows`."""
    return tune_rows(cloud, index, [base], config)[0]
