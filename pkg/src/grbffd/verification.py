"""Independent oracles and empirical checks.

* :func:`fd_laplacian_oracle` evaluates the Laplace-Beltrami operator from the
  divergence form ``|g|^-1/2 d_i(|g|^1/2 g^ij d_j f)`` using only finite
  differences of the embedding and of ``f``.
* :func:`reproduction_suite` checks polynomial reproduction and bounded
  weight sums on random stencils.
* :func:`regularization_sweep` measures how the ridge-regularised PHS
  inverse behaves as the ridge parameter shrinks.
* :func:`diameter_statistics` tracks stencil diameters of random clouds.
* :func:`run_trial` and :func:`convergence_sweep` drive the convergence
  experiments (sample, assemble, solve, record errors).
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .assembly import (
    ScreenedSystem,
    assemble,
    forward_error,
    inf_norm_inverse,
    inverse_error,
    leading_eigenvalues,
)
from .exceptions import OracleUndefinedError
from .local_ops import (
    laplacian_of_monomials,
    monomial_indices,
    phs_laplacian_constant,
    phs_matrix,
    stencil_weights,
)
from .local_ops import _diag_weights
from .manifolds import builtin_spec, sample_points
from .stencils import build_knn_index, diameters, monge_project

DET_TOL = 1e-12

# 4th-order central first derivative: offsets and coefficients (divided by h)
_FD_OFFSETS = np.array([-2.0, -1.0, 1.0, 2.0])
_FD_COEFS = np.array([1.0, -8.0, 8.0, -1.0]) / 12.0


def _d(fn, p, i, h):
    """4th-order central difference of ``fn`` along parameter ``i``."""
    out = 0.0
    for off, c in zip(_FD_OFFSETS, _FD_COEFS):
        q = p.copy()
        q[:, i] += off * h
        out = out + c * fn(q)
    return out / h


def _flux(spec, f, p, h):
    """``sqrt|g| g^ij d_j f`` at parameters ``p``, all derivatives by differences."""
    d = spec.d
    dx = np.stack([_d(spec.embed, p, i, h) for i in range(d)], axis=1)  # (M, d, n)
    g = np.einsum("mia,mja->mij", dx, dx)
    det = np.linalg.det(g)
    if np.any(det < DET_TOL):
        raise OracleUndefinedError("metric is degenerate at an oracle evaluation point")
    grad = np.stack([_d(f, p, j, h) for j in range(d)], axis=1)
    return np.sqrt(det)[:, None] * np.linalg.solve(g, grad[..., None])[..., 0], det


def _oracle_once(spec, f, p, h):
    div = 0.0
    for i in range(spec.d):
        div = div + _d(lambda q, i=i: _flux(spec, f, q, h)[0][:, i], p, i, h)
    _, det = _flux(spec, f, p, h)
    return div / np.sqrt(det)


def fd_laplacian_oracle(spec, params, step=None, f=None):
    """Finite-difference Laplace-Beltrami of ``f`` (default ``spec.f_true``).

    Metric, gradient and divergence all use 4th-order central differences
    with step ``h``; the results at ``h`` and ``h/2`` are Richardson
    extrapolated.  ``step`` defaults to ``1e-3`` times the largest parameter
    extent over ``2 pi``.

    Raises
    ------
    OracleUndefinedError
        If the metric determinant drops below ``1e-12`` (coordinate poles).
    """
    if isinstance(spec, str):
        spec = builtin_spec(spec)
    f = spec.f_true if f is None else f
    p = np.atleast_2d(np.asarray(params, dtype=float)).reshape(-1, spec.d)
    if step is None:
        extent = max(hi - lo for lo, hi in zip(spec.param_low, spec.param_high))
        step = 1e-3 * extent / (2.0 * np.pi)
    coarse = _oracle_once(spec, f, p, step)
    fine = _oracle_once(spec, f, p, step / 2.0)
    return (16.0 * fine - coarse) / 15.0


# ---------------------------------------------------------------------------
# local reproduction


@dataclass
class ReproductionReport:
    """Summary of :func:`reproduction_suite` over ``n_stencils`` random stencils.

    ``max_defect`` is the worst ``|sum_k w_k p(theta_k) - Lap p(0)| * D^2`` over
    all monomials of degree ``<= l``; ``out_of_space_defect`` the same for
    degree ``l + 1`` (not reproduced, expected ``O(D^(l-1))`` unscaled).
    ``weight_sums`` holds ``sum_k |w_k| * D^2`` per stencil.
    """

    n_stencils: int
    max_defect: float
    out_of_space_defect: float
    max_row_sum: float
    weight_sums: np.ndarray
    diameters: np.ndarray


def reproduction_suite(cloud, config, trials=20, seed=0, index=None):
    """Check local polynomial reproduction on ``trials`` random stencils."""
    rng = np.random.default_rng(seed)
    index = index or build_knn_index(cloud)
    bases = rng.choice(cloud.N, size=min(trials, cloud.N), replace=False)
    K = config.k_start()
    nbrs = index.query(bases, K)
    w, D, ok = stencil_weights(cloud.points, cloud.frames, nbrs, config)
    alphas, _ = monomial_indices(config.l + 1, cloud.d)
    lap = laplacian_of_monomials(alphas)
    in_space = alphas.sum(axis=1) <= config.l
    defects = np.zeros((len(bases), len(alphas)))
    for b in range(len(bases)):
        st = monge_project(cloud, nbrs[b])
        vals = np.prod(st.theta[:, None, :] ** alphas[None], axis=-1)
        defects[b] = np.abs(w[b] @ vals - lap)
    scale = D[:, None] ** 2
    return ReproductionReport(
        n_stencils=len(bases),
        max_defect=float((defects[:, in_space] * scale).max()),
        out_of_space_defect=float(defects[:, ~in_space].max()),
        max_row_sum=float((np.abs(w.sum(axis=1)) * D**2).max()),
        weight_sums=np.abs(w).sum(axis=1) * D**2,
        diameters=D,
    )


# ---------------------------------------------------------------------------
# ridge regularisation constants


def _phs_lap_rows(eval_norm, theta_norm, kappa):
    """Laplacian of each PHS kernel centred at the stencil nodes, at ``eval_norm`` points."""
    r = np.linalg.norm(eval_norm[:, None, :] - theta_norm[None], axis=2)
    return phs_laplacian_constant(kappa, theta_norm.shape[1]) * r ** (2 * kappa - 1)


def resample_stencil(cloud, stencil, count=200, seed=0, spec=None):
    """Normalised tangent coordinates of ``count`` new points inside a stencil.

    Parameters are drawn uniformly from the bounding box of the stencil's
    parameters (periodic coordinates unwrapped around the base), mapped
    through the embedding and projected on the base tangent plane.
    """
    spec = spec or builtin_spec(cloud.spec_name)
    par = cloud.params[stencil.neighbors].copy()
    base = par[0]
    for i, per in enumerate(spec.periodic):
        if per:
            period = spec.param_high[i] - spec.param_low[i]
            par[:, i] = base[i] + (par[:, i] - base[i] + period / 2) % period - period / 2
    rng = np.random.default_rng(seed)
    new = rng.uniform(par.min(axis=0), par.max(axis=0), size=(count, spec.d))
    new = new[spec.valid(new)]
    x = spec.embed(new) - cloud.points[stencil.base]
    theta = x @ cloud.frames[stencil.base].T
    return theta / stencil.d_k_max


def regularization_sweep(stencil, config, deltas, extra_points=None):
    """Ridge constants ``(C3, C4)`` per ``delta``.

    ``C3 = max_x || Lap phi(x) (Phi^T L Phi + delta^2 I)^-1 ||_1`` and
    ``C4 = max_x || Lap phi(x) (Phi^T L Phi + delta^2 I)^-1 Phi^T L ||_1``
    with ``L`` the ``1/K`` weight, maximised over the stencil nodes and any
    ``extra_points`` (normalised tangent coordinates).

    Uses one SVD of ``sqrt(L) Phi`` for all ``delta``.
    """
    deltas = np.asarray(deltas, dtype=float)
    Phi = phs_matrix(stencil, config.kappa)
    lam = _diag_weights("one_over_k", stencil.theta[None])[0]
    sq = np.sqrt(lam)
    U, s, Vt = np.linalg.svd(sq[:, None] * Phi)
    pts = stencil.theta_norm if extra_points is None else np.vstack([stencil.theta_norm, extra_points])
    rows = _phs_lap_rows(pts, stencil.theta_norm, config.kappa)  # (M, K)
    rv = rows @ Vt.T
    c3 = np.empty(len(deltas))
    c4 = np.empty(len(deltas))
    for j, delta in enumerate(deltas):
        a = rv / (s**2 + delta**2)
        c3[j] = np.abs(a @ Vt).sum(axis=1).max()
        c4[j] = np.abs(((a * s) @ U.T) * sq).sum(axis=1).max()
    return c3, c4


# ---------------------------------------------------------------------------
# stencil diameters


def diameter_statistics(spec, Ns, K, trials=4, seed=0, n_bases=100, mode="random"):
    """Median, mean, standard deviation and maximum of ``D_{K,max}`` per ``N``.

    The same random subset of ``n_bases`` indices is used for every cloud.
    Returns a list of dicts with keys ``N, median, mean, std, max``.
    """
    spec = builtin_spec(spec) if isinstance(spec, str) else spec
    bases = np.random.default_rng(seed).choice(min(Ns), size=min(n_bases, min(Ns)), replace=False)
    out = []
    for N in Ns:
        ds = []
        for t in range(trials):
            cloud = sample_points(spec, N, mode=mode, seed=seed + t)
            D, _ = diameters(cloud, build_knn_index(cloud), bases, K)
            ds.append(D)
        ds = np.concatenate(ds)
        out.append({"N": N, "median": float(np.median(ds)), "mean": float(ds.mean()),
                    "std": float(ds.std()), "max": float(ds.max())})
    return out


def fit_slope(x, y):
    """Least-squares slope of ``log y`` against ``log x`` with its standard error."""
    lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    A = np.column_stack([lx, np.ones_like(lx)])
    coef, res, *_ = np.linalg.lstsq(A, ly, rcond=None)
    n = len(lx)
    if n > 2:
        sigma2 = float(np.sum((ly - A @ coef) ** 2)) / (n - 2)
        se = float(np.sqrt(sigma2 * np.linalg.inv(A.T @ A)[0, 0]))
    else:
        se = float("nan")
    return float(coef[0]), se


# ---------------------------------------------------------------------------
# convergence experiments


CSV_COLUMNS = (
    "manifold", "method", "weight", "l", "kappa", "K_policy", "N", "trial", "seed",
    "FE", "IE", "inf_norm_inv", "mean_K", "max_gamma_fail", "wall_time_s",
)


def k_policy(config):
    return f"auto:{config.k0}" if config.auto else f"fixed:{config.k_start()}"


def gamma_shortfall(op):
    """Largest failure of the spike test over all rows, ``0`` when every row passes.

    A row with ``w_1 >= 0`` counts as a shortfall of ``gamma_th``; otherwise the
    shortfall is ``gamma_th - gamma`` when positive.
    """
    th = op.config.gamma_th
    w1 = op.weights[op.indptr[:-1]]
    short = np.where(w1 >= 0, th, np.maximum(th - op.gamma, 0.0))
    return float(short.max(initial=0.0))


def run_trial(manifold, config, N, mode="random", seed=0, trial=0, norm_estimate=True,
              eig_count=0, eig_shift=10.0, cloud=None):
    """Sample, assemble and solve once; returns ``(record, operator, eigenvalues)``.

    ``record`` is a dict keyed by :data:`CSV_COLUMNS`.  Solves that miss the
    residual tolerance (unstable operators) are kept with their best iterate.
    """
    t0 = time.perf_counter()
    cloud = cloud if cloud is not None else sample_points(manifold, N, mode=mode, seed=seed)
    op = assemble(cloud, config)
    system = ScreenedSystem(op)
    F = system.solve(cloud.h_values, strict=False)
    norm = inf_norm_inverse(op, exact=False, system=system).value if norm_estimate else float("nan")
    eigs = leading_eigenvalues(op, count=eig_count, shift=eig_shift) if eig_count else None
    record = {
        "manifold": cloud.spec_name,
        "method": config.label,
        "weight": config.weight_scheme,
        "l": config.l,
        "kappa": config.kappa,
        "K_policy": k_policy(config),
        "N": cloud.N,
        "trial": trial,
        "seed": seed,
        "FE": forward_error(op, cloud.f_values, cloud.lap_values),
        "IE": inverse_error(F, cloud.f_values),
        "inf_norm_inv": norm,
        "mean_K": float(op.k_final.mean()),
        "max_gamma_fail": gamma_shortfall(op),
        "wall_time_s": time.perf_counter() - t0,
    }
    return record, op, eigs


def convergence_sweep(manifold, configs, Ns, trials=1, mode="random", seed_base=0,
                      norm_estimate=True, progress=None):
    """Run :func:`run_trial` for every config, ``N`` and trial (seed ``seed_base + trial``).

    Records come back sorted by (config order, N, trial).
    """
    records = []
    for config in configs:
        for N in Ns:
            for t in range(trials):
                rec, _, _ = run_trial(manifold, config, N, mode=mode, seed=seed_base + t,
                                      trial=t, norm_estimate=norm_estimate)
                records.append(rec)
                if progress is not None:
                    progress(rec)
    return records


def median_by_n(records, key, method=None):
    """``(Ns, medians)`` of ``key`` over trials, optionally for one method label."""
    rows = [r for r in records if method is None or r["method"] == method]
    Ns = sorted({r["N"] for r in rows})
    return np.array(Ns), np.array([np.median([r[key] for r in rows if r["N"] == N]) for N in Ns])

