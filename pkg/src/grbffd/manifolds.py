"""Analytic test manifolds, random point clouds and manufactured solutions.

Each built-in manifold is described by a :class:`ManifoldSpec` holding the
embedding, its parameter derivatives, a manufactured solution ``f`` and its
Laplace-Beltrami image.  :func:`sample_points` turns a spec into a
:class:`PointCloud` with analytic tangent frames, ready for discretisation.

Available manifolds
-------------------
==================  ===  ===  ===========================================
name                d    n    solution
==================  ===  ===  ===========================================
``ellipse1d``       1    2    ``sin(t) cos(t)`` on ``(cos t, 2 sin t)``
``rbc2d``           2    3    ``cos(t)**2`` on a red-blood-cell surface
``bumpy_sphere2d``  2    3    third ambient coordinate
``flat_torus3d``    3    12   ``sin p1 sin p2 sin p3``
``flat_torus4d``    4    16   ``sin p1 sin p2 sin p3 sin p4``
==================  ===  ===  ===========================================
"""
from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .exceptions import ConfigurationError, UnsupportedModeError

TWO_PI = 2.0 * np.pi

# red blood cell shape constants
RBC_R = 3.91 / 3.39
RBC_C0 = 0.81 / 3.39
RBC_C2 = 7.83 / 3.39
RBC_C4 = -4.39 / 3.39

# draws this close to a coordinate singularity are redrawn
POLE_TOL = 1e-12


@dataclass(frozen=True)
class ManifoldSpec:
    """Analytic description of a closed test manifold.

    All callables take an ``(N, d)`` array of intrinsic parameters.
    ``embed`` returns ``(N, n)`` ambient points, ``partials`` returns the
    ``(N, d, n)`` parameter derivatives of the embedding, and ``f_true`` /
    ``lap_f_true`` return length-``N`` arrays.

    ``inverse_cdf`` maps ``(N, d)`` uniforms on ``[0, 1)`` to parameters
    distributed with ``density``; ``valid`` flags draws that must be redrawn
    (coordinate singularities).
    """

    name: str
    d: int
    n: int
    param_low: tuple
    param_high: tuple
    periodic: tuple
    embed: Callable[[np.ndarray], np.ndarray]
    partials: Callable[[np.ndarray], np.ndarray]
    f_true: Callable[[np.ndarray], np.ndarray]
    lap_f_true: Callable[[np.ndarray], np.ndarray]
    sampler: str
    density: Callable[[np.ndarray], np.ndarray]
    inverse_cdf: Callable[[np.ndarray], np.ndarray]
    valid: Callable[[np.ndarray], np.ndarray] = field(default=lambda p: np.ones(len(p), dtype=bool))
    grid: Callable[[int], np.ndarray] | None = None

    def frame(self, params):
        """Orthonormal tangent frames ``(N, d, n)`` by Gram-Schmidt on the partials."""
        return gram_schmidt(self.partials(np.atleast_2d(params)))

    def h_true(self, params):
        """Right-hand side of ``(1 - Laplacian) f = h``."""
        return self.f_true(params) - self.lap_f_true(params)


def gram_schmidt(vectors):
    """Orthonormalise the rows of each ``(d, n)`` block of a ``(N, d, n)`` array.

    Modified Gram-Schmidt with one re-orthogonalisation pass, which keeps the
    frames orthonormal to roundoff even when the partials are far from
    orthogonal (the red blood cell near its rim).
    """
    v = np.array(vectors, dtype=float, copy=True)
    d = v.shape[1]
    for i in range(d):
        for _ in range(2):
            for j in range(i):
                v[:, i] -= np.einsum("bn,bn->b", v[:, i], v[:, j])[:, None] * v[:, j]
        v[:, i] /= np.linalg.norm(v[:, i], axis=1)[:, None]
    return v


# ---------------------------------------------------------------------------
# ellipse


def _ellipse_embed(p):
    t = p[:, 0]
    return np.column_stack([np.cos(t), 2.0 * np.sin(t)])


def _ellipse_partials(p):
    t = p[:, 0]
    return np.stack([-np.sin(t), 2.0 * np.cos(t)], axis=-1)[:, None, :]


def _ellipse_f(p):
    t = p[:, 0]
    return np.sin(t) * np.cos(t)


def _ellipse_lap(p):
    # 1D chart: lap f = f''/g - f' g' / (2 g^2) with g = |x'|^2
    t = p[:, 0]
    g = np.sin(t) ** 2 + 4.0 * np.cos(t) ** 2
    dg = -3.0 * np.sin(2.0 * t)
    df = np.cos(2.0 * t)
    d2f = -2.0 * np.sin(2.0 * t)
    return d2f / g - df * dg / (2.0 * g**2)


def _ellipse_density(p):
    return p[:, 0] / (4.0 * np.pi**2) + 1.0 / (4.0 * np.pi)


def _ellipse_inverse_cdf(u):
    # CDF(t) = t^2/(8 pi^2) + t/(4 pi)
    return np.pi * (np.sqrt(1.0 + 8.0 * u) - 1.0)


def _ellipse_grid(n):
    return (TWO_PI * np.arange(n) / n)[:, None]


# ---------------------------------------------------------------------------
# flat tori


def _torus_embed(p):
    cols = []
    for i in range(p.shape[1]):
        t = p[:, i]
        cols += [np.cos(t), np.sin(t), np.cos(2 * t), np.sin(2 * t)]
    return np.column_stack(cols) / np.sqrt(5.0)


def _torus_partials(p):
    N, d = p.shape
    out = np.zeros((N, d, 4 * d))
    for i in range(d):
        t = p[:, i]
        out[:, i, 4 * i : 4 * i + 4] = np.column_stack(
            [-np.sin(t), np.cos(t), -2 * np.sin(2 * t), 2 * np.cos(2 * t)]
        )
    return out / np.sqrt(5.0)


def _torus_f(p):
    return np.prod(np.sin(p), axis=1)


def _torus_lap(p):
    # identity metric: a product of first eigenfunctions
    return -p.shape[1] * _torus_f(p)


def _uniform_density(volume):
    return lambda p: np.full(len(p), 1.0 / volume)


# ---------------------------------------------------------------------------
# symbolic surfaces


@functools.lru_cache(maxsize=None)
def _symbolic_surface(name):
    """Lambdified embedding, partials, solution and Laplacian for a 2D surface.

    The Laplacian uses the divergence form without square roots,
    ``div(g^-1 grad f) + grad(det g) . g^-1 grad f / (2 det g)``.
    """
    import sympy as sp

    t, s = sp.symbols("t s", real=True)
    if name == "rbc2d":
        r = sp.Rational(391, 339)
        c0, c2, c4 = sp.Rational(81, 339), sp.Rational(783, 339), sp.Rational(-439, 339)
        X = sp.Matrix(
            [
                r * sp.cos(t) * sp.cos(s),
                r * sp.cos(t) * sp.sin(s),
                sp.sin(t) * (c0 + c2 * sp.cos(t) ** 2 + c4 * sp.cos(t) ** 4) / 2,
            ]
        )
        f = sp.cos(t) ** 2
    elif name == "bumpy_sphere2d":
        r = 1 + sp.Rational(1, 10) * sp.sin(4 * t) ** 7 * sp.sin(4 * s)
        X = sp.Matrix([r * sp.sin(t) * sp.cos(s), r * sp.sin(t) * sp.sin(s), r * sp.cos(t)])
        f = X[2]
    else:  # pragma: no cover - guarded by builtin_spec
        raise ConfigurationError(name)

    Xt, Xs = X.diff(t), X.diff(s)
    E, F, G = Xt.dot(Xt), Xt.dot(Xs), Xs.dot(Xs)
    det = E * G - F**2
    ft, fs = f.diff(t), f.diff(s)
    qt = (G * ft - F * fs) / det
    qs = (E * fs - F * ft) / det
    lap = qt.diff(t) + qs.diff(s) + (det.diff(t) * qt + det.diff(s) * qs) / (2 * det)

    def lam(exprs):
        return sp.lambdify((t, s), exprs, modules="numpy", cse=True)

    return {
        "embed": lam(list(X)),
        "partials": lam(list(Xt) + list(Xs)),
        "f": lam(f),
        "lap": lam(lap),
    }


def _bcast(values, n):
    return np.stack([np.broadcast_to(np.asarray(v, dtype=float), (n,)) for v in values], axis=-1)


def _surface_embed(name):
    def embed(p):
        return _bcast(_symbolic_surface(name)["embed"](p[:, 0], p[:, 1]), len(p))

    return embed


def _surface_partials(name):
    def partials(p):
        flat = _bcast(_symbolic_surface(name)["partials"](p[:, 0], p[:, 1]), len(p))
        return flat.reshape(len(p), 2, 3)

    return partials


def _surface_scalar(name, key):
    def fn(p):
        return np.broadcast_to(_symbolic_surface(name)[key](p[:, 0], p[:, 1]), (len(p),)).astype(float)

    return fn


def _rbc_inverse_cdf(u):
    return np.column_stack([-np.pi / 2 + np.pi * u[:, 0], -np.pi + TWO_PI * u[:, 1]])


def _bumpy_inverse_cdf(u):
    return np.column_stack([np.arccos(1.0 - 2.0 * u[:, 0]), TWO_PI * u[:, 1]])


def _bumpy_density(p):
    return np.sin(p[:, 0]) / (4.0 * np.pi)


BUILTIN_NAMES = ("ellipse1d", "rbc2d", "bumpy_sphere2d", "flat_torus3d", "flat_torus4d")


def builtin_spec(name):
    """Return the :class:`ManifoldSpec` registered under ``name``.

    Raises
    ------
    ConfigurationError
        If ``name`` is not one of :data:`BUILTIN_NAMES`.
    """
    if name == "ellipse1d":
        return ManifoldSpec(
            name=name, d=1, n=2,
            param_low=(0.0,), param_high=(TWO_PI,), periodic=(True,),
            embed=_ellipse_embed, partials=_ellipse_partials,
            f_true=_ellipse_f, lap_f_true=_ellipse_lap,
            sampler="linear_density", density=_ellipse_density,
            inverse_cdf=_ellipse_inverse_cdf, grid=_ellipse_grid,
        )
    if name == "rbc2d":
        return ManifoldSpec(
            name=name, d=2, n=3,
            param_low=(-np.pi / 2, -np.pi), param_high=(np.pi / 2, np.pi), periodic=(False, True),
            embed=_surface_embed(name), partials=_surface_partials(name),
            f_true=_surface_scalar(name, "f"), lap_f_true=_surface_scalar(name, "lap"),
            sampler="uniform", density=_uniform_density(2 * np.pi**2),
            inverse_cdf=_rbc_inverse_cdf,
            valid=lambda p: np.abs(np.cos(p[:, 0])) >= POLE_TOL,
        )
    if name == "bumpy_sphere2d":
        return ManifoldSpec(
            name=name, d=2, n=3,
            param_low=(0.0, 0.0), param_high=(np.pi, TWO_PI), periodic=(False, True),
            embed=_surface_embed(name), partials=_surface_partials(name),
            f_true=_surface_scalar(name, "f"), lap_f_true=_surface_scalar(name, "lap"),
            sampler="sin_theta", density=_bumpy_density,
            inverse_cdf=_bumpy_inverse_cdf,
            valid=lambda p: np.sin(p[:, 0]) >= POLE_TOL,
        )
    if name in ("flat_torus3d", "flat_torus4d"):
        d = 3 if name == "flat_torus3d" else 4
        return ManifoldSpec(
            name=name, d=d, n=4 * d,
            param_low=(0.0,) * d, param_high=(TWO_PI,) * d, periodic=(True,) * d,
            embed=_torus_embed, partials=_torus_partials,
            f_true=_torus_f, lap_f_true=_torus_lap,
            sampler="uniform", density=_uniform_density(TWO_PI**d),
            inverse_cdf=lambda u: TWO_PI * u,
        )
    raise ConfigurationError(f"unknown manifold {name!r}; expected one of {', '.join(BUILTIN_NAMES)}")


# ---------------------------------------------------------------------------
# point clouds


@dataclass
class PointCloud:
    """Sampled points with tangent frames and manufactured data."""

    points: np.ndarray
    frames: np.ndarray
    params: np.ndarray
    f_values: np.ndarray
    lap_values: np.ndarray
    h_values: np.ndarray
    seed: int
    spec_name: str
    mode: str = "random"

    @property
    def N(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.frames.shape[1]

    @property
    def n(self):
        return self.points.shape[1]

    def save(self, path):
        """Write the cloud to a ``.npz`` archive (the metadata travels as JSON)."""
        meta = json.dumps({"seed": int(self.seed), "spec_name": self.spec_name, "mode": self.mode})
        with open(path, "wb") as fh:
            np.savez(
                fh,
                points=self.points, frames=self.frames, params=self.params,
                f_values=self.f_values, lap_values=self.lap_values, h_values=self.h_values,
                meta=np.array(meta),
            )

    @classmethod
    def load(cls, path):
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            return cls(
                points=z["points"], frames=z["frames"], params=z["params"],
                f_values=z["f_values"], lap_values=z["lap_values"], h_values=z["h_values"],
                seed=meta["seed"], spec_name=meta["spec_name"], mode=meta["mode"],
            )


def _draw_params(spec, N, rng):
    params = spec.inverse_cdf(rng.random((N, spec.d)))
    bad = ~spec.valid(params)
    while bad.any():
        params[bad] = spec.inverse_cdf(rng.random((int(bad.sum()), spec.d)))
        bad = ~spec.valid(params)
    return params


def cloud_from_params(spec, params, seed=0, mode="random"):
    """Build a :class:`PointCloud` on ``spec`` at the given parameters."""
    params = np.asarray(params, dtype=float).reshape(-1, spec.d)
    points = spec.embed(params)
    if len(np.unique(points, axis=0)) != len(points):
        raise ValueError("point cloud contains duplicate points")
    f = spec.f_true(params)
    lap = spec.lap_f_true(params)
    return PointCloud(
        points=points, frames=spec.frame(params), params=params,
        f_values=f, lap_values=lap, h_values=f - lap,
        seed=int(seed), spec_name=spec.name, mode=mode,
    )


def sample_points(spec, N, mode="random", seed=0):
    """Sample ``N`` points on ``spec``.

    ``mode="random"`` draws i.i.d. parameters from the spec's density by
    inverse-CDF transform of ``numpy.random.default_rng(seed)`` uniforms.
    ``mode="well_sampled"`` uses the spec's deterministic grid (ellipse only).
    """
    if isinstance(spec, str):
        spec = builtin_spec(spec)
    if N < 2:
        raise ValueError("need at least two points")
    if mode == "well_sampled":
        if spec.grid is None:
            raise UnsupportedModeError(f"{spec.name} has no well-sampled grid")
        params = spec.grid(N)
    elif mode == "random":
        params = _draw_params(spec, N, np.random.default_rng(seed))
    else:
        raise UnsupportedModeError(f"unknown sampling mode {mode!r}")
    return cloud_from_params(spec, params, seed=seed, mode=mode)
