"""Nearest-neighbour stencils and local tangent-plane (Monge) coordinates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import DegenerateStencilError

# extra candidates fetched so that distance ties at the K-th neighbour can be
# resolved by point index
_TIE_SLACK = 4


class NeighborIndex:
    """Exact Euclidean K-nearest-neighbour queries over ambient coordinates.

    Neighbour lists start with the query point itself; the rest are sorted by
    ascending distance with ties broken by ascending point index.

    A k-d tree is used in low ambient dimension.  From ``BRUTE_FORCE_DIM``
    dimensions on, a chunked brute-force scan is faster for the stencil
    sizes used here.
    """

    BRUTE_FORCE_DIM = 7

    def __init__(self, points, method="auto"):
        self.points = np.ascontiguousarray(points, dtype=float)
        if len(self.points) < 2:
            raise ValueError("need at least two points")
        if method == "auto":
            method = "brute" if self.points.shape[1] >= self.BRUTE_FORCE_DIM else "kdtree"
        if method not in ("kdtree", "brute"):
            raise ValueError(f"unknown neighbour search method {method!r}")
        self.method = method
        self._tree = cKDTree(self.points) if method == "kdtree" else None
        self._sq = np.einsum("ij,ij->i", self.points, self.points)

    @property
    def N(self):
        return len(self.points)

    def _candidates(self, bases, kq):
        if self._tree is not None:
            _, idx = self._tree.query(self.points[bases], k=kq)
            return np.asarray(idx).reshape(len(bases), kq)
        out = np.empty((len(bases), kq), dtype=np.intp)
        step = max(1, int(5e6 // self.N))
        for s in range(0, len(bases), step):
            b = bases[s : s + step]
            d2 = self._sq[b, None] + self._sq[None, :] - 2.0 * self.points[b] @ self.points.T
            d2[np.arange(len(b)), b] = -1.0
            out[s : s + step] = np.argpartition(d2, kq - 1, axis=1)[:, :kq] if kq < self.N else np.argsort(d2, axis=1)
        return out

    def query(self, bases, K):
        """Return an ``(len(bases), K)`` array of neighbour indices."""
        bases = np.atleast_1d(np.asarray(bases, dtype=np.intp))
        if not 1 <= K <= self.N:
            raise ValueError(f"K={K} outside [1, {self.N}]")
        kq = min(self.N, K + _TIE_SLACK)
        idx = self._candidates(bases, kq)
        # exact distances for the final ordering
        diff = self.points[idx] - self.points[bases][:, None, :]
        dist = np.sqrt(np.einsum("bkn,bkn->bk", diff, diff))
        # the base sorts first even if another point coincides with it
        dist = np.where(idx == bases[:, None], -1.0, dist)
        order = np.lexsort((idx, dist), axis=-1)
        idx = np.take_along_axis(idx, order, axis=-1)[:, :K]
        if K > 1 and np.any(idx[:, 0] != bases):
            # base missing from the candidate list (more than kq duplicates)
            raise ValueError("base point not found among its nearest neighbours")
        return idx


def build_knn_index(cloud):
    """Build a :class:`NeighborIndex` over ``cloud.points``."""
    return NeighborIndex(cloud.points)


def knn(index, i, K):
    """The ``K`` nearest neighbours of point ``i``, base first."""
    if K > index.N:
        raise ValueError(f"K={K} exceeds the number of points {index.N}")
    return index.query([i], K)[0]


@dataclass
class Stencil:
    """One base point and its neighbours in tangent-plane coordinates.

    ``theta`` holds the projected offsets ``t_i(x0) . (x_k - x0)``;
    ``theta_norm`` is the same divided by the stencil diameter ``d_k_max``.
    """

    base: int
    neighbors: np.ndarray
    theta: np.ndarray
    theta_norm: np.ndarray
    d_k_max: float
    r_k_max: float

    @property
    def K(self):
        return len(self.neighbors)

    @property
    def d(self):
        return self.theta.shape[1]


def project_offsets(points, frames, neighbors):
    """Monge coordinates for a batch of stencils.

    ``neighbors`` is ``(B, K)`` with the base in column 0; returns ``(B, K, d)``.
    """
    base = neighbors[:, 0]
    offsets = points[neighbors] - points[base][:, None, :]
    return np.einsum("bkn,bdn->bkd", offsets, frames[base])


def pairwise_distances(theta):
    """``(B, K, K)`` Euclidean distances between the rows of each ``(K, d)`` block.

    Uses the expansion ``|a|^2 + |b|^2 - 2 a.b``; rounding can only perturb
    distances by about ``sqrt(eps)`` times the stencil size near zero, and
    distances from the first row (the base) are computed directly.
    """
    sq = np.einsum("bkd,bkd->bk", theta, theta)
    r2 = sq[:, :, None] + sq[:, None, :] - 2.0 * theta @ np.swapaxes(theta, 1, 2)
    r = np.sqrt(np.clip(r2, 0.0, None))
    idx = np.arange(theta.shape[1])
    r[:, idx, idx] = 0.0
    r0 = np.linalg.norm(theta - theta[:, :1, :], axis=2)
    r[:, 0, :] = r0
    r[:, :, 0] = r0
    return r


def monge_project(cloud, neighbors):
    """Project a stencil onto the tangent plane of its base point.

    Raises
    ------
    DegenerateStencilError
        If every neighbour projects onto the base (zero diameter).
    """
    neighbors = np.asarray(neighbors, dtype=np.intp)
    theta = project_offsets(cloud.points, cloud.frames, neighbors[None])[0]
    dist = pairwise_distances(theta[None])[0]
    d_max = float(dist.max())
    if d_max == 0.0:
        raise DegenerateStencilError(
            f"stencil at point {neighbors[0]} has zero projected diameter", index=int(neighbors[0])
        )
    return Stencil(
        base=int(neighbors[0]),
        neighbors=neighbors,
        theta=theta,
        theta_norm=theta / d_max,
        d_k_max=d_max,
        r_k_max=float(np.linalg.norm(theta, axis=1).max()),
    )


def stencil_from_theta(theta, neighbors=None, base=0):
    """Build a :class:`Stencil` from raw tangent coordinates (base row first).

    Handy for synthetic stencils that are not attached to a point cloud.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    if neighbors is None:
        neighbors = np.arange(len(theta))
    d_max = float(pairwise_distances(theta[None])[0].max())
    if d_max == 0.0:
        raise DegenerateStencilError("stencil has zero projected diameter")
    return Stencil(
        base=base,
        neighbors=np.asarray(neighbors),
        theta=theta,
        theta_norm=theta / d_max,
        d_k_max=d_max,
        r_k_max=float(np.linalg.norm(theta, axis=1).max()),
    )


def diameters(cloud, index, bases, K):
    """Stencil diameters ``D_{K,max}`` and radii ``R_{K,max}`` at ``bases``."""
    nbrs = index.query(bases, K)
    theta = project_offsets(cloud.points, cloud.frames, nbrs)
    D = np.empty(len(nbrs))
    # chunk to keep the (B, K, K, d) difference tensor small
    step = max(1, int(2e6 // (K * K * cloud.d)))
    for s in range(0, len(nbrs), step):
        D[s : s + step] = pairwise_distances(theta[s : s + step]).max(axis=(1, 2))
    return D, np.linalg.norm(theta, axis=2).max(axis=1)
