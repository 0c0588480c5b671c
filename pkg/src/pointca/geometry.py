"""Point-cloud containers, kNN neighborhoods and the density-adaptive budget.

The adaptive budget gives every point its own perturbation radius
``eps_i = eta * (d_i + t * sigma_i)`` where ``d_i`` is the mean distance to the
point's ``k`` nearest neighbors and ``sigma_i`` their sample standard
deviation. Sparse or irregular regions get a larger radius than dense ones.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidParam, SizeMismatch, TooFewPoints

KINDS = ("partial", "complete", "adversarial", "reconstructed")
BUDGET_KINDS = ("adaptive", "pointwise_l2", "channelwise_linf")

DEFAULT_K = 8
DEFAULT_T = 3.0
BRUTE_FORCE_LIMIT = 512


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of 3D points.

    ``points`` is stored as a read-only float64 array of shape (N, 3).
    """

    points: np.ndarray
    label: Optional[str] = None
    kind: str = "partial"

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidParam(f"points must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise TooFewPoints("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise InvalidParam("point coordinates must be finite")
        if self.kind not in KINDS:
            raise InvalidParam(f"unknown cloud kind {self.kind!r}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    def with_points(self, points, kind=None):
        return replace(self, points=points, kind=kind or self.kind)


def as_points(cloud) -> np.ndarray:
    """Return an (N, 3) float64 array from a PointCloud or array-like."""
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64)


def _row_distances(points, i, cand):
    diff = points[cand] - points[i]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def knn_brute_force(points, k):
    """Exact kNN by full pairwise distances, excluding each query point.

    Ties are broken by ascending point index.
    """
    pts = as_points(points)
    m = pts.shape[0]
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(dist, order, axis=1)


def knn_tree(points, k):
    """kNN through a kd-tree; returns exactly what knn_brute_force returns."""
    pts = as_points(points)
    m = pts.shape[0]
    tree = cKDTree(pts)
    idx_out = np.empty((m, k), dtype=np.intp)
    dist_out = np.empty((m, k), dtype=np.float64)
    want = min(m, k + 2)
    _, cand = tree.query(pts, k=want)
    cand = np.atleast_2d(cand)
    for i in range(m):
        row = cand[i]
        q = want
        while True:
            row = row[(row != i) & (row < m)]
            d = _row_distances(pts, i, row)
            # re-sort candidates exactly so ties resolve by index
            order = np.lexsort((row, d))
            row, d = row[order], d[order]
            # any point tied with the k-th distance may sit outside the query
            if q >= m or (len(d) > k and d[k] > d[k - 1]):
                break
            q = min(m, 2 * q)
            _, row = tree.query(pts[i], k=q)
            row = np.atleast_1d(row)
        idx_out[i] = row[:k]
        dist_out[i] = d[:k]
    return idx_out, dist_out


def knn(points, k):
    """k nearest neighbors of every point (self excluded), ties by lower index."""
    pts = as_points(points)
    if pts.shape[0] > BRUTE_FORCE_LIMIT:
        return knn_tree(pts, k)
    return knn_brute_force(pts, k)


@dataclass(frozen=True)
class NeighborProfile:
    k: int
    t: float
    eta: float
    neighbor_indices: np.ndarray
    neighbor_distances: np.ndarray
    sparsity: np.ndarray
    uniformity: np.ndarray
    density_score: np.ndarray
    epsilon: np.ndarray

    def __len__(self):
        return self.epsilon.shape[0]


def build_neighbor_profile(cloud, k=DEFAULT_K, t=DEFAULT_T, eta=1.0) -> NeighborProfile:
    """Per-point kNN statistics and the adaptive perturbation radius.

    Raises:
        TooFewPoints: the cloud has ``k`` points or fewer.
        InvalidParam: ``k < 2``, ``t < 0`` or ``eta <= 0``.
    """
    if k < 2:
        raise InvalidParam(f"k must be >= 2 (sample std uses k - 1), got {k}")
    if t < 0:
        raise InvalidParam(f"t must be >= 0, got {t}")
    if not eta > 0:
        raise InvalidParam(f"eta must be > 0, got {eta}")
    pts = as_points(cloud)
    if pts.shape[0] <= k:
        raise TooFewPoints(f"need more than k={k} points, got {pts.shape[0]}")
    idx, dist = knn(pts, k)
    sparsity = dist.mean(axis=1)
    uniformity = np.sqrt(((dist - sparsity[:, None]) ** 2).sum(axis=1) / (k - 1))
    density = sparsity + t * uniformity
    return NeighborProfile(
        k=int(k),
        t=float(t),
        eta=float(eta),
        neighbor_indices=idx,
        neighbor_distances=dist,
        sparsity=sparsity,
        uniformity=uniformity,
        density_score=density,
        epsilon=eta * density,
    )


@dataclass(frozen=True)
class Perturbation:
    delta: np.ndarray
    budget_kind: str = "adaptive"

    def __post_init__(self):
        d = np.array(self.delta, dtype=np.float64)
        if d.ndim != 2 or d.shape[1] != 3:
            raise InvalidParam(f"delta must have shape (N, 3), got {d.shape}")
        if self.budget_kind not in BUDGET_KINDS:
            raise InvalidParam(f"unknown budget kind {self.budget_kind!r}")
        object.__setattr__(self, "delta", d)

    def __len__(self):
        return self.delta.shape[0]


def project_l2_balls(delta, radius):
    """Scale rows of ``delta`` whose L2 norm exceeds ``radius`` onto the sphere.

    Rows already inside their ball are returned untouched. The result satisfies
    ``norm <= radius`` exactly in floating point, which makes the projection
    idempotent.
    """
    delta = np.array(delta, dtype=np.float64)
    radius = np.broadcast_to(np.asarray(radius, dtype=np.float64), delta.shape[:1])
    norms = np.sqrt(np.einsum("ij,ij->i", delta, delta))
    over = norms > radius
    if not np.any(over):
        return delta
    rows = np.flatnonzero(over)
    scaled = delta[rows] * (radius[rows] / norms[rows])[:, None]
    for _ in range(8):
        n = np.sqrt(np.einsum("ij,ij->i", scaled, scaled))
        bad = n > radius[rows]
        if not np.any(bad):
            break
        scaled[bad] *= 1.0 - 2.0**-50
    delta[rows] = scaled
    return delta


def clip_to_budget(perturbation: Perturbation, profile: NeighborProfile) -> Perturbation:
    """Project every displacement onto its adaptive ball ``||delta_i|| <= eps_i``."""
    if len(perturbation) != len(profile):
        raise SizeMismatch(
            f"perturbation has {len(perturbation)} rows, profile {len(profile)}"
        )
    return Perturbation(project_l2_balls(perturbation.delta, profile.epsilon), "adaptive")


def clip_pointwise_l2(perturbation: Perturbation, eps: float) -> Perturbation:
    if eps < 0:
        raise InvalidParam("eps must be >= 0")
    return Perturbation(project_l2_balls(perturbation.delta, eps), "pointwise_l2")


def clip_channelwise(perturbation: Perturbation, eps: float) -> Perturbation:
    if eps < 0:
        raise InvalidParam("eps must be >= 0")
    return Perturbation(np.clip(perturbation.delta, -eps, eps), "channelwise_linf")
