"""Per-point eigenvalue features from k-nearest-neighbour covariances.

Each point's neighbourhood is the point itself plus its ``k`` nearest other
points, ranked by distance and then by point index so the choice among
equidistant neighbours does not depend on the k-d tree's internals.  The
covariance eigenvalues ``l1 >= l2 >= l3 >= 0`` give

    linearity   (l1 - l2) / l1
    planarity   (l2 - l3) / l1
    sphericity  l3 / l1
    anisotropy  (l1 - l3) / l1
    curvature   l3 / (l1 + l2 + l3)

so linearity + planarity + sphericity = 1 and anisotropy = 1 - sphericity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ..errors import ValidationError
from .io import as_points

FEATURES = ("curvature", "anisotropy", "linearity", "planarity", "sphericity")
DEFAULT_K = 30
# eigenvalue scale below which a neighbourhood counts as a single point,
# relative to the squared extent of the whole cloud
DEGENERATE_RTOL = 1e-12
_BATCH = 4096


@dataclass(frozen=True)
class LocalEigenvalues:
    """Covariance eigenvalues of every point's neighbourhood.

    Attributes:
        values: (N, 3) array, each row sorted descending and clamped at 0.
        degenerate: (N,) bool mask of neighbourhoods with no spread.
    """

    values: np.ndarray
    degenerate: np.ndarray

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class FeatureVector:
    curvature: float
    anisotropy: float
    linearity: float
    planarity: float
    sphericity: float

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in FEATURES}


def _tie_safe_neighbors(points: np.ndarray, tree: cKDTree, k: int) -> np.ndarray:
    """Indices (N, k+1): self first, then k others ordered by (distance, index)."""
    n = len(points)
    q = min(n, k + 1 + 8)
    dist, idx = tree.query(points, k=q)
    dist = np.atleast_2d(dist)
    idx = np.atleast_2d(idx)
    rows = np.arange(n)
    # drop self, pushing it to the end of each row
    is_self = idx == rows[:, None]
    has_self = is_self.any(axis=1)
    d = np.where(is_self, np.inf, dist)
    # order every row by (distance, index)
    flat = np.lexsort((idx.ravel(), d.ravel(), np.repeat(rows, q)))
    j = idx.ravel()[flat].reshape(n, q)
    d = d.ravel()[flat].reshape(n, q)
    out = np.empty((n, k + 1), dtype=np.int64)
    out[:, 0] = rows
    out[:, 1:] = j[:, :k]
    # rows where the tie group at the k-th neighbour may run past what the
    # query fetched (or self was crowded out by duplicates): redo with a ball
    last = np.where(has_self[:, None], d[:, q - 2 : q - 1], d[:, q - 1 : q])[:, 0]
    suspect = (~has_self) | ((q < n) & (d[:, k - 1] == last))
    for i in np.flatnonzero(suspect):
        radius = d[i, k - 1]
        ball = np.array(tree.query_ball_point(points[i], radius * (1 + 1e-12) + 1e-300), dtype=np.int64)
        ball = ball[ball != i]
        bd = np.linalg.norm(points[ball] - points[i], axis=1)
        pick = np.lexsort((ball, bd))
        out[i, 1:] = ball[pick[:k]]
    return out


def neighbor_indices(points, k: int = DEFAULT_K) -> np.ndarray:
    """Neighbourhood index matrix (N, k+1) with the query point in column 0."""
    pts = as_points(points)
    if k < 3:
        raise ValidationError(f"k must be at least 3, got {k}")
    if len(pts) <= k:
        raise ValidationError(f"need more than k={k} points, got {len(pts)}")
    return _tie_safe_neighbors(pts, cKDTree(pts), k)


def covariance_eigenvalues(cov: np.ndarray) -> np.ndarray:
    """Eigenvalues of a stack of symmetric 3x3 matrices, descending, clamped at 0."""
    w = np.linalg.eigvalsh(cov)
    return np.clip(w[..., ::-1], 0.0, None)


def local_eigenvalues(points, k: int = DEFAULT_K) -> LocalEigenvalues:
    """Covariance eigenvalues for each point's (k+1)-point neighbourhood."""
    pts = as_points(points)
    nbrs = neighbor_indices(pts, k)
    values = np.empty((len(pts), 3))
    for start in range(0, len(pts), _BATCH):
        block = pts[nbrs[start : start + _BATCH]]
        centered = block - block.mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", centered, centered) / block.shape[1]
        values[start : start + _BATCH] = covariance_eigenvalues(cov)
    extent = float(np.ptp(pts, axis=0).max())
    degenerate = values[:, 0] <= DEGENERATE_RTOL * extent * extent
    values[degenerate] = 0.0
    return LocalEigenvalues(values, degenerate)


def feature_vector(l1: float, l2: float, l3: float) -> FeatureVector:
    """Features of a single eigenvalue triple; all zero when ``l1`` is 0.

    >>> feature_vector(1, 1, 1)
    FeatureVector(curvature=0.3333333333333333, anisotropy=0.0, linearity=0.0, planarity=0.0, sphericity=1.0)
    >>> feature_vector(1, 0, 0).linearity, feature_vector(1, 1, 0).planarity
    (1.0, 1.0)
    """
    if not l1 >= l2 >= l3 >= 0:
        raise ValidationError(f"eigenvalues must satisfy l1 >= l2 >= l3 >= 0, got {(l1, l2, l3)}")
    if l1 == 0:
        return FeatureVector(0.0, 0.0, 0.0, 0.0, 0.0)
    return FeatureVector(
        curvature=l3 / (l1 + l2 + l3),
        anisotropy=(l1 - l3) / l1,
        linearity=(l1 - l2) / l1,
        planarity=(l2 - l3) / l1,
        sphericity=l3 / l1,
    )


def compute_features(eigs: LocalEigenvalues) -> dict[str, np.ndarray]:
    """Vectorized features; degenerate rows are all zero."""
    v = eigs.values
    l1, l2, l3 = v[:, 0], v[:, 1], v[:, 2]
    ok = ~eigs.degenerate & (l1 > 0)
    safe = np.where(ok, l1, 1.0)
    total = np.where(ok, l1 + l2 + l3, 1.0)
    feats = {
        "curvature": l3 / total,
        "anisotropy": (l1 - l3) / safe,
        "linearity": (l1 - l2) / safe,
        "planarity": (l2 - l3) / safe,
        "sphericity": l3 / safe,
    }
    return {name: np.where(ok, feats[name], 0.0) for name in FEATURES}
