"""Deterministic geometric kernels: FPS, exact kNN, inverse-kNN, query grids.

All kernels are pure functions of their inputs. Ties are always broken by
ascending index so every downstream result is reproducible bit-for-bit.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree


@dataclass
class PointCloud:
    """N x 3 coordinates in normalized space, with optional N x F features."""

    points: np.ndarray
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 1:
            raise ValueError(f"points must be N x 3 with N >= 1, got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.shape[0] != self.points.shape[0]:
                raise ValueError("feature row count must match point count")

    def __len__(self):
        return self.points.shape[0]


@dataclass
class NeighborIndex:
    """Support sets per query, over a reference set of `source_size` points.

    fixed_k mode: `indices` is Q x K, each row sorted by ascending distance
    (ties by ascending index). variable mode: `offsets` (Q+1) and `flat`
    give per-query lists; empty lists are allowed.
    """

    mode: str
    source_size: int
    indices: Optional[np.ndarray] = None
    distances: Optional[np.ndarray] = None
    offsets: Optional[np.ndarray] = None
    flat: Optional[np.ndarray] = None

    @property
    def num_queries(self):
        if self.mode == "fixed_k":
            return self.indices.shape[0]
        return len(self.offsets) - 1

    def row(self, q):
        """Index list for query q (a view)."""
        if self.mode == "fixed_k":
            return self.indices[q]
        return self.flat[self.offsets[q] : self.offsets[q + 1]]


@dataclass
class DownsampleMap:
    """Distinct indices into a parent cloud, in FPS visiting order."""

    indices: np.ndarray

    def __len__(self):
        return len(self.indices)


def farthest_point_sample(cloud, m):
    """Greedy max-min selection of m points, seeded at index 0.

    At every step the point with the largest distance to the already-selected
    set is taken; equal distances resolve to the lowest index.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"sample count {m} out of range [1, {n}]")
    selected = np.empty(m, dtype=np.int64)
    selected[0] = 0
    dist2 = ((pts - pts[0]) ** 2).sum(axis=1)
    for i in range(1, m):
        # argmax returns the first (lowest-index) maximizer
        nxt = int(np.argmax(dist2))
        selected[i] = nxt
        dist2 = np.minimum(dist2, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return DownsampleMap(indices=selected)


def knn(queries, reference, k):
    """Exact k nearest reference points per query, by Euclidean distance.

    Rows are sorted by ascending distance, equal distances by ascending
    index. Returns a fixed_k NeighborIndex with distances attached.
    """
    qs = np.asarray(queries, dtype=np.float64)
    if qs.ndim == 1:
        qs = qs[None, :]
    ref = reference.points if isinstance(reference, PointCloud) else np.asarray(reference, dtype=np.float64)
    n = ref.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range [1, {n}]")
    d2 = ((qs[:, None, :] - ref[None, :, :]) ** 2).sum(axis=2)
    if k == n:
        order = np.argsort(d2, axis=1, kind="stable")
    else:
        # partition instead of a full sort, then order the k winners by
        # (distance, index): an index pre-sort makes the stable distance
        # sort break ties by ascending index
        part = np.argpartition(d2, k - 1, axis=1)[:, :k]
        o1 = np.argsort(part, axis=1)
        part = np.take_along_axis(part, o1, axis=1)
        d2p = np.take_along_axis(d2, part, axis=1)
        o2 = np.argsort(d2p, axis=1, kind="stable")
        order = np.take_along_axis(part, o2, axis=1)
        # a tie across the selection boundary makes the partition's pick
        # index-dependent; redo just those rows with the full stable sort
        kth = d2p.max(axis=1)
        tied = np.flatnonzero((d2 <= kth[:, None]).sum(axis=1) > k)
        if tied.size:
            order[tied] = np.argsort(d2[tied], axis=1, kind="stable")[:, :k]
    dists = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return NeighborIndex(mode="fixed_k", source_size=n, indices=order, distances=dists)


def inverse_knn(forward):
    """Transpose of a fixed_k relation: point j supports query i iff i is
    among j's nearest points. Lists come out sorted ascending; empties stay.
    """
    if forward.mode != "fixed_k":
        raise ValueError("inverse_knn requires a fixed_k NeighborIndex")
    nq, k = forward.indices.shape
    n = forward.source_size
    counts = np.bincount(forward.indices.ravel(), minlength=n)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    rows = np.repeat(np.arange(nq, dtype=np.int64), k)
    cols = forward.indices.ravel()
    # stable sort by target point groups entries; rows are already ascending,
    # so each group comes out sorted by query index
    flat = rows[np.argsort(cols, kind="stable")]
    return NeighborIndex(mode="variable", source_size=nq, offsets=offsets, flat=flat)


def relative_positions(support_points, query):
    """Offsets p - q, one row per support point."""
    sp = np.asarray(support_points, dtype=np.float64)
    return sp - np.asarray(query, dtype=np.float64)


def make_grid(resolution, bounds):
    """Cell-centered R^3 lattice over axis-aligned bounds.

    Rows are ordered with x varying fastest, then y, then z. Returns the
    R^3 x 3 query array and the per-axis cell spacing.
    """
    r = int(resolution)
    if r < 2:
        raise ValueError(f"grid resolution must be >= 2, got {r}")
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    if np.any(hi <= lo):
        raise ValueError(f"degenerate bounds: {lo} .. {hi}")
    spacing = (hi - lo) / r
    axes = [lo[a] + spacing[a] * (np.arange(r) + 0.5) for a in range(3)]
    zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    return pts, spacing


def padded_bounds(points, pad_fraction=0.05):
    """Cloud AABB grown by a fraction of each axis extent on both sides."""
    pts = np.asarray(points, dtype=np.float64)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    pad = (hi - lo) * pad_fraction
    return lo - pad, hi + pad


def nearest_neighbor_distances(from_points, to_points):
    """For each row of from_points, the distance to (and index of) its
    nearest row in to_points. Tree-accelerated but exact; used on the large
    sample sets of the evaluation pipeline.
    """
    tree = cKDTree(np.asarray(to_points, dtype=np.float64))
    d, idx = tree.query(np.asarray(from_points, dtype=np.float64), k=1)
    return np.asarray(d, dtype=np.float64), np.asarray(idx, dtype=np.int64)
