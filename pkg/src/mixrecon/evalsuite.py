"""Surface-to-surface evaluation metrics.

Distances are measured between dense point samplings of the two
surfaces: symmetric halved chamfer in L2 and squared L2, normal
consistency at nearest neighbors, distance-threshold F-score, and
volumetric IoU over shared occupancy queries. Conventions for reported
numbers: recall and precision are sample fractions (keeping the F-score
in [0, 1]), and the scaled values multiply cd1 by 1e2 and cd2 by 1e4.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import geokern as gk


@dataclass
class SurfaceSampleSet:
    points: np.ndarray  # (N, 3)
    normals: np.ndarray  # (N, 3), unit length

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if len(self.points) < 1:
            raise ValueError("sample set must be nonempty")
        if self.normals.shape != self.points.shape:
            raise ValueError("normals must pair with points")
        lengths = np.linalg.norm(self.normals, axis=1)
        if np.max(np.abs(lengths - 1.0)) > 1e-9:
            raise ValueError("normals must be unit length")

    def __len__(self):
        return len(self.points)


def sample_mesh(mesh, n, seed):
    """Area-uniform samples over the triangles, with face normals."""
    if len(mesh) == 0:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has no positive-area faces")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    a = mesh.vertices[mesh.triangles[face, 0]]
    b = mesh.vertices[mesh.triangles[face, 1]]
    c = mesh.vertices[mesh.triangles[face, 2]]
    points = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    normals = mesh.face_normals()[face]
    return SurfaceSampleSet(points=points, normals=normals)


def _points_of(samples):
    if isinstance(samples, SurfaceSampleSet):
        return samples.points
    pts = np.asarray(samples, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 1:
        raise ValueError("point set must be nonempty")
    return pts


def cd1(a, b):
    """Symmetric halved mean nearest-neighbor distance."""
    pa, pb = _points_of(a), _points_of(b)
    d_ab, _ = gk.nearest_neighbor_distances(pa, pb)
    d_ba, _ = gk.nearest_neighbor_distances(pb, pa)
    return 0.5 * float(d_ab.mean()) + 0.5 * float(d_ba.mean())


def cd2(a, b):
    """Symmetric halved mean squared nearest-neighbor distance."""
    pa, pb = _points_of(a), _points_of(b)
    d_ab, _ = gk.nearest_neighbor_distances(pa, pb)
    d_ba, _ = gk.nearest_neighbor_distances(pb, pa)
    return 0.5 * float((d_ab**2).mean()) + 0.5 * float((d_ba**2).mean())


def normal_consistency(a, b):
    """Symmetric mean dot product of normals at nearest neighbors."""
    if not isinstance(a, SurfaceSampleSet) or not isinstance(b, SurfaceSampleSet):
        raise ValueError("normal consistency needs sample sets with normals")
    _, idx_ab = gk.nearest_neighbor_distances(a.points, b.points)
    _, idx_ba = gk.nearest_neighbor_distances(b.points, a.points)
    ab = float(np.mean(np.sum(a.normals * b.normals[idx_ab], axis=1)))
    ba = float(np.mean(np.sum(b.normals * a.normals[idx_ba], axis=1)))
    return 0.5 * (ab + ba)


def fscore(gt, pred, tau=0.01):
    """Harmonic mean of fraction-valued recall and precision at tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    p_gt, p_pred = _points_of(gt), _points_of(pred)
    d_gt, _ = gk.nearest_neighbor_distances(p_gt, p_pred)
    d_pred, _ = gk.nearest_neighbor_distances(p_pred, p_gt)
    recall = float(np.mean(d_gt <= tau))
    precision = float(np.mean(d_pred <= tau))
    if recall + precision == 0.0:
        return 0.0
    return 2.0 * recall * precision / (recall + precision)


def volumetric_iou(occ_a, occ_b):
    """Intersection over union of two indicators at shared queries."""
    a = np.asarray(occ_a).astype(bool).reshape(-1)
    b = np.asarray(occ_b).astype(bool).reshape(-1)
    if a.shape != b.shape:
        raise ValueError("indicators must cover the same query set")
    union = np.sum(a | b)
    if union == 0:
        return 1.0  # two empty sets agree perfectly
    return float(np.sum(a & b) / union)


@dataclass
class MetricReport:
    cd1: float
    cd2: float
    nc: float
    fs: float
    iou: Optional[float] = None

    def __post_init__(self):
        if self.cd1 < 0 or self.cd2 < 0:
            raise ValueError("chamfer distances must be nonnegative")
        if not -1.0 <= self.nc <= 1.0:
            raise ValueError("normal consistency out of [-1, 1]")
        if not 0.0 <= self.fs <= 1.0:
            raise ValueError("f-score out of [0, 1]")

    @property
    def cd1_scaled(self):
        return self.cd1 * 1e2

    @property
    def cd2_scaled(self):
        return self.cd2 * 1e4

    def record(self, shape_id):
        """One machine-readable line: id cd1 cd2 nc fs [iou]."""
        parts = [str(shape_id)] + [
            f"{v:.10g}" for v in (self.cd1, self.cd2, self.nc, self.fs)
        ]
        if self.iou is not None:
            parts.append(f"{self.iou:.10g}")
        return " ".join(parts)


def compare_surfaces(gt, pred, tau=0.01, iou=None):
    """All surface metrics between two sample sets in one report."""
    return MetricReport(
        cd1=cd1(gt, pred),
        cd2=cd2(gt, pred),
        nc=normal_consistency(gt, pred),
        fs=fscore(gt, pred, tau=tau),
        iou=iou,
    )


def mean_report(reports):
    """Aggregate row: plain means of each metric over per-shape reports."""
    if not reports:
        raise ValueError("no reports to aggregate")
    ious = [r.iou for r in reports if r.iou is not None]
    return MetricReport(
        cd1=float(np.mean([r.cd1 for r in reports])),
        cd2=float(np.mean([r.cd2 for r in reports])),
        nc=float(np.mean([r.nc for r in reports])),
        fs=float(np.mean([r.fs for r in reports])),
        iou=float(np.mean(ious)) if len(ious) == len(reports) else None,
    )
