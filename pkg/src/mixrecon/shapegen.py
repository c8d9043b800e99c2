"""Procedural shapes with analytic ground truth, and dataset assembly.

Every shape provides an exact signed distance (so occupancy with the
boundary-counts-as-inside rule), an exact area-uniform surface sampler
with outward normals, and fits inside the origin-centered unit cube with
at least 0.1 margin per side. Shape parameters, noise, and query sampling
are all driven by seeded generators, so datasets are pure functions of
their spec.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .fileio import (  # noqa: F401  (re-exported file I/O surface)
    FileFormatError,
    read_obj,
    read_ply,
    read_xyz,
    write_obj,
    write_ply,
    write_xyz,
)

SAFE_RADIUS = 0.4  # unit cube half-side 0.5 minus the required 0.1 margin


def rotation_from_rng(rng):
    """Uniform random rotation matrix from a normalized quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


class _Primitive:
    """Common frame handling: world = center + rotation @ local."""

    kind = "?"

    def __init__(self, center, rotation=None):
        self.center = np.asarray(center, dtype=np.float64)
        self.rotation = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)

    def aabb(self):
        """World axis-aligned bounding box as (lo, hi), exact per support."""
        ext = np.array([self._support(self.rotation[i, :]) for i in range(3)])
        return self.center - ext, self.center + ext

    def _to_local(self, pts):
        return (np.atleast_2d(pts) - self.center) @ self.rotation

    def signed_distance(self, pts):
        return self._sd_local(self._to_local(pts))

    def occupancy(self, pts):
        """1.0 inside or on the surface, 0.0 outside."""
        return (self.signed_distance(pts) <= 0.0).astype(np.float64)

    def sample_surface(self, rng, n, return_normals=False):
        p_loc, n_loc = self._sample_local(rng, n)
        pts = self.center + p_loc @ self.rotation.T
        if return_normals:
            return pts, n_loc @ self.rotation.T
        return pts


class Sphere(_Primitive):
    kind = "sphere"

    def __init__(self, center, radius):
        self.radius = float(radius)
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")
        super().__init__(center)

    def circumradius(self):
        return self.radius

    def _support(self, direction):
        return self.radius

    def area(self):
        return 4.0 * np.pi * self.radius**2

    def _sd_local(self, p):
        return np.linalg.norm(p, axis=1) - self.radius

    def _sample_local(self, rng, n):
        d = rng.normal(size=(n, 3))
        d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
        return self.radius * d, d


class Box(_Primitive):
    kind = "box"

    def __init__(self, center, half_extents, rotation=None):
        self.half_extents = np.asarray(half_extents, dtype=np.float64)
        if np.any(self.half_extents <= 0):
            raise ValueError("box half extents must be positive")
        super().__init__(center, rotation)

    def circumradius(self):
        return float(np.linalg.norm(self.half_extents))

    def _support(self, direction):
        return float(np.abs(direction) @ self.half_extents)

    def area(self):
        hx, hy, hz = self.half_extents
        return 8.0 * (hx * hy + hy * hz + hx * hz)

    def _sd_local(self, p):
        q = np.abs(p) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside

    def _face_areas(self):
        hx, hy, hz = self.half_extents
        per_face = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy]) * 4.0
        return per_face

    def _sample_local(self, rng, n):
        areas = self._face_areas()
        face = rng.choice(6, size=n, p=areas / areas.sum())
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * self.half_extents
        normals = np.zeros((n, 3))
        rows = np.arange(n)
        pts[rows, axis] = sign * self.half_extents[axis]
        normals[rows, axis] = sign
        return pts, normals


class Torus(_Primitive):
    """Ring radius (axis to tube center) and tube radius, local axis z."""

    kind = "torus"

    def __init__(self, center, ring_radius, tube_radius, rotation=None):
        self.ring_radius = float(ring_radius)
        self.tube_radius = float(tube_radius)
        if not 0 < self.tube_radius < self.ring_radius:
            raise ValueError("torus needs 0 < tube radius < ring radius")
        super().__init__(center, rotation)

    def circumradius(self):
        return self.ring_radius + self.tube_radius

    def _support(self, direction):
        in_plane = float(np.hypot(direction[0], direction[1]))
        return self.ring_radius * in_plane + self.tube_radius

    def area(self):
        return 4.0 * np.pi**2 * self.ring_radius * self.tube_radius

    def _sd_local(self, p):
        rho = np.linalg.norm(p[:, :2], axis=1)
        return np.sqrt((rho - self.ring_radius) ** 2 + p[:, 2] ** 2) - self.tube_radius

    def _sample_local(self, rng, n):
        big_r, small_r = self.ring_radius, self.tube_radius
        # poloidal angle by rejection: surface density scales with big_r + small_r*cos(v)
        v = np.empty(0)
        while v.size < n:
            prop = rng.uniform(0.0, 2.0 * np.pi, size=2 * (n - v.size) + 8)
            keep = rng.random(prop.size) < (big_r + small_r * np.cos(prop)) / (big_r + small_r)
            v = np.concatenate([v, prop[keep]])
        v = v[:n]
        u = rng.uniform(0.0, 2.0 * np.pi, size=n)
        ring = big_r + small_r * np.cos(v)
        pts = np.stack([ring * np.cos(u), ring * np.sin(u), small_r * np.sin(v)], axis=1)
        normals = np.stack(
            [np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1
        )
        return pts, normals


class Capsule(_Primitive):
    """Segment of half length a along local z, swept by radius r."""

    kind = "capsule"

    def __init__(self, center, half_length, radius, rotation=None):
        self.half_length = float(half_length)
        self.radius = float(radius)
        if self.half_length <= 0 or self.radius <= 0:
            raise ValueError("capsule needs positive half length and radius")
        super().__init__(center, rotation)

    def circumradius(self):
        return self.half_length + self.radius

    def _support(self, direction):
        return self.half_length * float(abs(direction[2])) + self.radius

    def area(self):
        return 2.0 * np.pi * self.radius * 2.0 * self.half_length + 4.0 * np.pi * self.radius**2

    def _sd_local(self, p):
        z = np.clip(p[:, 2], -self.half_length, self.half_length)
        closest = np.stack([np.zeros(len(p)), np.zeros(len(p)), z], axis=1)
        return np.linalg.norm(p - closest, axis=1) - self.radius

    def _sample_local(self, rng, n):
        a, r = self.half_length, self.radius
        cyl_area = 2.0 * np.pi * r * 2.0 * a
        on_cyl = rng.random(n) < cyl_area / self.area()
        u = rng.uniform(0.0, 2.0 * np.pi, size=n)
        z = rng.uniform(-a, a, size=n)
        d = rng.normal(size=(n, 3))
        d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
        pts = np.empty((n, 3))
        normals = np.empty((n, 3))
        cyl_n = np.stack([np.cos(u), np.sin(u), np.zeros(n)], axis=1)
        pts[on_cyl] = (r * cyl_n + np.stack([np.zeros(n), np.zeros(n), z], axis=1))[on_cyl]
        normals[on_cyl] = cyl_n[on_cyl]
        cap_center = np.where(d[:, 2:3] >= 0, a, -a)
        cap_pts = np.concatenate([r * d[:, :2], cap_center + r * d[:, 2:3]], axis=1)
        pts[~on_cyl] = cap_pts[~on_cyl]
        normals[~on_cyl] = d[~on_cyl]
        return pts, normals


class UnionShape:
    """Union of two primitives; boundary = exposed parts of both surfaces.

    The sampler proposes from either primitive proportionally to its total
    area and keeps points whose signed distance to the other primitive is
    at least `clearance` — exact uniform thinning of the union boundary,
    minus a hair-thin band along the intersection curve (kept clear so
    probe offsets of 1e-3 along the normal stay on the correct side).
    """

    kind = "union"
    clearance = 2e-3

    def __init__(self, first, second):
        self.first = first
        self.second = second

    def signed_distance(self, pts):
        return np.minimum(self.first.signed_distance(pts), self.second.signed_distance(pts))

    def occupancy(self, pts):
        return (self.signed_distance(pts) <= 0.0).astype(np.float64)

    def area(self):
        return self.first.area() + self.second.area()

    def aabb(self):
        lo_a, hi_a = self.first.aabb()
        lo_b, hi_b = self.second.aabb()
        return np.minimum(lo_a, lo_b), np.maximum(hi_a, hi_b)

    def sample_surface(self, rng, n, return_normals=False):
        parts = (self.first, self.second)
        w_first = self.first.area() / self.area()
        pts_out = np.empty((0, 3))
        nrm_out = np.empty((0, 3))
        while len(pts_out) < n:
            m = 2 * (n - len(pts_out)) + 16
            pick_first = rng.random(m) < w_first
            for which, part in enumerate(parts):
                count = int(pick_first.sum()) if which == 0 else int((~pick_first).sum())
                if count == 0:
                    continue
                p, nrm = part.sample_surface(rng, count, return_normals=True)
                other = parts[1 - which]
                keep = other.signed_distance(p) >= self.clearance
                pts_out = np.concatenate([pts_out, p[keep]])
                nrm_out = np.concatenate([nrm_out, nrm[keep]])
        pts_out, nrm_out = pts_out[:n], nrm_out[:n]
        if return_normals:
            return pts_out, nrm_out
        return pts_out


# ---------------------------------------------------------------------------
# randomized construction

KINDS = ("sphere", "box", "torus", "capsule", "union")


def _random_center(rng, reach):
    room = SAFE_RADIUS - reach
    return rng.uniform(-room, room, size=3) if room > 0 else np.zeros(3)


def _make_primitive(kind, rng, scale=1.0):
    if kind == "sphere":
        r = rng.uniform(0.20, 0.32) * scale
        return Sphere(_random_center(rng, r), r)
    if kind == "box":
        # keep the diagonal under the safe reach for any rotation
        h = rng.uniform(0.15, 0.22, size=3) * scale
        reach = float(np.linalg.norm(h))
        return Box(_random_center(rng, reach), h, rotation_from_rng(rng))
    if kind == "torus":
        big_r = rng.uniform(0.18, 0.25) * scale
        small_r = rng.uniform(0.50, 0.60) * big_r
        return Torus(_random_center(rng, big_r + small_r), big_r, small_r, rotation_from_rng(rng))
    if kind == "capsule":
        r = rng.uniform(0.14, 0.19) * scale
        a = rng.uniform(0.12, 0.20) * scale
        return Capsule(_random_center(rng, a + r), a, r, rotation_from_rng(rng))
    raise ValueError(f"unknown shape kind: {kind}")


def _check_margin(shape):
    lo, hi = shape.aabb()
    if max(float(np.abs(lo).max()), float(np.abs(hi).max())) > SAFE_RADIUS + 1e-9:
        raise ValueError(f"generated {shape.kind} violates the 0.1 unit-cube margin")
    return shape


def _balanced(shape, rng):
    # reject degenerate draws whose mixed-query labels would be lopsided
    _, labels = sample_queries(
        shape, 2048, "mixed", np.random.default_rng(rng.integers(2**32))
    )
    return 0.22 < labels.mean() < 0.78


def _draw_union(rng):
    sub_kinds = ("sphere", "box", "capsule")
    a = _make_primitive(sub_kinds[rng.integers(len(sub_kinds))], rng, scale=0.8)
    b = _make_primitive(sub_kinds[rng.integers(len(sub_kinds))], rng, scale=0.8)
    shape = UnionShape(a, b)
    probe_a = a.sample_surface(np.random.default_rng(rng.integers(2**32)), 64)
    probe_b = b.sample_surface(np.random.default_rng(rng.integers(2**32)), 64)
    exposed_a = np.mean(b.signed_distance(probe_a) >= shape.clearance)
    exposed_b = np.mean(a.signed_distance(probe_b) >= shape.clearance)
    if exposed_a < 0.3 or exposed_b < 0.3:
        return None  # one part mostly swallowed; redraw
    return shape


def make_shape(kind, seed):
    """Deterministic random shape of the given kind, inside the safe cube.

    Candidates are redrawn until the mixed query strategy would see a
    reasonable label balance on them, so every returned shape is usable
    ground truth for occupancy training.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown shape kind: {kind}")
    rng = np.random.default_rng(seed)
    for _ in range(64):
        shape = _draw_union(rng) if kind == "union" else _make_primitive(kind, rng)
        if shape is not None and _balanced(shape, rng):
            return _check_margin(shape)
    raise RuntimeError(f"could not draw a usable {kind} shape")


# ---------------------------------------------------------------------------
# corruption and query sampling

def corrupt(points, sigma, rng):
    """Add i.i.d. per-coordinate Gaussian noise; preserves count and order."""
    pts = np.asarray(points, dtype=np.float64)
    if sigma < 0:
        raise ValueError("noise sigma must be >= 0")
    if sigma == 0:
        return pts.copy()
    return pts + rng.normal(0.0, sigma, size=pts.shape)


def sample_queries(shape, n, strategy, rng, sigma_q=0.05, mixed_ratio=0.5):
    """Query coordinates plus analytic occupancy labels.

    uniform: inside the unit cube. near_surface: surface samples with Gaussian
    offsets of sigma_q. mixed: a mixed_ratio fraction uniform, rest
    near-surface.
    """
    if strategy == "uniform":
        coords = rng.uniform(-0.5, 0.5, size=(n, 3))
    elif strategy == "near_surface":
        coords = shape.sample_surface(rng, n) + rng.normal(0.0, sigma_q, size=(n, 3))
    elif strategy == "mixed":
        n_uni = int(round(n * mixed_ratio))
        uni = rng.uniform(-0.5, 0.5, size=(n_uni, 3))
        near = shape.sample_surface(rng, n - n_uni)
        near = near + rng.normal(0.0, sigma_q, size=(n - n_uni, 3))
        coords = np.concatenate([uni, near])
    else:
        raise ValueError(f"unknown query strategy: {strategy}")
    return coords, shape.occupancy(coords)


# ---------------------------------------------------------------------------
# datasets

@dataclass(frozen=True)
class DatasetSpec:
    num_shapes: int
    n_points: int = 300
    noise_sigma: float = 0.005
    kinds: Tuple[str, ...] = KINDS
    seed: int = 0
    query_strategy: str = "mixed"
    query_sigma: float = 0.05
    mixed_ratio: float = 0.5

    def __post_init__(self):
        if self.num_shapes < 1 or self.n_points < 1:
            raise ValueError("num_shapes and n_points must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        unknown = set(self.kinds) - set(KINDS)
        if unknown:
            raise ValueError(f"unknown shape kinds: {sorted(unknown)}")


_SPLIT_CODE = {"train": 0, "test": 1}


class TrainingShape:
    """One dataset entry: the analytic shape and its fixed noisy cloud."""

    def __init__(self, shape, noisy_points, spec):
        self.shape = shape
        self.noisy_points = noisy_points
        self.spec = spec

    def sample_surface(self, rng, n, return_normals=False):
        return self.shape.sample_surface(rng, n, return_normals=return_normals)

    def sample_queries(self, rng, n):
        return sample_queries(
            self.shape,
            n,
            self.spec.query_strategy,
            rng,
            sigma_q=self.spec.query_sigma,
            mixed_ratio=self.spec.mixed_ratio,
        )


class ProceduralDataset:
    """Deterministic shape collection; train/test splits never share seeds."""

    def __init__(self, spec, split="train"):
        if split not in _SPLIT_CODE:
            raise ValueError(f"split must be one of {sorted(_SPLIT_CODE)}")
        self.spec = spec
        self.split = split
        self._cache = {}

    def __len__(self):
        return self.spec.num_shapes

    def shape_seed(self, index):
        return [self.spec.seed, _SPLIT_CODE[self.split], index]

    def shape(self, index):
        if not 0 <= index < len(self):
            raise IndexError(index)
        if index not in self._cache:
            seed = self.shape_seed(index)
            rng = np.random.default_rng(seed)
            kind = self.spec.kinds[rng.integers(len(self.spec.kinds))]
            shape = make_shape(kind, seed + [1])
            clean = shape.sample_surface(np.random.default_rng(seed + [2]), self.spec.n_points)
            noisy = corrupt(clean, self.spec.noise_sigma, np.random.default_rng(seed + [3]))
            self._cache[index] = TrainingShape(shape, noisy, self.spec)
        return self._cache[index]
