"""Dense occupancy evaluation and 0.5 level-set mesh extraction.

The marching-cubes case table is generated at import time by walking the
cut-edge cycles of each of the 256 inside/outside corner patterns. On a
face where four edges cross (the ambiguous configurations), the two cut
edges adjacent to each inside corner are paired, which keeps the two
inside corners separate; since both cells sharing a face see the same
corner pattern, neighboring cells always agree and meshes stay crack
free. Lattice values exactly at the iso level count as inside.
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import diffcore as dc
from . import geokern as gk
from .fileio import read_obj, read_ply, write_obj, write_ply

# cube corners: 0-3 around the bottom face, 4-7 vertically above them
_CORNERS = np.array(
    [
        (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
        (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
    ]
)
_EDGES = [
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
]
# each face as its four edge indices (any cyclic order)
_FACE_EDGES = [
    (0, 1, 2, 3),     # bottom
    (4, 5, 6, 7),     # top
    (0, 9, 4, 8),     # front  y=0
    (2, 11, 6, 10),   # back   y=1
    (3, 11, 7, 8),    # left   x=0
    (1, 10, 5, 9),    # right  x=1
]
# lattice base offset and axis for each edge, for global vertex welding
_EDGE_BASE = np.array(
    [
        (0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 0),
        (0, 0, 1), (1, 0, 1), (0, 1, 1), (0, 0, 1),
        (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
    ]
)
_EDGE_AXIS = np.array([0, 1, 0, 1, 0, 1, 0, 1, 2, 2, 2, 2])


def _case_loops(case):
    inside = [(case >> c) & 1 == 1 for c in range(8)]
    cut = [inside[a] != inside[b] for a, b in _EDGES]
    if not any(cut):
        return []
    # pair cut edges within each face; every cut edge gains two partners
    partners = {e: [] for e in range(12) if cut[e]}
    for face in _FACE_EDGES:
        crossing = [e for e in face if cut[e]]
        if len(crossing) == 2:
            a, b = crossing
            partners[a].append(b)
            partners[b].append(a)
        elif len(crossing) == 4:
            # ambiguous face: join the pair around each inside corner
            by_corner = {}
            for e in crossing:
                a, b = _EDGES[e]
                corner = a if inside[a] else b
                by_corner.setdefault(corner, []).append(e)
            for pair in by_corner.values():
                a, b = pair
                partners[a].append(b)
                partners[b].append(a)
    # walk closed loops
    loops = []
    seen = set()
    for start in partners:
        if start in seen:
            continue
        loop = [start]
        prev, cur = None, start
        while True:
            step = next(p for p in partners[cur] if p != prev)
            if step == start:
                break
            loop.append(step)
            prev, cur = cur, step
        seen.update(loop)
        loops.append(loop)
    # orient each loop so triangle normals point away from the inside corners
    oriented = []
    for loop in loops:
        mids = np.array([(_CORNERS[_EDGES[e][0]] + _CORNERS[_EDGES[e][1]]) / 2.0 for e in loop])
        normal = np.zeros(3)
        for i in range(len(loop)):
            normal += np.cross(mids[i], mids[(i + 1) % len(loop)])
        inside_pts = np.array(
            [_CORNERS[a if inside[a] else b] for a, b in (_EDGES[e] for e in loop)]
        )
        outward = mids.mean(axis=0) - inside_pts.mean(axis=0)
        if normal @ outward < 0:
            loop = loop[::-1]
        oriented.append(tuple(loop))
    return oriented


# per case: the oriented cut-edge loops. Triangle loops become one triangle
# each; longer loops are triangulated around a cell-local centroid vertex,
# so no interior diagonal can coincide with a neighboring cell's and every
# mesh edge ends up in exactly two faces.
CASE_LOOPS = [_case_loops(case) for case in range(256)]


def case_triangle_count(case):
    return sum(1 if len(loop) == 3 else len(loop) for loop in CASE_LOOPS[case])


# ---------------------------------------------------------------------------
# grid container

@dataclass
class ScalarGrid:
    """Scalar samples on a cell-centered lattice, x index fastest."""

    resolution: int
    bounds: Tuple[np.ndarray, np.ndarray]
    values: np.ndarray  # flat, length resolution**3
    spacing: np.ndarray = field(init=False)

    def __post_init__(self):
        r = self.resolution
        lo = np.asarray(self.bounds[0], dtype=np.float64)
        hi = np.asarray(self.bounds[1], dtype=np.float64)
        self.bounds = (lo, hi)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(r**3)
        if r < 2:
            raise ValueError("resolution must be at least 2")
        if np.any(hi <= lo):
            raise ValueError("grid bounds are degenerate")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")
        self.spacing = (hi - lo) / r

    def as_cube(self):
        """Values as a (z, y, x)-indexed cube view."""
        r = self.resolution
        return self.values.reshape(r, r, r)

    def lattice_point(self, ix, iy, iz):
        return self.bounds[0] + (np.array([ix, iy, iz]) + 0.5) * self.spacing


# ---------------------------------------------------------------------------
# dense evaluation

def evaluate_grid(net, decoder, points, resolution, bounds=None, chunk=4096):
    """Occupancy of every lattice point, chunked; chunking is invisible.

    The cloud is encoded once; each chunk of lattice queries is decoded
    against the same support. Runs without gradient recording.
    """
    if chunk < 1:
        raise ValueError("chunk must be positive")
    points = np.asarray(points, dtype=np.float64)
    if bounds is None:
        bounds = gk.padded_bounds(points)
    pts, _ = gk.make_grid(resolution, bounds)
    bbout = net.denoise(points)
    values = np.empty(len(pts))
    for start in range(0, len(pts), chunk):
        batch = pts[start : start + chunk]
        values[start : start + len(batch)] = decoder.occupancy(batch, bbout).data
    return ScalarGrid(resolution=resolution, bounds=bounds, values=values)


# ---------------------------------------------------------------------------
# triangle meshes

@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (T, 3) vertex indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValueError("triangle indices out of range")

    def __len__(self):
        return len(self.triangles)

    def face_normals(self):
        """Unit normal per face, following the winding order."""
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        n = np.cross(b - a, c - a)
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    def face_areas(self):
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def save(self, path):
        path = str(path)
        if path.endswith(".obj"):
            write_obj(path, self.vertices, self.triangles)
        elif path.endswith(".ply"):
            write_ply(path, self.vertices, self.triangles)
        else:
            raise ValueError(f"unsupported mesh format: {path}")

    @classmethod
    def load(cls, path):
        path = str(path)
        if path.endswith(".obj"):
            verts, faces = read_obj(path)
        elif path.endswith(".ply"):
            verts, faces = read_ply(path)
            if faces is None:
                raise ValueError("PLY file has no faces")
        else:
            raise ValueError(f"unsupported mesh format: {path}")
        return cls(vertices=verts, triangles=faces)


def marching_cubes(grid, iso=0.5):
    """Extract the iso level set as a welded triangle mesh.

    Vertices lie on lattice edges at the linear crossing parameter and
    are shared between all triangles through a global edge key, so the
    output is independent of cell visiting order.
    """
    r = grid.resolution
    cube = grid.as_cube()  # [iz, iy, ix]
    inside = cube >= iso

    cases = np.zeros((r - 1, r - 1, r - 1), dtype=np.uint16)
    for corner, (dx, dy, dz) in enumerate(_CORNERS):
        sub = inside[dz : dz + r - 1, dy : dy + r - 1, dx : dx + r - 1]
        cases |= sub.astype(np.uint16) << corner
    active = np.argwhere((cases != 0) & (cases != 255))

    lo = grid.bounds[0]
    spacing = grid.spacing
    vertex_ids = {}
    vertices = []
    triangles = []

    def vertex_for(ix, iy, iz, axis):
        key = (ix, iy, iz, axis)
        vid = vertex_ids.get(key)
        if vid is not None:
            return vid
        va = cube[iz, iy, ix]
        step = np.array([0, 0, 0])
        step[axis] = 1
        vb = cube[iz + step[2], iy + step[1], ix + step[0]]
        t = (iso - va) / (vb - va)
        pos = lo + (np.array([ix, iy, iz]) + 0.5) * spacing
        pos = pos + t * spacing * step
        vid = len(vertices)
        vertex_ids[key] = vid
        vertices.append(pos)
        return vid

    for cz, cy, cx in active:
        for loop in CASE_LOOPS[cases[cz, cy, cx]]:
            ids = []
            for e in loop:
                bx, by, bz = _EDGE_BASE[e]
                ids.append(vertex_for(cx + bx, cy + by, cz + bz, _EDGE_AXIS[e]))
            if len(ids) == 3:
                triangles.append(ids)
            else:
                # cell-local hub vertex; spokes never clash between cells
                hub = len(vertices)
                vertices.append(np.mean([vertices[i] for i in ids], axis=0))
                for i in range(len(ids)):
                    triangles.append([hub, ids[i], ids[(i + 1) % len(ids)]])

    if not triangles:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    mesh = TriangleMesh(np.array(vertices), np.array(triangles, dtype=np.int64))
    areas = mesh.face_areas()
    if np.any(areas == 0.0):
        mesh = TriangleMesh(mesh.vertices, mesh.triangles[areas > 0.0])
    return mesh


def reconstruct_mesh(net, decoder, points, resolution, bounds=None, chunk=4096, iso=0.5):
    """Full pipeline: encode the cloud, sample the field, extract the mesh."""
    grid = evaluate_grid(net, decoder, points, resolution, bounds=bounds, chunk=chunk)
    return marching_cubes(grid, iso=iso)
