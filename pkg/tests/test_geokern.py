import numpy as np
import pytest

from mixrecon import geokern as gk


# ---------------------------------------------------------------------------
# oracles

def fps_oracle(points, m):
    """Exhaustive max-min selection with explicit tie handling."""
    n = len(points)
    selected = [0]
    for _ in range(1, m):
        best, best_d = None, -1.0
        # ascending scan with strict > keeps the lowest index among ties
        for cand in range(n):
            if cand in selected:
                continue
            d = min(float(np.sum((points[cand] - points[s]) ** 2)) for s in selected)
            if d > best_d:
                best, best_d = cand, d
        selected.append(best)
    return selected


def knn_oracle(queries, reference, k):
    """Sort by (distance, index) per query."""
    out = np.zeros((len(queries), k), dtype=np.int64)
    for qi, q in enumerate(queries):
        d2 = [(float(np.sum((r - q) ** 2)), j) for j, r in enumerate(reference)]
        d2.sort()
        out[qi] = [j for _, j in d2[:k]]
    return out


def inverse_oracle(indices, n):
    lists = [[] for _ in range(n)]
    for q, row in enumerate(indices):
        for j in row:
            lists[j].append(q)
    return [sorted(lst) for lst in lists]


# ---------------------------------------------------------------------------
# PointCloud

def test_pointcloud_validation():
    with pytest.raises(ValueError):
        gk.PointCloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        gk.PointCloud(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        gk.PointCloud(np.array([[0.0, 0.0, np.inf]]))
    with pytest.raises(ValueError):
        gk.PointCloud(np.zeros((4, 3)), features=np.zeros((3, 8)))


# ---------------------------------------------------------------------------
# farthest point sampling

def test_fps_m1_is_seed():
    cloud = gk.PointCloud(np.random.default_rng(0).standard_normal((10, 3)))
    assert list(gk.farthest_point_sample(cloud, 1).indices) == [0]


def test_fps_m_equals_n_covers_all():
    pts = np.random.default_rng(1).standard_normal((8, 3))
    got = gk.farthest_point_sample(gk.PointCloud(pts), 8).indices
    assert sorted(got) == list(range(8))
    assert got[0] == 0


def test_fps_three_point_case():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.1, 0, 0]])
    got = gk.farthest_point_sample(gk.PointCloud(pts), 2).indices
    assert list(got) == [0, 1]


def test_fps_m2_picks_farthest_from_seed():
    for seed in range(30):
        pts = np.random.default_rng(seed).standard_normal((40, 3))
        got = gk.farthest_point_sample(gk.PointCloud(pts), 2).indices
        d = ((pts - pts[0]) ** 2).sum(axis=1)
        assert got[1] == int(np.argmax(d))


def test_fps_matches_exhaustive_oracle():
    for seed in range(25):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 30))
        m = int(rng.integers(1, n + 1))
        pts = rng.standard_normal((n, 3))
        got = list(gk.farthest_point_sample(gk.PointCloud(pts), m).indices)
        assert got == fps_oracle(pts, m), f"seed {seed}"


def test_fps_tie_break_lowest_index():
    # two candidates equidistant from the seed: lower index wins
    pts = np.array([[0.0, 0, 0], [0, 1.0, 0], [1.0, 0, 0]])
    got = gk.farthest_point_sample(gk.PointCloud(pts), 2).indices
    assert got[1] == 1


def test_fps_range_errors():
    cloud = gk.PointCloud(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        gk.farthest_point_sample(cloud, 0)
    with pytest.raises(ValueError):
        gk.farthest_point_sample(cloud, 4)


# ---------------------------------------------------------------------------
# knn

def test_knn_full_set_sorted_by_distance():
    pts = np.array([[0.0, 0, 0], [3.0, 0, 0], [1.0, 0, 0]])
    got = gk.knn(np.array([[0.1, 0, 0]]), gk.PointCloud(pts), 3)
    assert list(got.indices[0]) == [0, 2, 1]
    assert np.all(np.diff(got.distances[0]) >= 0)


def test_knn_coincident_query():
    pts = np.random.default_rng(2).standard_normal((20, 3))
    got = gk.knn(pts[7:8], gk.PointCloud(pts), 3)
    assert got.indices[0, 0] == 7
    assert got.distances[0, 0] == 0.0


def test_knn_matches_brute_force_oracle_200_instances():
    for seed in range(200):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 513))
        k = int(rng.integers(1, min(n, 16) + 1))
        nq = int(rng.integers(1, 8))
        ref = rng.standard_normal((n, 3))
        qs = rng.standard_normal((nq, 3))
        got = gk.knn(qs, gk.PointCloud(ref), k)
        assert np.array_equal(got.indices, knn_oracle(qs, ref, k)), f"seed {seed}"


def test_knn_tie_break_ascending_index():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0]])
    got = gk.knn(np.array([[0.0, 0, 0]]), gk.PointCloud(pts), 3)
    assert list(got.indices[0]) == [0, 1, 2]


def test_knn_k_out_of_range():
    cloud = gk.PointCloud(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        gk.knn(np.zeros((1, 3)), cloud, 4)
    with pytest.raises(ValueError):
        gk.knn(np.zeros((1, 3)), cloud, 0)


# ---------------------------------------------------------------------------
# inverse knn

def test_inverse_symmetric_two_points():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    fwd = gk.knn(pts, gk.PointCloud(pts), 2)
    inv = gk.inverse_knn(fwd)
    # mutual 2-NN of each other: every point supports both queries
    assert list(inv.row(0)) == [0, 1]
    assert list(inv.row(1)) == [0, 1]


def test_inverse_unselected_point_empty():
    # queries cluster near reference point 0; point 2 is never chosen with k=1
    ref = np.array([[0.0, 0, 0], [0.1, 0, 0], [9.0, 9, 9]])
    qs = np.array([[0.01, 0, 0], [0.02, 0, 0]])
    fwd = gk.knn(qs, gk.PointCloud(ref), 1)
    inv = gk.inverse_knn(fwd)
    assert len(inv.row(2)) == 0


def test_inverse_matches_transpose_oracle():
    rng = np.random.default_rng(17)
    ref = rng.standard_normal((50, 3))
    qs = rng.standard_normal((50, 3))
    fwd = gk.knn(qs, gk.PointCloud(ref), 4)
    inv = gk.inverse_knn(fwd)
    expect = inverse_oracle(fwd.indices, 50)
    for j in range(50):
        assert list(inv.row(j)) == expect[j]


def test_inverse_relation_equivalence_exhaustive():
    # (i in inverse[j]) <=> (j in forward[i]) on small instances
    for seed in range(10):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 12))
        pts = rng.standard_normal((n, 3))
        fwd = gk.knn(pts, gk.PointCloud(pts), 3)
        inv = gk.inverse_knn(fwd)
        for i in range(n):
            for j in range(n):
                assert (i in inv.row(j)) == (j in fwd.indices[i])


def test_inverse_requires_fixed_k():
    ni = gk.NeighborIndex(
        mode="variable", source_size=2, offsets=np.array([0, 1]), flat=np.array([0])
    )
    with pytest.raises(ValueError):
        gk.inverse_knn(ni)


# ---------------------------------------------------------------------------
# relative positions, grids, bounds

def test_relative_positions_cases():
    assert np.array_equal(
        gk.relative_positions(np.array([[1.0, 1, 1]]), np.array([1.0, 1, 1])), [[0.0, 0, 0]]
    )
    assert np.array_equal(
        gk.relative_positions(np.array([[1.0, 2, 3]]), np.array([1.0, 1, 1])), [[0.0, 1, 2]]
    )


def test_relative_positions_translation_invariant():
    rng = np.random.default_rng(4)
    sp = rng.standard_normal((6, 3))
    q = rng.standard_normal(3)
    t = rng.standard_normal(3)
    a = gk.relative_positions(sp, q)
    b = gk.relative_positions(sp + t, q + t)
    assert np.max(np.abs(a - b)) < 1e-12


def test_grid_r2_unit_cube():
    pts, spacing = gk.make_grid(2, (np.zeros(3), np.ones(3)))
    assert pts.shape == (8, 3)
    assert np.array_equal(spacing, [0.5, 0.5, 0.5])
    expect = {(0.25, 0.25, 0.25), (0.75, 0.25, 0.25), (0.25, 0.75, 0.25), (0.75, 0.75, 0.25),
              (0.25, 0.25, 0.75), (0.75, 0.25, 0.75), (0.25, 0.75, 0.75), (0.75, 0.75, 0.75)}
    assert {tuple(p) for p in pts} == expect
    # x varies fastest
    assert np.array_equal(pts[0], [0.25, 0.25, 0.25])
    assert np.array_equal(pts[1], [0.75, 0.25, 0.25])
    assert np.array_equal(pts[2], [0.25, 0.75, 0.25])
    assert np.array_equal(pts[4], [0.25, 0.25, 0.75])


def test_grid_r4_spacing():
    pts, spacing = gk.make_grid(4, (np.zeros(3), np.ones(3)))
    assert pts.shape == (64, 3)
    assert np.allclose(spacing, 0.25)
    xs = np.unique(pts[:, 0])
    assert np.allclose(np.diff(xs), 0.25)


def test_grid_degenerate_bounds():
    with pytest.raises(ValueError):
        gk.make_grid(4, (np.zeros(3), np.array([1.0, 0.0, 1.0])))
    with pytest.raises(ValueError):
        gk.make_grid(1, (np.zeros(3), np.ones(3)))


def test_padded_bounds_strictly_contain_cloud():
    rng = np.random.default_rng(8)
    pts = rng.standard_normal((30, 3))
    lo, hi = gk.padded_bounds(pts, 0.05)
    assert np.all(lo < pts.min(axis=0))
    assert np.all(hi > pts.max(axis=0))
    extent = pts.max(axis=0) - pts.min(axis=0)
    assert np.allclose(pts.min(axis=0) - lo, 0.05 * extent)


# ---------------------------------------------------------------------------
# determinism and the tree-based helper

def test_kernels_bitwise_deterministic():
    rng = np.random.default_rng(33)
    pts = rng.standard_normal((100, 3))
    cloud = gk.PointCloud(pts)
    a1 = gk.farthest_point_sample(cloud, 20).indices
    a2 = gk.farthest_point_sample(cloud, 20).indices
    assert np.array_equal(a1, a2)
    k1 = gk.knn(pts[:10], cloud, 5)
    k2 = gk.knn(pts[:10], cloud, 5)
    assert np.array_equal(k1.indices, k2.indices)
    assert k1.distances.tobytes() == k2.distances.tobytes()


def test_tree_nn_matches_brute_force():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((60, 3))
        b = rng.standard_normal((45, 3))
        d, idx = gk.nearest_neighbor_distances(a, b)
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        assert np.max(np.abs(d - np.sqrt(d2.min(axis=1)))) < 1e-12
        assert np.max(np.abs(d - np.linalg.norm(a - b[idx], axis=1))) < 1e-12
