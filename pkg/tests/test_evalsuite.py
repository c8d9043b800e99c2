import numpy as np
import pytest

from mixrecon import evalsuite as ev
from mixrecon import extract as ex
from mixrecon import shapegen as sg
from mixrecon.extract import TriangleMesh


def square_samples(n_side, z, jitter=None, seed=0):
    """Grid samples of the unit square at height z, normals +z."""
    t = (np.arange(n_side) + 0.5) / n_side
    xx, yy = np.meshgrid(t, t)
    pts = np.stack([xx.ravel(), yy.ravel(), np.full(n_side**2, float(z))], axis=1)
    if jitter:
        pts[:, :2] += np.random.default_rng(seed).uniform(-jitter, jitter, (len(pts), 2))
    normals = np.tile([0.0, 0.0, 1.0], (len(pts), 1))
    return ev.SurfaceSampleSet(points=pts, normals=normals)


def sphere_mesh(resolution=32, radius=0.4):
    s = sg.Sphere(np.zeros(3), radius)
    bounds = (np.full(3, -0.55), np.full(3, 0.55))
    pts, _ = __import__("mixrecon.geokern", fromlist=["make_grid"]).make_grid(
        resolution, bounds
    )
    grid = ex.ScalarGrid(resolution=resolution, bounds=bounds, values=s.occupancy(pts))
    return ex.marching_cubes(grid)


# ---------------------------------------------------------------------------
# mesh sampling


def test_sample_single_triangle():
    mesh = TriangleMesh(
        np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
        np.array([[0, 1, 2]]),
    )
    out = ev.sample_mesh(mesh, 500, seed=1)
    pts = out.points
    # barycentric containment: x, y >= 0 and x + y <= 1 at z = 0
    assert np.all(pts[:, 2] == 0.0)
    assert np.all(pts[:, 0] >= 0) and np.all(pts[:, 1] >= 0)
    assert np.all(pts[:, 0] + pts[:, 1] <= 1.0 + 1e-12)
    assert np.allclose(out.normals, [0.0, 0.0, 1.0])


def test_sample_two_faces_area_weighted():
    # areas 1:9 via legs 1 and 3 (area scales with the square of the legs)
    mesh = TriangleMesh(
        np.array(
            [
                [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0],
                [5.0, 0.0, 0.0], [8.0, 0.0, 0.0], [5.0, 3.0, 0.0],
            ]
        ),
        np.array([[0, 1, 2], [3, 4, 5]]),
    )
    n = 20000
    out = ev.sample_mesh(mesh, n, seed=2)
    on_small = out.points[:, 0] < 4.0
    p = 0.1
    sigma = np.sqrt(n * p * (1 - p))
    assert abs(on_small.sum() - n * p) <= 3.0 * sigma


def test_sample_sphere_mesh_mean_radius():
    mesh = sphere_mesh(32)
    out = ev.sample_mesh(mesh, 20000, seed=3)
    mean_r = np.linalg.norm(out.points, axis=1).mean()
    assert abs(mean_r - 0.4) / 0.4 < 0.01


def test_sample_empty_mesh_rejected():
    mesh = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    with pytest.raises(ValueError):
        ev.sample_mesh(mesh, 10, seed=0)


def test_sample_set_validates_normals():
    with pytest.raises(ValueError):
        ev.SurfaceSampleSet(points=np.zeros((2, 3)), normals=np.ones((2, 3)))


# ---------------------------------------------------------------------------
# chamfer distances


def test_cd_identical_sets_zero():
    s = square_samples(40, 0.0)
    assert ev.cd1(s, s) == 0.0
    assert ev.cd2(s, s) == 0.0


def test_cd_offset_planes():
    d = 0.1
    a = square_samples(100, 0.0)
    b = square_samples(100, d)
    # matching grids: nearest neighbors pair up exactly across the gap
    assert ev.cd1(a, b) == pytest.approx(d, rel=1e-12)
    assert ev.cd2(a, b) == pytest.approx(d * d, rel=1e-12)


def test_cd_offset_planes_jittered():
    d = 0.1
    a = square_samples(100, 0.0, jitter=0.002, seed=4)
    b = square_samples(100, d, jitter=0.002, seed=5)
    assert ev.cd1(a, b) == pytest.approx(d, rel=0.05)
    assert ev.cd2(a, b) == pytest.approx(d * d, rel=0.10)


def test_cd_symmetric():
    rng = np.random.default_rng(6)
    a = rng.uniform(-1, 1, (300, 3))
    b = rng.uniform(-1, 1, (200, 3))
    assert ev.cd1(a, b) == pytest.approx(ev.cd1(b, a), rel=1e-15)
    assert ev.cd2(a, b) == pytest.approx(ev.cd2(b, a), rel=1e-15)


def test_cd2_matches_training_chamfer():
    from mixrecon import diffcore as dc
    from mixrecon import losses_train as lt

    rng = np.random.default_rng(7)
    a = rng.uniform(-1, 1, (50, 3))
    b = rng.uniform(-1, 1, (70, 3))
    with dc.Graph():
        train_val = lt.chamfer_l2(dc.constant(a), b).item()
    assert ev.cd2(a, b) == pytest.approx(train_val, abs=1e-12)


def test_cd_empty_rejected():
    with pytest.raises(ValueError):
        ev.cd1(np.zeros((0, 3)), np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# normal consistency


def test_nc_identical_one():
    s = square_samples(30, 0.0)
    assert ev.normal_consistency(s, s) == pytest.approx(1.0, abs=1e-15)


def test_nc_flipped_minus_one():
    s = square_samples(30, 0.0)
    flipped = ev.SurfaceSampleSet(points=s.points.copy(), normals=-s.normals)
    assert ev.normal_consistency(s, flipped) == pytest.approx(-1.0, abs=1e-15)


def test_nc_sixty_degrees_half():
    s = square_samples(30, 0.0)
    tilted_n = np.tile([np.sin(np.pi / 3), 0.0, np.cos(np.pi / 3)], (len(s), 1))
    tilted = ev.SurfaceSampleSet(points=s.points.copy(), normals=tilted_n)
    assert ev.normal_consistency(s, tilted) == pytest.approx(0.5, abs=1e-12)


def test_nc_requires_sample_sets():
    with pytest.raises(ValueError):
        ev.normal_consistency(np.zeros((3, 3)), np.zeros((3, 3)))


# ---------------------------------------------------------------------------
# f-score


def test_fscore_identical_one():
    s = square_samples(30, 0.0)
    assert ev.fscore(s, s) == 1.0


def test_fscore_far_disjoint_zero():
    a = np.zeros((10, 3))
    b = np.full((10, 3), 5.0)
    assert ev.fscore(a, b) == 0.0


def test_fscore_hand_case_two_thirds():
    gt = np.array([[0.0, 0.0, 0.0], [0.005, 0.0, 0.0]])
    pred = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
    assert ev.fscore(gt, pred, tau=0.01) == pytest.approx(2.0 / 3.0, rel=1e-12)


def test_fscore_monotone_in_tau():
    rng = np.random.default_rng(8)
    a = rng.uniform(-1, 1, (200, 3))
    b = a + rng.normal(0, 0.02, (200, 3))
    taus = [0.001, 0.005, 0.01, 0.05, 0.1]
    values = [ev.fscore(a, b, tau=t) for t in taus]
    assert all(x <= y + 1e-15 for x, y in zip(values, values[1:]))


def test_fscore_bad_tau():
    with pytest.raises(ValueError):
        ev.fscore(np.zeros((2, 3)), np.zeros((2, 3)), tau=0.0)


# ---------------------------------------------------------------------------
# volumetric iou


def test_iou_identical_one():
    occ = np.random.default_rng(9).random(1000) < 0.3
    assert ev.volumetric_iou(occ, occ) == 1.0


def test_iou_disjoint_zero():
    a = np.array([True, True, False, False])
    b = np.array([False, False, True, True])
    assert ev.volumetric_iou(a, b) == 0.0


def test_iou_both_empty_one():
    z = np.zeros(50, dtype=bool)
    assert ev.volumetric_iou(z, z) == 1.0


def test_iou_nested_cubes_exact_eighth():
    from mixrecon import geokern as gk

    pts, _ = gk.make_grid(64, (np.full(3, -0.5), np.full(3, 0.5)))
    occ_big = np.all(np.abs(pts) <= 0.5, axis=1)  # everything
    occ_small = np.all(np.abs(pts) <= 0.25, axis=1)
    assert ev.volumetric_iou(occ_big, occ_small) == pytest.approx(0.125, abs=1e-15)


def test_iou_mismatched_queries_rejected():
    with pytest.raises(ValueError):
        ev.volumetric_iou(np.zeros(3, dtype=bool), np.zeros(4, dtype=bool))


# ---------------------------------------------------------------------------
# rigid invariance and self-consistency


def rigid(points, normals=None):
    rot = sg.rotation_from_rng(np.random.default_rng(123))
    shift = np.array([0.3, -0.2, 0.15])
    p = points @ rot.T + shift
    if normals is None:
        return p
    return p, normals @ rot.T


def test_metrics_invariant_under_joint_rigid_motion():
    mesh = sphere_mesh(16)
    a = ev.sample_mesh(mesh, 3000, seed=10)
    b = ev.sample_mesh(mesh, 3000, seed=11)
    base = ev.compare_surfaces(a, b)
    pa, na = rigid(a.points, a.normals)
    pb, nb = rigid(b.points, b.normals)
    moved = ev.compare_surfaces(
        ev.SurfaceSampleSet(points=pa, normals=na / np.linalg.norm(na, axis=1, keepdims=True)),
        ev.SurfaceSampleSet(points=pb, normals=nb / np.linalg.norm(nb, axis=1, keepdims=True)),
    )
    assert moved.cd1 == pytest.approx(base.cd1, abs=1e-9)
    assert moved.cd2 == pytest.approx(base.cd2, abs=1e-9)
    assert moved.nc == pytest.approx(base.nc, abs=1e-9)
    assert moved.fs == pytest.approx(base.fs, abs=1e-9)


def test_identical_mesh_same_sampling_metrics():
    # evaluating a mesh against itself through the full pipeline must come
    # back perfect: no hidden asymmetry or noise in the metric path
    mesh = sphere_mesh(32)
    a = ev.sample_mesh(mesh, 10000, seed=12)
    b = ev.sample_mesh(mesh, 10000, seed=12)
    report = ev.compare_surfaces(a, b)
    assert report.cd1 < 1e-3
    assert report.nc > 0.999
    assert report.fs == 1.0


def test_identical_mesh_independent_sampling_metrics():
    # with independent draws the scores are limited by sample density only
    mesh = sphere_mesh(32)
    a = ev.sample_mesh(mesh, 10000, seed=12)
    b = ev.sample_mesh(mesh, 10000, seed=13)
    report = ev.compare_surfaces(a, b)
    assert report.cd1 < 0.02
    assert report.nc > 0.9
    assert report.fs > 0.5


# ---------------------------------------------------------------------------
# reports


def test_metric_report_validation_and_scaling():
    r = ev.MetricReport(cd1=0.02, cd2=0.0004, nc=0.98, fs=0.9, iou=0.8)
    assert r.cd1_scaled == pytest.approx(2.0)
    assert r.cd2_scaled == pytest.approx(4.0)
    with pytest.raises(ValueError):
        ev.MetricReport(cd1=-1.0, cd2=0.0, nc=0.0, fs=0.0)
    with pytest.raises(ValueError):
        ev.MetricReport(cd1=0.0, cd2=0.0, nc=2.0, fs=0.0)
    with pytest.raises(ValueError):
        ev.MetricReport(cd1=0.0, cd2=0.0, nc=0.0, fs=1.5)


def test_metric_report_record_line():
    r = ev.MetricReport(cd1=0.5, cd2=0.25, nc=1.0, fs=1.0)
    assert r.record("shape7") == "shape7 0.5 0.25 1 1"
    r2 = ev.MetricReport(cd1=0.5, cd2=0.25, nc=1.0, fs=1.0, iou=0.75)
    assert r2.record(3).endswith(" 0.75")


def test_mean_report_aggregates():
    rows = [
        ev.MetricReport(cd1=0.1, cd2=0.01, nc=0.9, fs=0.8, iou=0.7),
        ev.MetricReport(cd1=0.3, cd2=0.03, nc=0.7, fs=0.6, iou=0.9),
    ]
    agg = ev.mean_report(rows)
    assert agg.cd1 == pytest.approx(0.2)
    assert agg.iou == pytest.approx(0.8)
    with pytest.raises(ValueError):
        ev.mean_report([])
