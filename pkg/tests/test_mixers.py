import numpy as np
import pytest

from mixrecon import diffcore as dc
from mixrecon import geokern as gk
from mixrecon import mixers as mx


def make_channel_mix(widths, seed=0):
    params = dc.ModelParams()
    cm = mx.ChannelMix(mx.ChannelMixSpec(tuple(widths)), params, "cm", np.random.default_rng(seed))
    return cm, params


def make_set_mix(spec, seed=0):
    params = dc.ModelParams()
    sm = mx.SetMix(spec, params, "sm", np.random.default_rng(seed))
    return sm, params


def channel_mix_oracle(x, params, widths):
    """Independent layer-by-layer replay with explicit relu."""
    h = x.copy()
    for i in range(len(widths) - 1):
        h = h @ params[f"cm.layer{i}.weight"].data + params[f"cm.layer{i}.bias"].data
        if i + 1 < len(widths) - 1:
            h = np.maximum(h, 0.0)
    return h


# ---------------------------------------------------------------------------
# channel mixing

def test_channel_mix_single_layer_equals_linear():
    cm, params = make_channel_mix([4, 3])
    x = np.random.default_rng(1).standard_normal((5, 4))
    got = cm(dc.constant(x)).data
    expect = x @ params["cm.layer0.weight"].data + params["cm.layer0.bias"].data
    assert np.max(np.abs(got - expect)) < 1e-14


def test_channel_mix_deep_shape():
    cm, _ = make_channel_mix([35, 32, 32, 32])
    x = np.random.default_rng(2).standard_normal((7, 35))
    assert cm(dc.constant(x)).data.shape == (7, 32)


def test_channel_mix_matches_composed_oracle():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        widths = [int(w) for w in rng.integers(2, 9, size=rng.integers(2, 5))]
        cm, params = make_channel_mix(widths, seed)
        x = rng.standard_normal((6, widths[0]))
        got = cm(dc.constant(x)).data
        assert np.max(np.abs(got - channel_mix_oracle(x, params, widths))) < 1e-12


def test_channel_mix_spec_validation():
    with pytest.raises(ValueError):
        mx.ChannelMixSpec((8,))
    with pytest.raises(ValueError):
        mx.ChannelMixSpec((8, 0, 4))


# ---------------------------------------------------------------------------
# set mixing: trivial cases

SPEC = mx.SetMixSpec(
    point_dim=3, feature_dim=5, encoder_widths=(16, 8), heads=3, value_widths=(6,)
)


def test_set_mix_singleton_support_is_value_of_encoder():
    sm, _ = make_set_mix(SPEC, seed=3)
    rng = np.random.default_rng(4)
    src = rng.standard_normal((4, 3))
    feats = rng.standard_normal((4, 5))
    queries = rng.standard_normal((2, 3))
    support = gk.NeighborIndex(mode="fixed_k", source_size=4, indices=np.array([[2], [0]]))
    got = sm(queries, support, src, feats).data
    # K=1: softmax weight is 1 for every head; output = value(encoder(...))
    for row, (q, j) in enumerate([(0, 2), (1, 0)]):
        off = (src[j] - queries[q])[None, :]
        expect = sm.value(sm.embed(off, feats[j][None, :])).data
        assert np.max(np.abs(got[row] - expect[0])) < 1e-12


def test_set_mix_identical_support_rows_give_common_value():
    sm, _ = make_set_mix(SPEC, seed=5)
    rng = np.random.default_rng(6)
    p = rng.standard_normal(3)
    f = rng.standard_normal(5)
    src = np.tile(p, (6, 1))
    feats = np.tile(f, (6, 1))
    q = rng.standard_normal((1, 3))
    support = gk.NeighborIndex(
        mode="fixed_k", source_size=6, indices=np.arange(6)[None, :]
    )
    got = sm(q, support, src, feats).data
    expect = sm.value(sm.embed((p - q[0])[None, :], f[None, :])).data
    assert np.max(np.abs(got - expect)) < 1e-10


def test_set_mix_support_order_invariance():
    sm, _ = make_set_mix(SPEC, seed=7)
    rng = np.random.default_rng(8)
    src = rng.standard_normal((10, 3))
    feats = rng.standard_normal((10, 5))
    q = rng.standard_normal((3, 3))
    idx = np.stack([rng.permutation(10)[:4] for _ in range(3)])
    base = sm(q, gk.NeighborIndex(mode="fixed_k", source_size=10, indices=idx), src, feats).data
    for trial in range(5):
        perm_idx = np.stack([row[np.random.default_rng(trial).permutation(4)] for row in idx])
        got = sm(
            q, gk.NeighborIndex(mode="fixed_k", source_size=10, indices=perm_idx), src, feats
        ).data
        assert np.max(np.abs(got - base)) < 1e-12


def test_set_mix_weights_nonnegative_sum_to_one():
    sm, _ = make_set_mix(SPEC, seed=9)
    rng = np.random.default_rng(10)
    src = rng.standard_normal((12, 3))
    feats = rng.standard_normal((12, 5))
    q = rng.standard_normal((5, 3))
    idx = np.stack([rng.permutation(12)[:6] for _ in range(5)])
    _, weights = sm(
        q,
        gk.NeighborIndex(mode="fixed_k", source_size=12, indices=idx),
        src,
        feats,
        return_weights=True,
    )
    assert np.all(weights >= 0)
    assert np.max(np.abs(weights.sum(axis=1) - 1.0)) < 1e-10


def test_set_mix_translation_equivariance():
    sm, _ = make_set_mix(SPEC, seed=11)
    rng = np.random.default_rng(12)
    src = rng.standard_normal((8, 3))
    feats = rng.standard_normal((8, 5))
    q = rng.standard_normal((2, 3))
    t = rng.standard_normal(3)
    idx = np.stack([rng.permutation(8)[:3] for _ in range(2)])
    support = gk.NeighborIndex(mode="fixed_k", source_size=8, indices=idx)
    a = sm(q, support, src, feats).data
    b = sm(q + t, support, src + t, feats).data
    assert np.max(np.abs(a - b)) < 1e-12


def test_set_mix_single_head_equals_plain_softmax_pool():
    spec1 = mx.SetMixSpec(
        point_dim=3, feature_dim=5, encoder_widths=(16, 8), heads=1, value_widths=(6,)
    )
    sm, params = make_set_mix(spec1, seed=13)
    rng = np.random.default_rng(14)
    src = rng.standard_normal((9, 3))
    feats = rng.standard_normal((9, 5))
    q = rng.standard_normal((2, 3))
    idx = np.stack([rng.permutation(9)[:4] for _ in range(2)])
    support = gk.NeighborIndex(mode="fixed_k", source_size=9, indices=idx)
    got = sm(q, support, src, feats).data

    # oracle: explicit per-query single-softmax pooling
    def softmax(v):
        e = np.exp(v - v.max(axis=0, keepdims=True))
        return e / e.sum(axis=0, keepdims=True)

    for qi in range(2):
        e = sm.embed(src[idx[qi]] - q[qi], feats[idx[qi]]).data
        scores = e @ params["sm.score.weight"].data + params["sm.score.bias"].data
        vals = sm.value(dc.constant(e)).data
        expect = (softmax(scores) * vals).sum(axis=0)
        assert np.max(np.abs(got[qi] - expect)) < 1e-12


def test_set_mix_multi_head_matches_per_head_average_oracle():
    sm, params = make_set_mix(SPEC, seed=15)
    rng = np.random.default_rng(16)
    src = rng.standard_normal((7, 3))
    feats = rng.standard_normal((7, 5))
    q = rng.standard_normal((1, 3))
    idx = rng.permutation(7)[:4][None, :]
    support = gk.NeighborIndex(mode="fixed_k", source_size=7, indices=idx)
    got = sm(q, support, src, feats).data[0]

    e = sm.embed(src[idx[0]] - q[0], feats[idx[0]]).data
    scores = e @ params["sm.score.weight"].data + params["sm.score.bias"].data  # (K, H*V)
    vals = sm.value(dc.constant(e)).data  # (K, V)
    h, v = SPEC.heads, SPEC.out_width
    weights = np.zeros((4, v))
    for hi in range(h):
        s = scores[:, hi * v : (hi + 1) * v]
        e_s = np.exp(s - s.max(axis=0, keepdims=True))
        weights += e_s / e_s.sum(axis=0, keepdims=True)
    weights /= h
    expect = (weights * vals).sum(axis=0)
    assert np.max(np.abs(got - expect)) < 1e-12


def test_set_mix_variable_mode_empty_support_is_zero():
    sm, _ = make_set_mix(SPEC, seed=17)
    rng = np.random.default_rng(18)
    src = rng.standard_normal((5, 3))
    feats = rng.standard_normal((5, 5))
    q = rng.standard_normal((3, 3))
    support = gk.NeighborIndex(
        mode="variable",
        source_size=5,
        offsets=np.array([0, 2, 2, 4]),
        flat=np.array([0, 3, 1, 4]),
    )
    got = sm(q, support, src, feats).data
    assert np.array_equal(got[1], np.zeros(SPEC.out_width))
    assert np.any(got[0] != 0) and np.any(got[2] != 0)


def test_set_mix_variable_matches_fixed_on_equal_counts():
    sm, _ = make_set_mix(SPEC, seed=19)
    rng = np.random.default_rng(20)
    src = rng.standard_normal((8, 3))
    feats = rng.standard_normal((8, 5))
    q = rng.standard_normal((2, 3))
    idx = np.array([[1, 3, 5], [0, 2, 7]])
    fixed = gk.NeighborIndex(mode="fixed_k", source_size=8, indices=idx)
    var = gk.NeighborIndex(
        mode="variable", source_size=8, offsets=np.array([0, 3, 6]), flat=idx.ravel()
    )
    a = sm(q, fixed, src, feats).data
    b = sm(q, var, src, feats).data
    assert np.max(np.abs(a - b)) < 1e-12


def test_set_mix_gradient_finite_difference():
    spec = mx.SetMixSpec(
        point_dim=3, feature_dim=4, encoder_widths=(8, 6), heads=2, value_widths=(5,)
    )
    params = dc.ModelParams()
    sm = mx.SetMix(spec, params, "sm", np.random.default_rng(21))
    rng = np.random.default_rng(22)
    src_pts = dc.Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    src_feats = dc.Tensor(rng.standard_normal((6, 4)), requires_grad=True)
    q = rng.standard_normal((2, 3))
    idx = np.array([[0, 2, 4], [1, 3, 5]])
    support = gk.NeighborIndex(mode="fixed_k", source_size=6, indices=idx)

    def f():
        return dc.tensor_sum(dc.square(sm(q, support, src_pts, src_feats)))

    tensors = list(params.tensors()) + [src_pts, src_feats]
    err = dc.finite_difference_check(f, tensors, step=1e-5, max_coords=12, seed=0)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# intra / inter / hierarchical wrappers

def test_intra_k1_pools_only_itself():
    spec = mx.SetMixSpec(point_dim=3, feature_dim=2, encoder_widths=(8,), value_widths=(4,))
    sm, _ = make_set_mix(spec, seed=23)
    rng = np.random.default_rng(24)
    pts = rng.standard_normal((5, 3))
    feats = rng.standard_normal((5, 2))
    got = mx.intra_set_mix(sm, pts, feats, 1).data
    for i in range(5):
        expect = sm.value(sm.embed(np.zeros((1, 3)), feats[i][None, :])).data[0]
        assert np.max(np.abs(got[i] - expect)) < 1e-12


def test_hierarchical_down_identity_support():
    # no downsampling (m = N) with k=1: every coarse query pools itself
    spec = mx.SetMixSpec(point_dim=3, feature_dim=2, encoder_widths=(8,), value_widths=(4,))
    sm, _ = make_set_mix(spec, seed=25)
    rng = np.random.default_rng(26)
    pts = rng.standard_normal((6, 3))
    feats = rng.standard_normal((6, 2))
    order = gk.farthest_point_sample(gk.PointCloud(pts), 6).indices
    coarse = pts[order]
    support = mx.down_support(coarse, pts, 1)
    assert np.array_equal(support.indices[:, 0], order)
    got = mx.hierarchical_set_mix(sm, coarse, pts, feats, support).data
    for row, j in enumerate(order):
        expect = sm.value(sm.embed(np.zeros((1, 3)), feats[j][None, :])).data[0]
        assert np.max(np.abs(got[row] - expect)) < 1e-12


def test_inter_support_is_transpose_of_intra():
    rng = np.random.default_rng(27)
    pts = rng.standard_normal((30, 3))
    intra = mx.intra_set_support(pts, 5)
    inter = mx.inter_set_support(intra)
    for j in range(30):
        expect = sorted(i for i in range(30) if j in intra.indices[i])
        assert list(inter.row(j)) == expect


def test_up_support_transposes_down():
    rng = np.random.default_rng(28)
    fine = rng.standard_normal((20, 3))
    coarse = fine[gk.farthest_point_sample(gk.PointCloud(fine), 6).indices]
    down = mx.down_support(coarse, fine, 4)
    up = mx.up_support(down)
    assert up.num_queries == 20
    for j in range(20):
        expect = sorted(i for i in range(6) if j in down.indices[i])
        assert list(up.row(j)) == expect
