"""Point-mixing layers: channel mixing and softmax set pooling.

One pooling core (`SetMix`) serves all four uses: intra-set (kNN within a
cloud), inter-set (inverse-kNN), hierarchical (kNN across resolutions, with
the up path using the transposed down relation), and the multi-head
extra-set pooling of the occupancy decoder.

For every query q with support points p: an encoder MLP embeds
(p - q, features(p)); a per-head linear score map feeds a softmax over the
query's support; head-averaged weights multiply channel-wise into value
vectors; the weighted sum is the pooled output. Order-invariant in the
support by construction.
"""

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from . import diffcore as dc
from . import geokern as gk


@dataclass(frozen=True)
class ChannelMixSpec:
    """MLP layer widths (input, hidden..., output); ReLU on hidden layers."""

    widths: Tuple[int, ...]

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("channel mix needs at least one layer (two widths)")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"widths must be positive: {self.widths}")

    @property
    def num_layers(self):
        return len(self.widths) - 1


@dataclass(frozen=True)
class SetMixSpec:
    """Shapes of the pooling MLPs.

    The encoder takes a positional offset (point_dim) concatenated with the
    support feature (feature_dim). Each of `heads` score maps is a single
    linear layer from the encoder output to the value width, so score and
    value align channel-wise for the weighted product.
    """

    point_dim: int = 3
    feature_dim: int = 32
    encoder_widths: Tuple[int, ...] = (32, 32, 32)
    heads: int = 1
    value_widths: Tuple[int, ...] = (32,)

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if not self.encoder_widths or not self.value_widths:
            raise ValueError("encoder and value widths must be non-empty")

    @property
    def encoder_spec(self):
        return ChannelMixSpec((self.point_dim + self.feature_dim,) + tuple(self.encoder_widths))

    @property
    def value_spec(self):
        return ChannelMixSpec((self.encoder_widths[-1],) + tuple(self.value_widths))

    @property
    def out_width(self):
        return self.value_widths[-1]


class ChannelMix:
    """Row-wise MLP; parameters registered as <prefix>.layer<i>.{weight,bias}."""

    def __init__(self, spec, params, prefix, rng):
        self.spec = spec
        self.layers = []
        for i in range(spec.num_layers):
            w, b = dc.init_linear(rng, spec.widths[i], spec.widths[i + 1])
            wt = params.register(f"{prefix}.layer{i}.weight", dc.Tensor(w, requires_grad=True))
            bt = params.register(f"{prefix}.layer{i}.bias", dc.Tensor(b, requires_grad=True))
            self.layers.append((wt, bt))

    def __call__(self, x):
        for i, (w, b) in enumerate(self.layers):
            x = dc.linear(x, w, b)
            if i + 1 < len(self.layers):
                x = dc.relu(x)
        return x


def _as_tensor(x):
    return x if isinstance(x, dc.Tensor) else dc.constant(np.asarray(x, dtype=np.float64))


class SetMix:
    """Softmax set pooling with multi-head score averaging.

    Head scores are computed by one fused linear map (encoder width ->
    heads * value width); each head's slice gets its own softmax over the
    support, and the head-averaged weights multiply the value vectors.

    The first encoder layer is stored as separate positional and feature
    weight blocks. The feature half is then applied once per source row and
    gathered, instead of once per (query, support) pair — the same linear
    map, much cheaper when supports overlap heavily (dense query grids).
    """

    def __init__(self, spec, params, prefix, rng):
        self.spec = spec
        e0 = spec.encoder_widths[0]
        bound_in = spec.point_dim + spec.feature_dim
        w0, b0 = dc.init_linear(rng, bound_in, e0)
        reg = params.register
        self.pos_w = reg(
            f"{prefix}.encode.layer0.pos_weight",
            dc.Tensor(w0[: spec.point_dim], requires_grad=True),
        )
        self.feat_w = reg(
            f"{prefix}.encode.layer0.feat_weight",
            dc.Tensor(w0[spec.point_dim :], requires_grad=True),
        )
        self.enc_b = reg(f"{prefix}.encode.layer0.bias", dc.Tensor(b0, requires_grad=True))
        self.enc_rest = []
        widths = spec.encoder_widths
        for i in range(1, len(widths)):
            w, b = dc.init_linear(rng, widths[i - 1], widths[i])
            self.enc_rest.append(
                (
                    reg(f"{prefix}.encode.layer{i}.weight", dc.Tensor(w, requires_grad=True)),
                    reg(f"{prefix}.encode.layer{i}.bias", dc.Tensor(b, requires_grad=True)),
                )
            )
        e_width = widths[-1]
        v_width = spec.out_width
        w, b = dc.init_linear(rng, e_width, spec.heads * v_width)
        self.score_w = reg(f"{prefix}.score.weight", dc.Tensor(w, requires_grad=True))
        self.score_b = reg(f"{prefix}.score.bias", dc.Tensor(b, requires_grad=True))
        self.value = ChannelMix(spec.value_spec, params, f"{prefix}.value", rng)

    def _finish_encoder(self, e):
        for w, b in self.enc_rest:
            e = dc.linear(dc.relu(e), w, b)
        return e

    def embed(self, offsets, features):
        """Reference encoder on aligned (T, point_dim)/(T, feature_dim) rows."""
        zero = dc.constant(np.zeros(self.spec.encoder_widths[0]))
        e = dc.add(
            dc.linear(_as_tensor(offsets), self.pos_w, self.enc_b),
            dc.linear(_as_tensor(features), self.feat_w, zero),
        )
        return self._finish_encoder(e)

    def __call__(self, queries, support, source_points, source_features, return_weights=False):
        """Pool per-query support features into a (Q, out_width) Tensor.

        queries: Q x point_dim array (constant). source_points /
        source_features: the reference cloud's rows, as Tensors when
        gradients should flow through them. Empty supports are allowed in
        variable mode only and pool to zero rows.
        """
        qs = np.asarray(queries, dtype=np.float64)
        pos = _as_tensor(source_points)
        feats = _as_tensor(source_features)
        h, v = self.spec.heads, self.spec.out_width

        if support.mode == "fixed_k":
            nq, k = support.indices.shape
            if k < 1:
                raise ValueError("fixed-size support must have k >= 1")
            flat_idx = support.indices.ravel()
            q_rep = np.repeat(qs, k, axis=0)
            seg_offsets = None
        else:
            counts = np.diff(support.offsets)
            nq = len(counts)
            flat_idx = support.flat
            q_rep = np.repeat(qs, counts, axis=0)
            seg_offsets = support.offsets

        offsets = dc.sub(dc.gather_rows(pos, flat_idx), dc.constant(q_rep))
        # project features per source row, then gather per pair
        zero = dc.constant(np.zeros(self.spec.encoder_widths[0]))
        feat_proj = dc.linear(feats, self.feat_w, zero)
        e = dc.add(dc.linear(offsets, self.pos_w, self.enc_b), dc.gather_rows(feat_proj, flat_idx))
        e = self._finish_encoder(e)
        scores = dc.linear(e, self.score_w, self.score_b)  # (T, H*V)

        if seg_offsets is None:
            per_q = dc.reshape(scores, (nq, k, h * v))
            soft = dc.softmax_over_axis(per_q, axis=1)
            weights = dc.scale(dc.tensor_sum(dc.reshape(soft, (nq, k, h, v)), axis=2), 1.0 / h)
            pooled = dc.gather_pool(
                self.value(e), weights, np.arange(nq * k, dtype=np.int64).reshape(nq, k)
            )
        else:
            soft = dc.segment_softmax(scores, seg_offsets)
            weights = dc.scale(dc.tensor_sum(dc.reshape(soft, (-1, h, v)), axis=1), 1.0 / h)
            pooled = dc.gather_pool(
                self.value(e), weights, (seg_offsets, np.arange(len(flat_idx), dtype=np.int64))
            )

        if return_weights:
            return pooled, weights.data
        return pooled


# ---------------------------------------------------------------------------
# support-set constructors for the three in-cloud mixing patterns

def intra_set_support(points, k):
    """Each point pools from its own k nearest neighbors (itself included)."""
    cloud = points if isinstance(points, gk.PointCloud) else gk.PointCloud(points)
    return gk.knn(cloud.points, cloud, k)


def inter_set_support(intra_index):
    """Transpose of the intra-set relation: pool from the points that chose you."""
    return gk.inverse_knn(intra_index)


def down_support(coarse_points, fine_points, k):
    """Down transition: each coarse query pools from nearby fine points."""
    fine = fine_points if isinstance(fine_points, gk.PointCloud) else gk.PointCloud(fine_points)
    return gk.knn(coarse_points, fine, k)


def up_support(down_index):
    """Up transition: the inverse of the matching down-transition relation."""
    return gk.inverse_knn(down_index)


def intra_set_mix(mixer, points, features, k):
    pts = points.points if isinstance(points, gk.PointCloud) else np.asarray(points)
    return mixer(pts, intra_set_support(pts, k), pts, features)


def inter_set_mix(mixer, points, features, intra_index):
    pts = points.points if isinstance(points, gk.PointCloud) else np.asarray(points)
    return mixer(pts, inter_set_support(intra_index), pts, features)


def hierarchical_set_mix(mixer, query_points, source_points, source_features, support):
    """Down or up transition pooling across two resolutions; the caller
    supplies the support (down_support or up_support of the same relation).
    """
    return mixer(query_points, support, source_points, source_features)
