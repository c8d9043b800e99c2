"""U-Net point network: hierarchical feature extraction plus denoising.

The encoder downsamples by farthest point sampling level by level; each
level pools fine features into the coarse cloud (hierarchical mixing),
then refines them with intra-set, inter-set, and channel mixing. The
decoder walks back up using the inverse of each level's down relation,
merging skip features, and ends in two heads: per-point fine features and
per-point displacement vectors. Adding the displacements to the input
yields the denoised cloud; the bottleneck cloud and its features provide
the coarse global description.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import diffcore as dc
from . import geokern as gk
from . import mixers as mx


@dataclass(frozen=True)
class BackboneConfig:
    """Shape of the trunk.

    widths has levels+1 entries: full-resolution feature width first (also
    the fine output width), bottleneck width last. ratios gives the
    downsample fraction for every level except the final one, which lands
    exactly on n_d points.
    """

    levels: int = 3
    widths: Tuple[int, ...] = (32, 64, 128, 512)
    ratios: Tuple[float, ...] = (0.25, 0.2)
    k_internal: int = 16
    n_d: int = 12
    mix_embed: int = 64

    def __post_init__(self):
        if self.levels < 0:
            raise ValueError("levels must be >= 0")
        if len(self.widths) != self.levels + 1:
            raise ValueError(
                f"widths needs levels+1={self.levels + 1} entries, got {len(self.widths)}"
            )
        if len(self.ratios) != max(0, self.levels - 1):
            raise ValueError(
                f"ratios needs levels-1={max(0, self.levels - 1)} entries, got {len(self.ratios)}"
            )
        if any(w <= 0 for w in self.widths) or self.k_internal < 1 or self.n_d < 1:
            raise ValueError("widths, k_internal and n_d must be positive")
        if any(not 0 < r <= 1 for r in self.ratios):
            raise ValueError("ratios must lie in (0, 1]")

    @property
    def fine_width(self):
        return self.widths[0]

    @property
    def coarse_width(self):
        return self.widths[-1]

    def level_sizes(self, n_points):
        """Cloud sizes from full resolution down to the bottleneck."""
        sizes = [n_points]
        for r in self.ratios:
            sizes.append(max(1, round(sizes[-1] * r)))
        if self.levels > 0:
            sizes.append(self.n_d)
        for a, b in zip(sizes, sizes[1:]):
            if b > a:
                raise ValueError(f"downsampling cannot grow the cloud: {sizes}")
        return sizes


@dataclass
class EncoderState:
    """Everything the up path needs: per-level clouds, skip features, and
    the down-transition relations to invert."""

    clouds: List[np.ndarray]
    skip_features: List[dc.Tensor]
    down_supports: List[gk.NeighborIndex]
    level_indices: List[np.ndarray]
    delta: np.ndarray  # coarse index -> row of the input cloud


@dataclass
class BackboneOutput:
    input_points: np.ndarray  # (N_p, 3) raw input cloud
    fine_features: dc.Tensor  # (N_p, fine_width)
    offsets: dc.Tensor  # (N_p, 3)
    denoised: dc.Tensor  # (N_p, 3) = input + offsets
    coarse_points: np.ndarray  # (N_d, 3) rows of the raw input
    coarse_features: dc.Tensor  # (N_d, coarse_width)
    denoised_coarse: dc.Tensor  # (N_d, 3) rows of the denoised cloud
    downsample: gk.DownsampleMap


def _level_spec(cfg, in_width, out_width):
    e = min(cfg.mix_embed, out_width)
    return mx.SetMixSpec(
        point_dim=3,
        feature_dim=in_width,
        encoder_widths=(e, e),
        heads=1,
        value_widths=(out_width,),
    )


class Backbone:
    """Builds and runs the trunk; parameters live under `<prefix>.`."""

    def __init__(self, config, params, rng, prefix="backbone"):
        self.config = config
        cfg = config
        w = cfg.widths
        self.embed = mx.ChannelMix(mx.ChannelMixSpec((3, w[0])), params, f"{prefix}.embed", rng)

        self.down = []
        self.down_intra = []
        self.down_inter = []
        self.down_cm = []
        for i in range(cfg.levels):
            p = f"{prefix}.down{i}"
            self.down.append(mx.SetMix(_level_spec(cfg, w[i], w[i + 1]), params, f"{p}.pool", rng))
            refine = _level_spec(cfg, w[i + 1], w[i + 1])
            self.down_intra.append(mx.SetMix(refine, params, f"{p}.intra", rng))
            self.down_inter.append(mx.SetMix(refine, params, f"{p}.inter", rng))
            self.down_cm.append(
                mx.ChannelMix(mx.ChannelMixSpec((w[i + 1], w[i + 1])), params, f"{p}.mix", rng)
            )

        self.up = []
        self.up_skip = []
        self.up_intra = []
        self.up_inter = []
        self.up_cm = []
        for i in range(cfg.levels):
            p = f"{prefix}.up{i}"
            self.up.append(mx.SetMix(_level_spec(cfg, w[i + 1], w[i]), params, f"{p}.pool", rng))
            self.up_skip.append(
                mx.ChannelMix(mx.ChannelMixSpec((2 * w[i], w[i])), params, f"{p}.skip", rng)
            )
            refine = _level_spec(cfg, w[i], w[i])
            self.up_intra.append(mx.SetMix(refine, params, f"{p}.intra", rng))
            self.up_inter.append(mx.SetMix(refine, params, f"{p}.inter", rng))
            self.up_cm.append(
                mx.ChannelMix(mx.ChannelMixSpec((w[i], w[i])), params, f"{prefix}.up{i}.mix", rng)
            )

        self.feature_head = mx.ChannelMix(
            mx.ChannelMixSpec((w[0], cfg.fine_width)), params, f"{prefix}.feature_head", rng
        )
        # zero-initialized so the denoised cloud starts as the input
        zw = dc.Tensor(np.zeros((w[0], 3)), requires_grad=True)
        zb = dc.Tensor(np.zeros(3), requires_grad=True)
        self.offset_w = params.register(f"{prefix}.offset_head.weight", zw)
        self.offset_b = params.register(f"{prefix}.offset_head.bias", zb)

    def _refine(self, pts, feats, intra_mixer, inter_mixer, channel_mixer):
        k = min(self.config.k_internal, len(pts))
        intra_idx = mx.intra_set_support(pts, k)
        feats = intra_mixer(pts, intra_idx, pts, feats)
        feats = inter_mixer(pts, mx.inter_set_support(intra_idx), pts, feats)
        return channel_mixer(feats)

    def encode(self, points):
        """Run the down path; returns the encoder state (F_Y is the last
        skip feature, the coarse cloud the last entry of clouds)."""
        x = np.asarray(points, dtype=np.float64)
        cfg = self.config
        if cfg.levels > 0 and x.shape[0] < cfg.n_d:
            raise ValueError(f"need at least n_d={cfg.n_d} points, got {x.shape[0]}")
        sizes = cfg.level_sizes(x.shape[0])

        clouds = [x]
        feats = self.embed(dc.constant(x))
        skip_features = [feats]
        down_supports = []
        level_indices = []
        delta = np.arange(x.shape[0], dtype=np.int64)
        for i in range(cfg.levels):
            fine = clouds[-1]
            sel = gk.farthest_point_sample(gk.PointCloud(fine), sizes[i + 1]).indices
            coarse = fine[sel]
            k = min(cfg.k_internal, len(fine))
            support = mx.down_support(coarse, fine, k)
            feats = self.down[i](coarse, support, fine, feats)
            feats = self._refine(
                coarse, feats, self.down_intra[i], self.down_inter[i], self.down_cm[i]
            )
            clouds.append(coarse)
            skip_features.append(feats)
            down_supports.append(support)
            level_indices.append(sel)
            delta = delta[sel]
        return EncoderState(
            clouds=clouds,
            skip_features=skip_features,
            down_supports=down_supports,
            level_indices=level_indices,
            delta=delta,
        )

    def decode(self, state):
        """Run the up path; returns (fine features, per-point offsets)."""
        cfg = self.config
        feats = state.skip_features[-1]
        for i in reversed(range(cfg.levels)):
            fine = state.clouds[i]
            coarse = state.clouds[i + 1]
            support = mx.up_support(state.down_supports[i])
            up_feats = self.up[i](fine, support, coarse, feats)
            feats = self.up_skip[i](dc.concat([up_feats, state.skip_features[i]], axis=1))
            feats = self._refine(fine, feats, self.up_intra[i], self.up_inter[i], self.up_cm[i])
        fine_features = self.feature_head(feats)
        offsets = dc.linear(feats, self.offset_w, self.offset_b)
        return fine_features, offsets

    def denoise(self, points):
        """Full forward pass; all outputs share one differentiation tape."""
        x = np.asarray(points, dtype=np.float64)
        state = self.encode(x)
        fine_features, offsets = self.decode(state)
        denoised = dc.add(dc.constant(x), offsets)
        return BackboneOutput(
            input_points=x,
            fine_features=fine_features,
            offsets=offsets,
            denoised=denoised,
            coarse_points=state.clouds[-1],
            coarse_features=state.skip_features[-1],
            denoised_coarse=dc.gather_rows(denoised, state.delta),
            downsample=gk.DownsampleMap(indices=state.delta),
        )
