"""Occupancy decoder: local kNN pooling plus global coarse pooling.

For a query point q, the local branch pools encoder features of the K
nearest denoised points (positional input: denoised position minus q); the
global branch pools over the entire denoised coarse cloud the same way.
A fusing MLP turns the concatenated local/global features into two logits,
and the occupancy probability is the softmax weight of the inside class.

Ablation switches: `use_denoised_support=False` feeds both branches raw
coordinates (input cloud and raw coarse subset) instead of denoised ones,
so displacement parameters cannot influence occupancy at all;
`use_global=False` replaces the global feature with zeros, keeping every
parameter shape unchanged.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import diffcore as dc
from . import geokern as gk
from . import mixers as mx

INSIDE_CLASS = 1  # logit column holding the "occupied" class


@dataclass(frozen=True)
class DecoderConfig:
    k_support: int = 12
    heads: int = 4
    fine_width: int = 32
    coarse_width: int = 512
    local_hidden: Tuple[int, ...] = (32, 32, 32)
    global_hidden: Tuple[int, ...] = (32, 32, 32)
    value_width: int = 32
    fuse_hidden: Tuple[int, ...] = (64,)
    use_denoised_support: bool = True
    use_global: bool = True

    def __post_init__(self):
        if self.k_support < 1 or self.heads < 1:
            raise ValueError("k_support and heads must be >= 1")
        if min(self.fine_width, self.coarse_width, self.value_width) < 1:
            raise ValueError("feature widths must be positive")


@dataclass
class QueryBatch:
    """Query coordinates with optional binary occupancy labels."""

    coords: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"query coords must be Q x 3, got {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("query coords must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64)
            if self.labels.shape != (self.coords.shape[0],):
                raise ValueError("labels must be one per query")
            if not np.all((self.labels == 0) | (self.labels == 1)):
                raise ValueError("labels must be binary")

    def __len__(self):
        return self.coords.shape[0]


class ImplicitDecoder:
    """Parameters live under `<prefix>.local`, `<prefix>.global`, `<prefix>.fuse`."""

    def __init__(self, config, params, rng, prefix="decoder"):
        self.config = config
        cfg = config
        self.local = mx.SetMix(
            mx.SetMixSpec(
                point_dim=3,
                feature_dim=cfg.fine_width,
                encoder_widths=cfg.local_hidden,
                heads=cfg.heads,
                value_widths=(cfg.value_width,),
            ),
            params,
            f"{prefix}.local",
            rng,
        )
        self.global_pool = mx.SetMix(
            mx.SetMixSpec(
                point_dim=3,
                feature_dim=cfg.coarse_width,
                encoder_widths=cfg.global_hidden,
                heads=cfg.heads,
                value_widths=(cfg.value_width,),
            ),
            params,
            f"{prefix}.global",
            rng,
        )
        self.fuse = mx.ChannelMix(
            mx.ChannelMixSpec((2 * cfg.value_width,) + tuple(cfg.fuse_hidden) + (2,)),
            params,
            f"{prefix}.fuse",
            rng,
        )

    def _local_support(self, queries, bbout):
        """kNN support over denoised (or raw, under ablation) coordinates."""
        if self.config.use_denoised_support:
            # support coordinates enter as values only: the occupancy loss
            # must not steer the refinement offsets, which train against the
            # cloud-matching objective alone
            support_coords = dc.constant(bbout.denoised.data)
        else:
            support_coords = dc.constant(bbout.input_points)
        pts = support_coords.data
        if pts.shape[0] < self.config.k_support:
            raise ValueError(
                f"need at least K={self.config.k_support} support points, got {pts.shape[0]}"
            )
        index = gk.knn(queries, gk.PointCloud(pts), self.config.k_support)
        return index, support_coords

    def local_feature(self, queries, bbout, return_weights=False):
        index, support_coords = self._local_support(queries, bbout)
        return self.local(
            queries, index, support_coords, bbout.fine_features, return_weights=return_weights
        )

    def global_feature(self, queries, bbout):
        qs = np.asarray(queries, dtype=np.float64)
        if self.config.use_denoised_support:
            # values only, as in the local branch
            coarse = dc.constant(bbout.denoised_coarse.data)
        else:
            coarse = dc.constant(bbout.coarse_points)
        n_d = coarse.data.shape[0]
        index = gk.NeighborIndex(
            mode="fixed_k",
            source_size=n_d,
            indices=np.tile(np.arange(n_d, dtype=np.int64), (qs.shape[0], 1)),
        )
        return self.global_pool(qs, index, coarse, bbout.coarse_features)

    def logits(self, queries, bbout):
        """Two raw class scores per query, fed by both branches."""
        qs = np.asarray(queries, dtype=np.float64)
        y_loc = self.local_feature(qs, bbout)
        if self.config.use_global:
            y_glob = self.global_feature(qs, bbout)
        else:
            y_glob = dc.constant(np.zeros((qs.shape[0], self.config.value_width)))
        return self.fuse(dc.concat([y_loc, y_glob], axis=1))

    def occupancy(self, queries, bbout):
        """Occupancy probability in (0, 1) per query."""
        probs = dc.softmax_over_axis(self.logits(queries, bbout), axis=1)
        return dc.take_column(probs, INSIDE_CLASS)
