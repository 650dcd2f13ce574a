"""Target-aware one-stream feature network.

Template and search tokens share one transformer: concatenated local
features pass through stacked self-attention blocks, so the off-diagonal
attention blocks carry the template/search interaction without a separate
fusion stage. The center-points stage re-runs one block on template-center
features against the search tokens.
"""

from __future__ import annotations

import csv
import math

import numpy as np

from . import geometry, tensor as T
from .nn import Module, PointMLP, TransformerBlock


class AttentionMap:
    """Row-stochastic attention (heads, N1+N2, N1+N2) for one block."""

    def __init__(self, weights, n1, n2, block):
        self.weights = weights
        self.n1 = n1
        self.n2 = n2
        self.block = block

    def search_token_mass(self):
        """Attention mass each search token receives, averaged over heads.

        Column sums over the search-key columns of the full map (the
        lambda^ts and lambda^ss blocks), one value per search token.
        """
        cols = self.weights[:, :, self.n1:]
        return cols.sum(axis=1).mean(axis=0)

    def blocks(self):
        """The four sub-blocks (tt, ts, st, ss) of the head-averaged map."""
        m = self.weights.mean(axis=0)
        n1 = self.n1
        return m[:n1, :n1], m[:n1, n1:], m[n1:, :n1], m[n1:, n1:]


class LocalEmbed(Module):
    """Ball query + shared point MLP + max pool, one feature row per point."""

    def __init__(self, cfg, rng):
        super().__init__()
        self.cfg = cfg
        self.add_module("mlp", PointMLP((3, *cfg.mlp_widths), rng))

    def forward(self, points):
        cfg = self.cfg
        n = points.shape[0]
        idx = geometry.ball_query_batch(points, points, cfg.radius, cfg.k)
        coords = points[idx]                      # (n, k, 3)
        if cfg.relative_neighbors:
            coords = coords - points[:, None, :]
        flat = T.Tensor(coords.reshape(n * cfg.k, 3))
        feat = self.mlp(flat)
        feat = T.reshape(feat, (n, cfg.k, cfg.d))
        return T.max_pool_over_axis(feat, axis=1)


class OneStreamBackbone(Module):
    def __init__(self, cfg, rng):
        super().__init__()
        self.cfg = cfg
        self.add_module("local", LocalEmbed(cfg, rng))
        for i in range(cfg.blocks):
            self.add_module(f"block{i}", TransformerBlock(cfg.d, cfg.heads, rng))
        for i in range(cfg.cpi_blocks):
            self.add_module(f"cpi{i}", TransformerBlock(cfg.d, cfg.heads, rng))

    def one_stream(self, feat_t, feat_s, want_attention=False):
        """Joint feature learning over concatenated template+search tokens.

        Returns (template features, search features, [AttentionMap] per block).
        """
        cfg = self.cfg
        n1 = feat_t.shape[0]
        n2 = feat_s.shape[0]
        x = T.concat([feat_t, feat_s], axis=0)
        maps = []
        for i in range(cfg.blocks):
            x, attn = self._children[f"block{i}"](x, want_attention)
            if attn is not None:
                maps.append(AttentionMap(attn, n1, n2, i))
        out_t = T.slice_rows(x, 0, n1)
        out_s = T.slice_rows(x, n1, n1 + n2)
        return out_t, out_s, maps

    def center_points_interaction(self, points_t, feat_t, feat_s, cpi_radius, seed,
                                  want_attention=False):
        """Secondary interaction between template-center points and search tokens.

        Center points come from a ball around the template's arithmetic mean:
        seeded subsampling if more than n3 qualify, cyclic repetition if
        fewer. Returns (fused search features, AttentionMaps, degenerate flag).
        """
        cfg = self.cfg
        center = points_t.mean(axis=0)
        d = np.linalg.norm(points_t - center, axis=1)
        hits = np.nonzero(d <= cpi_radius)[0]
        degenerate = bool(np.allclose(points_t, points_t[0]))
        if hits.size == 0:
            hits = np.array([int(np.argmin(d))])
        if hits.size > cfg.n3:
            rng = np.random.Generator(np.random.PCG64(seed))
            hits = hits[np.sort(rng.choice(hits.size, size=cfg.n3, replace=False))]
        elif hits.size < cfg.n3:
            hits = hits[np.arange(cfg.n3) % hits.size]
        feat_c = T.gather_rows(feat_t, hits)
        x = T.concat([feat_c, feat_s], axis=0)
        maps = []
        for i in range(cfg.cpi_blocks):
            x, attn = self._children[f"cpi{i}"](x, want_attention)
            if attn is not None:
                maps.append(AttentionMap(attn, cfg.n3, feat_s.shape[0], i))
        fused = T.slice_rows(x, cfg.n3, cfg.n3 + feat_s.shape[0])
        return fused, maps, degenerate

    def forward(self, points_t, points_s, cpi_enabled=False, cpi_radius=1.0,
                seed=0, want_attention=False):
        """Full feature pass; returns (template feats, search feats, maps, flag)."""
        feat_t = self.local(points_t)
        feat_s = self.local(points_s)
        out_t, out_s, maps = self.one_stream(feat_t, feat_s, want_attention)
        degenerate = False
        if cpi_enabled:
            out_s, cpi_maps, degenerate = self.center_points_interaction(
                points_t, out_t, out_s, cpi_radius, seed, want_attention)
            maps = maps + cpi_maps
        return out_t, out_s, maps, degenerate


def export_attention(attention_map, search_points, path):
    """CSV of (x, y, z, mass): attention mass received by each search token."""
    mass = attention_map.search_token_mass()
    if mass.shape[0] != search_points.shape[0]:
        raise ValueError(
            f"export_attention: {mass.shape[0]} masses vs {search_points.shape[0]} points"
        )
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y", "z", "mass"])
        for p, m in zip(search_points, mass):
            writer.writerow([repr(float(p[0])), repr(float(p[1])),
                             repr(float(p[2])), repr(float(m))])


def read_attention_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    data = np.array([[float(v) for v in row] for row in rows[1:]])
    return data[:, :3], data[:, 3]
