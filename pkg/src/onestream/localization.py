"""Voxel-to-BEV localization: efficient encoder, decoupled heads, loss, decode.

The vertical axis is folded into channels by a pure reshape (space to
channel), so the BEV trunk needs only 2D convolutions. Heads predict a
center heatmap, sub-cell offsets, heading and center height; a box is read
off at the heatmap argmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import Box3D, wrap_angle
from .nn import Conv2d, Deconv2d, Module

HEAT_CLAMP = 1e-4


@dataclass
class LocalizationMaps:
    """Head outputs over the BEV grid: (H, W, {1, 2, 1, 1})."""

    heatmap: object   # in (0, 1)
    offset: object    # cell-fraction units
    theta: object     # radians
    z: object         # meters

    def detach(self):
        def arr(x):
            return np.array(x.data if isinstance(x, T.Tensor) else x)
        return LocalizationMaps(arr(self.heatmap), arr(self.offset),
                                arr(self.theta), arr(self.z))


def gaussian_radius(height, width, min_overlap=0.7):
    """Largest center displacement (cells) keeping IoU >= min_overlap.

    The usual three-case bound for a height x width footprint: both boxes
    shifted apart, one inscribed, one circumscribed.
    """
    a1 = 1.0
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 - math.sqrt(b1 ** 2 - 4 * a1 * c1)) / (2 * a1)

    a2 = 4.0
    b2 = 2.0 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 - math.sqrt(b2 ** 2 - 4 * a2 * c2)) / (2 * a2)

    a3 = 4.0 * min_overlap
    b3 = -2.0 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / (2 * a3)
    return min(r1, r2, r3)


class Head(Module):
    def __init__(self, in_ch, mid_ch, out_ch, rng):
        super().__init__()
        self.add_module("conv", Conv2d(in_ch, mid_ch, 3, rng))
        self.add_module("out", Conv2d(mid_ch, out_ch, 1, rng))

    def forward(self, x):
        return self.out(T.relu(self.conv(x)))


class BEVLocalizer(Module):
    """Space-to-channel reshape, residual 2D encoder, down/up trunk, four heads."""

    def __init__(self, bev_cfg, d, rng):
        super().__init__()
        self.cfg = bev_cfg
        self.d = d
        w, h, z = bev_cfg.voxel.dims
        self.grid = (h, w, z)
        c = bev_cfg.channels
        self.add_module("conv_in", Conv2d(z * d, c, 3, rng))
        self.add_module("beta1", Conv2d(c, c, 3, rng))
        self.add_module("beta2", Conv2d(c, c, 3, rng))
        self.add_module("alpha_conv", Conv2d(c, c, 3, rng))
        self.add_module("down1", Conv2d(c, c, 3, rng, stride=2))
        self.add_module("down2", Conv2d(c, c, 3, rng, stride=2))
        self.add_module("up1", Deconv2d(c, c, rng))
        self.add_module("up2", Deconv2d(c, c, rng))
        self.add_module("conv_out", Conv2d(c, c, 3, rng))
        hc = bev_cfg.head_channels
        self.add_module("head_heat", Head(c, hc, 1, rng))
        self.add_module("head_offset", Head(c, hc, 2, rng))
        self.add_module("head_theta", Head(c, hc, 1, rng))
        self.add_module("head_z", Head(c, hc, 1, rng))
        # background prior: start the heatmap near 0.1 everywhere
        self.head_heat.out.bias.data = np.full(1, math.log(0.1 / 0.9))

    def space_to_channel(self, feat_s, points_s):
        """Voxelize (max reduce) then fold Z into channels: (H, W, Z*d)."""
        h, w, z = self.grid
        cells = self.cfg.voxel.cell_ids(points_s)
        vox = T.scatter_max(feat_s, cells, h * w * z)
        return T.reshape(vox, (h, w, z * self.d))

    def encode(self, feat_s, points_s):
        """The efficient encoder: F^r plus the down/up trunk, back at H x W."""
        x = self.conv_in(self.space_to_channel(feat_s, points_s))
        residual = self.beta2(T.relu(self.beta1(x)))
        s = T.add(x, residual)
        if self.cfg.alpha_conv_last:
            x = self.alpha_conv(T.relu(T.relu(s)))
        else:
            x = T.relu(self.alpha_conv(T.relu(s)))
        h0, w0 = x.shape[0], x.shape[1]
        x = T.relu(self.down1(x))
        h1, w1 = x.shape[0], x.shape[1]
        x = T.relu(self.down2(x))
        x = T.crop2d(T.relu(self.up1(x)), h1, w1)
        x = T.crop2d(T.relu(self.up2(x)), h0, w0)
        return T.relu(self.conv_out(x))

    def forward(self, feat_s, points_s):
        x = self.encode(feat_s, points_s)
        return LocalizationMaps(
            heatmap=T.sigmoid(self.head_heat(x)),
            offset=self.head_offset(x),
            theta=self.head_theta(x),
            z=self.head_z(x),
        )


def assign_targets(gt_box, bev_cfg):
    """Training targets for one ground-truth box in the search frame.

    Heatmap: a Gaussian splat with the min-overlap-0.7 radius from the box
    footprint in cells, peak exactly 1 at the center cell. Offset, theta and
    z are defined at the center cell only. Centers outside the grid clamp to
    the border cell and set the flag.
    """
    w, h, _ = bev_cfg.voxel.dims
    sx, sy = bev_cfg.voxel.size[0], bev_cfg.voxel.size[1]
    x0, y0 = bev_cfg.voxel.origin[0], bev_cfg.voxel.origin[1]
    cx = (gt_box.x - x0) / sx
    cy = (gt_box.y - y0) / sy
    cj, ci = int(math.floor(cx)), int(math.floor(cy))
    clamped = not (0 <= cj < w and 0 <= ci < h)
    cj = min(max(cj, 0), w - 1)
    ci = min(max(ci, 0), h - 1)

    c, s = abs(math.cos(gt_box.theta)), abs(math.sin(gt_box.theta))
    ext_x = (gt_box.l * c + gt_box.w * s) / sx
    ext_y = (gt_box.l * s + gt_box.w * c) / sy
    radius = max(0, int(gaussian_radius(ext_y, ext_x)))

    heat = np.zeros((h, w, 1))
    sigma = (2 * radius + 1) / 6.0
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    g = np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2 * sigma ** 2))
    g[g < np.finfo(float).eps] = 0.0
    heat[:, :, 0] = g
    heat[ci, cj, 0] = 1.0

    offset = np.zeros((h, w, 2))
    offset[ci, cj] = (cx - cj, cy - ci)
    theta = np.zeros((h, w, 1))
    theta[ci, cj, 0] = wrap_angle(gt_box.theta)
    zmap = np.zeros((h, w, 1))
    zmap[ci, cj, 0] = gt_box.z
    pos = np.zeros((h, w), dtype=bool)
    pos[ci, cj] = True
    return LocalizationMaps(heat, offset, theta, zmap), pos, clamped


def compute_loss(pred, target, pos_mask, weights):
    """Weighted sum of focal, offset-L1, wrapped-angle-L1 and height-L1 terms.

    The focal term is the penalty-reduced pixelwise variant (alpha 2,
    beta 4) on the clamped sigmoid heatmap, normalized by the positive
    count. Regression terms only read the positive cells.
    """
    tgt_heat = np.asarray(target.heatmap.data if isinstance(target.heatmap, T.Tensor)
                          else target.heatmap)
    heat_pos = tgt_heat >= 1.0
    npos = max(int(np.asarray(pos_mask).sum()), 1)

    p = T.clamp(pred.heatmap, HEAT_CLAMP, 1.0 - HEAT_CLAMP)
    one_minus_p = T.add(T.mul(p, -1.0), 1.0)
    pos_w = T.Tensor(heat_pos.astype(float))
    neg_w = T.Tensor(((1.0 - tgt_heat) ** 4) * (~heat_pos))
    pos_term = T.mul(T.mul(T.pow_scalar(one_minus_p, 2.0), T.log(p)), pos_w)
    neg_term = T.mul(T.mul(T.pow_scalar(p, 2.0), T.log(one_minus_p)), neg_w)
    l_cls = T.mul(T.add(T.sum_all(pos_term), T.sum_all(neg_term)), -1.0 / npos)

    pos2d = np.asarray(pos_mask, dtype=float)
    mask2 = T.Tensor(np.repeat(pos2d[:, :, None], 2, axis=2))
    mask1 = T.Tensor(pos2d[:, :, None])

    def l1(pred_map, target_map, mask, wrapped=False):
        diff = T.sub(pred_map, T.Tensor(np.asarray(target_map)))
        if wrapped:
            diff = T.wrap_angle(diff)
        return T.mul(T.sum_all(T.mul(T.abs_(diff), mask)), 1.0 / npos)

    l_off = l1(pred.offset, target.offset, mask2)
    l_theta = l1(pred.theta, target.theta, mask1, wrapped=True)
    l_z = l1(pred.z, target.z, mask1)

    total = T.add(
        T.add(T.mul(l_cls, weights.cls_w), T.mul(l_off, weights.off_w)),
        T.add(T.mul(l_theta, weights.theta_w), T.mul(l_z, weights.z_w)),
    )
    parts = {"cls": l_cls.item(), "off": l_off.item(),
             "theta": l_theta.item(), "z": l_z.item()}
    return total, parts


def decode(maps, bev_cfg, template_box):
    """Box at the heatmap argmax (row-major on ties); sizes from the template."""
    m = maps.detach()
    h, w = m.heatmap.shape[:2]
    idx = int(np.argmax(m.heatmap[:, :, 0]))
    ci, cj = divmod(idx, w)
    sx, sy = bev_cfg.voxel.size[0], bev_cfg.voxel.size[1]
    x0, y0 = bev_cfg.voxel.origin[0], bev_cfg.voxel.origin[1]
    x = x0 + (cj + m.offset[ci, cj, 0]) * sx
    y = y0 + (ci + m.offset[ci, cj, 1]) * sy
    z = m.z[ci, cj, 0]
    theta = wrap_angle(m.theta[ci, cj, 0])
    return Box3D(x, y, z, template_box.w, template_box.l, template_box.h, theta)


def write_maps_csv(maps, prefix):
    """Debug dump of the BEV grids for external plotting."""
    m = maps.detach()
    np.savetxt(f"{prefix}_heatmap.csv", m.heatmap[:, :, 0], delimiter=",")
    np.savetxt(f"{prefix}_offset_x.csv", m.offset[:, :, 0], delimiter=",")
    np.savetxt(f"{prefix}_offset_y.csv", m.offset[:, :, 1], delimiter=",")
    np.savetxt(f"{prefix}_theta.csv", m.theta[:, :, 0], delimiter=",")
    np.savetxt(f"{prefix}_z.csv", m.z[:, :, 0], delimiter=",")
