import math

import numpy as np
import pytest

from gradcheck import finite_diff, rel_err
from onestream import geometry as G
from onestream import localization as L
from onestream import tensor as T
from onestream.config import BEVConfig, LossWeights
from onestream.geometry import Box3D, VoxelSpec
from onestream.localization import BEVLocalizer, assign_targets, compute_loss, decode


def small_bev(w=6, h=4, z=2, channels=8, head_channels=4):
    extent = (w * 0.3, h * 0.3, z * 0.3)
    spec = VoxelSpec(size=(0.3, 0.3, 0.3),
                     origin=(-extent[0] / 2, -extent[1] / 2, -extent[2] / 2),
                     dims=(w, h, z))
    return BEVConfig(voxel=spec, channels=channels, head_channels=head_channels)


# ---------------------------------------------------------------------------
# gaussian radius


def iou_three_cases(height, width, r):
    """The three displacement scenarios behind the radius bound."""
    inter1 = max(width - r, 0) * max(height - r, 0)
    iou1 = inter1 / (2 * width * height - inter1)
    iou2 = max(width - 2 * r, 0) * max(height - 2 * r, 0) / (width * height)
    iou3 = width * height / ((width + 2 * r) * (height + 2 * r))
    return min(iou1, iou2, iou3)


def largest_integer_radius(height, width, min_overlap=0.7):
    r = 0
    while iou_three_cases(height, width, r + 1) >= min_overlap:
        r += 1
    return r


def test_gaussian_radius_10x6_matches_integer_scan():
    analytic = int(L.gaussian_radius(10.0, 6.0))
    assert analytic == largest_integer_radius(10.0, 6.0)


def test_gaussian_radius_matches_scan_on_random_footprints():
    rng = np.random.default_rng(0)
    for _ in range(50):
        h = float(rng.uniform(2, 40))
        w = float(rng.uniform(2, 40))
        assert max(0, int(L.gaussian_radius(h, w))) == largest_integer_radius(h, w), (h, w)


def test_gaussian_radius_boundary_is_tight():
    # at the analytic radius the binding case sits at the overlap threshold
    r = L.gaussian_radius(12.0, 8.0)
    assert iou_three_cases(12.0, 8.0, r) == pytest.approx(0.7, abs=1e-9)


# ---------------------------------------------------------------------------
# target assignment and decoding


def test_offset_zero_at_exact_cell_center():
    bev = small_bev()
    x0, y0 = bev.voxel.origin[0], bev.voxel.origin[1]
    gt = Box3D(x0 + 2 * 0.3, y0 + 1 * 0.3, 0.0, 0.6, 0.9, 0.6, 0.0)
    target, pos, clamped = assign_targets(gt, bev)
    assert not clamped
    assert pos[1, 2]
    assert target.offset[1, 2, 0] == pytest.approx(0.0, abs=1e-12)
    assert target.offset[1, 2, 1] == pytest.approx(0.0, abs=1e-12)


def test_heatmap_peak_is_one_at_gt_cell():
    bev = small_bev()
    gt = Box3D(0.1, -0.2, 0.0, 0.9, 1.2, 0.6, 0.4)
    target, pos, _ = assign_targets(gt, bev)
    ci, cj = np.argwhere(pos)[0]
    assert target.heatmap[ci, cj, 0] == 1.0
    assert target.heatmap.max() == 1.0


def test_outside_center_clamps_and_flags():
    bev = small_bev()
    gt = Box3D(50.0, 50.0, 0.0, 1, 1, 1, 0.0)
    target, pos, clamped = assign_targets(gt, bev)
    assert clamped
    assert pos[3, 5]  # border cell


def test_encode_decode_round_trip():
    bev = small_bev(w=38, h=24, z=8)
    rng = np.random.default_rng(1)
    x0, y0, z0 = bev.voxel.origin
    for _ in range(200):
        gt = Box3D(rng.uniform(x0 + 0.2, -x0 - 0.2),
                   rng.uniform(y0 + 0.2, -y0 - 0.2),
                   rng.uniform(-1.0, 1.0),
                   rng.uniform(0.5, 2.5), rng.uniform(0.5, 5.0), rng.uniform(0.5, 2.0),
                   rng.uniform(-np.pi, np.pi))
        target, pos, clamped = assign_targets(gt, bev)
        assert not clamped
        box = decode(target, bev, gt)
        assert abs(box.x - gt.x) < 1e-6
        assert abs(box.y - gt.y) < 1e-6
        assert box.z == gt.z
        assert box.theta == gt.theta


def test_decode_tie_breaks_row_major():
    bev = small_bev()
    maps = L.LocalizationMaps(np.full((4, 6, 1), 0.5), np.zeros((4, 6, 2)),
                              np.zeros((4, 6, 1)), np.zeros((4, 6, 1)))
    box = decode(maps, bev, Box3D(0, 0, 0, 1, 1, 1, 0))
    x0, y0 = bev.voxel.origin[0], bev.voxel.origin[1]
    assert box.x == pytest.approx(x0)
    assert box.y == pytest.approx(y0)


def test_decode_half_offset_is_cell_boundary_midpoint():
    bev = small_bev()
    heat = np.zeros((4, 6, 1))
    heat[2, 3, 0] = 1.0
    off = np.zeros((4, 6, 2))
    off[2, 3] = (0.5, 0.5)
    maps = L.LocalizationMaps(heat, off, np.zeros((4, 6, 1)), np.zeros((4, 6, 1)))
    box = decode(maps, bev, Box3D(0, 0, 0, 1, 1, 1, 0))
    assert box.x == pytest.approx(bev.voxel.origin[0] + 3.5 * 0.3)
    assert box.y == pytest.approx(bev.voxel.origin[1] + 2.5 * 0.3)


# ---------------------------------------------------------------------------
# loss


def as_pred(target):
    return L.LocalizationMaps(T.Tensor(target.heatmap), T.Tensor(target.offset),
                              T.Tensor(target.theta), T.Tensor(target.z))


def test_perfect_prediction_loss_floor():
    bev = small_bev(w=38, h=24, z=8)
    gt = Box3D(0.4, -0.7, 0.3, 1.8, 4.2, 1.5, 0.6)
    target, pos, _ = assign_targets(gt, bev)
    total, parts = compute_loss(as_pred(target), target, pos, LossWeights())
    assert parts["off"] == 0.0
    assert parts["theta"] == 0.0
    assert parts["z"] == 0.0
    assert parts["cls"] < 1e-2
    assert total.item() >= 0.0


def test_theta_loss_wraps():
    bev = small_bev()
    eps = 1e-3
    gt = Box3D(0, 0, 0, 1, 1, 1, -math.pi + eps)
    target, pos, _ = assign_targets(gt, bev)
    pred = as_pred(target)
    theta = np.array(target.theta)
    ci, cj = np.argwhere(pos)[0]
    theta[ci, cj, 0] = math.pi - eps
    pred.theta = T.Tensor(theta)
    _, parts = compute_loss(pred, target, pos, LossWeights())
    assert parts["theta"] == pytest.approx(2 * eps, rel=1e-6)


def test_loss_total_matches_recomputation():
    bev = small_bev()
    rng = np.random.default_rng(2)
    gt = Box3D(0.2, 0.1, 0.05, 0.8, 1.0, 0.7, 0.3)
    target, pos, _ = assign_targets(gt, bev)
    pred = L.LocalizationMaps(
        T.sigmoid(T.Tensor(rng.normal(size=(4, 6, 1)))),
        T.Tensor(rng.normal(size=(4, 6, 2))),
        T.Tensor(rng.normal(size=(4, 6, 1))),
        T.Tensor(rng.normal(size=(4, 6, 1))))
    w = LossWeights(cls_w=1.0, off_w=1.0, theta_w=1.0, z_w=2.0)
    total, parts = compute_loss(pred, target, pos, w)

    # independent recomputation
    p = np.clip(pred.heatmap.data, 1e-4, 1 - 1e-4)
    t = target.heatmap
    posm = t >= 1.0
    lcls = -(np.sum(((1 - p) ** 2 * np.log(p))[posm])
             + np.sum(((1 - t) ** 4 * p ** 2 * np.log(1 - p))[~posm]))
    ci, cj = np.argwhere(posm[:, :, 0])[0]
    loff = np.abs(pred.offset.data[ci, cj] - target.offset[ci, cj]).sum()
    dth = pred.theta.data[ci, cj, 0] - target.theta[ci, cj, 0]
    lth = abs(G.wrap_angle(dth))
    lz = abs(pred.z.data[ci, cj, 0] - target.z[ci, cj, 0])
    want = w.cls_w * lcls + w.off_w * loff + w.theta_w * lth + w.z_w * lz
    assert total.item() == pytest.approx(want, rel=1e-10)
    assert parts["cls"] == pytest.approx(lcls, rel=1e-10)


def test_loss_nonnegative_and_zero_residual_components():
    bev = small_bev()
    gt = Box3D(0, 0, 0, 1, 1, 1, 0.0)
    target, pos, _ = assign_targets(gt, bev)
    total, parts = compute_loss(as_pred(target), target, pos, LossWeights())
    assert total.item() >= 0
    assert parts["off"] == 0 and parts["theta"] == 0 and parts["z"] == 0


# ---------------------------------------------------------------------------
# EEM


def test_space_to_channel_matches_voxelize_bijection():
    bev = small_bev()
    rng = np.random.default_rng(3)
    d = 4
    loc = BEVLocalizer(bev, d, np.random.default_rng(4))
    pts = rng.uniform(-0.8, 0.8, size=(30, 3))
    feats = rng.normal(size=(30, d))
    folded = loc.space_to_channel(T.Tensor(feats), pts).data
    grid4 = G.voxelize(pts, feats, bev.voxel)
    h, w, z = loc.grid
    assert folded.shape == (h, w, z * d)
    for zi in range(z):
        for c in range(d):
            assert np.array_equal(folded[:, :, zi * d + c], grid4[:, :, zi, c])


def test_zero_features_give_zero_voxels_and_bias_response():
    bev = small_bev()
    loc = BEVLocalizer(bev, 4, np.random.default_rng(5))
    pts = np.random.default_rng(6).uniform(-0.8, 0.8, size=(12, 3))
    feats = T.Tensor(np.zeros((12, 4)))
    folded = loc.space_to_channel(feats, pts)
    assert np.array_equal(folded.data, np.zeros_like(folded.data))
    out = loc.encode(feats, pts)
    # bias-only response: independent of where the (zero) points fall
    out2 = loc.encode(T.Tensor(np.zeros((5, 4))),
                      np.random.default_rng(7).uniform(-0.8, 0.8, size=(5, 3)))
    assert np.array_equal(out.data, out2.data)


def test_voxel_shift_by_one_pitch_shifts_cells():
    bev = small_bev(w=8, h=6, z=2)
    loc = BEVLocalizer(bev, 3, np.random.default_rng(8))
    rng = np.random.default_rng(9)
    pts = rng.uniform(-0.6, 0.6, size=(20, 3))
    feats = rng.normal(size=(20, 3))
    a = loc.space_to_channel(T.Tensor(feats), pts).data
    b = loc.space_to_channel(T.Tensor(feats), pts + np.array([0.3, 0.0, 0.0])).data
    assert np.allclose(b[:, 1:], a[:, :-1])


def test_eem_gradcheck_toy_grid():
    bev = small_bev(w=6, h=4, z=2, channels=6, head_channels=4)
    d = 4
    loc = BEVLocalizer(bev, d, np.random.default_rng(10)).bind_names()
    rng = np.random.default_rng(11)
    pts = rng.uniform(-0.8, 0.8, size=(14, 3))
    feats = rng.normal(size=(14, d))
    weights = rng.normal(size=(4, 6, bev.channels))

    ft = T.Tensor(feats, requires_grad=True)
    out = loc.encode(ft, pts)
    out.backward(weights)
    analytic_in = np.array(ft.grad)

    def scalar_in(x):
        return float((loc.encode(T.Tensor(x), pts).data * weights).sum())

    assert rel_err(analytic_in, finite_diff(scalar_in, feats)) < 1e-4

    for name, p in loc.named_parameters():
        if name not in ("conv_in.bias", "beta2.weight", "alpha_conv.weight",
                        "up1.weight", "down2.bias", "conv_out.weight"):
            continue
        loc.zero_grad()
        out = loc.encode(T.Tensor(feats), pts)
        out.backward(weights)
        analytic = np.array(p.grad)

        def scalar(x, p=p):
            old = p.data.copy()
            p.data = x
            val = float((loc.encode(T.Tensor(feats), pts).data * weights).sum())
            p.data = old
            return val

        assert rel_err(analytic, finite_diff(scalar, p.data)) < 1e-4, name


def test_forward_map_shapes_and_heatmap_range():
    bev = small_bev()
    loc = BEVLocalizer(bev, 4, np.random.default_rng(12))
    rng = np.random.default_rng(13)
    pts = rng.uniform(-0.8, 0.8, size=(25, 3))
    maps = loc(T.Tensor(rng.normal(size=(25, 4))), pts)
    assert maps.heatmap.shape == (4, 6, 1)
    assert maps.offset.shape == (4, 6, 2)
    assert maps.theta.shape == (4, 6, 1)
    assert maps.z.shape == (4, 6, 1)
    assert (maps.heatmap.data > 0).all() and (maps.heatmap.data < 1).all()


def test_loss_gradients_through_heads(tmp_path):
    bev = small_bev(w=6, h=4, z=2, channels=6, head_channels=4)
    loc = BEVLocalizer(bev, 4, np.random.default_rng(14)).bind_names()
    rng = np.random.default_rng(15)
    pts = rng.uniform(-0.8, 0.8, size=(14, 3))
    feats = rng.normal(size=(14, 4))
    gt = Box3D(0.1, 0.05, 0.0, 0.8, 1.1, 0.5, 0.2)
    target, pos, _ = assign_targets(gt, bev)

    def loss_value():
        maps = loc(T.Tensor(feats), pts)
        total, _ = compute_loss(maps, target, pos, LossWeights())
        return total

    for name, p in loc.named_parameters():
        if name not in ("head_heat.out.weight", "head_offset.conv.bias",
                        "head_theta.out.bias", "head_z.conv.weight"):
            continue
        loc.zero_grad()
        loss_value().backward()
        analytic = np.array(p.grad)

        def scalar(x, p=p):
            old = p.data.copy()
            p.data = x
            val = loss_value().item()
            p.data = old
            return val

        assert rel_err(analytic, finite_diff(scalar, p.data)) < 1e-4, name
