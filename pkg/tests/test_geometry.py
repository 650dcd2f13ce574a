import math

import numpy as np
import pytest

from onestream import geometry as G
from onestream.geometry import Box3D, VoxelSpec


def brute_force_fps(points, n):
    """Greedy oracle: start at 0, then repeatedly take the point with the
    largest min-distance to the chosen set (first index on ties)."""
    chosen = [0]
    while len(chosen) < min(n, len(points)):
        best, best_d = None, -1.0
        for i in range(len(points)):
            d = min(np.linalg.norm(points[i] - points[j]) for j in chosen)
            if d > best_d + 1e-12:
                best, best_d = i, d
        chosen.append(best)
    while len(chosen) < n:
        chosen.append(chosen[len(chosen) % len(points)])
    return np.array(chosen)


def test_fps_unit_square_picks_opposite_corner():
    pts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    idx = G.farthest_point_sample(pts, 2)
    assert idx[0] == 0 and idx[1] == 2


def test_fps_full_sample_is_permutation():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(17, 3))
    idx = G.farthest_point_sample(pts, 17)
    assert sorted(idx) == list(range(17))


def test_fps_matches_greedy_oracle():
    rng = np.random.default_rng(1)
    for trial in range(10):
        pts = rng.normal(size=(64, 3))
        n = int(rng.integers(1, 32))
        assert np.array_equal(G.farthest_point_sample(pts, n),
                              brute_force_fps(pts, n)[:n])


def test_fps_cycles_when_oversampled():
    pts = np.array([[0, 0, 0], [1, 0, 0]], dtype=float)
    idx = G.farthest_point_sample(pts, 5)
    assert len(idx) == 5
    assert set(idx) == {0, 1}


def test_fps_empty_cloud_errors():
    with pytest.raises(ValueError):
        G.farthest_point_sample(np.zeros((0, 3)), 1)


def test_ball_query_radius_gate():
    pts = np.array([[0.2, 0, 0], [0.4, 0, 0]])
    idx = G.ball_query(pts, (0, 0, 0), 0.3, 4)
    assert np.array_equal(idx, [0, 0, 0, 0])


def test_ball_query_single_hit():
    pts = np.array([[5, 5, 5], [0.1, 0, 0]])
    assert G.ball_query(pts, (0, 0, 0), 0.3, 1)[0] == 1


def test_ball_query_nearest_fallback():
    pts = np.array([[3.0, 0, 0], [2.0, 0, 0]])
    assert np.array_equal(G.ball_query(pts, (0, 0, 0), 0.5, 3), [1, 1, 1])


def test_ball_query_matches_scan_oracle():
    rng = np.random.default_rng(2)
    for trial in range(20):
        pts = rng.normal(size=(50, 3))
        center = rng.normal(size=3)
        r, k = 1.0, 8
        got = G.ball_query(pts, center, r, k)
        d = np.linalg.norm(pts - center, axis=1)
        hits = [i for i in range(50) if d[i] <= r]
        if hits:
            want = (hits + [hits[0]] * k)[:k]
        else:
            want = [int(np.argmin(d))] * k
        assert np.array_equal(got, want)


def test_ball_query_batch_matches_single():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(40, 3))
    centers = rng.normal(size=(12, 3)) * 0.5
    batch = G.ball_query_batch(pts, centers, 0.8, 6)
    for i, c in enumerate(centers):
        assert np.array_equal(batch[i], G.ball_query(pts, c, 0.8, 6))


def test_knn_center_on_point():
    pts = np.array([[0, 0, 0], [1, 1, 1], [2, 2, 2]], dtype=float)
    assert G.knn(pts, pts[1:2], 1)[0, 0] == 1


def test_knn_collinear():
    pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], dtype=float)
    assert np.array_equal(G.knn(pts, pts[:1], 2)[0], [0, 1])


def test_knn_matches_sort_oracle():
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(30, 3))
    centers = rng.normal(size=(5, 3))
    got = G.knn(pts, centers, 7)
    for i, c in enumerate(centers):
        d = np.linalg.norm(pts - c, axis=1)
        want = np.argsort(d, kind="stable")[:7]
        assert np.array_equal(got[i], want)


def test_knn_k_too_large_errors():
    with pytest.raises(ValueError):
        G.knn(np.zeros((3, 3)), np.zeros((1, 3)), 4)


def test_crop_identity_up_to_order():
    rng = np.random.default_rng(5)
    box = Box3D(0, 0, 0, 2, 2, 2, 0.0)
    pts = rng.uniform(-0.9, 0.9, size=(16, 3))
    out, degen = G.crop_and_sample(pts, box, 0.0, 16, seed=0)
    assert not degen
    assert sorted(map(tuple, out)) == sorted(map(tuple, pts))


def test_crop_empty_interior_returns_center_copies():
    box = Box3D(10, 10, 10, 1, 1, 1, 0.3)
    pts = np.zeros((5, 3))
    out, degen = G.crop_and_sample(pts, box, 0.0, 4, seed=0)
    assert degen
    assert np.allclose(out, box.center)
    assert out.shape == (4, 3)


def test_crop_deterministic_per_seed():
    rng = np.random.default_rng(6)
    pts = rng.uniform(-1, 1, size=(200, 3))
    box = Box3D(0, 0, 0, 1.5, 1.5, 1.5, 0.2)
    a, _ = G.crop_and_sample(pts, box, 0.5, 32, seed=42)
    b, _ = G.crop_and_sample(pts, box, 0.5, 32, seed=42)
    c, _ = G.crop_and_sample(pts, box, 0.5, 32, seed=43)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_crop_always_returns_exactly_n():
    rng = np.random.default_rng(7)
    box = Box3D(0, 0, 0, 1, 1, 1, 0.0)
    for n_in in (1, 3, 50):
        pts = rng.uniform(-0.45, 0.45, size=(n_in, 3))
        out, _ = G.crop_and_sample(pts, box, 0.0, 20, seed=0)
        assert out.shape == (20, 3)


def test_box_frame_identity_box():
    pts = np.random.default_rng(8).normal(size=(10, 3))
    box = Box3D(0, 0, 0, 1, 1, 1, 0.0)
    assert np.allclose(G.transform_to_box_frame(pts, box), pts)


def test_box_frame_center_maps_to_origin():
    box = Box3D(1.0, -2.0, 0.5, 1, 1, 1, 0.7)
    out = G.transform_to_box_frame(box.center[None, :], box)
    assert np.allclose(out, 0.0)


def test_box_frame_round_trip():
    rng = np.random.default_rng(9)
    for _ in range(20):
        box = Box3D(*rng.uniform(-5, 5, 3), *rng.uniform(0.5, 3, 3),
                    rng.uniform(-np.pi, np.pi))
        pts = rng.normal(size=(30, 3))
        back = G.transform_from_box_frame(G.transform_to_box_frame(pts, box), box)
        assert np.max(np.abs(back - pts)) < 1e-9


def test_voxelize_single_point():
    spec = VoxelSpec(size=(1, 1, 1), origin=(0, 0, 0), dims=(4, 3, 2))
    pts = np.array([[2.5, 1.5, 0.5]])
    grid = G.voxelize(pts, np.array([[7.0]]), spec)
    assert grid.shape == (3, 4, 2, 1)
    assert grid[1, 2, 0, 0] == 7.0
    assert grid.sum() == 7.0


def test_voxelize_max_reduce():
    spec = VoxelSpec(size=(1, 1, 1), origin=(0, 0, 0), dims=(2, 2, 1))
    pts = np.array([[0.5, 0.5, 0.5], [0.6, 0.4, 0.1]])
    grid = G.voxelize(pts, np.array([[1.0], [3.0]]), spec)
    assert grid[0, 0, 0, 0] == 3.0


def test_voxelize_matches_scatter_oracle():
    rng = np.random.default_rng(10)
    spec = VoxelSpec(size=(0.5, 0.5, 0.5), origin=(-2, -2, -1), dims=(8, 8, 4))
    pts = rng.uniform(-2.5, 2.5, size=(100, 3))
    feats = rng.normal(size=(100, 5))
    grid = G.voxelize(pts, feats, spec)
    w, h, z = spec.dims
    want = np.zeros((h, w, z, 5))
    occupied = np.zeros((h, w, z), dtype=bool)
    for p, f in zip(pts, feats):
        c = np.floor((p - np.array(spec.origin)) / np.array(spec.size)).astype(int)
        if not (0 <= c[0] < w and 0 <= c[1] < h and 0 <= c[2] < z):
            continue
        cell = (c[1], c[0], c[2])
        want[cell] = f if not occupied[cell] else np.maximum(want[cell], f)
        occupied[cell] = True
    assert np.allclose(grid, want)


def test_voxelize_occupancy_bound():
    rng = np.random.default_rng(11)
    spec = VoxelSpec(size=(0.5, 0.5, 0.5), origin=(-2, -2, -1), dims=(8, 8, 4))
    pts = rng.uniform(-3, 3, size=(60, 3))
    grid = G.voxelize(pts, np.ones((60, 1)), spec)
    assert grid.sum() <= 60


def test_ball_query_membership_invariant_under_shuffle():
    # with at most k qualifying points the membership is exactly the
    # qualifying set, so it cannot depend on input order
    rng = np.random.default_rng(20)
    pts = rng.normal(size=(40, 3)) * 2.0
    center = pts[rng.integers(40)]
    k = 12
    d = np.linalg.norm(pts - center, axis=1)
    r = float(np.sort(d)[k // 2])  # fewer qualifiers than k
    perm = rng.permutation(40)
    base = {tuple(np.round(pts[i], 9)) for i in set(G.ball_query(pts, center, r, k))}
    shuf = {tuple(np.round(pts[perm][j], 9))
            for j in set(G.ball_query(pts[perm], center, r, k))}
    assert base == shuf


def test_knn_membership_invariant_under_shuffle():
    rng = np.random.default_rng(21)
    pts = rng.normal(size=(30, 3))
    centers = rng.normal(size=(4, 3)) * 0.5
    perm = rng.permutation(30)
    base = G.knn(pts, centers, 5)
    shuf = G.knn(pts[perm], centers, 5)
    for ci in range(4):
        want = {tuple(np.round(pts[i], 9)) for i in base[ci]}
        got = {tuple(np.round(pts[perm][j], 9)) for j in shuf[ci]}
        assert want == got
