"""Deterministic point-cloud and box primitives.

Point clouds are plain (N, 3) float arrays in meters. All functions are pure;
randomized ones take an explicit seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta):
    """Wrap radians into (-pi, pi]."""
    return theta - TWO_PI * np.ceil((theta - math.pi) / TWO_PI)


@dataclass
class Box3D:
    """Oriented box: center (x, y, z), sizes (w, l, h), heading theta.

    theta rotates the box's length axis from +x in the X-Y plane; in the box
    frame the length spans x, the width y and the height z.
    """

    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    theta: float

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise ValueError(f"box sizes must be positive, got {(self.w, self.l, self.h)}")
        self.x, self.y, self.z = float(self.x), float(self.y), float(self.z)
        self.w, self.l, self.h = float(self.w), float(self.l), float(self.h)
        self.theta = float(wrap_angle(self.theta))

    @property
    def center(self):
        return np.array([self.x, self.y, self.z])

    def enlarged(self, extra):
        """Grow each total extent (w, l, h) by `extra` meters."""
        return Box3D(self.x, self.y, self.z, self.w + extra, self.l + extra,
                     self.h + extra, self.theta)

    def bev_corners(self):
        """BEV footprint corners, counter-clockwise, shape (4, 2)."""
        hl, hw = self.l / 2.0, self.w / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        c, s = math.cos(self.theta), math.sin(self.theta)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])

    def volume(self):
        return self.w * self.l * self.h

    def to_array(self):
        return np.array([self.x, self.y, self.z, self.w, self.l, self.h, self.theta])

    @staticmethod
    def from_array(a):
        a = np.asarray(a, dtype=float)
        return Box3D(*a[:7])


@dataclass
class VoxelSpec:
    """Uniform grid: cell sizes (sx, sy, sz), region origin, dims (W, H, Z)."""

    size: tuple = (0.3, 0.3, 0.3)
    origin: tuple = (-5.7, -3.6, -1.2)
    dims: tuple = (38, 24, 8)

    def __post_init__(self):
        if any(s <= 0 for s in self.size):
            raise ValueError(f"voxel sizes must be positive: {self.size}")
        if any(d < 1 for d in self.dims):
            raise ValueError(f"grid dims must be >= 1: {self.dims}")

    def cell_ids(self, points):
        """Flat cell index per point: ((cy * W) + cx) * Z + cz, -1 if outside."""
        w, h, z = self.dims
        rel = (np.asarray(points) - np.asarray(self.origin)) / np.asarray(self.size)
        cells = np.floor(rel).astype(np.int64)
        ok = ((cells >= 0).all(axis=1)
              & (cells[:, 0] < w) & (cells[:, 1] < h) & (cells[:, 2] < z))
        flat = (cells[:, 1] * w + cells[:, 0]) * z + cells[:, 2]
        return np.where(ok, flat, -1)


def _check_points(points):
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) point array, got shape {points.shape}")
    return points


def farthest_point_sample(points, n):
    """Greedy farthest point sampling seeded at index 0.

    Each pick maximizes the minimum distance to the selected set (ties to the
    lower index). If n > N the indices repeat cyclically after covering all
    points.
    """
    points = _check_points(points)
    num = points.shape[0]
    if num == 0:
        raise ValueError("farthest_point_sample: empty point cloud")
    take = min(n, num)
    chosen = np.empty(take, dtype=np.int64)
    chosen[0] = 0
    dists = np.linalg.norm(points - points[0], axis=1)
    for i in range(1, take):
        idx = int(np.argmax(dists))
        chosen[i] = idx
        dists = np.minimum(dists, np.linalg.norm(points - points[idx], axis=1))
    if n <= num:
        return chosen
    reps = np.arange(n - num) % num
    return np.concatenate([chosen, chosen[reps]])


def ball_query(points, center, radius, k):
    """First k in-range indices, in input order, within `radius` of `center`.

    Fewer than k qualifying points repeat the first qualifying index; zero
    qualifying points fall back to the nearest point filling all k slots.
    """
    points = _check_points(points)
    if points.shape[0] == 0:
        raise ValueError("ball_query: empty point cloud")
    if radius <= 0 or k < 1:
        raise ValueError(f"ball_query: need radius > 0 and k >= 1, got {radius}, {k}")
    d = np.linalg.norm(points - np.asarray(center, dtype=float), axis=1)
    hits = np.nonzero(d <= radius)[0]
    if hits.size == 0:
        return np.full(k, int(np.argmin(d)), dtype=np.int64)
    out = np.full(k, hits[0], dtype=np.int64)
    take = min(k, hits.size)
    out[:take] = hits[:take]
    return out


def ball_query_batch(points, centers, radius, k):
    """Vectorized ball_query over many centers; returns (M, k) indices."""
    points = _check_points(points)
    centers = _check_points(centers)
    if points.shape[0] == 0:
        raise ValueError("ball_query_batch: empty point cloud")
    d = np.linalg.norm(centers[:, None, :] - points[None, :, :], axis=2)
    in_range = d <= radius
    # stable argsort pushes in-range indices to the front in input order
    order = np.argsort(~in_range, axis=1, kind="stable")
    counts = in_range.sum(axis=1)
    take = min(k, points.shape[0])
    out = np.zeros((centers.shape[0], k), dtype=np.int64)
    out[:, :take] = order[:, :take]
    col = np.arange(k)[None, :]
    first = out[:, :1]
    out = np.where(col < np.maximum(counts, 1)[:, None], out, first)
    empty = counts == 0
    if np.any(empty):
        out[empty] = np.argmin(d[empty], axis=1)[:, None]
    return out


def knn(points, centers, k):
    """k nearest cloud indices per center, ties broken by lower index."""
    points = _check_points(points)
    centers = _check_points(centers)
    if k > points.shape[0]:
        raise ValueError(f"knn: k={k} exceeds cloud size {points.shape[0]}")
    d = np.linalg.norm(centers[:, None, :] - points[None, :, :], axis=2)
    return np.argsort(d, axis=1, kind="stable")[:, :k].astype(np.int64)


def transform_to_box_frame(points, box):
    """Rigid map into the box frame: translate by -center, rotate by -theta."""
    points = _check_points(points)
    c, s = math.cos(box.theta), math.sin(box.theta)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    return (points - box.center) @ rot.T


def transform_from_box_frame(points, box):
    """Inverse of transform_to_box_frame."""
    points = _check_points(points)
    c, s = math.cos(box.theta), math.sin(box.theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return points @ rot.T + box.center


def box_to_frame(box, ref):
    """Express `box` in the frame of `ref` (same map as transform_to_box_frame)."""
    center = transform_to_box_frame(box.center[None, :], ref)[0]
    return Box3D(center[0], center[1], center[2], box.w, box.l, box.h,
                 wrap_angle(box.theta - ref.theta))


def box_from_frame(box, ref):
    """Map a box expressed in `ref`'s frame back to world coordinates."""
    center = transform_from_box_frame(box.center[None, :], ref)[0]
    return Box3D(center[0], center[1], center[2], box.w, box.l, box.h,
                 wrap_angle(box.theta + ref.theta))


def points_in_box(points, box, extra=0.0):
    """Boolean mask of points inside the box grown by `extra` total extent."""
    points = _check_points(points)
    if points.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    local = transform_to_box_frame(points, box)
    half = np.array([(box.l + extra) / 2.0, (box.w + extra) / 2.0, (box.h + extra) / 2.0])
    return (np.abs(local) <= half).all(axis=1)


def crop_and_sample(points, box, enlarge, n, seed):
    """Crop to the enlarged box and resample to exactly n points.

    More than n interior points: seeded sampling without replacement. Fewer:
    the interior points repeat cyclically. Empty interior: n copies of the
    box center with the degenerate flag set.

    Returns (points (n, 3), degenerate flag).
    """
    points = _check_points(points)
    if n < 1:
        raise ValueError(f"crop_and_sample: n must be >= 1, got {n}")
    inside = points[points_in_box(points, box, enlarge)] if points.shape[0] else points
    if inside.shape[0] == 0:
        return np.tile(box.center, (n, 1)), True
    m = inside.shape[0]
    if m >= n:
        rng = np.random.Generator(np.random.PCG64(seed))
        pick = rng.choice(m, size=n, replace=False)
        return inside[pick], False
    reps = np.arange(n) % m
    return inside[reps], False


def voxelize(points, features, spec, reduce="max"):
    """Scatter per-point features onto the grid; (H, W, Z, C) with max reduce.

    Out-of-region points are dropped; empty cells hold zeros.
    """
    points = _check_points(points)
    features = np.asarray(features, dtype=float)
    if features.shape[0] != points.shape[0]:
        raise ValueError(
            f"voxelize: {features.shape[0]} feature rows vs {points.shape[0]} points"
        )
    if reduce != "max":
        raise ValueError(f"voxelize: unsupported reduce {reduce!r}")
    w, h, z = spec.dims
    c = features.shape[1]
    flat = spec.cell_ids(points)
    grid = np.full((h * w * z, c), -np.inf)
    keep = flat >= 0
    np.maximum.at(grid, flat[keep], features[keep])
    grid[np.isneginf(grid)] = 0.0
    return grid.reshape(h, w, z, c)


def _polygon_clip(subject, clip):
    """Sutherland-Hodgman clip of `subject` by convex `clip` (both CCW)."""

    def inside(p, a, b):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0

    def intersect(p1, p2, a, b):
        d1 = p2 - p1
        d2 = b - a
        denom = d1[0] * d2[1] - d1[1] * d2[0]
        t = ((a[0] - p1[0]) * d2[1] - (a[1] - p1[1]) * d2[0]) / denom
        return p1 + t * d1

    output = [np.asarray(p, dtype=float) for p in subject]
    for i in range(len(clip)):
        a, b = clip[i], clip[(i + 1) % len(clip)]
        if not output:
            return []
        inputs, output = output, []
        s = inputs[-1]
        for e in inputs:
            if inside(e, a, b):
                if not inside(s, a, b):
                    output.append(intersect(s, e, a, b))
                output.append(e)
            elif inside(s, a, b):
                output.append(intersect(s, e, a, b))
            s = e
    return output


def _polygon_area(poly):
    if len(poly) < 3:
        return 0.0
    pts = np.asarray(poly)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, 1)) - np.dot(y, np.roll(x, 1)))


def iou3d(a, b):
    """Exact rotated 3D IoU: clipped BEV polygon area times z overlap."""
    inter = _polygon_clip(a.bev_corners(), b.bev_corners())
    area = _polygon_area(inter)
    if area <= 0.0:
        return 0.0
    zlo = max(a.z - a.h / 2.0, b.z - b.h / 2.0)
    zhi = min(a.z + a.h / 2.0, b.z + b.h / 2.0)
    dz = max(0.0, zhi - zlo)
    inter_vol = area * dz
    union = a.volume() + b.volume() - inter_vol
    return float(inter_vol / union) if union > 0 else 0.0
