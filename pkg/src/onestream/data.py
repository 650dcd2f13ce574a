"""Dataset ingestion and synthetic scene generation.

Real data follows the KITTI tracking layout: velodyne/*.bin scans (16 bytes
per point: little-endian float32 x, y, z, intensity), label_02/*.txt with
fields (frame, track_id, type, truncated, occluded, alpha, bbox x4, h, w, l,
x, y, z, rotation_y) in rectified camera coordinates, and calib/*.txt with
R_rect / Tr_velo_cam matrices. Synthetic tracklets stand in for full-scale
benchmarks at desk scale.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box3D, wrap_angle


@dataclass
class TrackletFrame:
    points: np.ndarray
    box: Box3D | None
    index: int


@dataclass
class DatasetIndex:
    """Tracklets as (scene id, object id, (first, last) frame range, category)."""

    tracklets: list = field(default_factory=list)


class ParseError(ValueError):
    """Malformed dataset file; message carries the location."""


# ---------------------------------------------------------------------------
# KITTI tracking layout


def load_velodyne(path):
    """Read a KITTI .bin scan, dropping the intensity channel."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) % 16 != 0:
        raise ParseError(
            f"{path}: size {len(raw)} is not a multiple of 16 bytes "
            f"(trailing {len(raw) % 16} bytes at offset {len(raw) - len(raw) % 16})"
        )
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return pts[:, :3].astype(float)


def save_velodyne(path, points):
    points = np.asarray(points, dtype=float)
    out = np.zeros((points.shape[0], 4), dtype="<f4")
    out[:, :3] = points
    with open(path, "wb") as f:
        f.write(out.tobytes(order="C"))


LABEL_FIELDS = ("frame", "track_id", "type", "truncated", "occluded", "alpha",
                "bbox_left", "bbox_top", "bbox_right", "bbox_bottom",
                "height", "width", "length", "x", "y", "z", "rotation_y")


def parse_label_line(line, lineno=0):
    parts = line.split()
    if len(parts) < len(LABEL_FIELDS):
        raise ParseError(
            f"label line {lineno}: expected {len(LABEL_FIELDS)} fields, got {len(parts)}"
        )
    rec = {"frame": int(parts[0]), "track_id": int(parts[1]), "type": parts[2]}
    try:
        values = [float(v) for v in parts[3:len(LABEL_FIELDS)]]
    except ValueError as exc:
        raise ParseError(f"label line {lineno}: {exc}") from exc
    rec.update(zip(LABEL_FIELDS[3:], values))
    return rec


def read_calib(path):
    """Parse a KITTI tracking calib file into name -> matrix."""
    calib = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            if ":" in line:
                key, _, rest = line.partition(":")
            else:
                key, _, rest = line.partition(" ")
            try:
                vals = np.array([float(v) for v in rest.split()])
            except ValueError as exc:
                raise ParseError(f"{path} line {lineno}: {exc}") from exc
            calib[key.strip()] = vals
    return calib


def _rect_to_velo(calib):
    """4x4 transform from rectified camera coordinates to the lidar frame."""
    tr = calib.get("Tr_velo_cam", calib.get("Tr_velo_to_cam"))
    rr = calib.get("R_rect", calib.get("R0_rect"))
    if tr is None or rr is None:
        raise ParseError("calib is missing Tr_velo_cam or R_rect")
    velo_to_cam = np.eye(4)
    velo_to_cam[:3, :] = tr.reshape(3, 4)
    rect = np.eye(4)
    rect[:3, :3] = rr.reshape(3, 3)
    return np.linalg.inv(rect @ velo_to_cam)


def camera_box_to_lidar(rec, calib):
    """KITTI label record (rectified camera frame) to a lidar-frame Box3D.

    The label position is the bottom-face center with +y pointing down, so
    the center shifts up by h/2 before the rigid transform. Heading maps as
    theta = -rotation_y - pi/2.
    """
    m = _rect_to_velo(calib)
    bottom = np.array([rec["x"], rec["y"], rec["z"], 1.0])
    center_cam = bottom - np.array([0.0, rec["height"] / 2.0, 0.0, 0.0])
    center = m @ center_cam
    theta = wrap_angle(-rec["rotation_y"] - math.pi / 2.0)
    return Box3D(center[0], center[1], center[2],
                 rec["width"], rec["length"], rec["height"], theta)


def load_kitti_frame(velodyne_path, label_line, calib, lineno=0):
    """One (point cloud, lidar-frame box) pair from raw KITTI files."""
    points = load_velodyne(velodyne_path)
    rec = parse_label_line(label_line, lineno)
    return points, camera_box_to_lidar(rec, calib)


def index_kitti_labels(label_path, category="Car"):
    """Group label rows of one scene into contiguous per-object tracklets."""
    by_track = {}
    with open(label_path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = parse_label_line(line, lineno)
            if rec["type"] != category:
                continue
            by_track.setdefault(rec["track_id"], []).append(rec)
    scene = os.path.splitext(os.path.basename(label_path))[0]
    index = DatasetIndex()
    for tid, recs in sorted(by_track.items()):
        recs.sort(key=lambda r: r["frame"])
        start = prev = recs[0]["frame"]
        for rec in recs[1:]:
            if rec["frame"] != prev + 1:
                index.tracklets.append((scene, tid, (start, prev), category))
                start = rec["frame"]
            prev = rec["frame"]
        index.tracklets.append((scene, tid, (start, prev), category))
    return index


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SceneSpec:
    """Procedural tracklet: a shell target on a random walk plus clutter."""

    shape: str = "cuboid"            # cuboid | cylinder | lshape
    size: tuple = (1.8, 4.0, 1.5)    # target (w, l, h) in meters
    frames: int = 30
    step: float = 0.12               # per-frame travel along heading (m)
    turn_deg: float = 2.0            # per-frame heading change bound (deg)
    points_per_frame: int = 128
    clutter: int = 1
    clutter_points: int = 96
    dropout: float = 0.0
    seed: int = 0
    trajectory: np.ndarray | None = None  # optional explicit (T, 4) poses

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("SceneSpec: need at least one frame")
        if self.points_per_frame < 1 or self.clutter_points < 0:
            raise ValueError("SceneSpec: point densities must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"SceneSpec: dropout {self.dropout} outside [0, 1)")
        if self.shape not in ("cuboid", "cylinder", "lshape"):
            raise ValueError(f"SceneSpec: unknown shape {self.shape!r}")


def _sample_cuboid_shell(size, n, rng, fill=0.98):
    """Points on the six faces of a (w, l, h) box, area-weighted, in box frame."""
    w, l, h = (s * fill for s in size)
    areas = np.array([l * h, l * h, w * h, w * h, w * l, w * l])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    pts = np.empty((n, 3))
    for i, f in enumerate(face):
        if f < 2:      # +-y faces (width sides)
            pts[i] = (u[i] * l, (0.5 if f == 0 else -0.5) * w, v[i] * h)
        elif f < 4:    # +-x faces (length ends)
            pts[i] = ((0.5 if f == 2 else -0.5) * l, u[i] * w, v[i] * h)
        else:          # top / bottom
            pts[i] = (u[i] * l, v[i] * w, (0.5 if f == 4 else -0.5) * h)
    return pts


def _sample_cylinder_shell(size, n, rng, fill=0.98):
    w, l, h = size
    r = fill * min(w, l) / 2.0
    hh = fill * h
    lateral = 2 * math.pi * r * hh
    caps = 2 * math.pi * r * r
    on_side = rng.uniform(0, 1, size=n) < lateral / (lateral + caps)
    ang = rng.uniform(-math.pi, math.pi, size=n)
    pts = np.empty((n, 3))
    for i in range(n):
        if on_side[i]:
            pts[i] = (r * math.cos(ang[i]), r * math.sin(ang[i]),
                      rng.uniform(-0.5, 0.5) * hh)
        else:
            rr = r * math.sqrt(rng.uniform(0, 1))
            pts[i] = (rr * math.cos(ang[i]), rr * math.sin(ang[i]),
                      (0.5 if rng.uniform(0, 1) < 0.5 else -0.5) * hh)
    return pts


def _sample_lshape_shell(size, n, rng, fill=0.98):
    """Two cuboid shells joined into an L footprint inside the target box."""
    w, l, h = size
    n1 = n // 2
    a = _sample_cuboid_shell((0.45 * w, l, h), n1, rng, fill)
    a[:, 1] -= 0.25 * w * fill
    b = _sample_cuboid_shell((w, 0.45 * l, h), n - n1, rng, fill)
    b[:, 0] -= 0.25 * l * fill
    return np.vstack([a, b])


_SHAPES = {
    "cuboid": _sample_cuboid_shell,
    "cylinder": _sample_cylinder_shell,
    "lshape": _sample_lshape_shell,
}


def random_trajectory(frames, step, turn_deg, rng):
    """Random-walk poses (x, y, z, theta), one row per frame."""
    poses = np.zeros((frames, 4))
    theta = rng.uniform(-math.pi, math.pi)
    pos = np.array([rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), 0.0])
    turn = math.radians(turn_deg)
    for t in range(frames):
        poses[t] = (*pos, theta)
        theta = wrap_angle(theta + rng.uniform(-turn, turn))
        pos = pos + np.array([step * math.cos(theta), step * math.sin(theta),
                              rng.uniform(-0.02, 0.02)])
    return poses


def _pose_transform(points, pose):
    x, y, z, theta = pose
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return points @ rot.T + np.array([x, y, z])


def generate_scene(spec):
    """Deterministic tracklet of TrackletFrame for a SceneSpec.

    The target's surface points are sampled once and move rigidly with the
    box, so dropout 0 gives exact frame-to-frame correspondence. The first
    clutter object is a same-shape distractor placed off the trajectory.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    poses = spec.trajectory
    if poses is None:
        poses = random_trajectory(spec.frames, spec.step, spec.turn_deg, rng)
    poses = np.asarray(poses, dtype=float)
    if poses.shape != (spec.frames, 4):
        raise ValueError(f"trajectory shape {poses.shape} != ({spec.frames}, 4)")
    base = _SHAPES[spec.shape](spec.size, spec.points_per_frame, rng)

    w, l, h = spec.size
    target_diag = math.hypot(w, l)
    clutter_clouds = []
    for ci in range(spec.clutter):
        shape = spec.shape if ci == 0 else ("cuboid", "cylinder", "lshape")[ci % 3]
        placed = None
        for _ in range(200):
            ref = poses[rng.integers(0, spec.frames)]
            ang = rng.uniform(-math.pi, math.pi)
            dist = rng.uniform(0.75 * target_diag, 0.75 * target_diag + 2.5)
            cx, cy = ref[0] + dist * math.cos(ang), ref[1] + dist * math.sin(ang)
            gap = np.min(np.hypot(poses[:, 0] - cx, poses[:, 1] - cy))
            if gap >= 0.6 * target_diag + 0.3:
                placed = (cx, cy, ref[2], rng.uniform(-math.pi, math.pi))
                break
        if placed is None:
            continue
        pts = _SHAPES[shape](spec.size, max(spec.clutter_points, 1), rng)
        clutter_clouds.append(_pose_transform(pts, placed))

    frames = []
    for t in range(spec.frames):
        target = _pose_transform(base, poses[t])
        cloud = np.vstack([target] + clutter_clouds) if clutter_clouds else target
        if spec.dropout > 0:
            frng = np.random.Generator(np.random.PCG64((spec.seed, 1000 + t)))
            keep = frng.uniform(0, 1, size=cloud.shape[0]) >= spec.dropout
            if not keep.any():
                keep[0] = True
            cloud = cloud[keep]
        box = Box3D(poses[t, 0], poses[t, 1], poses[t, 2], w, l, h, poses[t, 3])
        frames.append(TrackletFrame(points=cloud, box=box, index=t))
    return frames


# ---------------------------------------------------------------------------
# tracklet directories (the CLI's on-disk format)


def write_tracklet_dir(path, frames):
    """Store a tracklet as velodyne-style scans plus a gt.csv box table."""
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "gt.csv"), "w") as f:
        f.write("frame,x,y,z,w,l,h,theta\n")
        for fr in frames:
            save_velodyne(os.path.join(path, f"points_{fr.index:04d}.bin"), fr.points)
            if fr.box is not None:
                b = fr.box
                f.write(f"{fr.index},{b.x:.9g},{b.y:.9g},{b.z:.9g},"
                        f"{b.w:.9g},{b.l:.9g},{b.h:.9g},{b.theta:.9g}\n")


def read_tracklet_dir(path):
    frames = []
    boxes = {}
    gt_path = os.path.join(path, "gt.csv")
    if os.path.exists(gt_path):
        with open(gt_path) as f:
            header = f.readline()
            for lineno, line in enumerate(f, 2):
                if not line.strip():
                    continue
                vals = line.strip().split(",")
                if len(vals) != 8:
                    raise ParseError(f"{gt_path} line {lineno}: expected 8 fields")
                boxes[int(vals[0])] = Box3D(*(float(v) for v in vals[1:]))
    names = sorted(n for n in os.listdir(path)
                   if n.startswith("points_") and n.endswith(".bin"))
    if not names:
        raise ParseError(f"{path}: no points_*.bin files")
    for name in names:
        idx = int(name[len("points_"):-len(".bin")])
        frames.append(TrackletFrame(points=load_velodyne(os.path.join(path, name)),
                                    box=boxes.get(idx), index=idx))
    frames.sort(key=lambda fr: fr.index)
    return frames
