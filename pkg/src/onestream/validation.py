"""Input validation helpers for the public tracking API."""

from __future__ import annotations

import numpy as np

from .data import TrackletFrame
from .geometry import Box3D


def check_points(points):
    """Coerce to a finite (N, 3) float array."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("points contain NaN or inf coordinates")
    return arr


def check_box(box):
    """Coerce a Box3D or a 7-vector (x, y, z, w, l, h, theta)."""
    if isinstance(box, Box3D):
        return box
    arr = np.asarray(box, dtype=float).reshape(-1)
    if arr.size != 7:
        raise ValueError(f"box must have 7 parameters, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("box parameters contain NaN or inf")
    return Box3D(*arr)


def check_tracklet(frames, require_first_box=False):
    """Coerce a sequence of TrackletFrame or (points, box) pairs."""
    out = []
    for i, fr in enumerate(frames):
        if isinstance(fr, TrackletFrame):
            points, box, idx = fr.points, fr.box, fr.index
        else:
            points, box = fr
            idx = i
        box = check_box(box) if box is not None else None
        out.append(TrackletFrame(points=check_points(points), box=box, index=idx))
    if not out:
        raise ValueError("tracklet has no frames")
    if require_first_box and out[0].box is None:
        raise ValueError("the first frame must carry a box to seed tracking")
    return out
