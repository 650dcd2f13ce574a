"""End-to-end assembly: template/search construction, training, tracking.

Tracking is one-pass and sequential: the first frame's ground truth seeds
the tracklet, every later frame crops a search region around the previous
prediction, and the decoded box maps back through the recorded frame
transform. Degenerate frames (empty crops) reuse the previous prediction
instead of trusting a decode over filler points.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import geometry, tensor as T
from .backbone import OneStreamBackbone
from .config import TrackerConfig
from .data import TrackletFrame
from .geometry import Box3D
from .localization import BEVLocalizer, assign_targets, compute_loss, decode
from .nn import Module
from .tensor import AdamState, adam_step, lr_at_epoch


@dataclass
class TrackResult:
    boxes: list
    n_points: list
    degenerate: list
    frame_indices: list
    runtime_s: float = 0.0


def _rng(*keys):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in keys])))


def _resample(points, n, seed):
    """Exactly n rows: seeded choice without replacement, or cyclic repeats."""
    m = points.shape[0]
    if m >= n:
        rng = np.random.Generator(np.random.PCG64(seed))
        return points[rng.choice(m, size=n, replace=False)]
    return points[np.arange(n) % m]


def to_local(points, ref_box, canonicalize):
    if canonicalize:
        return geometry.transform_to_box_frame(points, ref_box)
    return points - ref_box.center


def box_to_local(box, ref_box, canonicalize):
    if canonicalize:
        return geometry.box_to_frame(box, ref_box)
    c = box.center - ref_box.center
    return Box3D(c[0], c[1], c[2], box.w, box.l, box.h, box.theta)


def box_to_world(box, ref_box, canonicalize):
    if canonicalize:
        return geometry.box_from_frame(box, ref_box)
    c = box.center + ref_box.center
    return Box3D(c[0], c[1], c[2], box.w, box.l, box.h, box.theta)


def build_template(frames, history_boxes, scheme, n1, seed, canonicalize=True,
                   merge_in_world=False):
    """Merge crops of the designated history boxes and sample to n1 points.

    Crops canonicalize into their own box frame before the union (the
    reference frames coincide for a well-tracked target), or merge in world
    coordinates relative to the newest box when `merge_in_world`. Empty
    unions fall back to n1 zeros (the box center) with the flag set.
    """
    t = len(history_boxes)
    if t < 1:
        raise ValueError("build_template: history must contain the first frame")
    if scheme == "first_gt":
        picks = [0]
    elif scheme == "prev":
        picks = [t - 1]
    elif scheme == "first+prev":
        picks = [0] if t == 1 else [0, t - 1]
    elif scheme == "all_prev":
        picks = list(range(t))
    else:
        raise ValueError(f"unknown template scheme {scheme!r}")
    ref = history_boxes[picks[-1]]
    crops = []
    for i in picks:
        box = history_boxes[i]
        pts = frames[i].points
        inside = pts[geometry.points_in_box(pts, box, 0.0)]
        if inside.shape[0] == 0:
            continue
        crops.append(to_local(inside, ref if merge_in_world else box, canonicalize))
    if not crops:
        return np.zeros((n1, 3)), True
    merged = np.vstack(crops)
    return _resample(merged, n1, seed), False


def build_search(points, ref_box, enlarge, n2, seed, canonicalize=True):
    """Crop around the reference box, sample to n2, move into its frame.

    Returns (local points, ref_box as the recorded frame transform,
    degenerate flag). Degenerate crops hold n2 copies of the local origin.
    """
    sampled, degenerate = geometry.crop_and_sample(points, ref_box, enlarge, n2, seed)
    return to_local(sampled, ref_box, canonicalize), ref_box, degenerate


def jitter_box(box, cfg, rng):
    """Training-time random shift of the reference box."""
    dx = rng.uniform(-cfg.shift_xy, cfg.shift_xy)
    dy = rng.uniform(-cfg.shift_xy, cfg.shift_xy)
    dz = rng.uniform(-cfg.shift_z, cfg.shift_z)
    dth = np.radians(rng.uniform(-cfg.shift_theta_deg, cfg.shift_theta_deg))
    return Box3D(box.x + dx, box.y + dy, box.z + dz, box.w, box.l, box.h,
                 geometry.wrap_angle(box.theta + dth))


class TrackerModel(Module):
    """Backbone plus BEV localizer; checkpoint keys backbone.* / loc.*."""

    def __init__(self, cfg: TrackerConfig):
        super().__init__()
        self.cfg = cfg
        rng = _rng(cfg.seed, 0)
        self.add_module("backbone", OneStreamBackbone(cfg.backbone, rng))
        self.add_module("loc", BEVLocalizer(cfg.bev, cfg.backbone.d, rng))
        self.bind_names()

    def forward(self, template_points, search_points, ref_box, cpi_seed=0,
                want_attention=False):
        """Localization maps for one template/search pair (both in local frame)."""
        cfg = self.cfg
        _, feat_s, attn, degenerate = self.backbone(
            template_points, search_points,
            cpi_enabled=cfg.cpi_enabled,
            cpi_radius=cfg.cpi_radius_for(ref_box),
            seed=cpi_seed,
            want_attention=want_attention,
        )
        maps = self.loc(feat_s, search_points)
        return maps, attn, degenerate


def training_pairs(tracklets):
    return [(ti, t) for ti, frames in enumerate(tracklets)
            for t in range(1, len(frames))]


def train(tracklets, cfg, pretrained_state=None, loss_path=None, epochs=None,
          log_every=0):
    """Adam over all (template, search, target) pairs of the tracklets.

    Ground-truth boxes build both crops (first + previous per the scheme);
    the search reference is the jittered current box. Returns
    (model, per-step loss records).
    """
    model = TrackerModel(cfg)
    if pretrained_state is not None:
        from .pretrain import transfer_weights

        transfer_weights(pretrained_state, model)
    pairs = training_pairs(tracklets)
    if not pairs:
        return model, []
    state = AdamState(lr=cfg.lr)
    params = model.parameters()
    records = []
    n_epochs = cfg.epochs if epochs is None else epochs
    step = 0
    for epoch in range(n_epochs):
        state.lr = lr_at_epoch(cfg.lr, epoch, cfg.lr_decay, cfg.lr_every)
        order = _rng(cfg.seed, 1, epoch).permutation(len(pairs))
        for k in order:
            ti, t = pairs[k]
            frames = tracklets[ti]
            gt_boxes = [f.box for f in frames]
            template, tdeg = build_template(
                frames, gt_boxes[:t], cfg.template_scheme, cfg.backbone.n1,
                seed=(cfg.seed, 2, epoch, int(k)), canonicalize=cfg.canonicalize,
                merge_in_world=cfg.merge_in_world)
            ref = jitter_box(gt_boxes[t], cfg, _rng(cfg.seed, 3, epoch, int(k)))
            search, ref, sdeg = build_search(
                frames[t].points, ref, cfg.search_enlarge, cfg.backbone.n2,
                seed=(cfg.seed, 4, epoch, int(k)), canonicalize=cfg.canonicalize)
            if tdeg or sdeg:
                continue
            gt_local = box_to_local(gt_boxes[t], ref, cfg.canonicalize)
            target, pos, _ = assign_targets(gt_local, cfg.bev)
            maps, _, _ = model.forward(template, search, ref,
                                       cpi_seed=(cfg.seed, 5, step))
            loss, parts = compute_loss(maps, target, pos, cfg.loss)
            model.zero_grad()
            loss.backward()
            adam_step(params, [p.tensor.grad for p in params], state)
            records.append({"step": step, "epoch": epoch, "lr": state.lr,
                            "total": loss.item(), **parts})
            if log_every and step % log_every == 0:
                print(f"epoch {epoch} step {step}: loss {loss.item():.4f}")
            step += 1
    if loss_path:
        write_loss_csv(loss_path, records)
    return model, records


def track(frames, cfg, model, seed=0):
    """One-pass tracking of a tracklet seeded by the first frame's box."""
    if frames[0].box is None:
        raise ValueError("track: the first frame must carry a ground-truth box")
    start = time.perf_counter()
    first = frames[0].box
    boxes = [first]
    flags = [False]
    for t in range(1, len(frames)):
        template, tdeg = build_template(
            frames, boxes, cfg.template_scheme, cfg.backbone.n1,
            seed=(cfg.seed, seed, 6, t), canonicalize=cfg.canonicalize,
            merge_in_world=cfg.merge_in_world)
        prev = boxes[t - 1]
        search, ref, sdeg = build_search(
            frames[t].points, prev, cfg.search_enlarge, cfg.backbone.n2,
            seed=(cfg.seed, seed, 7, t), canonicalize=cfg.canonicalize)
        if sdeg:
            boxes.append(prev)
            flags.append(True)
            continue
        maps, _, _ = model.forward(template, search, ref,
                                   cpi_seed=(cfg.seed, seed, 8, t))
        local = decode(maps, cfg.bev, first)
        boxes.append(box_to_world(local, ref, cfg.canonicalize))
        flags.append(bool(tdeg))
    counts = []
    for fr in frames:
        if fr.box is None:
            counts.append(-1)
        else:
            counts.append(int(geometry.points_in_box(fr.points, fr.box).sum()))
    return TrackResult(boxes=boxes, n_points=counts, degenerate=flags,
                       frame_indices=[fr.index for fr in frames],
                       runtime_s=time.perf_counter() - start)


def evaluate(result, frames):
    """Per-frame IoU and center distance against the tracklet's ground truth."""
    ious, dists = [], []
    for box, fr in zip(result.boxes, frames):
        if fr.box is None:
            continue
        ious.append(geometry.iou3d(box, fr.box))
        dists.append(float(np.linalg.norm(box.center - fr.box.center)))
    return ious, dists


def write_result_csv(path, result):
    with open(path, "w") as f:
        f.write("frame,x,y,z,w,l,h,theta,n_points,degenerate\n")
        for pos, (i, b) in enumerate(zip(result.frame_indices, result.boxes)):
            vals = ",".join(repr(float(v)) for v in b.to_array())
            f.write(f"{i},{vals},{result.n_points[pos]},"
                    f"{int(result.degenerate[pos])}\n")


def read_result_csv(path):
    boxes, counts, flags, indices = [], [], [], []
    with open(path) as f:
        f.readline()
        for line in f:
            if not line.strip():
                continue
            vals = line.strip().split(",")
            indices.append(int(vals[0]))
            boxes.append(Box3D(*(float(v) for v in vals[1:8])))
            counts.append(int(vals[8]))
            flags.append(bool(int(vals[9])))
    return TrackResult(boxes=boxes, n_points=counts, degenerate=flags,
                       frame_indices=indices)


def write_loss_csv(path, records):
    with open(path, "w") as f:
        f.write("step,epoch,lr,total,cls,off,theta,z\n")
        for r in records:
            f.write(f"{r['step']},{r['epoch']},{r['lr']:.8g},{r['total']:.8g},"
                    f"{r['cls']:.8g},{r['off']:.8g},{r['theta']:.8g},{r['z']:.8g}\n")
