"""Operator entry points; every subcommand writes files under --out.

Subcommands: synth (materialize synthetic tracklets), pretrain, train,
track, eval, export-attn. `--seed` pins all randomness, `--precision`
selects f32 (run mode) or f64 (test mode). The ONESTREAM_LOG environment
variable sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import checkpoint as ckpt
from . import data, metrics, pipeline, pretrain as pre, tensor as T
from .backbone import export_attention
from .config import TrackerConfig, config_hash, load_config, save_config

log = logging.getLogger("onestream")


def _setup_logging():
    level = os.environ.get("ONESTREAM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_cfg(args):
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        implied = None
        if getattr(args, "checkpoint", None):
            implied = os.path.join(os.path.dirname(args.checkpoint) or ".", "config.txt")
        if implied and os.path.exists(implied):
            cfg = load_config(implied)
        else:
            cfg = TrackerConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "scheme", None):
        cfg.template_scheme = args.scheme
    if getattr(args, "no_cpi", False):
        cfg.cpi_enabled = False
    return cfg


def _tracklet_dirs(root):
    dirs = sorted(d for d in os.listdir(root)
                  if os.path.isdir(os.path.join(root, d)))
    if not dirs:
        raise data.ParseError(f"{root}: no tracklet directories")
    return dirs


def cmd_synth(args):
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.tracklets):
        spec = data.SceneSpec(shape=args.shape, frames=args.frames,
                              points_per_frame=args.points, clutter=args.clutter,
                              dropout=args.dropout, seed=args.seed + i)
        frames = data.generate_scene(spec)
        data.write_tracklet_dir(os.path.join(args.out, f"tracklet_{i:03d}"), frames)
    log.info("wrote %d tracklets to %s", args.tracklets, args.out)
    return 0


def cmd_pretrain(args):
    cfg = pre.PretrainConfig(seed=args.seed if args.seed is not None else 0,
                             steps=args.steps)
    clouds = pre.make_pretrain_shapes(count=args.shapes, seed=cfg.seed)
    model, losses = pre.run_pretraining(clouds, cfg)
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    ckpt.save_checkpoint(args.out, model.state_dict())
    with open(args.out + ".loss.csv", "w") as f:
        f.write("step,loss\n")
        for i, v in enumerate(losses):
            f.write(f"{i},{v:.8g}\n")
    print(f"pretrain: final loss {losses[-1]:.6f} after {len(losses)} steps")
    return 0


def cmd_train(args):
    cfg = _load_cfg(args)
    tracklets = [data.read_tracklet_dir(os.path.join(args.data, d))
                 for d in _tracklet_dirs(args.data)]
    pretrained = ckpt.load_checkpoint(args.pretrained) if args.pretrained else None
    os.makedirs(args.out, exist_ok=True)
    model, _ = pipeline.train(
        tracklets, cfg, pretrained_state=pretrained,
        loss_path=os.path.join(args.out, "loss.csv"),
        epochs=args.epochs, log_every=args.log_every)
    ckpt.save_checkpoint(os.path.join(args.out, "checkpoint.bin"), model.state_dict())
    save_config(os.path.join(args.out, "config.txt"), cfg)
    print(f"train: checkpoint written to {os.path.join(args.out, 'checkpoint.bin')}")
    return 0


def _load_model(cfg, checkpoint_path):
    model = pipeline.TrackerModel(cfg)
    model.load_state_dict(ckpt.load_checkpoint(checkpoint_path))
    return model


def cmd_track(args):
    cfg = _load_cfg(args)
    model = _load_model(cfg, args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    names = _tracklet_dirs(args.data)

    def run(item):
        i, name = item
        frames = data.read_tracklet_dir(os.path.join(args.data, name))
        result = pipeline.track(frames, cfg, model, seed=i)
        pipeline.write_result_csv(os.path.join(args.out, name + ".csv"), result)
        return result.runtime_s, len(frames)

    items = list(enumerate(names))
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            stats = list(pool.map(run, items))
    else:
        stats = [run(item) for item in items]
    total_s = sum(s for s, _ in stats)
    total_f = sum(n for _, n in stats)
    print(f"track: {len(names)} tracklets, {total_f} frames, "
          f"{total_f / total_s if total_s else 0.0:.1f} fps")
    return 0


def cmd_eval(args):
    from .geometry import iou3d

    cfg = _load_cfg(args)
    ious, dists, counts = [], [], []
    result_files = sorted(f for f in os.listdir(args.results) if f.endswith(".csv")
                          and not f.endswith(".frames.csv"))
    if not result_files:
        raise data.ParseError(f"{args.results}: no result CSVs")
    for fname in result_files:
        name = fname[:-4]
        result = pipeline.read_result_csv(os.path.join(args.results, fname))
        frames = data.read_tracklet_dir(os.path.join(args.data, name))
        gt = {fr.index: fr.box for fr in frames if fr.box is not None}
        for pos, idx in enumerate(result.frame_indices):
            if idx not in gt:
                continue
            ious.append(iou3d(result.boxes[pos], gt[idx]))
            dists.append(float(np.linalg.norm(result.boxes[pos].center
                                              - gt[idx].center)))
            counts.append(result.n_points[pos])
    rep = metrics.report(ious, dists)
    rep.bins = metrics.sparsity_bins(ious, dists, counts, edges=tuple(args.bins))
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    metrics.write_report(args.out, rep, config_hash(cfg))
    print(f"Success: {rep.success:.4f}")
    print(f"Precision: {rep.precision:.4f}")
    return 0


def cmd_export_attn(args):
    cfg = _load_cfg(args)
    model = _load_model(cfg, args.checkpoint)
    frames = data.read_tracklet_dir(args.tracklet)
    if args.frame < 1 or args.frame >= len(frames):
        raise ValueError(f"frame {args.frame} out of range 1..{len(frames) - 1}")
    boxes = [fr.box for fr in frames[: args.frame]]
    if any(b is None for b in boxes):
        raise ValueError("export-attn needs ground-truth boxes up to the frame")
    template, _ = pipeline.build_template(
        frames, boxes, cfg.template_scheme, cfg.backbone.n1,
        seed=(cfg.seed, 6, args.frame), canonicalize=cfg.canonicalize)
    search, ref, sdeg = pipeline.build_search(
        frames[args.frame].points, boxes[-1], cfg.search_enlarge, cfg.backbone.n2,
        seed=(cfg.seed, 7, args.frame), canonicalize=cfg.canonicalize)
    if sdeg:
        raise ValueError(f"frame {args.frame}: empty search region")
    _, attn, _ = model.forward(template, search, ref,
                               cpi_seed=(cfg.seed, 8, args.frame), want_attention=True)
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    export_attention(attn[cfg.backbone.blocks - 1], search, args.out)
    print(f"export-attn: wrote {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="onestream",
                                description="one-stream 3D point-cloud tracker")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", help="config file (key = value lines)")
        sp.add_argument("--seed", type=int, default=None, help="master seed")
        sp.add_argument("--precision", choices=("f32", "f64"), default="f32")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)

    sp = sub.add_parser("synth", help="generate synthetic tracklet directories")
    sp.add_argument("--out", required=True)
    sp.add_argument("--tracklets", type=int, default=5)
    sp.add_argument("--frames", type=int, default=30)
    sp.add_argument("--shape", choices=("cuboid", "cylinder", "lshape"), default="cuboid")
    sp.add_argument("--points", type=int, default=128)
    sp.add_argument("--clutter", type=int, default=1)
    sp.add_argument("--dropout", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--precision", choices=("f32", "f64"), default="f32")
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("pretrain", help="masked point modeling on synthetic shapes")
    common(sp)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--steps", type=int, default=500)
    sp.add_argument("--shapes", type=int, default=8)
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("train", help="train the tracker on tracklet directories")
    common(sp)
    sp.add_argument("--data", required=True, help="directory of tracklet dirs")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--pretrained", help="pretrain checkpoint for weight transfer")
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--log-every", type=int, default=0)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("track", help="run one-pass tracking")
    common(sp, checkpoint=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--scheme", choices=("first_gt", "prev", "first+prev", "all_prev"))
    sp.add_argument("--no-cpi", action="store_true")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(fn=cmd_track)

    sp = sub.add_parser("eval", help="Success/Precision report from result CSVs")
    common(sp)
    sp.add_argument("--results", required=True, help="directory of result CSVs")
    sp.add_argument("--data", required=True, help="tracklet dirs with gt.csv")
    sp.add_argument("--out", required=True, help="JSON report path")
    sp.add_argument("--bins", type=int, nargs=3, default=(10, 50, 150))
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("export-attn", help="attention mass CSV for one frame")
    common(sp, checkpoint=True)
    sp.add_argument("--tracklet", required=True, help="one tracklet directory")
    sp.add_argument("--frame", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_export_attn)
    return p


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    T.set_default_dtype(args.precision)
    try:
        return args.fn(args)
    except Exception as exc:  # one-line machine-parsable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
