"""Tracker configuration: defaults, key-value file parsing, canonical hash.

The config file is plain text, one `key = value` per line, '#' comments.
Keys are the dotted names listed in DEFAULTS below; unknown keys are
rejected. An empty file yields the published defaults (512/1024 points,
r 0.3, K 32, d 64, 3 blocks, 4 heads, N3 128, 0.3 m voxels, loss weights
1/1/1/2, 20 epochs at lr 1e-3 divided by 5 every 6 epochs).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields

from .geometry import VoxelSpec


@dataclass
class BackboneConfig:
    n1: int = 512                 # template points
    n2: int = 1024                # search points
    radius: float = 0.3           # local embedding ball radius (m)
    k: int = 32                   # neighbors per ball
    d: int = 64                   # token width
    blocks: int = 3
    heads: int = 4
    mlp_hidden1: int = 16         # local embedding widths (h1, h2, d)
    mlp_hidden2: int = 32
    n3: int = 128                 # center points for the secondary interaction
    cpi_blocks: int = 1
    cpi_radius: float = 0.0       # 0 -> derived: 0.35 * min(w, l) of the reference box
    relative_neighbors: bool = False

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        for name in ("n1", "n2", "k", "d", "blocks", "heads", "n3", "cpi_blocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def mlp_widths(self):
        return (self.mlp_hidden1, self.mlp_hidden2, self.d)


@dataclass
class BEVConfig:
    voxel: VoxelSpec = field(default_factory=VoxelSpec)
    channels: int = 128           # trunk width after the first reduction
    head_channels: int = 64
    alpha_conv_last: bool = False  # EEM alpha: ReLU-conv-ReLU vs ReLU-ReLU-conv

    @property
    def grid_hw(self):
        w, h, _ = self.voxel.dims
        return h, w


@dataclass
class LossWeights:
    cls_w: float = 1.0
    off_w: float = 1.0
    theta_w: float = 1.0
    z_w: float = 2.0

    def __post_init__(self):
        if min(self.cls_w, self.off_w, self.theta_w, self.z_w) < 0:
            raise ValueError("loss weights must be non-negative")


TEMPLATE_SCHEMES = ("first_gt", "prev", "first+prev", "all_prev")


@dataclass
class TrackerConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    bev: BEVConfig = field(default_factory=BEVConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    template_scheme: str = "first+prev"
    search_enlarge: float = 2.0
    shift_xy: float = 0.3         # training jitter, uniform per horizontal axis (m)
    shift_z: float = 0.1
    shift_theta_deg: float = 5.0
    epochs: int = 20
    lr: float = 1e-3
    lr_decay: float = 5.0
    lr_every: int = 6
    cpi_enabled: bool = True
    canonicalize: bool = True
    merge_in_world: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.template_scheme not in TEMPLATE_SCHEMES:
            raise ValueError(
                f"template_scheme {self.template_scheme!r} not in {TEMPLATE_SCHEMES}"
            )

    def cpi_radius_for(self, box):
        if self.backbone.cpi_radius > 0:
            return self.backbone.cpi_radius
        return 0.35 * min(box.w, box.l)


class ConfigError(ValueError):
    """Unknown key or bad value in a config file; names the offender."""


def _flatten(cfg):
    """TrackerConfig -> flat dotted key/value map (the file format)."""
    out = {}
    for f in fields(cfg.backbone):
        out[f"backbone.{f.name}"] = getattr(cfg.backbone, f.name)
    vox = cfg.bev.voxel
    out["bev.voxel_size"] = ",".join(f"{v:.9g}" for v in vox.size)
    out["bev.origin"] = ",".join(f"{v:.9g}" for v in vox.origin)
    out["bev.dims"] = ",".join(str(int(v)) for v in vox.dims)
    out["bev.channels"] = cfg.bev.channels
    out["bev.head_channels"] = cfg.bev.head_channels
    out["bev.alpha_conv_last"] = cfg.bev.alpha_conv_last
    for f in fields(cfg.loss):
        out[f"loss.{f.name}"] = getattr(cfg.loss, f.name)
    for f in fields(cfg):
        if f.name in ("backbone", "bev", "loss"):
            continue
        out[f.name] = getattr(cfg, f.name)
    return out


def _parse_value(key, text, current):
    if isinstance(current, bool):
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"key {key!r}: expected a boolean, got {text!r}")
    if isinstance(current, int):
        try:
            return int(text)
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: expected an integer, got {text!r}") from exc
    if isinstance(current, float):
        try:
            return float(text)
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: expected a number, got {text!r}") from exc
    return text


def _apply(cfg, key, value):
    flat = _flatten(cfg)
    if key not in flat:
        raise ConfigError(f"unknown config key {key!r}")
    if key == "bev.voxel_size":
        cfg.bev.voxel.size = tuple(float(v) for v in value.split(","))
    elif key == "bev.origin":
        cfg.bev.voxel.origin = tuple(float(v) for v in value.split(","))
    elif key == "bev.dims":
        cfg.bev.voxel.dims = tuple(int(v) for v in value.split(","))
    elif key.startswith("backbone."):
        setattr(cfg.backbone, key.split(".", 1)[1], _parse_value(key, value, flat[key]))
    elif key.startswith("bev."):
        setattr(cfg.bev, key.split(".", 1)[1], _parse_value(key, value, flat[key]))
    elif key.startswith("loss."):
        setattr(cfg.loss, key.split(".", 1)[1], _parse_value(key, value, flat[key]))
    else:
        setattr(cfg, key, _parse_value(key, value, flat[key]))


def load_config(path):
    """Parse a config file; absent keys keep the published defaults."""
    cfg = TrackerConfig()
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path} line {lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            try:
                _apply(cfg, key.strip(), value.strip())
            except ConfigError as exc:
                raise ConfigError(f"{path} line {lineno}: {exc}") from exc
    cfg.backbone.__post_init__()
    cfg.bev.voxel.__post_init__()
    cfg.loss.__post_init__()
    cfg.__post_init__()
    return cfg


def save_config(path, cfg):
    flat = _flatten(cfg)
    with open(path, "w") as f:
        for key in flat:
            f.write(f"{key} = {flat[key]}\n")


def config_hash(cfg):
    """Stable digest over the canonical (sorted-key) serialization."""
    flat = _flatten(cfg)
    canon = "\n".join(f"{k}={flat[k]}" for k in sorted(flat))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]
