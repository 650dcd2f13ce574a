"""Masked point modeling for the transformer blocks, plus weight transfer.

Patches (FPS centers + KNN neighborhoods in center-relative coordinates)
are masked at random; visible patches pass through an encoder matching the
tracker backbone's block geometry, a shared mask token plus positional
embeddings drive a wider-headed decoder, and an MLP head reconstructs the
masked patches in coordinate space. Encoder blocks transfer bit-exactly
into the tracker backbone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry, tensor as T
from .nn import Linear, Module, PointMLP, TransformerBlock
from .tensor import AdamState, Parameter, adam_step


@dataclass
class PretrainConfig:
    n_patches: int = 16
    k: int = 16
    mask_ratio: float = 0.6
    d: int = 64
    encoder_blocks: int = 3      # pinned to the tracker backbone geometry
    encoder_heads: int = 4
    decoder_blocks: int = 2
    decoder_heads: int = 8       # wider decoder balances the slim encoder
    lr: float = 5e-4
    steps: int = 500
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio {self.mask_ratio} outside [0, 1)")


@dataclass
class PatchSet:
    centers: np.ndarray   # (n, 3)
    patches: np.ndarray   # (n, k, 3), relative to their center
    mask: np.ndarray      # (n,) bool, True = masked

    def absolute_patches(self):
        return self.patches + self.centers[:, None, :]


def patchify(points, cfg, seed):
    """FPS centers, KNN patches in relative coordinates, seeded random mask."""
    points = np.asarray(points, dtype=float)
    if points.shape[0] < cfg.k:
        raise ValueError(
            f"patchify: cloud has {points.shape[0]} points, need at least k={cfg.k}"
        )
    centers_idx = geometry.farthest_point_sample(points, cfg.n_patches)
    centers = points[centers_idx]
    nbr = geometry.knn(points, centers, cfg.k)
    patches = points[nbr] - centers[:, None, :]
    n_masked = int(round(cfg.mask_ratio * cfg.n_patches))
    mask = np.zeros(cfg.n_patches, dtype=bool)
    if n_masked:
        rng = np.random.Generator(np.random.PCG64(seed))
        mask[rng.choice(cfg.n_patches, size=n_masked, replace=False)] = True
    return PatchSet(centers, patches, mask)


class MaskedPointModel(Module):
    def __init__(self, cfg, rng):
        super().__init__()
        self.cfg = cfg
        self.add_module("patch_embed", PointMLP((3, 64, cfg.d), rng))
        self.add_module("pos_mlp", PointMLP((3, 64, cfg.d), rng))
        for i in range(cfg.encoder_blocks):
            self.add_module(f"encoder.block{i}",
                            TransformerBlock(cfg.d, cfg.encoder_heads, rng))
        for i in range(cfg.decoder_blocks):
            self.add_module(f"decoder.block{i}",
                            TransformerBlock(cfg.d, cfg.decoder_heads, rng))
        self.add_param("mask_token", Parameter(rng.uniform(-0.02, 0.02, size=cfg.d)))
        self.add_module("head", Linear(cfg.d, 3 * cfg.k, rng))

    def embed_patches(self, patches):
        """(m, k, 3) relative patches -> (m, d) tokens via shared MLP + max pool."""
        m, k, _ = patches.shape
        flat = T.Tensor(patches.reshape(m * k, 3))
        feat = T.reshape(self.patch_embed(flat), (m, k, self.cfg.d))
        return T.max_pool_over_axis(feat, axis=1)

    def encode(self, visible_patches, visible_centers):
        """Visible tokens (patch embedding + positional MLP) through the encoder."""
        tokens = T.add(self.embed_patches(visible_patches),
                       self.pos_mlp(T.Tensor(visible_centers)))
        for i in range(self.cfg.encoder_blocks):
            tokens, _ = self._children[f"encoder.block{i}"](tokens)
        return tokens

    def decode_and_reconstruct(self, encoded, masked_centers):
        """Shared mask token at each masked position -> decoder -> k x 3 patches."""
        nm = masked_centers.shape[0]
        token = T.reshape(self.mask_token.tensor, (1, self.cfg.d))
        masked = T.add(T.gather_rows(token, np.zeros(nm, dtype=np.int64)),
                       self.pos_mlp(T.Tensor(masked_centers)))
        x = T.concat([encoded, masked], axis=0)
        for i in range(self.cfg.decoder_blocks):
            x, _ = self._children[f"decoder.block{i}"](x)
        out = T.slice_rows(x, x.shape[0] - nm, x.shape[0])
        return T.reshape(self.head(out), (nm, self.cfg.k, 3))

    def reconstruction_loss(self, patchset):
        visible = ~patchset.mask
        if not patchset.mask.any():
            raise ValueError("reconstruction_loss: nothing is masked")
        encoded = self.encode(patchset.patches[visible], patchset.centers[visible])
        pred = self.decode_and_reconstruct(encoded, patchset.centers[patchset.mask])
        targets = patchset.patches[patchset.mask]
        preds = T.split(pred, pred.shape[0], axis=0)
        loss = None
        for i, p in enumerate(preds):
            c = chamfer_l2(T.reshape(p, (self.cfg.k, 3)), targets[i])
            loss = c if loss is None else T.add(loss, c)
        return T.mul(loss, 1.0 / len(preds))


def chamfer_l2(pred, target):
    """Symmetric mean squared Chamfer distance between two point sets."""
    pred = pred if isinstance(pred, T.Tensor) else T.Tensor(pred)
    target = np.asarray(target.data if isinstance(target, T.Tensor) else target)
    if pred.shape[0] == 0 or target.shape[0] == 0:
        raise ValueError("chamfer_l2: point sets must be nonempty")
    tgt = T.Tensor(target)
    cross = T.mul(T.matmul(pred, T.transpose(tgt, (1, 0))), -2.0)
    pn = T.sum_last(T.pow_scalar(pred, 2.0))
    tn = T.sum_last(T.pow_scalar(tgt, 2.0))
    d2 = T.transpose(T.add(T.transpose(T.add(cross, tn), (1, 0)), pn), (1, 0))
    return T.add(T.mean_all(T.min_over_axis(d2, axis=1)),
                 T.mean_all(T.min_over_axis(d2, axis=0)))


def transfer_weights(encoder_state, tracker_model):
    """Overwrite the tracker's transformer blocks from pretrain encoder blocks.

    Only keys `encoder.block{i}.*` move; local embedding and localization
    parameters stay untouched. Any shape mismatch raises, naming the
    parameter.
    """
    planned = []
    mismatched = []
    for name, param in tracker_model.named_parameters():
        if not name.startswith("backbone.block"):
            continue
        src_key = "encoder." + name[len("backbone."):]
        if src_key not in encoder_state:
            raise KeyError(f"pretrain checkpoint is missing {src_key!r} for {name!r}")
        value = np.asarray(encoder_state[src_key])
        if tuple(value.shape) != tuple(param.data.shape):
            mismatched.append(f"{name} (pretrain {value.shape}, "
                              f"tracker {tuple(param.data.shape)})")
        else:
            planned.append((param, value))
    if mismatched:
        raise ValueError("shape mismatch for: " + ", ".join(mismatched))
    if not planned:
        raise ValueError("transfer_weights: no backbone block parameters found")
    for param, value in planned:
        param.data = value
    return tracker_model


def make_pretrain_shapes(count=8, points=256, seed=0):
    """Primitive shells (sphere / cuboid / cylinder surfaces) with mild noise."""
    from .data import _sample_cuboid_shell, _sample_cylinder_shell

    rng = np.random.Generator(np.random.PCG64(seed))
    clouds = []
    for i in range(count):
        kind = i % 3
        scale = rng.uniform(0.6, 1.4)
        if kind == 0:
            v = rng.normal(size=(points, 3))
            pts = scale * v / np.linalg.norm(v, axis=1, keepdims=True)
        elif kind == 1:
            pts = _sample_cuboid_shell((scale, scale * rng.uniform(1.0, 2.0), scale),
                                       points, rng, fill=1.0)
        else:
            pts = _sample_cylinder_shell((scale, scale, scale * rng.uniform(1.0, 2.0)),
                                         points, rng, fill=1.0)
        clouds.append(pts + rng.normal(scale=0.01, size=pts.shape))
    return clouds


def run_pretraining(clouds, cfg, resample_masks=False, log_every=0):
    """Optimize reconstruction over a fixed synthetic corpus.

    Masks are drawn once per cloud by default so the objective is
    deterministic (the desk-scale convergence harness relies on that);
    `resample_masks` re-draws them every step for conventional training.

    Returns (model, per-step losses).
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    model = MaskedPointModel(cfg, rng).bind_names()
    patchsets = [patchify(c, cfg, seed=(cfg.seed, 17, i)) for i, c in enumerate(clouds)]
    state = AdamState(lr=cfg.lr)
    params = model.parameters()
    losses = []
    for step in range(cfg.steps):
        if resample_masks:
            patchsets = [patchify(c, cfg, seed=(cfg.seed, 17, i, step))
                         for i, c in enumerate(clouds)]
        model.zero_grad()
        total = None
        for ps in patchsets:
            loss = model.reconstruction_loss(ps)
            total = loss if total is None else T.add(total, loss)
        total = T.mul(total, 1.0 / len(patchsets))
        total.backward()
        grads = [p.tensor.grad for p in params]
        adam_step(params, grads, state)
        losses.append(total.item())
        if log_every and step % log_every == 0:
            print(f"pretrain step {step}: loss {losses[-1]:.6f}")
    return model, losses
