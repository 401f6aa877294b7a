"""Depth-enhanced pose network and per-camera pose distribution."""
from __future__ import annotations

import numpy as np

from . import geometry
from .diffcore import ops
from .diffcore.nn import Conv2d, Linear, Module
from .diffcore.tensor import Tensor, as_tensor
from .errors import ShapeError
from .model import ModelConfig

POSE_SCALE = 0.01


def hadamard_fuse(sts, dec) -> Tensor:
    """stsF ⊗ dF, broadcasting a single-channel dF over channels."""
    sts, dec = as_tensor(sts), as_tensor(dec)
    if sts.shape[-2:] != dec.shape[-2:] or dec.shape[1] not in (1, sts.shape[1]) \
            or sts.shape[0] != dec.shape[0]:
        raise ShapeError(f"cannot fuse features {sts.shape} with depth features {dec.shape}")
    return ops.mul(sts, dec)


class LevelCompressor(Module):
    """Strided 3x3 convs taking level l down to the coarsest pyramid grid."""

    def __init__(self, c_in: int, c_out: int, n_down: int, rng):
        chans = [c_in] + [c_out] * max(n_down, 1)
        if n_down == 0:
            self.convs = [Conv2d(c_in, c_out, 3, rng)]
        else:
            self.convs = [Conv2d(a, b, 3, rng, stride=2) for a, b in zip(chans[:-1], chans[1:])]

    def forward(self, x) -> Tensor:
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = ops.relu(x)
        return x


class PoseNet(Module):
    """pF_l = Convs_d(stsF_l ⊗ dF_l); concat levels; conv, mean, linear head."""

    def __init__(self, cfg: ModelConfig, seed_offset: int = 7):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed + seed_offset)
        L = cfg.levels
        c = cfg.pose_channels
        self.compress = [LevelCompressor(ch, c, L - 1 - l, rng) for l, ch in enumerate(cfg.channels)]
        self.conv = Conv2d(2 * L * c, 2 * c, 3, rng)
        self.head = Linear(2 * c * cfg.n_cameras, 6, rng)

    def features(self, sts_feats, dec_feats) -> Tensor:
        """Concatenated per-level pose features on the coarsest grid, (G*N, L*c, h, w)."""
        out = []
        for l, comp in enumerate(self.compress):
            x = hadamard_fuse(sts_feats[l], dec_feats[l]) if self.cfg.depth_enhanced_pose \
                else as_tensor(sts_feats[l])
            out.append(comp(x))
        return ops.concat(out, axis=1)

    def decode(self, pF) -> Tensor:
        """(G*N, C, h, w) features -> 6-vector source<-target motion (axis-angle, translation)."""
        N = self.cfg.n_cameras
        pF = as_tensor(pF)
        _, C, h, w = pF.shape
        pair = ops.concat([pF[0:N], pF[N:2 * N]], axis=1)          # (N, 2C, h, w)
        x = ops.relu(self.conv(pair))
        pooled = ops.mean(x, axis=(2, 3))                          # (N, 2c)
        vec = self.head(ops.reshape(pooled, (1, -1)))
        return ops.scale(ops.reshape(vec, (6,)), POSE_SCALE)

    def forward(self, sts_feats, dec_feats) -> Tensor:
        return self.decode(self.features(sts_feats, dec_feats))


def fuse_depth_features(sts, dec, compressor: LevelCompressor) -> Tensor:
    """One level of the fusion: Convs_d(stsF_l ⊗ dF_l)."""
    return compressor(hadamard_fuse(sts, dec))


def distribute_pose(P_global, rig) -> Tensor:
    """Per-camera transforms E_n^-1 · exp(P) · E_n, (N, 4, 4), differentiable in P.

    ``P_global`` is a 6-vector or a 4x4 transform.
    """
    P = as_tensor(P_global)
    T = geometry.pose_matrix(P) if P.shape == (6,) else P
    return geometry.per_camera_poses(T, rig.extrinsics)
