"""Training objectives, SSIM, masking and depth evaluation metrics.

Depth maps inside the losses are inverse depth (1/m) unless a name says
otherwise. Pyramid level ``k`` has extents ``(H >> k, W >> k)`` and is the
average pool of the full-size map.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import geometry
from .diffcore import ops
from .diffcore.tensor import Tensor, as_tensor
from .errors import DegenerateBatch, NumericalError, ShapeError

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
NORM_EPS = 1e-8
DEFAULT_WEIGHTS = (0.5, 0.5, 3.0, 3.0)


# ---------------------------------------------------------------------------
# pyramids
# ---------------------------------------------------------------------------

def pyramid(x, levels: int) -> list[Tensor]:
    """Average-pool pyramid ``[x, x/2, x/4, ...]`` over the last two axes."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    out = [x]
    for k in range(1, levels):
        if (h >> k) << k != h or (w >> k) << k != w:
            raise ShapeError(f"extent {h}x{w} is not divisible by 2^{k}")
        out.append(ops.resample(x, h >> k, w >> k, "average"))
    return out


# ---------------------------------------------------------------------------
# sparse depth supervision
# ---------------------------------------------------------------------------

def sparse_depth_loss(pred: Sequence, values: np.ndarray, valid: np.ndarray, d_max: float) -> Tensor:
    """Mean absolute inverse-depth residual over valid samples, summed over levels, / d_max.

    ``pred`` is a list of per-level maps shaped (N, 1, H_k, W_k); ``values`` and
    ``valid`` are full-resolution (N, H, W) targets. A sample at (y, x) is
    compared against the level-k cell (y >> k, x >> k).
    """
    valid = np.asarray(valid, dtype=bool)
    n_idx, ys, xs = np.nonzero(valid)
    if n_idx.size == 0:
        raise DegenerateBatch("sparse depth loss: no valid samples")
    target = np.asarray(values)[n_idx, ys, xs]
    total = None
    for k, p in enumerate(pred):
        p = as_tensor(p)
        picked = p[n_idx, 0, ys >> k, xs >> k]
        term = ops.mean(ops.abs(ops.sub(picked, target.astype(p.dtype))))
        total = term if total is None else ops.add(total, term)
    return ops.scale(total, 1.0 / d_max)


# ---------------------------------------------------------------------------
# curvature
# ---------------------------------------------------------------------------

def _check_step(shape, t: int, span: int) -> None:
    if t < 1:
        raise ValueError(f"difference step must be >= 1, got {t}")
    h, w = shape[-2:]
    if span * t >= h or span * t >= w:
        raise ShapeError(f"step {t} exceeds map extents {h}x{w}")


def grad_op(D, t: int):
    """Diagonal difference D(y, x) - D(y+t, x+t), cropped to the valid support."""
    if isinstance(D, Tensor):
        _check_step(D.shape, t, 1)
        return ops.sub(D[..., :-t, :-t], D[..., t:, t:])
    D = np.asarray(D)
    _check_step(D.shape, t, 1)
    return D[..., :-t, :-t] - D[..., t:, t:]


def curvature(D, t: int):
    """Second diagonal difference D(y,x) - 2 D(y+t,x+t) + D(y+2t,x+2t)."""
    if not isinstance(D, Tensor):
        _check_step(np.shape(D), t, 2)
    else:
        _check_step(D.shape, t, 2)
    return grad_op(grad_op(D, t), t)


def curvature_loss(pred: Sequence, wm, steps: int = 3, align: bool = False) -> Tensor:
    """Sum over levels and steps of the mean |C(pred) - C(wm)|.

    ``wm`` is the full-size world-model inverse depth (N, 1, H, W); it is
    average-pooled to every level and never receives gradient. With ``align``
    each image's world-model map is first rescaled so its median matches the
    (detached) prediction's median at that level.
    """
    wm = ops.stop_gradient(as_tensor(wm))
    total = None
    for p in pred:
        p = as_tensor(p)
        w = ops.resample(wm, p.shape[-2], p.shape[-1], "average").data.astype(p.dtype)
        if align:
            lead = w.shape[:-2]
            ratio = np.median(p.data.reshape(lead + (-1,)), axis=-1) / \
                np.median(w.reshape(lead + (-1,)), axis=-1)
            w = w * ratio[..., None, None].astype(p.dtype)
        for t in range(1, steps + 1):
            if 2 * t >= min(p.shape[-2:]):
                continue
            term = ops.mean(ops.abs(ops.sub(curvature(p, t), curvature(w, t))))
            total = term if total is None else ops.add(total, term)
    if total is None:
        raise ShapeError("curvature loss: every level is smaller than the difference support")
    return total


# ---------------------------------------------------------------------------
# SSIM and reprojection
# ---------------------------------------------------------------------------

def _local_mean(x: Tensor) -> Tensor:
    return ops.box_filter(ops.pad2d(x, 1, "reflect"), 3)


def ssim(a, b) -> Tensor:
    """Per-pixel SSIM with a 3x3 mean window and reflective padding."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes differ, {a.shape} vs {b.shape}")
    mu_a, mu_b = _local_mean(a), _local_mean(b)
    var_a = ops.sub(_local_mean(ops.square(a)), ops.square(mu_a))
    var_b = ops.sub(_local_mean(ops.square(b)), ops.square(mu_b))
    cov = ops.sub(_local_mean(ops.mul(a, b)), ops.mul(mu_a, mu_b))
    num = ops.mul(ops.add(ops.scale(ops.mul(mu_a, mu_b), 2.0), SSIM_C1),
                  ops.add(ops.scale(cov, 2.0), SSIM_C2))
    den = ops.mul(ops.add(ops.add(ops.square(mu_a), ops.square(mu_b)), SSIM_C1),
                  ops.add(ops.add(var_a, var_b), SSIM_C2))
    return ops.div(num, den)


def photometric_error(warped, target, l1_weight: float = 0.2) -> Tensor:
    """Per-pixel λ·L1 + (1-λ)·(1-SSIM)/2, channel-averaged: (B,C,H,W) -> (B,H,W)."""
    warped, target = as_tensor(warped), as_tensor(target)
    l1 = ops.mean(ops.abs(ops.sub(warped, target)), axis=1)
    ds = ops.mean(ops.scale(ops.sub(1.0, ssim(warped, target)), 0.5), axis=1)
    return ops.add(ops.scale(l1, l1_weight), ops.scale(ds, 1.0 - l1_weight))


def reproject(image_src, inv_depth, intr_src, intr_tgt, transform, mask_tgt=None, mask_src=None):
    """Warp source images into the target view (inverse warping).

    image_src: (B,C,h,w) source images seen through ``intr_src``;
    inv_depth: (B,1,h',w') target inverse depth at any pyramid level, upsampled
    bilinearly to the target extents of ``intr_tgt``; transform: (B,4,4)
    target-camera to source-camera motion. Optional masks (B,H,W) / (B,h,w)
    are nonzero where pixels may be supervised.

    Returns the warped images at the target extents and a boolean validity
    mask: target mask, in-front and in-bounds, and a source mask that stays
    fully on under bilinear interpolation.
    """
    intr_tgt_list = geometry._per_batch(intr_tgt, as_tensor(inv_depth).shape[0])
    H, W = intr_tgt_list[0].height, intr_tgt_list[0].width
    d = ops.resample(as_tensor(inv_depth), H, W, "bilinear")
    coords, valid = geometry.warp_coords(d, intr_tgt, intr_src, transform)
    warped, _ = ops.grid_sample(image_src, coords)
    if mask_tgt is not None:
        valid = valid & (np.asarray(mask_tgt) > 0)
    if mask_src is not None:
        ms = (np.asarray(mask_src) > 0).astype(coords.dtype)[:, None]
        sampled, _ = ops.grid_sample(ms, coords.data)
        valid = valid & (sampled.data[:, 0] >= 1.0 - 1e-6)
    return warped, valid


@dataclass
class Warp:
    """Per-level warp of all cameras: images (N,3,H,W) and validity (N,H,W)."""
    level: int
    warped: Tensor
    valid: np.ndarray


def warp_pyramid(images_src: np.ndarray, pred: Sequence, rig, transforms,
                 mask_tgt=None, mask_src=None, source: str = "pyramid") -> list[Warp]:
    """Warp source images with level-k depth into the full-size target view.

    With ``source="pyramid"`` level k samples the level-k source image through
    the level-k intrinsics; ``source="full"`` always samples the full-size
    source, which keeps coarse levels sharp.
    """
    if source not in ("pyramid", "full"):
        raise ValueError(f"unknown warp source {source!r}")
    N, _, H, W = images_src.shape
    out = []
    for k, d in enumerate(pred):
        if source == "full":
            warped, valid = reproject(images_src, d, rig.intrinsics(0), rig.intrinsics(0),
                                      transforms, mask_tgt, mask_src)
            out.append(Warp(k, warped, valid))
            continue
        hk, wk = H >> k, W >> k
        img_k = ops.resample(images_src, hk, wk, "average")
        msk_k = None
        if mask_src is not None:
            cover = ops.resample((np.asarray(mask_src) > 0).astype(np.float64), hk, wk, "average").data
            msk_k = cover >= 1.0 - 1e-6
        warped, valid = reproject(img_k, d, rig.intrinsics(k), rig.intrinsics(0), transforms,
                                  mask_tgt, msk_k)
        out.append(Warp(k, warped, valid))
    return out


def _masked_mean(values: Tensor, mask: np.ndarray) -> Tensor:
    m = mask.astype(values.dtype)
    return ops.scale(ops.sum(ops.mul(values, m)), 1.0 / float(m.sum()))


def reprojection_loss(warps: Sequence[Warp], images_tgt: np.ndarray, l1_weight: float = 0.2) -> Tensor:
    """Σ_k mean_n of the photometric error averaged over each camera's valid pixels.

    Cameras (and levels) with no valid pixel are skipped; if nothing at all is
    valid the batch is degenerate.
    """
    total = None
    for wp in warps:
        err = photometric_error(wp.warped, images_tgt, l1_weight)
        n = err.shape[0]
        for i in range(n):
            if not wp.valid[i].any():
                continue
            term = ops.scale(_masked_mean(err[i], wp.valid[i]), 1.0 / n)
            total = term if total is None else ops.add(total, term)
    if total is None:
        raise DegenerateBatch("reprojection loss: no valid pixels")
    return total


def semantic_loss(warps: Sequence[Warp], images_tgt: np.ndarray, extractor: Callable) -> Tensor:
    """Σ_k mean_n mean |Seg(M·I_tgt) - Seg(M·Λ(I_src))| with the combined mask M.

    The extractor is applied to masked images; gradient reaches the warp
    through the extractor's operations but the extractor's own weights are
    expected to be frozen.
    """
    total = None
    tgt = as_tensor(images_tgt)
    for wp in warps:
        m = wp.valid[:, None].astype(tgt.dtype)
        if not m.any():
            continue
        f_tgt = extractor(ops.mul(tgt, m))
        f_src = extractor(ops.mul(wp.warped, m))
        term = ops.mean(ops.abs(ops.sub(f_tgt, f_src)))
        total = term if total is None else ops.add(total, term)
    if total is None:
        raise DegenerateBatch("semantic loss: no valid pixels")
    return total


# ---------------------------------------------------------------------------
# weighted total
# ---------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    l_d: float | None
    l_curv: float | None
    l_rep: float | None
    l_seg: float | None
    l_total: float
    factors: dict = field(default_factory=dict)
    weights: tuple = DEFAULT_WEIGHTS

    def recombine(self) -> float:
        """Rebuild the total from the stored parts and factors."""
        lam = dict(zip(("l_d", "l_curv", "l_rep", "l_seg"), self.weights))
        total = 0.0
        for name in ("l_d", "l_curv", "l_rep", "l_seg"):
            v = getattr(self, name)
            if v is not None:
                total += lam[name] * self.factors.get(name, 1.0) * v
        return total

    def to_dict(self) -> dict:
        return {"l_d": self.l_d, "l_curv": self.l_curv, "l_rep": self.l_rep, "l_seg": self.l_seg,
                "l_total": self.l_total, "factors": dict(self.factors)}


def total_loss(l_d=None, l_curv=None, l_rep=None, l_seg=None,
               weights: Sequence[float] = DEFAULT_WEIGHTS,
               factors: dict | None = None) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum with every auxiliary term rescaled to the depth loss magnitude.

    The factors |L_d| / |L_x| are frozen constants for the step. Parts passed as
    None are switched off; without L_d the remaining parts are combined with
    their plain weights. Passing ``factors`` pins them to given values, which
    is how the frozen-factor objective is probed by finite differences.
    """
    parts = {"l_d": l_d, "l_curv": l_curv, "l_rep": l_rep, "l_seg": l_seg}
    lam = dict(zip(parts, weights))
    values = {}
    for name, p in parts.items():
        if p is None:
            values[name] = None
            continue
        parts[name] = p = as_tensor(p)
        v = float(p.data)
        if not np.isfinite(v):
            raise NumericalError(f"loss part {name} is not finite ({v})")
        values[name] = v
    if all(p is None for p in parts.values()):
        raise ValueError("total_loss needs at least one part")
    fixed = factors
    factors = {}
    total = None
    for name, p in parts.items():
        if p is None:
            continue
        if fixed is not None and name in fixed:
            f = float(fixed[name])
        elif l_d is None or name == "l_d":
            f = 1.0
        else:
            f = abs(values["l_d"]) / max(abs(values[name]), NORM_EPS)
        factors[name] = f
        term = ops.scale(p, lam[name] * f)
        total = term if total is None else ops.add(total, term)
    bd = LossBreakdown(values["l_d"], values["l_curv"], values["l_rep"], values["l_seg"],
                       float(total.data), factors, tuple(weights))
    return total, bd


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3")


def metrics(pred, gt, d_min: float, d_max: float, mask=None) -> dict:
    """Standard metric-depth errors over pixels whose ground truth is finite.

    Ground truth and prediction are clipped to [d_min, d_max]; ``a1..a3`` are
    the δ < 1.25^i accuracies with a strict inequality.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"metrics: prediction {pred.shape} vs ground truth {gt.shape}")
    valid = np.isfinite(gt) & (gt > 0)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        raise ValueError("metrics: no valid ground-truth pixels")
    g = np.clip(gt[valid], d_min, d_max)
    p = np.clip(pred[valid], d_min, d_max)
    ratio = np.maximum(g / p, p / g)
    diff = g - p
    return {
        "abs_rel": float(np.mean(np.abs(diff) / g)),
        "sq_rel": float(np.mean(diff ** 2 / g)),
        "rmse": float(np.sqrt(np.mean(diff ** 2))),
        "rmse_log": float(np.sqrt(np.mean((np.log(g) - np.log(p)) ** 2))),
        "a1": float(np.mean(ratio < 1.25)),
        "a2": float(np.mean(ratio < 1.25 ** 2)),
        "a3": float(np.mean(ratio < 1.25 ** 3)),
    }
