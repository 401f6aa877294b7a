"""Depth and error-map images for evaluation output."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .. import io

ERROR_SCALE_MAX = 0.5


def depth_to_gray(depth: np.ndarray, d_min: float, d_max: float) -> np.ndarray:
    """Inverse depth mapped linearly to 0..255 (near = bright)."""
    inv = 1.0 / np.clip(depth, d_min, d_max)
    lo, hi = 1.0 / d_max, 1.0 / d_min
    return np.round(255.0 * (inv - lo) / (hi - lo)).astype(np.uint8)


def error_colors(pred: np.ndarray, gt: np.ndarray, d_min: float, d_max: float) -> np.ndarray:
    """(3, H, W) colouring of Abs.Rel on a clamped linear ramp green -> red; no-GT pixels black."""
    valid = np.isfinite(gt)
    g = np.clip(np.where(valid, gt, 1.0), d_min, d_max)
    p = np.clip(pred, d_min, d_max)
    t = np.clip(np.abs(g - p) / g / ERROR_SCALE_MAX, 0.0, 1.0)
    rgb = np.stack([t, 1.0 - t, np.zeros_like(t)])
    return np.where(valid[None], rgb, 0.0)


def write_depth_images(out_dir, pred, gt, d_min: float, d_max: float, seeds) -> Path:
    """pred, gt: (S, G, N, H, W) metric depth."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    S, G, N = pred.shape[:3]
    for s in range(S):
        for g in range(G):
            for n in range(N):
                tag = f"{seeds[s]:06d}_g{g}_c{n}"
                io.write_pgm(out / f"depth_{tag}.pgm", depth_to_gray(pred[s, g, n], d_min, d_max))
                io.write_ppm(out / f"abs_rel_{tag}.ppm", error_colors(pred[s, g, n], gt[s, g, n],
                                                                    d_min, d_max))
    return out
