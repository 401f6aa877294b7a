"""Frame-set datasets: on-the-fly generation, on-disk layout and manifests."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import io
from ..geometry import CameraRig
from ..synthrig import RenderedFrameSet, default_rig, generate_frameset

MANIFEST = "manifest.json"


@dataclass
class Batch:
    """Arrays for one training step (one frame-set, both frames, all cameras)."""
    images: np.ndarray          # (2, N, 3, H, W) float32
    masks: np.ndarray           # (2, N, H, W) uint8
    sparse_values: np.ndarray   # (2, N, H, W)
    sparse_valid: np.ndarray    # (2, N, H, W) bool
    wm: np.ndarray              # (2, N, 1, H, W) float32 inverse depth
    gt_depth: np.ndarray        # (2, N, H, W) metres
    gt_pose: np.ndarray         # (4, 4)
    seed: int

    @classmethod
    def from_frameset(cls, fs: RenderedFrameSet) -> "Batch":
        vals, valid = fs.sparse_arrays()
        return cls(fs.images.astype(np.float32), fs.masks, vals, valid,
                   fs.wm_depth[:, :, None].astype(np.float32), fs.gt_depth, fs.gt_pose, fs.seed)


def make_rig(cfg) -> CameraRig:
    if cfg.rig_path:
        rig = CameraRig.load(cfg.rig_path)
        intr = rig.cameras[0].intrinsics
        if (intr.height, intr.width) != (cfg.height, cfg.width):
            from ..errors import ConfigError
            raise ConfigError(f"rig image extents {intr.height}x{intr.width} differ from the "
                              f"configured {cfg.height}x{cfg.width}")
        return rig
    return default_rig(cfg.height, cfg.width)


def frameset_seeds(first: int, count: int) -> list[int]:
    return list(range(first, first + count))


def generate(seeds, rig: CameraRig, cfg) -> list[RenderedFrameSet]:
    return [generate_frameset(s, rig, d_min=cfg.d_min, d_max=cfg.d_max,
                              sparse_fraction=cfg.sparse_fraction) for s in seeds]


def synth(out_dir, seeds, rig: CameraRig, d_min: float = 1.0, d_max: float = 40.0,
          sparse_fraction: float = 0.05) -> Path:
    """Write frame-sets ``fs_<seed>/`` plus a manifest recording how to regenerate them."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for s in seeds:
        fs = generate_frameset(int(s), rig, d_min=d_min, d_max=d_max, sparse_fraction=sparse_fraction)
        name = f"fs_{int(s):06d}"
        io.save_frameset(fs, out / name)
        names.append(name)
    manifest = {"schema_version": 1, "seeds": [int(s) for s in seeds], "folders": names,
                "d_min": d_min, "d_max": d_max, "sparse_fraction": sparse_fraction,
                "rig": rig.to_dict()}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def regenerate(manifest_path, out_dir) -> Path:
    m = json.loads(Path(manifest_path).read_text())
    return synth(out_dir, m["seeds"], CameraRig.from_dict(m["rig"]), m["d_min"], m["d_max"],
                 m["sparse_fraction"])


def load_dataset(folder) -> list[RenderedFrameSet]:
    folder = Path(folder)
    m = json.loads((folder / MANIFEST).read_text())
    return [io.load_frameset(folder / name) for name in m["folders"]]
