"""Training loop, evaluation and run reports."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import losses as L
from ..diffcore import GradientTape
from ..diffcore.tensor import Tensor
from ..errors import DegenerateBatch, NumericalError
from ..model import DepthNet, load_into, read_checkpoint, save_checkpoint
from ..pose import PoseNet, distribute_pose
from .config import ExperimentConfig
from .data import Batch, frameset_seeds, generate, make_rig
from .optim import learning_rate, make_optimizer


class TrainingDiverged(NumericalError):
    def __init__(self, step: int, message: str, breakdown: dict | None = None):
        super().__init__(f"step {step}: {message}")
        self.step = step
        self.breakdown = breakdown


# ---------------------------------------------------------------------------
# model + objective
# ---------------------------------------------------------------------------

class Pipeline:
    """Depth network, pose network and the configured objective."""

    def __init__(self, cfg: ExperimentConfig, rig):
        self.cfg = cfg
        self.rig = rig
        mcfg = cfg.model_config(len(rig))
        self.depth = DepthNet(mcfg)
        self.pose = PoseNet(mcfg)

    @property
    def modules(self) -> dict:
        return {"depth": self.depth, "pose": self.pose}

    def parameters(self) -> list[Tensor]:
        return self.depth.parameters() + self.pose.parameters()

    def zero_grad(self) -> None:
        self.depth.zero_grad()
        self.pose.zero_grad()

    def predict(self, images):
        """Inverse depth (G*N, 1, H, W) and the 6-vector pose."""
        out = self.depth(images)
        return out, self.pose(out.sts_feats, out.dec_feats)

    def objective(self, batch: Batch, out=None, pose_vec=None, factors=None):
        cfg = self.cfg
        N = len(self.rig)
        if out is None:
            out, pose_vec = self.predict(batch.images)
        K = cfg.loss_levels
        G = batch.images.shape[0]
        all_pred = L.pyramid(out.inv_depth, K)
        parts = {}
        if cfg.loss_d:
            parts["l_d"] = L.sparse_depth_loss(
                all_pred, batch.sparse_values.reshape((G * N,) + batch.sparse_values.shape[2:]),
                batch.sparse_valid.reshape((G * N,) + batch.sparse_valid.shape[2:]), cfg.d_max)
        if cfg.loss_curv:
            parts["l_curv"] = L.curvature_loss(
                all_pred, batch.wm.reshape((G * N,) + batch.wm.shape[2:]), cfg.curvature_steps,
                cfg.wm_align)
        if cfg.loss_rep or cfg.loss_seg:
            tgt_pred = [p[N:2 * N] for p in all_pred]
            Pn = distribute_pose(pose_vec, self.rig)
            warps = L.warp_pyramid(batch.images[0], tgt_pred, self.rig, Pn, batch.masks[1],
                                   batch.masks[0], cfg.warp_source)
            if cfg.loss_rep:
                parts["l_rep"] = L.reprojection_loss(warps, batch.images[1], cfg.lambda_l1)
            if cfg.loss_seg:
                parts["l_seg"] = L.semantic_loss(warps, batch.images[1], self.depth.extractor)
        total, bd = L.total_loss(parts.get("l_d"), parts.get("l_curv"), parts.get("l_rep"),
                                 parts.get("l_seg"), cfg.weights, factors)
        return total, bd, out, pose_vec

    # -- checkpoints -----------------------------------------------------
    def save(self, path, step: int) -> None:
        save_checkpoint(path, self.modules, {"config": self.cfg.to_dict(), "step": step,
                                             "rig": self.rig.to_dict()})

    def load(self, path) -> dict:
        tensors, meta = read_checkpoint(path)
        load_into(self.modules, tensors)
        return meta


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class RunReport:
    config: dict
    config_hash: str
    history: list = field(default_factory=list)
    per_camera: list = field(default_factory=list)
    average: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    skipped_steps: list = field(default_factory=list)

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {"config": self.config, "config_hash": self.config_hash, "history": self.history,
             "per_camera": self.per_camera, "average": self.average,
             "skipped_steps": self.skipped_steps}
        if include_timing:
            d["wall_clock"] = self.wall_clock
        return d

    def write(self, folder) -> Path:
        """report.json is deterministic; timing.json carries the wall clock."""
        folder = Path(folder)
        folder.mkdir(parents=True, exist_ok=True)
        (folder / "report.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        (folder / "timing.json").write_text(json.dumps({"wall_clock": self.wall_clock}))
        return folder / "report.json"

    def table(self) -> str:
        names = L.METRIC_NAMES
        lines = ["camera  " + "  ".join(f"{n:>8}" for n in names)]
        for i, row in enumerate(self.per_camera):
            lines.append(f"{i:<6}  " + "  ".join(f"{row[n]:8.4f}" for n in names))
        if self.average:
            lines.append("avg     " + "  ".join(f"{self.average[n]:8.4f}" for n in names))
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict_depth(pipe: Pipeline, framesets) -> np.ndarray:
    """Metric depth predictions (S, G, N, H, W) for every frame-set."""
    preds = []
    N = len(pipe.rig)
    for fs in framesets:
        out = pipe.depth(fs.images.astype(np.float32))
        inv = out.inv_depth.data.astype(np.float64)
        preds.append((1.0 / inv).reshape(fs.images.shape[0], N, *inv.shape[-2:]))
    return np.stack(preds) if preds else np.zeros((0,))


def camera_metrics(pred: np.ndarray, gt: np.ndarray, d_min: float, d_max: float):
    """Per-camera metrics pooled over frame-sets and frames, plus their average."""
    N = pred.shape[2]
    rows = []
    for n in range(N):
        rows.append(L.metrics(pred[:, :, n], gt[:, :, n], d_min, d_max))
    avg = {k: float(np.mean([r[k] for r in rows])) for k in L.METRIC_NAMES}
    return rows, avg


def evaluate(pipe: Pipeline, framesets, out_dir=None) -> tuple[list, dict, np.ndarray]:
    pred = predict_depth(pipe, framesets)
    gt = np.stack([fs.gt_depth for fs in framesets])
    rows, avg = camera_metrics(pred, gt, pipe.cfg.d_min, pipe.cfg.d_max)
    if out_dir is not None:
        from .visual import write_depth_images
        write_depth_images(out_dir, pred, gt, pipe.cfg.d_min, pipe.cfg.d_max,
                           [fs.seed for fs in framesets])
    return rows, avg, pred


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    pipeline: Pipeline
    report: RunReport
    checkpoint: Path | None


def _finite_or_raise(step: int, bd: L.LossBreakdown) -> None:
    for name in ("l_d", "l_curv", "l_rep", "l_seg", "l_total"):
        v = getattr(bd, name)
        if v is not None and not np.isfinite(v):
            raise TrainingDiverged(step, f"{name} is not finite", bd.to_dict())


def train(cfg: ExperimentConfig, out_dir=None, train_sets=None, val_sets=None,
          log=None, log_every: int = 100) -> TrainResult:
    """Run ``cfg.steps`` optimisation steps and evaluate on the validation sets."""
    t0 = time.perf_counter()
    rig = make_rig(cfg)
    if train_sets is None:
        train_sets = generate(frameset_seeds(cfg.data_seed, cfg.train_sets), rig, cfg)
    if val_sets is None:
        val_sets = generate(frameset_seeds(cfg.val_seed, cfg.val_sets), rig, cfg)
    batches = [Batch.from_frameset(fs) for fs in train_sets]
    pipe = Pipeline(cfg, rig)
    params = pipe.parameters()
    opt = make_optimizer(cfg.optimizer, params, cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 17])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        pipe.save(out / "checkpoint_000000.ckpt", 0)
    report = RunReport(cfg.to_dict(), cfg.digest())
    order: list[int] = []
    for step in range(cfg.steps):
        if not order:
            order = list(rng.permutation(len(batches)))
        batch = batches[order.pop(0)]
        lr = learning_rate(step, cfg.steps, cfg.learning_rate, cfg.warmup_fraction)
        with GradientTape() as tape:
            try:
                total, bd, _, _ = pipe.objective(batch)
            except DegenerateBatch:
                report.skipped_steps.append(step)
                continue
            except NumericalError as exc:
                raise TrainingDiverged(step, str(exc)) from exc
            _finite_or_raise(step, bd)
            tape.backward(total)
        opt.step(lr)
        tape.reset()
        entry = bd.to_dict()
        entry["step"] = step
        entry["lr"] = lr
        report.history.append(entry)
        if log is not None and (step % log_every == 0 or step == cfg.steps - 1):
            log(f"step {step:5d}  lr {lr:.2e}  total {bd.l_total:.5f}  " +
                "  ".join(f"{k} {v:.5f}" for k, v in bd.to_dict().items()
                          if k.startswith("l_") and k != "l_total" and v is not None))
        if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            pipe.save(out / f"checkpoint_{step + 1:06d}.ckpt", step + 1)
    ckpt = None
    if out is not None:
        ckpt = out / "final.ckpt"
        pipe.save(ckpt, cfg.steps)
    if val_sets:
        rows, avg, _ = evaluate(pipe, val_sets, out / "eval" if out is not None else None)
        report.per_camera, report.average = rows, avg
    report.wall_clock = time.perf_counter() - t0
    if out is not None:
        report.write(out)
    return TrainResult(pipe, report, ckpt)


def load_pipeline(checkpoint) -> Pipeline:
    """Rebuild a pipeline from a checkpoint's embedded configuration."""
    from ..geometry import CameraRig
    from .config import from_dict
    tensors, meta = read_checkpoint(checkpoint)
    cfg = from_dict(meta["config"])
    pipe = Pipeline(cfg, CameraRig.from_dict(meta["rig"]))
    load_into(pipe.modules, tensors)
    return pipe
