"""Finite-difference gradient suites at three scopes: primitive, module, end-to-end."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import geometry, losses as L
from ..diffcore import Tensor, finite_diff_check, ops, precision
from ..diffcore.ops import PRIMITIVES
from ..model import AttentionFFN, Encoder, ModelConfig, STST
from ..pose import PoseNet
from ..synthrig import default_rig, generate_frameset

SCOPES = ("primitive", "module", "end-to-end")
TOLERANCE = {"primitive": 1e-4, "module": 1e-4, "end-to-end": 1e-3}


@dataclass
class CheckResult:
    scope: str
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tolerance)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag}  {self.scope:<10} {self.name:<28} rel.err {self.error:.2e} (tol {self.tolerance:.0e})"


def _t(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, Tensor]]:
    """One scalar-valued probe per primitive; each closes over fixed constants."""
    r = lambda *s: rng.normal(size=s)
    w3 = r(3, 4)
    wv = r(2, 3)
    cw = r(4, 3, 3, 3)
    cb = r(4)
    pos = rng.uniform(0.5, 2.0, (3, 4))
    img = r(1, 2, 5, 6)
    crd = np.stack([rng.uniform(0.2, 4.8, (1, 3, 4)), rng.uniform(0.2, 3.8, (1, 3, 4))], -1)
    mask = rng.random((3, 4)) > 0.5
    wsum = r(3, 4)
    other = r(3, 4)

    fixed: dict = {}

    def red(y):
        # fixed random cotangent per output shape, drawn on first use
        if y.shape not in fixed:
            fixed[y.shape] = rng.normal(size=y.shape)
        return ops.sum(ops.mul(y, fixed[y.shape]))

    cases = {
        "add": (lambda x: red(ops.add(x, other)), _t(r(3, 4))),
        "sub": (lambda x: red(ops.sub(other, x)), _t(r(3, 4))),
        "mul": (lambda x: red(ops.mul(x, other)), _t(r(3, 4))),
        "div": (lambda x: red(ops.div(other, x)), _t(pos)),
        "scale": (lambda x: red(ops.scale(x, 2.5)), _t(r(3, 4))),
        "neg": (lambda x: red(ops.neg(x)), _t(r(3, 4))),
        "square": (lambda x: red(ops.square(x)), _t(r(3, 4))),
        "sqrt": (lambda x: red(ops.sqrt(x)), _t(pos)),
        "exp": (lambda x: red(ops.exp(x)), _t(r(3, 4))),
        "log": (lambda x: red(ops.log(x)), _t(pos)),
        "abs": (lambda x: red(ops.abs(x)), _t(np.where(rng.random((3, 4)) > 0.5, 1, -1) * pos)),
        "relu": (lambda x: red(ops.relu(x)), _t(np.where(rng.random((3, 4)) > 0.5, 1, -1) * pos)),
        "sigmoid": (lambda x: red(ops.sigmoid(x)), _t(r(3, 4))),
        "where": (lambda x: red(ops.where(mask, x, ops.square(x))), _t(r(3, 4))),
        "sum": (lambda x: ops.sum(ops.mul(ops.sum(x, axis=1), np.arange(1.0, 4.0))), _t(r(3, 4))),
        "mean": (lambda x: red(ops.mean(x, axis=0, keepdims=True)), _t(r(3, 4))),
        "reshape": (lambda x: red(ops.reshape(x, (4, 3))), _t(r(3, 4))),
        "transpose": (lambda x: red(ops.transpose(x, (1, 0))), _t(r(3, 4))),
        "index": (lambda x: red(ops.index(x, (np.array([0, 2, 2]), np.array([1, 3, 3])))), _t(r(3, 4))),
        "concat": (lambda x: red(ops.concat([x, ops.square(x)], axis=1)), _t(r(3, 4))),
        "broadcast_to": (lambda x: red(ops.broadcast_to(x, (2, 3, 4))), _t(r(3, 4))),
        "pad2d": (lambda x: red(ops.pad2d(x, (1, 2, 2, 1), "reflect")), _t(r(2, 4, 5))),
        "matmul": (lambda x: red(ops.matmul(x, w3.T)), _t(r(2, 4))),
        "softmax": (lambda x: red(ops.softmax(x, axis=-1)), _t(r(3, 4))),
        "layer_norm": (lambda x: red(ops.layer_norm(x, wsum[0], wsum[1])), _t(r(3, 4))),
        "conv2d": (lambda x: red(ops.conv2d(x, cw, cb, stride=2, padding=1)), _t(r(1, 3, 6, 7))),
        "box_filter": (lambda x: red(ops.box_filter(x, 3)), _t(r(1, 2, 5, 6))),
        "resample": (lambda x: red(ops.resample(x, 7, 3, "bilinear")), _t(r(1, 2, 5, 6))),
        "grid_sample": (lambda x: red(ops.grid_sample(x, crd)[0]), _t(img)),
    }
    # second-input probes where the first one does not cover the rule
    cases["matmul:right"] = (lambda x: red(ops.matmul(wv, x)), _t(r(3, 4)))
    cases["conv2d:weight"] = (lambda x: red(ops.conv2d(img[0], x, padding=1)), _t(r(3, 2, 3, 3)))
    cases["grid_sample:coords"] = (lambda x: red(ops.grid_sample(img, x)[0]), _t(crd))
    cases["layer_norm:gain"] = (lambda x: red(ops.layer_norm(other, x, None)), _t(r(4)))
    missing = set(PRIMITIVES) - set(cases)
    if missing:
        raise RuntimeError(f"no gradient probe for primitives: {sorted(missing)}")
    return cases


def check_primitives(seed: int = 0) -> list[CheckResult]:
    with precision(64):
        rng = np.random.default_rng(seed)
        out = []
        for name, (f, x) in primitive_cases(rng).items():
            out.append(CheckResult("primitive", name, finite_diff_check(f, x, step=1e-6),
                                   TOLERANCE["primitive"]))
        return out


# ---------------------------------------------------------------------------
# composite modules
# ---------------------------------------------------------------------------

def _weighted(y, seed=3):
    w = np.random.default_rng(seed).normal(size=y.shape)
    return ops.sum(ops.mul(y, w))


def _param_indices(t: Tensor, rng, k: int = 6):
    return rng.choice(t.data.size, size=min(k, t.data.size), replace=False)


def check_modules(seed: int = 0) -> list[CheckResult]:
    tol = TOLERANCE["module"]
    res = []
    with precision(64):
        rng = np.random.default_rng(seed)
        # encoder on an 8x12 image: input and first-layer weights
        enc = Encoder((4, 6), rng)
        img = rng.uniform(0, 1, (1, 3, 8, 12))
        x = _t(img)
        res.append(CheckResult("module", "encoder:input",
                               finite_diff_check(lambda v: _weighted(enc(v)[-1]), x, 1e-6), tol))
        w = enc.convs[0].weight
        res.append(CheckResult("module", "encoder:weight",
                               finite_diff_check(lambda v: _weighted(enc(img)[-1]), w, 1e-6,
                                                 indices=_param_indices(w, rng)), tol))
        # one STST layer on a (G=2, N=2, C=4, 6x8) input
        cfg = ModelConfig(height=48, width=64, n_cameras=2, channels=(4,), c_bar=8, h_bar=3,
                          w_bar=4, proj_channels=4, ffn_channels=8)
        blk = STST(4, cfg, rng)
        xs = _t(rng.normal(size=(4, 4, 6, 8)))
        res.append(CheckResult("module", "stst_layer:input",
                               finite_diff_check(lambda v: _weighted(blk(v)), xs, 1e-6), tol))
        res.append(CheckResult("module", "stst_layer:qkv",
                               finite_diff_check(lambda v: _weighted(blk(xs.data)), blk.qkv.weight,
                                                 1e-6, indices=_param_indices(blk.qkv.weight, rng)),
                               tol))
        # concat + layer norm + FFN
        ffn = AttentionFFN(8, 6, 5, rng)
        a_g = rng.normal(size=(2, 2, 7, 4))
        res.append(CheckResult("module", "attention_ffn",
                               finite_diff_check(lambda v: _weighted(ffn(v, a_g)),
                                                 _t(rng.normal(size=(2, 2, 7, 4))), 1e-6), tol))
        # fuse -> decode through the pose network
        pcfg = ModelConfig(height=16, width=24, n_cameras=2, channels=(4, 6), pose_channels=3)
        pnet = PoseNet(pcfg)
        sts = [rng.normal(size=(4, 4, 8, 12)), rng.normal(size=(4, 6, 4, 6))]
        dec = [rng.normal(size=(4, 4, 8, 12)), rng.normal(size=(4, 6, 4, 6))]
        res.append(CheckResult("module", "fuse_decode",
                               finite_diff_check(lambda v: _weighted(pnet([v, sts[1]], dec)),
                                                 _t(sts[0]), 1e-6), tol))
        # depth + pose -> warp -> photometric loss
        rig = default_rig(16, 24, 2)
        imgs = rng.uniform(0, 1, (2, 3, 16, 24))
        tgt = rng.uniform(0, 1, (2, 3, 16, 24))
        pvec = np.array([0.01, -0.02, 0.015, 0.05, -0.02, 0.3])
        inv = _t(rng.uniform(0.05, 0.3, (2, 1, 8, 12)))

        def rep(d, p=pvec):
            P = geometry.per_camera_poses(geometry.pose_matrix(p), rig.extrinsics)
            w = L.warp_pyramid(imgs, [d], rig, P, None, None)
            return L.reprojection_loss(w, tgt)

        res.append(CheckResult("module", "reprojection:depth",
                               finite_diff_check(lambda v: rep(v), inv, 1e-5), tol))
        res.append(CheckResult("module", "reprojection:pose",
                               finite_diff_check(lambda v: rep(inv.data, v), _t(pvec), 1e-6), tol))
    return res


# ---------------------------------------------------------------------------
# end to end
# ---------------------------------------------------------------------------

def _directional_check(f, params, direction, step: float) -> float:
    """Relative error of the analytic vs central-difference directional derivative."""
    from ..diffcore import GradientTape
    for p in params:
        p.grad = None
    with GradientTape() as tape:
        y = f()
    tape.backward(y)
    analytic = sum(float(np.sum(p.grad * d)) for p, d in zip(params, direction) if p.grad is not None)
    tape.reset()
    base = [p.data.copy() for p in params]
    vals = []
    for sgn in (1.0, -1.0):
        for p, b, d in zip(params, base, direction):
            p.data = b + sgn * step * d
        vals.append(float(f().data))
    for p, b in zip(params, base):
        p.data = b
    numeric = (vals[0] - vals[1]) / (2 * step)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


GROUPS = ("depth.encoder", "depth.adapters", "depth.stst", "depth.decoder", "pose", "all")


def check_end_to_end(seed: int = 0, step: float = 1e-5) -> list[CheckResult]:
    """Total-loss gradient on a 2x4x3x16x24 micro-batch with frozen balancing factors.

    Elementwise probes of single weights drown in round-off (many gradients
    are ~1e-9), so the check compares directional derivatives along a random
    unit direction restricted to each parameter group, and one over all.
    """
    from .config import ExperimentConfig
    from .data import Batch
    from .train import Pipeline

    tol = TOLERANCE["end-to-end"]
    with precision(64):
        cfg = ExperimentConfig(height=16, width=24, levels=3, seed=seed)
        rig = default_rig(16, 24)
        fs = generate_frameset(seed, rig, d_min=cfg.d_min, d_max=cfg.d_max)
        batch = Batch.from_frameset(fs)
        batch.images = batch.images.astype(np.float64)
        batch.wm = batch.wm.astype(np.float64)
        pipe = Pipeline(cfg, rig)
        _, bd, _, _ = pipe.objective(batch)
        frozen = dict(bd.factors)

        def f():
            return pipe.objective(batch, factors=frozen)[0]

        rng = np.random.default_rng(seed)
        named = list(pipe.depth.named_parameters("depth.")) + list(pipe.pose.named_parameters("pose."))
        res = []
        for group in GROUPS:
            sel = [t for n, t in named if group == "all" or n.startswith(group + ".")]
            direction = [rng.normal(size=t.shape) for t in sel]
            norm = np.sqrt(sum(float(np.sum(d * d)) for d in direction))
            direction = [d / norm for d in direction]
            res.append(CheckResult("end-to-end", f"direction:{group}",
                                   _directional_check(f, sel, direction, step), tol))
        return res


def run(scopes, seed: int = 0, log=None) -> list[CheckResult]:
    scopes = list(scopes)
    if not scopes:
        raise ValueError(f"empty gradcheck scope list; choose from {', '.join(SCOPES)}")
    bad = [s for s in scopes if s not in SCOPES]
    if bad:
        raise ValueError(f"unknown gradcheck scope(s) {bad}; choose from {', '.join(SCOPES)}")
    runners = {"primitive": check_primitives, "module": check_modules,
               "end-to-end": check_end_to_end}
    out = []
    for s in scopes:
        t0 = time.perf_counter()
        part = runners[s](seed)
        out.extend(part)
        if log is not None:
            for r in part:
                log(r.line())
            log(f"{s}: {sum(r.passed for r in part)}/{len(part)} passed in "
                f"{time.perf_counter() - t0:.1f}s")
    return out
