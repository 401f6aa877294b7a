"""Deterministic synthetic surround-rig scenes, renderer and supervision stand-ins.

World and rig base frames are z-up with x pointing forward; the ground is the
plane z = 0. Scenes are static: only the rig moves between the two frames.
Surfaces are unlit albedo, so a surface point looks identical from every
camera and the photometric warping identity holds up to resampling error.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .geometry import Camera, CameraRig, Intrinsics, invert, pixel_rays, project, so3_exp

SKY_COLOR = np.array([0.72, 0.80, 0.93])


# ---------------------------------------------------------------------------
# rig
# ---------------------------------------------------------------------------

def default_rig(height: int = 32, width: int = 48, n_cameras: int = 4, radius: float = 0.5,
                hfov_deg: float = 100.0, mount_height: float = 1.5) -> CameraRig:
    """Cameras at equal yaw steps going clockwise (seen from above), looking outwards."""
    f = (width / 2.0) / np.tan(np.radians(hfov_deg) / 2.0)
    intr = Intrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)
    cams = []
    for n in range(n_cameras):
        psi = -2.0 * np.pi * n / n_cameras
        fwd = np.array([np.cos(psi), np.sin(psi), 0.0])
        right = np.array([np.sin(psi), -np.cos(psi), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        E = np.eye(4)
        E[:3, :3] = np.stack([right, down, fwd], axis=1)
        E[:3, 3] = radius * fwd + np.array([0.0, 0.0, mount_height])
        cams.append(Camera(intr, E))
    return CameraRig(tuple(cams))


# ---------------------------------------------------------------------------
# scene description
# ---------------------------------------------------------------------------

@dataclass
class Primitive:
    kind: str                     # "ground", "wall" or "box"
    params: np.ndarray            # quad: centre, normal, u, v (12); box: min, max (6)
    extent: np.ndarray            # quad half extents (2); unused for boxes
    color: np.ndarray             # base albedo (3)
    contrast: float
    spacing: float                # texture cell size in metres (ground: cells per unit 1/rho)
    tex_seed: int
    distance: float               # distance of the primitive centre from the rig origin


@dataclass
class Scene:
    primitives: list = field(default_factory=list)
    seed: int = 0
    d_max: float = 40.0

    def arrays(self):
        quads = [p for p in self.primitives if p.kind != "box"]
        boxes = [p for p in self.primitives if p.kind == "box"]
        q = np.array([p.params for p in quads]).reshape(-1, 12)
        qe = np.array([p.extent for p in quads]).reshape(-1, 2)
        b = np.array([p.params for p in boxes]).reshape(-1, 6)
        return q, qe, b, quads + boxes

    def signature(self) -> tuple:
        return tuple((p.kind, tuple(np.round(p.params, 12)), p.tex_seed) for p in self.primitives)


def _footprint_clearance(lo: np.ndarray, hi: np.ndarray, pts) -> float:
    best = np.inf
    for p in pts:
        dx = max(lo[0] - p[0], 0.0, p[0] - hi[0])
        dy = max(lo[1] - p[1], 0.0, p[1] - hi[1])
        best = min(best, float(np.hypot(dx, dy)))
    return best


def generate_scene(seed: int, d_max: float = 40.0, min_range: float = 2.0,
                   ground_cells: float = 5.0) -> Scene:
    """Ground plane plus 2-7 walls/boxes, every obstacle 2 m clear of the rig path.

    Obstacle centres lie at distances in [min_range, 0.8 * d_max] (log-uniform).
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    far = 0.8 * d_max
    ground = Primitive(
        "ground",
        np.array([0, 0, 0, 0, 0, 1, 1, 0, 0, 0, 1, 0], dtype=np.float64),
        np.array([far, far]),
        np.array([0.55, 0.5, 0.45]) * rng.uniform(0.8, 1.2),
        float(rng.uniform(0.5, 0.8)), ground_cells, int(rng.integers(0, 2 ** 31)), 0.0)
    prims = [ground]
    n_obstacles = int(rng.integers(2, 8))
    path = [(0.0, 0.0), (1.0, 0.0)]
    while len(prims) < n_obstacles + 1:
        phi = rng.uniform(-np.pi, np.pi)
        rho = float(np.exp(rng.uniform(np.log(min_range + 1.5), np.log(far))))
        cxy = rho * np.array([np.cos(phi), np.sin(phi)])
        color = rng.uniform(0.15, 0.9, size=3)
        contrast = float(rng.uniform(0.5, 0.9))
        tex_seed = int(rng.integers(0, 2 ** 31))
        spacing = 0.3 * rho
        if rng.uniform() < 0.5:
            half = rng.uniform(0.5, 0.5 + 0.08 * rho, size=2)
            height = rng.uniform(1.0, 2.0 + 0.1 * rho)
            lo = np.array([cxy[0] - half[0], cxy[1] - half[1], 0.0])
            hi = np.array([cxy[0] + half[0], cxy[1] + half[1], height])
            if _footprint_clearance(lo, hi, path) < min_range:
                continue
            prims.append(Primitive("box", np.concatenate([lo, hi]), np.zeros(2), color,
                                   contrast, spacing, tex_seed, rho))
        else:
            half_w = rng.uniform(1.5, 1.5 + 0.15 * rho)
            height = rng.uniform(2.0, 3.0 + 0.1 * rho)
            normal = np.array([-np.cos(phi), -np.sin(phi), 0.0])
            u = np.array([-np.sin(phi), np.cos(phi), 0.0])
            ends = [cxy + half_w * u[:2], cxy - half_w * u[:2]]
            lo = np.minimum(*ends)
            hi = np.maximum(*ends)
            if _footprint_clearance(np.r_[lo, 0], np.r_[hi, 0], path) < min_range:
                continue
            params = np.concatenate([[cxy[0], cxy[1], height / 2], normal, u, [0.0, 0.0, 1.0]])
            prims.append(Primitive("wall", params, np.array([half_w, height / 2]), color,
                                   contrast, spacing, tex_seed, rho))
    return Scene(prims, int(seed), float(d_max))


# ---------------------------------------------------------------------------
# procedural texture
# ---------------------------------------------------------------------------

def _hash01(i: np.ndarray, j: np.ndarray, seed: int) -> np.ndarray:
    m = np.uint64(0xFFFFFFFF)
    h = (i.astype(np.int64).view(np.uint64) * np.uint64(73856093)) & m
    h ^= (j.astype(np.int64).view(np.uint64) * np.uint64(19349663)) & m
    h ^= np.uint64((seed * 83492791) & 0xFFFFFFFF)
    h = (h ^ (h >> np.uint64(13))) * np.uint64(0x5BD1E995) & m
    h = (h ^ (h >> np.uint64(15))) * np.uint64(0x27D4EB2D) & m
    h ^= h >> np.uint64(16)
    return (h & np.uint64(0xFFFFFF)).astype(np.float64) / float(1 << 24)


def value_noise(s: np.ndarray, t: np.ndarray, seed: int, period_t: int | None = None) -> np.ndarray:
    """Quintic-interpolated lattice noise in [0, 1]; optionally periodic in t."""
    i0 = np.floor(s)
    j0 = np.floor(t)
    fs = s - i0
    ft = t - j0
    us = fs * fs * fs * (fs * (fs * 6 - 15) + 10)
    ut = ft * ft * ft * (ft * (ft * 6 - 15) + 10)
    i0 = i0.astype(np.int64)
    j0 = j0.astype(np.int64)
    j1 = j0 + 1
    if period_t:
        j0 = np.mod(j0, period_t)
        j1 = np.mod(j1, period_t)
    v00 = _hash01(i0, j0, seed)
    v10 = _hash01(i0 + 1, j0, seed)
    v01 = _hash01(i0, j1, seed)
    v11 = _hash01(i0 + 1, j1, seed)
    return (v00 * (1 - us) * (1 - ut) + v10 * us * (1 - ut)
            + v01 * (1 - us) * ut + v11 * us * ut)


def fbm(s, t, seed, octaves: int = 2, period_t: int | None = None) -> np.ndarray:
    total = np.zeros_like(s)
    amp, norm = 1.0, 0.0
    for o in range(octaves):
        k = 2 ** o
        total += amp * value_noise(s * k, t * k, seed + 7919 * o,
                                   None if period_t is None else period_t * k)
        norm += amp
        amp *= 0.5
    return total / norm


GROUND_AZIMUTH_CELLS = 24


def shade(prim: Primitive, face: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Albedo (R, 3) of hit points ``pts`` on one primitive."""
    if prim.kind == "ground":
        rho = np.maximum(np.hypot(pts[:, 0], pts[:, 1]), 1e-6)
        s = prim.spacing / rho
        t = (np.arctan2(pts[:, 1], pts[:, 0]) + np.pi) / (2 * np.pi) * GROUND_AZIMUTH_CELLS
        n = fbm(s, t, prim.tex_seed, period_t=GROUND_AZIMUTH_CELLS)
    elif prim.kind == "wall":
        c, u, v = prim.params[0:3], prim.params[6:9], prim.params[9:12]
        d = pts - c
        n = fbm(d @ u / prim.spacing, d @ v / prim.spacing, prim.tex_seed)
    else:
        axes = np.array([[1, 2], [0, 2], [0, 1]])[face]
        s = np.take_along_axis(pts, axes[:, :1], axis=1)[:, 0]
        t = np.take_along_axis(pts, axes[:, 1:], axis=1)[:, 0]
        n = fbm(s / prim.spacing, t / prim.spacing, prim.tex_seed + 101 * face)
    gain = 1.0 - prim.contrast / 2 + prim.contrast * n
    return np.clip(prim.color[None, :] * gain[:, None], 0.0, 1.0)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

@dataclass
class CameraRender:
    image: np.ndarray      # (3, H, W) float64 in [0, 1]
    depth: np.ndarray      # (H, W) z-depth in metres, inf where nothing is hit
    points: np.ndarray     # (H, W, 3) world hit points (zeros on misses)
    prim: np.ndarray       # (H, W) primitive index, -1 on misses


def cast(scene: Scene, cam_to_world: np.ndarray, dirs_cam: np.ndarray):
    """Ray-cast camera-frame directions; the hit parameter is z-depth when dir_z = 1."""
    q, qe, b, order = scene.arrays()
    R = cam_to_world[:3, :3]
    origin = cam_to_world[:3, 3]
    dirs = dirs_cam.reshape(3, -1).T @ R.T
    return _accel.raycast(origin, dirs, q, qe, b), order


def render_camera(scene: Scene, intr: Intrinsics, cam_to_world: np.ndarray) -> CameraRender:
    h, w = intr.height, intr.width
    (t, prim, face, pts), order = cast(scene, cam_to_world, pixel_rays(intr))
    img = np.tile(SKY_COLOR[:, None], (1, h * w)).T.copy()
    for k, p in enumerate(order):
        sel = prim == k
        if sel.any():
            img[sel] = shade(p, face[sel], pts[sel])
    return CameraRender(img.T.reshape(3, h, w), t.reshape(h, w), pts.reshape(h, w, 3),
                        prim.reshape(h, w))


def render(scene: Scene, rig: CameraRig, vehicle_pose: np.ndarray) -> list[CameraRender]:
    """Render every rig camera with the rig base placed at ``vehicle_pose`` (base -> world)."""
    V = np.asarray(vehicle_pose, dtype=np.float64)
    return [render_camera(scene, c.intrinsics, V @ c.extrinsic) for c in rig.cameras]


# ---------------------------------------------------------------------------
# supervision stand-ins
# ---------------------------------------------------------------------------

@dataclass
class SparseDepthTarget:
    values: np.ndarray      # (H, W) inverse depth, 0 where not sampled
    valid_mask: np.ndarray  # (H, W) bool
    d_min: float
    d_max: float

    @property
    def valid_fraction(self) -> float:
        return float(self.valid_mask.mean())


def sample_sparse(gt_depth: np.ndarray, fraction: float, seed, d_min: float, d_max: float
                  ) -> SparseDepthTarget:
    """Uniform random subset of the pixels that hit geometry (LiDAR stand-in).

    Sample count is floor(fraction * n_hits), at least one.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    gt = np.asarray(gt_depth, dtype=np.float64)
    hits = np.flatnonzero(np.isfinite(gt.ravel()))
    rng = np.random.default_rng(seed)
    mask = np.zeros(gt.size, dtype=bool)
    if hits.size:
        count = max(int(np.floor(fraction * hits.size)), 1)
        mask[rng.choice(hits, size=count, replace=False)] = True
    mask = mask.reshape(gt.shape)
    values = np.zeros(gt.shape)
    values[mask] = 1.0 / np.clip(gt[mask], d_min, d_max)
    return SparseDepthTarget(values, mask, float(d_min), float(d_max))


def make_world_model_depth(gt_depth: np.ndarray, seed, d_min: float, d_max: float,
                           scale: float | None = None, offset: float | None = None) -> np.ndarray:
    """Scale-ambiguous inverse depth a * (1 / depth) + b with a in [0.5, 2], b in [0, 0.1 * range]."""
    rng = np.random.default_rng(seed)
    span = 1.0 / d_min - 1.0 / d_max
    a = rng.uniform(0.5, 2.0) if scale is None else scale
    b = rng.uniform(0.0, 0.1 * span) if offset is None else offset
    inv = 1.0 / np.clip(np.asarray(gt_depth, dtype=np.float64), d_min, d_max)
    return a * inv + b


# ---------------------------------------------------------------------------
# frame sets
# ---------------------------------------------------------------------------

def sample_motion(rng: np.random.Generator) -> np.ndarray:
    """Forward 0.3-1.0 m plus yaw within +-3 degrees; maps tgt base to src base."""
    fwd = rng.uniform(0.3, 1.0)
    yaw = np.radians(rng.uniform(-3.0, 3.0))
    M = np.eye(4)
    M[:3, :3] = so3_exp(np.array([0.0, 0.0, yaw]))
    M[:3, 3] = [fwd, 0.0, 0.0]
    return M


@dataclass
class RenderedFrameSet:
    images: np.ndarray       # (G, N, 3, H, W) float32, 16-bit quantised
    gt_depth: np.ndarray     # (G, N, H, W) float64 metres (inf = sky)
    gt_pose: np.ndarray      # (4, 4) tgt base -> src base
    sparse: list             # G x N SparseDepthTarget
    masks: np.ndarray        # (G, N, H, W) uint8, nonzero = supervise
    wm_depth: np.ndarray     # (G, N, H, W) float64 inverse depth
    rig: CameraRig
    seed: int
    d_min: float
    d_max: float

    @property
    def shape(self) -> tuple:
        return self.images.shape

    def sparse_arrays(self):
        vals = np.stack([[s.values for s in row] for row in self.sparse])
        mask = np.stack([[s.valid_mask for s in row] for row in self.sparse])
        return vals, mask


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to 16-bit levels so the on-disk copy is bit-identical after reload."""
    q = np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(np.uint16)
    return dequantize(q)


def dequantize(q: np.ndarray) -> np.ndarray:
    return (q.astype(np.float64) / 65535.0).astype(np.float32)


def textured_fraction(render: CameraRender) -> float:
    return float(np.isfinite(render.depth).mean())


def generate_frameset(seed: int, rig: CameraRig | None = None, d_min: float = 1.0,
                      d_max: float = 40.0, sparse_fraction: float = 0.05,
                      min_textured: float = 0.3) -> RenderedFrameSet:
    """Scene, motion, renders of both frames, sparse targets, masks and world-model depth."""
    rig = rig or default_rig()
    ss = np.random.SeedSequence([int(seed), 2])
    motion_seed, sparse_seed, wm_seed = ss.spawn(3)
    attempt = 0
    while True:
        scene = generate_scene(int(seed) * 1000 + attempt, d_max=d_max)
        V_src = np.eye(4)
        V_tgt = sample_motion(np.random.default_rng(motion_seed))
        frames = [render(scene, rig, V_src), render(scene, rig, V_tgt)]
        if min(textured_fraction(r) for f in frames for r in f) >= min_textured:
            break
        attempt += 1
    G, N = 2, len(rig)
    images = np.stack([[quantize(r.image) for r in f] for f in frames])
    depth = np.stack([[r.depth for r in f] for f in frames])
    masks = np.where(np.isfinite(depth), 255, 0).astype(np.uint8)
    sp_rngs = np.random.SeedSequence(sparse_seed.entropy).spawn(G * N)
    wm_rngs = np.random.SeedSequence(wm_seed.entropy).spawn(G * N)
    sparse = [[sample_sparse(depth[g, n], sparse_fraction, sp_rngs[g * N + n], d_min, d_max)
               for n in range(N)] for g in range(G)]
    wm = np.stack([[make_world_model_depth(depth[g, n], wm_rngs[g * N + n], d_min, d_max)
                    for n in range(N)] for g in range(G)])
    return RenderedFrameSet(images, depth, V_src_inv_tgt(V_src, V_tgt), sparse, masks, wm, rig,
                            int(seed), float(d_min), float(d_max))


def V_src_inv_tgt(V_src: np.ndarray, V_tgt: np.ndarray) -> np.ndarray:
    return invert(V_src) @ V_tgt


def analytic_correspondences(scene: Scene, rig: CameraRig, V_src: np.ndarray, V_tgt: np.ndarray,
                             n: int):
    """Where each target pixel of camera n lands in the source image of camera n.

    Returns (coords (H, W, 2), hit mask, visible mask) where ``visible`` also
    requires the point to be unoccluded and in view in the source frame.
    """
    cam = rig.cameras[n]
    intr = cam.intrinsics
    tgt = render_camera(scene, intr, V_tgt @ cam.extrinsic)
    hit = np.isfinite(tgt.depth)
    src_pose = V_src @ cam.extrinsic
    world_to_src = invert(src_pose)
    pw = tgt.points.reshape(-1, 3)
    pc = (world_to_src[:3, :3] @ pw.T) + world_to_src[:3, 3:4]
    coords, front = project(pc, intr)
    coords = coords.reshape(intr.height, intr.width, 2)
    front = front.reshape(intr.height, intr.width) & hit
    inb = ((coords[..., 0] >= 0) & (coords[..., 0] <= intr.width - 1)
           & (coords[..., 1] >= 0) & (coords[..., 1] <= intr.height - 1))
    # occlusion: re-cast from the source camera towards the point
    dirs = pc / np.where(np.abs(pc[2]) > 1e-12, pc[2], 1.0)
    (t, _, _, _), _ = cast(scene, src_pose, dirs)
    z = pc[2]
    unoccluded = (np.abs(t - z) <= 1e-6 * np.maximum(z, 1.0)).reshape(intr.height, intr.width)
    return coords, hit, front & inb & unoccluded
