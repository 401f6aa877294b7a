"""SE(3) algebra, pinhole projection and rig-level coordinate conversions.

Conventions
-----------
* Pixel coordinates: integer values address pixel centres, so an image of
  width W spans [-0.5, W - 0.5] and its sample points are 0..W-1.
* Camera frame: x right, y down, z forward; "depth" is the z coordinate.
* An extrinsic ``E_n`` maps camera-n coordinates into the rig base frame.
* The global pose ``P`` maps target-frame base coordinates into source-frame
  base coordinates, so ``E_n^-1 P E_n`` maps target camera-n coordinates into
  source camera-n coordinates (the direction inverse warping needs).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import ops
from .diffcore.tensor import Tensor, as_tensor, make_result
from .errors import ChartError, ConfigError, DomainError, ShapeError

Z_MIN = 1e-4
RIG_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, level: int) -> "Intrinsics":
        """Intrinsics of the image average-pooled by 2**level.

        Focal lengths and extents scale by 2**-level; the principal point maps
        through the pixel-centre convention, c_k = (c + 0.5) / 2**level - 0.5,
        which keeps the pooled image geometrically aligned with the original.
        """
        if level == 0:
            return self
        f = 2.0 ** -level
        if self.width % (2 ** level) or self.height % (2 ** level):
            raise ShapeError(f"{self.width}x{self.height} image not divisible by 2**{level}")
        return Intrinsics(self.fx * f, self.fy * f, (self.cx + 0.5) * f - 0.5,
                          (self.cy + 0.5) * f - 0.5, self.width >> level, self.height >> level)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass(frozen=True)
class Pose6:
    axis_angle: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "axis_angle", np.asarray(self.axis_angle, dtype=np.float64).reshape(3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def from_vector(cls, v) -> "Pose6":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return cls(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.axis_angle, self.translation])


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    extrinsic: np.ndarray = field(repr=False)

    def __post_init__(self):
        e = np.asarray(self.extrinsic, dtype=np.float64).reshape(4, 4)
        check_rigid(e)
        object.__setattr__(self, "extrinsic", e)


@dataclass(frozen=True)
class CameraRig:
    """Cameras in clockwise order; camera n's neighbour is (n + 1) mod N."""

    cameras: tuple

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if len(self.cameras) < 2:
            raise ConfigError(f"a rig needs at least 2 cameras, got {len(self.cameras)}")

    def __len__(self) -> int:
        return len(self.cameras)

    def neighbor(self, n: int) -> int:
        return (n + 1) % len(self.cameras)

    @property
    def extrinsics(self) -> np.ndarray:
        return np.stack([c.extrinsic for c in self.cameras])

    def intrinsics(self, level: int = 0) -> list[Intrinsics]:
        return [c.intrinsics.scaled(level) for c in self.cameras]

    def to_dict(self) -> dict:
        return {
            "schema_version": RIG_SCHEMA_VERSION,
            "cameras": [dict(c.intrinsics.to_dict(),
                             extrinsic=[float(v) for v in c.extrinsic.reshape(-1)])
                        for c in self.cameras],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraRig":
        if "schema_version" not in d:
            raise ConfigError("rig description lacks the mandatory schema_version field")
        if d["schema_version"] != RIG_SCHEMA_VERSION:
            raise ConfigError(f"unsupported rig schema_version {d['schema_version']}")
        cams = []
        for c in d["cameras"]:
            ex = c["extrinsic"]
            if len(ex) != 16:
                raise ConfigError("extrinsic must hold 16 row-major values")
            intr = Intrinsics(float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"]),
                              int(c["width"]), int(c["height"]))
            cams.append(Camera(intr, np.array(ex, dtype=np.float64).reshape(4, 4)))
        return cls(tuple(cams))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "CameraRig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# rigid transforms
# ---------------------------------------------------------------------------

def check_rigid(T: np.ndarray, tol: float = 1e-9) -> None:
    T = np.asarray(T)
    if T.shape[-2:] != (4, 4):
        raise ShapeError(f"rigid transform must be 4x4, got {T.shape}")
    R = T[..., :3, :3]
    ortho = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max()
    if ortho > tol:
        raise DomainError(f"rotation block not orthonormal (max deviation {ortho:.3g})")
    det = np.linalg.det(R)
    if np.abs(det - 1).max() > tol:
        raise DomainError(f"rotation determinant {det} != 1")
    if not np.all(T[..., 3, :] == np.array([0.0, 0.0, 0.0, 1.0])):
        raise DomainError("last row of a rigid transform must be [0, 0, 0, 1]")


def is_rigid(T: np.ndarray, tol: float = 1e-9) -> bool:
    try:
        check_rigid(T, tol)
    except DomainError:
        return False
    return True


def invert(T: np.ndarray) -> np.ndarray:
    T = np.asarray(T, dtype=np.float64)
    R = T[..., :3, :3]
    t = T[..., :3, 3]
    out = np.zeros_like(T)
    Rt = np.swapaxes(R, -1, -2)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -(Rt @ t[..., None])[..., 0]
    out[..., 3, 3] = 1.0
    return out


def hat(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    K = np.zeros(w.shape[:-1] + (3, 3))
    K[..., 0, 1] = -w[..., 2]
    K[..., 0, 2] = w[..., 1]
    K[..., 1, 0] = w[..., 2]
    K[..., 1, 2] = -w[..., 0]
    K[..., 2, 0] = -w[..., 1]
    K[..., 2, 1] = w[..., 0]
    return K


def _rodrigues_coeffs(s: np.ndarray):
    """A(s) = sin(r)/r and B(s) = (1 - cos r)/r^2 with s = r^2, plus dA/ds, dB/ds."""
    s = np.asarray(s, dtype=np.float64)
    small = s < 1e-2
    ss = np.where(small, s, 0.0)
    A_ser = 1 - ss / 6 + ss ** 2 / 120 - ss ** 3 / 5040 + ss ** 4 / 362880
    B_ser = 0.5 - ss / 24 + ss ** 2 / 720 - ss ** 3 / 40320 + ss ** 4 / 3628800
    dA_ser = -1 / 6 + ss / 60 - ss ** 2 / 1680 + ss ** 3 / 90720
    dB_ser = -1 / 24 + ss / 360 - ss ** 2 / 13440 + ss ** 3 / 907200
    sl = np.where(small, 1.0, s)
    r = np.sqrt(sl)
    sin, cos = np.sin(r), np.cos(r)
    A = sin / r
    B = (1 - cos) / sl
    dA = (cos / r - sin / sl) / (2 * r)
    dB = (sin / (2 * r)) / sl - (1 - cos) / sl ** 2
    return (np.where(small, A_ser, A), np.where(small, B_ser, B),
            np.where(small, dA_ser, dA), np.where(small, dB_ser, dB))


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    s = (w * w).sum(axis=-1)
    A, B, _, _ = _rodrigues_coeffs(s)
    K = hat(w)
    return np.eye(3) + A[..., None, None] * K + B[..., None, None] * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    v = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin = np.linalg.norm(v)
    cos = 0.5 * (np.trace(R) - 1.0)
    theta = np.arctan2(sin, cos)
    if theta >= np.pi - 1e-6:
        raise ChartError(f"rotation angle {theta:.9f} too close to pi for the axis-angle chart")
    if theta < 1e-4:
        t2 = theta * theta
        factor = 1 + t2 / 6 + 7 * t2 * t2 / 360
    else:
        factor = theta / sin
    return factor * v


def se3_exp(p) -> np.ndarray:
    """Pose6 (or 6-vector: axis-angle then translation) to a 4x4 rigid transform."""
    v = p.as_vector() if isinstance(p, Pose6) else np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise DomainError("pose components must be finite")
    T = np.zeros(v.shape[:-1] + (4, 4))
    T[..., :3, :3] = so3_exp(v[..., :3])
    T[..., :3, 3] = v[..., 3:6]
    T[..., 3, 3] = 1.0
    return T


def se3_log(T: np.ndarray) -> Pose6:
    T = np.asarray(T, dtype=np.float64)
    check_rigid(T, tol=1e-6)
    return Pose6(so3_log(T[:3, :3]), T[:3, 3].copy())


def per_camera_pose(P_global: np.ndarray, E_n: np.ndarray) -> np.ndarray:
    """Conjugate the rig motion into camera n's frame: E_n^-1 . P . E_n."""
    return invert(E_n) @ np.asarray(P_global, dtype=np.float64) @ np.asarray(E_n, dtype=np.float64)


# ---------------------------------------------------------------------------
# differentiable pose parameterisation
# ---------------------------------------------------------------------------

_GEN = np.zeros((3, 9))
for _i, (_r, _c, _s) in enumerate([((2, 1), (1, 2), 1), ((0, 2), (2, 0), 1), ((1, 0), (0, 1), 1)]):
    _GEN[_i, _r[0] * 3 + _r[1]] = 1.0
    _GEN[_i, _c[0] * 3 + _c[1]] = -1.0


def _coeff_op(s: Tensor, which: int) -> Tensor:
    A, B, dA, dB = _rodrigues_coeffs(s.data)
    val, der = (A, dA) if which == 0 else (B, dB)
    return make_result(val.astype(s.dtype), (s,), lambda g: (g * der,), "rodrigues_coeff")


def rotation_from_axis_angle(w) -> Tensor:
    """Differentiable Rodrigues map, w: (..., 3) -> (..., 3, 3)."""
    w = as_tensor(w)
    lead = w.shape[:-1]
    s = ops.sum(ops.square(w), axis=-1, keepdims=True)
    A = ops.reshape(_coeff_op(s, 0), lead + (1, 1))
    B = ops.reshape(_coeff_op(s, 1), lead + (1, 1))
    K = ops.reshape(ops.matmul(ops.reshape(w, lead + (1, 3)), _GEN.astype(w.dtype)), lead + (3, 3))
    eye = np.eye(3, dtype=w.dtype)
    return ops.add(ops.add(ops.mul(A, K), ops.mul(B, ops.matmul(K, K))), eye)


def pose_matrix(vec) -> Tensor:
    """Differentiable 6-vector (axis-angle, translation) -> (..., 4, 4) transform."""
    vec = as_tensor(vec)
    lead = vec.shape[:-1]
    R = rotation_from_axis_angle(vec[..., 0:3])
    t = ops.reshape(vec[..., 3:6], lead + (3, 1))
    top = ops.concat([R, t], axis=-1)
    bottom = np.broadcast_to(np.array([0.0, 0.0, 0.0, 1.0], dtype=vec.dtype), lead + (1, 4))
    return ops.concat([top, bottom], axis=-2)


def per_camera_poses(P_global, extrinsics: np.ndarray) -> Tensor:
    """Differentiable batch of E_n^-1 . P . E_n for every extrinsic in (N, 4, 4)."""
    P = as_tensor(P_global)
    E = np.asarray(extrinsics, dtype=np.float64)
    Einv = invert(E).astype(P.dtype)
    return ops.matmul(ops.matmul(Einv, P), E.astype(P.dtype))


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def pixel_grid(height: int, width: int) -> np.ndarray:
    """(H, W, 2) array of (x, y) pixel-centre coordinates."""
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    return np.stack([xs, ys], axis=-1)


def pixel_rays(intr: Intrinsics) -> np.ndarray:
    """(3, H, W) camera-frame rays with unit z component."""
    g = pixel_grid(intr.height, intr.width)
    return np.stack([(g[..., 0] - intr.cx) / intr.fx, (g[..., 1] - intr.cy) / intr.fy,
                     np.ones(g.shape[:2])])


def backproject(inv_depth, intr: Intrinsics) -> np.ndarray:
    """Inverse-depth map (H, W) to camera-frame points (3, H, W) in metres."""
    d = np.asarray(inv_depth, dtype=np.float64)
    if d.shape != (intr.height, intr.width):
        raise ShapeError(f"inverse depth {d.shape} does not match intrinsics "
                         f"{intr.height}x{intr.width}")
    if not np.all(d > 0):
        raise DomainError("inverse depth must be strictly positive")
    return pixel_rays(intr) / d


def project(points, intr: Intrinsics, z_min: float = Z_MIN):
    """Camera points (3, ...) to pixel coordinates (..., 2) plus an in-front mask."""
    p = np.asarray(points, dtype=np.float64)
    X, Y, Z = p[0], p[1], p[2]
    valid = Z > z_min
    Zs = np.where(valid, Z, 1.0)
    coords = np.stack([intr.fx * X / Zs + intr.cx, intr.fy * Y / Zs + intr.cy], axis=-1)
    return coords, valid


def _per_batch(intr, b: int) -> list[Intrinsics]:
    if isinstance(intr, Intrinsics):
        return [intr] * b
    intr = list(intr)
    if len(intr) != b:
        raise ShapeError(f"{len(intr)} intrinsics for a batch of {b}")
    return intr


def warp_coords(inv_depth, intr_from, intr_to, transform, z_min: float = Z_MIN):
    """Pixel correspondences induced by depth and a rigid motion.

    Every pixel of ``inv_depth`` (B,1,H,W), a map seen through ``intr_from``,
    is back-projected, moved by ``transform`` (B,4,4) and projected through
    ``intr_to``. Returns coordinates (B,H,W,2) as a Tensor (differentiable in
    depth and transform) and a boolean validity mask (in front of the camera
    and inside the ``intr_to`` image).
    """
    d = as_tensor(inv_depth)
    if d.ndim == 2:
        d = ops.reshape(d, (1, 1) + d.shape)
    b, _, h, w = d.shape
    T = as_tensor(transform)
    if T.ndim == 2:
        T = ops.reshape(T, (1, 4, 4))
    if T.shape[0] != b:
        T = ops.broadcast_to(T, (b, 4, 4))
    src = _per_batch(intr_from, b)
    dst = _per_batch(intr_to, b)
    for i in src:
        if (i.height, i.width) != (h, w):
            raise ShapeError(f"inverse depth {h}x{w} does not match intrinsics {i.height}x{i.width}")
    if np.any(d.data <= 0):
        raise DomainError("inverse depth must be strictly positive")
    rays = np.stack([pixel_rays(i).reshape(3, h * w) for i in src]).astype(d.dtype)
    depth = ops.div(1.0, ops.reshape(d, (b, 1, h * w)))
    pts = ops.mul(rays, depth)
    R = T[:, 0:3, 0:3]
    t = T[:, 0:3, 3:4]
    moved = ops.add(ops.matmul(R, pts), t)
    X, Y, Z = moved[:, 0], moved[:, 1], moved[:, 2]
    front = Z.data > z_min
    Zs = ops.where(front, Z, 1.0)
    f = np.array([[i.fx, i.fy] for i in dst], dtype=d.dtype)
    c = np.array([[i.cx, i.cy] for i in dst], dtype=d.dtype)
    u = ops.add(ops.mul(ops.div(X, Zs), f[:, 0:1]), c[:, 0:1])
    v = ops.add(ops.mul(ops.div(Y, Zs), f[:, 1:2]), c[:, 1:2])
    coords = ops.reshape(ops.stack([u, v], axis=-1), (b, h, w, 2))
    wmax = np.array([i.width - 1 for i in dst], dtype=np.float64)[:, None]
    hmax = np.array([i.height - 1 for i in dst], dtype=np.float64)[:, None]
    # tolerance absorbs round-off of exactly-on-border projections
    eps = 1e-6
    inb = ((u.data >= -eps) & (u.data <= wmax + eps) & (v.data >= -eps) & (v.data <= hmax + eps))
    valid = (front & inb).reshape(b, h, w)
    return coords, valid
