"""Hot per-pixel kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``SEMISMD_NUMBA`` is not set
to a false value (``0``, ``false``, ``off``, ``no``). ``set_backend`` switches
at runtime, which the benchmark and the parity tests use.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_FALSE = {"0", "false", "off", "no"}
HAS_NUMBA = numba is not None
_use_numba = HAS_NUMBA and os.environ.get("SEMISMD_NUMBA", "1").strip().lower() not in _FALSE


def backend() -> str:
    return "numba" if _use_numba else "numpy"


def set_backend(name: str) -> None:
    global _use_numba
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not installed")
    _use_numba = name == "numba"


def _njit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# bilinear sampling: shared corner computation
# ---------------------------------------------------------------------------

def _corners_numpy(coords: np.ndarray, h: int, w: int):
    x = coords[..., 0]
    y = coords[..., 1]
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(xc), max(w - 2, 0)).astype(np.int64)
    y0 = np.minimum(np.floor(yc), max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = xc - x0
    wy = yc - y0
    inside_x = (x >= 0) & (x <= w - 1)
    inside_y = (y >= 0) & (y <= h - 1)
    return x0, x1, y0, y1, wx, wy, inside_x, inside_y, valid


def _grid_sample_fwd_numpy(image: np.ndarray, coords: np.ndarray):
    b, c, h, w = image.shape
    x0, x1, y0, y1, wx, wy, _, _, valid = _corners_numpy(coords, h, w)
    bi = np.arange(b)[:, None, None]
    out = np.empty((b, c) + coords.shape[1:3], dtype=image.dtype)
    w00 = (1 - wx) * (1 - wy)
    w01 = wx * (1 - wy)
    w10 = (1 - wx) * wy
    w11 = wx * wy
    for ch in range(c):
        img = image[:, ch]
        out[:, ch] = (img[bi, y0, x0] * w00 + img[bi, y0, x1] * w01
                      + img[bi, y1, x0] * w10 + img[bi, y1, x1] * w11)
    return out, valid


def _grid_sample_bwd_numpy(image: np.ndarray, coords: np.ndarray, grad: np.ndarray,
                           need_image: bool, need_coords: bool):
    b, c, h, w = image.shape
    x0, x1, y0, y1, wx, wy, inx, iny, _ = _corners_numpy(coords, h, w)
    bi = np.arange(b)[:, None, None]
    gimg = None
    gcoords = None
    if need_image:
        gimg = np.zeros(b * h * w * c, dtype=np.float64)
        base = (np.arange(b)[:, None, None] * c) * (h * w)
        for ch in range(c):
            g = grad[:, ch]
            off = base + ch * h * w
            for yy, xx, wt in ((y0, x0, (1 - wx) * (1 - wy)), (y0, x1, wx * (1 - wy)),
                               (y1, x0, (1 - wx) * wy), (y1, x1, wx * wy)):
                idx = (off + yy * w + xx).ravel()
                gimg += np.bincount(idx, weights=(g * wt).ravel(), minlength=gimg.size)
        gimg = gimg.reshape(b, c, h, w).astype(image.dtype)
    if need_coords:
        gx = np.zeros(coords.shape[:3], dtype=np.float64)
        gy = np.zeros(coords.shape[:3], dtype=np.float64)
        for ch in range(c):
            img = image[:, ch]
            g = grad[:, ch]
            v00 = img[bi, y0, x0]
            v01 = img[bi, y0, x1]
            v10 = img[bi, y1, x0]
            v11 = img[bi, y1, x1]
            gx += g * ((v01 - v00) * (1 - wy) + (v11 - v10) * wy)
            gy += g * ((v10 - v00) * (1 - wx) + (v11 - v01) * wx)
        gx *= inx
        gy *= iny
        gcoords = np.stack([gx, gy], axis=-1).astype(coords.dtype)
    return gimg, gcoords


@_njit
def _grid_sample_fwd_nb(image, coords, out, valid):
    b, c, h, w = image.shape
    ho, wo = coords.shape[1], coords.shape[2]
    xmax0 = max(w - 2, 0)
    ymax0 = max(h - 2, 0)
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                x = coords[n, i, j, 0]
                y = coords[n, i, j, 1]
                valid[n, i, j] = (x >= 0) and (x <= w - 1) and (y >= 0) and (y <= h - 1)
                xc = min(max(x, 0.0), w - 1.0)
                yc = min(max(y, 0.0), h - 1.0)
                x0 = min(int(np.floor(xc)), xmax0)
                y0 = min(int(np.floor(yc)), ymax0)
                x1 = min(x0 + 1, w - 1)
                y1 = min(y0 + 1, h - 1)
                wx = xc - x0
                wy = yc - y0
                w00 = (1 - wx) * (1 - wy)
                w01 = wx * (1 - wy)
                w10 = (1 - wx) * wy
                w11 = wx * wy
                for ch in range(c):
                    out[n, ch, i, j] = (image[n, ch, y0, x0] * w00 + image[n, ch, y0, x1] * w01
                                        + image[n, ch, y1, x0] * w10 + image[n, ch, y1, x1] * w11)


@_njit
def _grid_sample_bwd_nb(image, coords, grad, gimg, gcoords, need_image, need_coords):
    b, c, h, w = image.shape
    ho, wo = coords.shape[1], coords.shape[2]
    xmax0 = max(w - 2, 0)
    ymax0 = max(h - 2, 0)
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                x = coords[n, i, j, 0]
                y = coords[n, i, j, 1]
                inx = (x >= 0) and (x <= w - 1)
                iny = (y >= 0) and (y <= h - 1)
                xc = min(max(x, 0.0), w - 1.0)
                yc = min(max(y, 0.0), h - 1.0)
                x0 = min(int(np.floor(xc)), xmax0)
                y0 = min(int(np.floor(yc)), ymax0)
                x1 = min(x0 + 1, w - 1)
                y1 = min(y0 + 1, h - 1)
                wx = xc - x0
                wy = yc - y0
                gx = 0.0
                gy = 0.0
                for ch in range(c):
                    g = grad[n, ch, i, j]
                    if need_image:
                        gimg[n, ch, y0, x0] += g * (1 - wx) * (1 - wy)
                        gimg[n, ch, y0, x1] += g * wx * (1 - wy)
                        gimg[n, ch, y1, x0] += g * (1 - wx) * wy
                        gimg[n, ch, y1, x1] += g * wx * wy
                    if need_coords:
                        v00 = image[n, ch, y0, x0]
                        v01 = image[n, ch, y0, x1]
                        v10 = image[n, ch, y1, x0]
                        v11 = image[n, ch, y1, x1]
                        gx += g * ((v01 - v00) * (1 - wy) + (v11 - v10) * wy)
                        gy += g * ((v10 - v00) * (1 - wx) + (v11 - v01) * wx)
                if need_coords:
                    gcoords[n, i, j, 0] = gx if inx else 0.0
                    gcoords[n, i, j, 1] = gy if iny else 0.0


def grid_sample_forward(image: np.ndarray, coords: np.ndarray):
    """Bilinear sample ``image`` (B,C,H,W) at pixel ``coords`` (B,H',W',2) as (x, y)."""
    if not _use_numba:
        return _grid_sample_fwd_numpy(image, coords)
    b, c = image.shape[:2]
    out = np.empty((b, c) + coords.shape[1:3], dtype=image.dtype)
    valid = np.empty(coords.shape[:3], dtype=np.bool_)
    _grid_sample_fwd_nb(np.ascontiguousarray(image), np.ascontiguousarray(coords), out, valid)
    return out, valid


def grid_sample_backward(image, coords, grad, need_image=True, need_coords=True):
    if not _use_numba:
        return _grid_sample_bwd_numpy(image, coords, grad, need_image, need_coords)
    gimg = np.zeros(image.shape, dtype=np.float64)
    gcoords = np.zeros(coords.shape, dtype=np.float64)
    _grid_sample_bwd_nb(np.ascontiguousarray(image), np.ascontiguousarray(coords),
                        np.ascontiguousarray(grad), gimg, gcoords, need_image, need_coords)
    return (gimg.astype(image.dtype) if need_image else None,
            gcoords.astype(coords.dtype) if need_coords else None)


# ---------------------------------------------------------------------------
# ray casting against planar quads and axis-aligned boxes
# ---------------------------------------------------------------------------
# quads:  (Q, 12) rows = center(3), normal(3), u-axis(3), v-axis(3); half extents in quad_ext (Q,2)
# boxes:  (B, 6) rows = min corner(3), max corner(3)
# Returns hit distance along the ray (inf on miss), primitive id and face-local
# surface coordinates (s, t) used for texturing.

def _raycast_numpy(origin, dirs, quads, quad_ext, boxes):
    n = dirs.shape[0]
    best = np.full(n, np.inf)
    prim = np.full(n, -1, dtype=np.int64)
    face = np.full(n, -1, dtype=np.int64)
    hit_pts = np.zeros((n, 3))
    for q in range(quads.shape[0]):
        c = quads[q, 0:3]
        nrm = quads[q, 3:6]
        u = quads[q, 6:9]
        v = quads[q, 9:12]
        denom = dirs @ nrm
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - origin) @ nrm) / denom
        ok = (np.abs(denom) > 1e-12) & (t > 1e-9)
        p = origin + t[:, None] * dirs
        d = p - c
        ok &= (np.abs(d @ u) <= quad_ext[q, 0]) & (np.abs(d @ v) <= quad_ext[q, 1])
        closer = ok & (t < best)
        best = np.where(closer, t, best)
        prim = np.where(closer, q, prim)
        face = np.where(closer, 0, face)
    nq = quads.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    for k in range(boxes.shape[0]):
        lo = boxes[k, 0:3]
        hi = boxes[k, 3:6]
        with np.errstate(invalid="ignore"):
            t1 = (lo - origin) * inv
            t2 = (hi - origin) * inv
        tmin3 = np.minimum(t1, t2)
        tmax3 = np.maximum(t1, t2)
        # axes where the ray is parallel: inside slab -> unbounded, outside -> miss
        par = dirs == 0
        inside = (origin >= lo) & (origin <= hi)
        tmin3 = np.where(par, np.where(inside, -np.inf, np.inf), tmin3)
        tmax3 = np.where(par, np.where(inside, np.inf, -np.inf), tmax3)
        tnear = tmin3.max(axis=1)
        tfar = tmax3.min(axis=1)
        axis = tmin3.argmax(axis=1)
        ok = (tnear <= tfar) & (tnear > 1e-9)
        closer = ok & (tnear < best)
        best = np.where(closer, tnear, best)
        prim = np.where(closer, nq + k, prim)
        face = np.where(closer, axis, face)
    hit = np.isfinite(best)
    hit_pts[hit] = origin + best[hit, None] * dirs[hit]
    return best, prim, face, hit_pts


@_njit
def _raycast_nb(origin, dirs, quads, quad_ext, boxes, best, prim, face, hit_pts):
    n = dirs.shape[0]
    nq = quads.shape[0]
    for r in range(n):
        dx = dirs[r, 0]
        dy = dirs[r, 1]
        dz = dirs[r, 2]
        tb = np.inf
        pb = -1
        fb = -1
        for q in range(nq):
            denom = dx * quads[q, 3] + dy * quads[q, 4] + dz * quads[q, 5]
            if abs(denom) <= 1e-12:
                continue
            num = ((quads[q, 0] - origin[0]) * quads[q, 3] + (quads[q, 1] - origin[1]) * quads[q, 4]
                   + (quads[q, 2] - origin[2]) * quads[q, 5])
            t = num / denom
            if not (t > 1e-9) or t >= tb:
                continue
            px = origin[0] + t * dx - quads[q, 0]
            py = origin[1] + t * dy - quads[q, 1]
            pz = origin[2] + t * dz - quads[q, 2]
            su = px * quads[q, 6] + py * quads[q, 7] + pz * quads[q, 8]
            sv = px * quads[q, 9] + py * quads[q, 10] + pz * quads[q, 11]
            if abs(su) <= quad_ext[q, 0] and abs(sv) <= quad_ext[q, 1]:
                tb = t
                pb = q
                fb = 0
        for k in range(boxes.shape[0]):
            tnear = -np.inf
            tfar = np.inf
            ax = 0
            miss = False
            for a in range(3):
                d = dirs[r, a]
                o = origin[a]
                lo = boxes[k, a]
                hi = boxes[k, 3 + a]
                if d == 0.0:
                    if o < lo or o > hi:
                        miss = True
                        break
                    lo_t = -np.inf
                    hi_t = np.inf
                else:
                    inv = 1.0 / d
                    t1 = (lo - o) * inv
                    t2 = (hi - o) * inv
                    lo_t = min(t1, t2)
                    hi_t = max(t1, t2)
                if lo_t > tnear:
                    tnear = lo_t
                    ax = a
                if hi_t < tfar:
                    tfar = hi_t
            if miss:
                continue
            if tnear <= tfar and tnear > 1e-9 and tnear < tb:
                tb = tnear
                pb = nq + k
                fb = ax
        best[r] = tb
        prim[r] = pb
        face[r] = fb
        if pb >= 0:
            hit_pts[r, 0] = origin[0] + tb * dx
            hit_pts[r, 1] = origin[1] + tb * dy
            hit_pts[r, 2] = origin[2] + tb * dz


def raycast(origin: np.ndarray, dirs: np.ndarray, quads: np.ndarray, quad_ext: np.ndarray,
            boxes: np.ndarray):
    """Nearest hit of rays ``origin + t*dirs`` (dirs: (R,3), float64)."""
    origin = np.ascontiguousarray(origin, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    quads = np.ascontiguousarray(quads, dtype=np.float64).reshape(-1, 12)
    quad_ext = np.ascontiguousarray(quad_ext, dtype=np.float64).reshape(-1, 2)
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 6)
    if not _use_numba:
        return _raycast_numpy(origin, dirs, quads, quad_ext, boxes)
    n = dirs.shape[0]
    best = np.empty(n)
    prim = np.empty(n, dtype=np.int64)
    face = np.empty(n, dtype=np.int64)
    hit_pts = np.zeros((n, 3))
    _raycast_nb(origin, dirs, quads, quad_ext, boxes, best, prim, face, hit_pts)
    return best, prim, face, hit_pts
