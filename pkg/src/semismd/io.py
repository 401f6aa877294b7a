"""On-disk formats: 16-bit PPM images, 8-bit PGM masks, binary depth maps,
sparse-target text files and the frame-set directory layout."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .geometry import CameraRig
from .synthrig import RenderedFrameSet, SparseDepthTarget, dequantize

DEPTH_MAGIC = b"SMDDEPTH"
FRAMESET_SCHEMA = 1


# ---------------------------------------------------------------------------
# netpbm
# ---------------------------------------------------------------------------

def _read_netpbm(path) -> tuple[bytes, int, int, int, bytes]:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while raw[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    return magic, w, h, maxval, raw[pos:]


def write_ppm(path, image: np.ndarray) -> None:
    """(3, H, W) float image in [0, 1] as a 16-bit binary PPM."""
    img = np.asarray(image)
    _, h, w = img.shape
    q = np.round(np.clip(img.astype(np.float64), 0, 1) * 65535.0).astype(">u2")
    Path(path).write_bytes(b"P6\n%d %d\n65535\n" % (w, h) + q.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    magic, w, h, maxval, body = _read_netpbm(path)
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    dt = ">u2" if maxval > 255 else "u1"
    q = np.frombuffer(body, dtype=dt, count=w * h * 3).reshape(h, w, 3).transpose(2, 0, 1)
    if maxval != 65535:
        return (q.astype(np.float64) / maxval).astype(np.float32)
    return dequantize(q.astype(np.uint16))


def write_pgm(path, mask: np.ndarray) -> None:
    m = np.asarray(mask, dtype=np.uint8)
    h, w = m.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + m.tobytes())


def read_pgm(path) -> np.ndarray:
    magic, w, h, maxval, body = _read_netpbm(path)
    if magic != b"P5" or maxval > 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    return np.frombuffer(body, dtype=np.uint8, count=w * h).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# depth maps
# ---------------------------------------------------------------------------

def write_depth(path, depth: np.ndarray) -> None:
    """Header: 8-byte magic, uint32 width, height, bytes per value; little-endian data."""
    d = np.asarray(depth)
    if d.dtype not in (np.float32, np.float64):
        d = d.astype(np.float64)
    h, w = d.shape
    header = DEPTH_MAGIC + struct.pack("<III", w, h, d.dtype.itemsize)
    Path(path).write_bytes(header + d.astype(d.dtype.newbyteorder("<")).tobytes())


def read_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != DEPTH_MAGIC:
        raise ValueError(f"{path}: bad depth-file magic")
    w, h, size = struct.unpack("<III", raw[8:20])
    dt = {4: "<f4", 8: "<f8"}[size]
    data = np.frombuffer(raw[20:], dtype=dt, count=w * h).reshape(h, w)
    return data.astype(np.dtype(dt).newbyteorder("="))


# ---------------------------------------------------------------------------
# sparse targets
# ---------------------------------------------------------------------------

def write_sparse(path, targets: list[SparseDepthTarget]) -> None:
    lines = ["camera,y,x,inverse_depth"]
    for n, t in enumerate(targets):
        ys, xs = np.nonzero(t.valid_mask)
        for y, x in zip(ys, xs):
            lines.append(f"{n},{y},{x},{float(t.values[y, x])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_sparse(path, n_cameras: int, height: int, width: int, d_min: float, d_max: float
                ) -> list[SparseDepthTarget]:
    vals = np.zeros((n_cameras, height, width))
    mask = np.zeros((n_cameras, height, width), dtype=bool)
    rows = Path(path).read_text().splitlines()
    if not rows or rows[0].strip() != "camera,y,x,inverse_depth":
        raise ValueError(f"{path}: missing sparse-target header")
    for line in rows[1:]:
        if not line.strip():
            continue
        n, y, x, v = line.split(",")
        vals[int(n), int(y), int(x)] = float(v)
        mask[int(n), int(y), int(x)] = True
    return [SparseDepthTarget(vals[n], mask[n], d_min, d_max) for n in range(n_cameras)]


# ---------------------------------------------------------------------------
# frame-set directories
# ---------------------------------------------------------------------------

def save_frameset(fs: RenderedFrameSet, folder) -> Path:
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    G, N = fs.images.shape[:2]
    for g in range(G):
        for n in range(N):
            tag = f"g{g}_c{n}"
            write_ppm(folder / f"image_{tag}.ppm", fs.images[g, n])
            write_depth(folder / f"depth_{tag}.bin", fs.gt_depth[g, n])
            write_depth(folder / f"wm_{tag}.bin", fs.wm_depth[g, n])
            write_pgm(folder / f"mask_{tag}.pgm", fs.masks[g, n])
        write_sparse(folder / f"sparse_g{g}.txt", fs.sparse[g])
    meta = {
        "schema_version": FRAMESET_SCHEMA,
        "seed": fs.seed,
        "frames": G,
        "cameras": N,
        "height": int(fs.images.shape[3]),
        "width": int(fs.images.shape[4]),
        "d_min": fs.d_min,
        "d_max": fs.d_max,
        "gt_pose": [float(v) for v in fs.gt_pose.reshape(-1)],
        "rig": fs.rig.to_dict(),
    }
    (folder / "frameset.json").write_text(json.dumps(meta, indent=2))
    return folder


def load_frameset(folder) -> RenderedFrameSet:
    folder = Path(folder)
    meta = json.loads((folder / "frameset.json").read_text())
    if meta.get("schema_version") != FRAMESET_SCHEMA:
        raise ValueError(f"{folder}: unsupported frame-set schema {meta.get('schema_version')}")
    G, N, H, W = meta["frames"], meta["cameras"], meta["height"], meta["width"]
    d_min, d_max = meta["d_min"], meta["d_max"]
    images = np.stack([[read_ppm(folder / f"image_g{g}_c{n}.ppm") for n in range(N)] for g in range(G)])
    depth = np.stack([[read_depth(folder / f"depth_g{g}_c{n}.bin") for n in range(N)] for g in range(G)])
    wm = np.stack([[read_depth(folder / f"wm_g{g}_c{n}.bin") for n in range(N)] for g in range(G)])
    masks = np.stack([[read_pgm(folder / f"mask_g{g}_c{n}.pgm") for n in range(N)] for g in range(G)])
    sparse = [read_sparse(folder / f"sparse_g{g}.txt", N, H, W, d_min, d_max) for g in range(G)]
    return RenderedFrameSet(images, depth, np.array(meta["gt_pose"]).reshape(4, 4), sparse, masks,
                            wm, CameraRig.from_dict(meta["rig"]), int(meta["seed"]), d_min, d_max)
