"""Depth network: conv pyramid encoder, frozen semantic extractor, semantic
adapter, spatial-temporal-semantic transformer (STST) and depth decoder.

Images enter as (G, N, 3, H, W) with frame 0 the source and frame 1 the
target; internally the G*N images are a flat batch ordered frame-major.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .diffcore import ops
from .diffcore.nn import Conv2d, Linear, Module
from .diffcore.tensor import Tensor, as_tensor
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    height: int = 32
    width: int = 48
    n_cameras: int = 4
    frames: int = 2
    channels: tuple = (16, 32, 64, 128)
    semantic_channels: int = 32
    c_bar: int = 32
    h_bar: int = 8
    w_bar: int = 12
    proj_channels: int = 16
    heads: int = 1
    ffn_channels: int = 64
    pose_channels: int = 16
    d_min: float = 1.0
    d_max: float = 40.0
    init_depth: float = 10.0
    stst_spatial: bool = True
    stst_temporal: bool = True
    semantic_adapter: bool = True
    depth_enhanced_pose: bool = True
    zero_init_residual: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        L = len(self.channels)
        if L < 1:
            raise ConfigError("the encoder needs at least one level")
        if self.height % (1 << L) or self.width % (1 << L):
            raise ConfigError(f"image extents {self.height}x{self.width} are not divisible by 2^{L}")
        if self.height % 8 or self.width % 8:
            raise ConfigError("image extents must be divisible by 8 for the semantic extractor")
        if self.n_cameras < 2:
            raise ConfigError("spatial attention needs at least two cameras")
        if self.frames != 2:
            raise ConfigError(f"temporal attention needs exactly two frames, got {self.frames}")
        if self.proj_channels % self.heads:
            raise ConfigError("proj_channels must be divisible by heads")
        if not 0 < self.d_min < self.d_max:
            raise ConfigError("need 0 < d_min < d_max")

    @property
    def levels(self) -> int:
        return len(self.channels)

    def level_shape(self, l: int) -> tuple[int, int]:
        return self.height >> (l + 1), self.width >> (l + 1)

    @property
    def semantic_shape(self) -> tuple[int, int]:
        return self.height // 8, self.width // 8

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def _resize(x, h: int, w: int) -> Tensor:
    """Average when shrinking, bilinear when growing (per axis pair)."""
    x = as_tensor(x)
    hi, wi = x.shape[-2:]
    if (hi, wi) == (h, w):
        return x
    mode = "average" if h <= hi and w <= wi else "bilinear"
    return ops.resample(x, h, w, mode)


# ---------------------------------------------------------------------------
# encoder and semantic extractor
# ---------------------------------------------------------------------------

class Encoder(Module):
    """Stride-2 3x3 conv + ReLU per level."""

    def __init__(self, channels, rng):
        cins = (3,) + tuple(channels[:-1])
        self.convs = [Conv2d(ci, co, 3, rng, stride=2) for ci, co in zip(cins, channels)]

    def forward(self, x) -> list[Tensor]:
        feats = []
        for conv in self.convs:
            x = ops.relu(conv(x))
            feats.append(x)
        return feats


class SemanticExtractor(Module):
    """Frozen seeded stand-in for a pretrained segmentation encoder (H/8 output)."""

    def __init__(self, out_channels: int = 32, seed: int = 1234):
        rng = np.random.default_rng(seed)
        self.convs = [Conv2d(3, 16, 3, rng, stride=2), Conv2d(16, 32, 3, rng, stride=2),
                      Conv2d(32, out_channels, 3, rng, stride=2)]
        self.freeze()

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = ops.relu(x)
        return x


class SemanticAdapter(Module):
    """sF = F + DeConvs(Convs(F) + F_seg) at the semantic resolution."""

    def __init__(self, c_in: int, level_hw, seg_hw, c_seg: int, rng):
        self.level_hw, self.seg_hw = tuple(level_hw), tuple(seg_hw)
        self.down = Conv2d(c_in, c_seg, 3, rng)
        self.up = Conv2d(c_seg, c_in, 3, rng)
        self.c_in, self.c_seg = c_in, c_seg

    def forward(self, F, F_seg) -> Tensor:
        F = as_tensor(F)
        if F.shape[1] != self.c_in or tuple(F.shape[-2:]) != self.level_hw:
            raise ShapeError(f"adapter expects (B,{self.c_in},{self.level_hw}), got {F.shape}")
        if F_seg.shape[1] != self.c_seg or tuple(F_seg.shape[-2:]) != self.seg_hw:
            raise ShapeError(f"adapter expects semantic features (B,{self.c_seg},{self.seg_hw}), "
                             f"got {F_seg.shape}")
        g = ops.add(self.down(_resize(F, *self.seg_hw)), F_seg)
        return ops.add(F, _resize(self.up(g), *self.level_hw))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def attention(q, k, v, heads: int = 1, return_weights: bool = False):
    """Scaled dot-product attention, q: (..., Tq, D), k/v: (..., Tk, D)."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if heads > 1:
        dh = d // heads

        def split(x):
            lead = x.shape[:-2]
            x = ops.reshape(x, lead + (x.shape[-2], heads, dh))
            n = x.ndim
            return ops.transpose(x, tuple(range(n - 3)) + (n - 2, n - 3, n - 1))

        q, k, v = split(q), split(k), split(v)
    scale = 1.0 / np.sqrt(q.shape[-1])
    kt = ops.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    w = ops.softmax(ops.scale(ops.matmul(q, kt), scale), axis=-1)
    out = ops.matmul(w, v)
    if heads > 1:
        n = out.ndim
        out = ops.transpose(out, tuple(range(n - 3)) + (n - 2, n - 3, n - 1))
        out = ops.reshape(out, out.shape[:-2] + (d,))
    return (out, w) if return_weights else out


def spatial_attention(q, k, v, heads: int = 1):
    """Camera n attends to its clockwise neighbour (n+1) mod N. Inputs (G, N, T, D)."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    N = q.shape[1]
    if N < 2:
        raise ConfigError("spatial attention needs at least two cameras")
    perm = [(n + 1) % N for n in range(N)]
    return attention(q, k[:, perm], v[:, perm], heads)


def temporal_attention(q, k, v, heads: int = 1):
    """Source queries attend to target keys/values and target queries to source."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[0] != 2:
        raise ConfigError(f"temporal attention needs exactly two frames, got {q.shape[0]}")
    swap = [1, 0]
    return attention(q, k[swap], v[swap], heads)


class AttentionFFN(Module):
    """Attention output block: concat, layer norm, then a ReLU MLP back to c_bar."""

    def __init__(self, c_in: int, hidden: int, c_out: int, rng):
        self.gain = Tensor(np.ones(c_in), requires_grad=True)
        self.shift = Tensor(np.zeros(c_in), requires_grad=True)
        self.fc0 = Linear(c_in, hidden, rng)
        self.fc_out = Linear(hidden, c_out, rng)

    def forward(self, a_n, a_g) -> Tensor:
        x = ops.layer_norm(ops.concat([a_n, a_g], axis=-1), self.gain, self.shift)
        return self.fc_out(ops.relu(self.fc0(x)))


class STST(Module):
    """Shape-preserving spatial-temporal-semantic transformer for one level."""

    def __init__(self, c_l: int, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.reduce = Conv2d(c_l, cfg.c_bar, 1, rng)
        self.pos = Tensor(rng.normal(0.0, 0.02, (cfg.frames, cfg.n_cameras, 1, 1, 1)),
                          requires_grad=True)
        self.qkv = Linear(cfg.c_bar, 3 * cfg.proj_channels, rng)
        self.ffn = AttentionFFN(2 * cfg.proj_channels, cfg.ffn_channels, cfg.c_bar, rng)
        self.expand = Conv2d(cfg.c_bar, c_l, 1, rng)

    def forward(self, sF) -> Tensor:
        cfg = self.cfg
        sF = as_tensor(sF)
        B, C, H, W = sF.shape
        G, N = cfg.frames, cfg.n_cameras
        hb, wb, cb, P = cfg.h_bar, cfg.w_bar, cfg.c_bar, cfg.proj_channels
        x = self.reduce(_resize(sF, hb, wb))                                  # (B, cb, hb, wb)
        x = ops.add(ops.reshape(x, (G, N, cb, hb, wb)), self.pos)
        tokens = ops.transpose(ops.reshape(x, (G, N, cb, hb * wb)), (0, 1, 3, 2))  # (G,N,T,cb)
        qkv = self.qkv(tokens)
        q, k, v = qkv[..., 0:P], qkv[..., P:2 * P], qkv[..., 2 * P:3 * P]
        zeros = np.zeros(q.shape, dtype=q.dtype)
        a_n = spatial_attention(q, k, v, cfg.heads) if cfg.stst_spatial else zeros
        a_g = temporal_attention(q, k, v, cfg.heads) if cfg.stst_temporal else zeros
        y = self.ffn(a_n, a_g)                                                # (G,N,T,cb)
        y = ops.reshape(ops.transpose(y, (0, 1, 3, 2)), (B, cb, hb, wb))
        y = _resize(self.expand(y), H, W)
        return ops.add(sF, y)


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------

def _up2(x: Tensor) -> Tensor:
    return ops.resample(x, x.shape[-2] * 2, x.shape[-1] * 2, "nearest")


class DepthDecoder(Module):
    """Coarse-to-fine: nearest upsample, concat skip, 3x3 conv, ReLU."""

    def __init__(self, cfg: ModelConfig, rng):
        ch = cfg.channels
        L = len(ch)
        self.convs = []
        for l in range(L):
            cin = ch[l] + (ch[l + 1] if l + 1 < L else 0)
            self.convs.append(Conv2d(cin, ch[l], 3, rng))
        self.head = Conv2d(ch[0], 1, 3, rng)
        self.alpha, self.beta = 1.0 / cfg.d_max, 1.0 / cfg.d_min
        # start near a plausible scene depth rather than at the range midpoint
        frac = (1.0 / cfg.init_depth - self.alpha) / (self.beta - self.alpha)
        self.head.bias.data[:] = np.log(frac / (1.0 - frac))

    def forward(self, feats) -> tuple[Tensor, list[Tensor]]:
        L = len(feats)
        dF = [None] * L
        x = None
        for l in range(L - 1, -1, -1):
            inp = feats[l] if x is None else ops.concat([feats[l], _up2(x)], axis=1)
            x = ops.relu(self.convs[l](inp))
            dF[l] = x
        out = ops.sigmoid(self.head(_up2(x)))
        inv_depth = ops.add(ops.scale(out, self.beta - self.alpha), self.alpha)
        return _clamp_inside(inv_depth, self.alpha, self.beta), dF


def _clamp_inside(x: Tensor, lo: float, hi: float) -> Tensor:
    """Pin values that rounding pushed past [lo, hi] to the nearest in-range float."""
    dt = x.dtype
    lo_t, hi_t = dt.type(lo), dt.type(hi)
    if lo_t < lo:
        lo_t = np.nextafter(lo_t, dt.type(np.inf))
    if hi_t > hi:
        hi_t = np.nextafter(hi_t, dt.type(-np.inf))
    x = ops.where(x.data < lo_t, np.full(x.shape, lo_t, dtype=dt), x)
    return ops.where(x.data > hi_t, np.full(x.shape, hi_t, dtype=dt), x)


# ---------------------------------------------------------------------------
# full depth network
# ---------------------------------------------------------------------------

@dataclass
class DepthOutput:
    inv_depth: Tensor                  # (G*N, 1, H, W)
    sts_feats: list                    # per level (G*N, C_l, H_l, W_l)
    dec_feats: list                    # per level (G*N, C_l, H_l, W_l)
    semantic: Tensor | None = None

    def frame(self, g: int, n_cameras: int) -> Tensor:
        return self.inv_depth[g * n_cameras:(g + 1) * n_cameras]


class DepthNet(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoder = Encoder(cfg.channels, rng)
        self.extractor = SemanticExtractor(cfg.semantic_channels)
        self.adapters = [SemanticAdapter(c, cfg.level_shape(l), cfg.semantic_shape,
                                         cfg.semantic_channels, rng)
                         for l, c in enumerate(cfg.channels)]
        self.stst = [STST(c, cfg, rng) for c in cfg.channels]
        self.decoder = DepthDecoder(cfg, rng)
        if cfg.zero_init_residual:
            # residual branches start closed, so the network begins as its module-free ablation
            for conv in [blk.expand for blk in self.stst] + [ad.up for ad in self.adapters]:
                conv.weight.data[...] = 0.0
                conv.bias.data[...] = 0.0

    @property
    def stst_enabled(self) -> bool:
        return self.cfg.stst_spatial or self.cfg.stst_temporal

    def forward(self, images) -> DepthOutput:
        cfg = self.cfg
        images = as_tensor(images)
        if images.shape[:3] != (cfg.frames, cfg.n_cameras, 3) or \
                images.shape[3:] != (cfg.height, cfg.width):
            raise ShapeError(f"expected images ({cfg.frames},{cfg.n_cameras},3,{cfg.height},"
                             f"{cfg.width}), got {images.shape}")
        x = ops.reshape(images, (-1, 3, cfg.height, cfg.width))
        feats = self.encoder(x)
        seg = None
        if cfg.semantic_adapter:
            seg = ops.stop_gradient(self.extractor(x))
            feats = [ad(f, seg) for ad, f in zip(self.adapters, feats)]
        if self.stst_enabled:
            feats = [blk(f) for blk, f in zip(self.stst, feats)]
        inv_depth, dec = self.decoder(feats)
        return DepthOutput(inv_depth, feats, dec, seg)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"SMDCKPT\x00"
CKPT_VERSION = 1


def save_checkpoint(path, modules: dict, meta: dict | None = None) -> None:
    """Write named float32 tensors from ``{prefix: Module}`` plus a JSON header."""
    records = []
    for prefix, mod in modules.items():
        for name, t in mod.named_tensors(prefix + "."):
            records.append((name, np.ascontiguousarray(t.data, dtype="<f4")))
    header = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(records)),
             struct.pack("<I", len(header)), header]
    for name, arr in records:
        nb = name.encode()
        parts.append(struct.pack("<HB", len(nb), arr.ndim) + nb)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", raw[16:20])
    pos = 20
    meta = json.loads(raw[pos:pos + hlen])
    pos += hlen
    tensors = {}
    for _ in range(count):
        nlen, ndim = struct.unpack("<HB", raw[pos:pos + 3])
        pos += 3
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        shape = struct.unpack(f"<{ndim}I", raw[pos:pos + 4 * ndim])
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) * 4
        tensors[name] = np.frombuffer(raw[pos:pos + size], dtype="<f4").reshape(shape).copy()
        pos += size
    return tensors, meta


def load_into(modules: dict, tensors: dict) -> None:
    """Copy checkpoint arrays into modules; every name and shape must match."""
    expected = {}
    for prefix, mod in modules.items():
        for name, t in mod.named_tensors(prefix + "."):
            expected[name] = t
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise ConfigError(f"checkpoint mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, t in expected.items():
        arr = tensors[name]
        if arr.shape != t.data.shape:
            raise ShapeError(f"checkpoint tensor {name}: shape {arr.shape} vs model {t.data.shape}")
        t.data = arr.astype(t.data.dtype)
