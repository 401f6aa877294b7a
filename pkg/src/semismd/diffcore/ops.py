"""Differentiable primitives.

Every function takes Tensors (numpy arrays and Python scalars are wrapped as
constants) and returns a Tensor whose backward rule is recorded on the active
tape. Image tensors are laid out (B, C, H, W); unbatched (C, H, W) input is
accepted where noted.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import _accel
from ..errors import NumericalError, ShapeError
from .tensor import Tensor, as_tensor, make_result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    """Hadamard product (with numpy broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_result(ad * bd, (a, b), bw, "mul")


hadamard = mul


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make_result(out, (a, b), bw, "div")


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return make_result(a.data * a.data.dtype.type(s), (a,), lambda g: (g * s,), "scale")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_result(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g / (2 * out),), "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    ad = a.data
    return make_result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0).astype(a.dtype), (a,),
                       lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def where(mask, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    m = np.asarray(mask, dtype=bool)
    out = np.where(m, a.data, b.data)
    sa, sb = a.shape, b.shape
    return make_result(out, (a, b),
                       lambda g: (_unbroadcast(np.where(m, g, 0), sa),
                                  _unbroadcast(np.where(m, 0, g), sb)), "where")


def stop_gradient(a) -> Tensor:
    return as_tensor(a).detach()


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def index(a, idx) -> Tensor:
    """Basic or advanced indexing; backward scatters into a zero buffer."""
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    key = idx if isinstance(idx, tuple) else (idx,)
    basic = all(k is Ellipsis or k is None or isinstance(k, (slice, int, np.integer)) for k in key)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_result(np.array(a.data[idx]), (a,), bw, "index")


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in ts]} along axis {axis}: {exc}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(out, ts, bw, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                   for t in ts], axis=axis)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return make_result(np.broadcast_to(a.data, shape).copy(), (a,),
                       lambda g: (_unbroadcast(g, src),), "broadcast_to")


def pad2d(x, pad: int | tuple, mode: str = "constant") -> Tensor:
    """Pad the last two axes; ``pad`` is p or (top, bottom, left, right)."""
    x = as_tensor(x)
    if isinstance(pad, int):
        pad = (pad, pad, pad, pad)
    top, bottom, left, right = pad
    h, w = x.shape[-2:]
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    if mode == "constant":
        out = np.pad(x.data, widths)

        def bw(g):
            return (g[..., top:top + h, left:left + w],)

        return make_result(out, (x,), bw, "pad2d")
    src = np.arange(h * w).reshape(h, w)
    src_idx = np.pad(src, widths[-2:], mode=mode).ravel()
    out = x.data.reshape(x.shape[:-2] + (h * w,))[..., src_idx].reshape(
        x.shape[:-2] + (h + top + bottom, w + left + right))
    lead = x.shape[:-2]

    def bw(g):
        flat = g.reshape(-1, src_idx.size)
        res = np.zeros((flat.shape[0], h * w), dtype=g.dtype)
        for r in range(flat.shape[0]):
            res[r] = np.bincount(src_idx, weights=flat[r], minlength=h * w)
        return (res.reshape(lead + (h, w)),)

    return make_result(out, (x,), bw, "pad2d")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return make_result(out, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis."""
    y = matmul(x, transpose(as_tensor(weight), (1, 0)))
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# normalisation and attention helpers
# ---------------------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericalError("softmax: NaN in input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), bw, "softmax")


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    x = as_tensor(x)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        return (inv / d * (d * g - g.sum(axis=-1, keepdims=True)
                           - xhat * (g * xhat).sum(axis=-1, keepdims=True)),)

    y = make_result(xhat.astype(x.dtype), (x,), bw, "layer_norm")
    if gain is not None:
        y = mul(y, gain)
    if bias is not None:
        y = add(y, bias)
    return y


# ---------------------------------------------------------------------------
# spatial operators
# ---------------------------------------------------------------------------

def _as_batched(x: Tensor, name: str) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected (C,H,W) or (B,C,H,W), got {x.shape}")
    return x, False


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding. weight: (C_out, C_in, kh, kw)."""
    x, squeeze = _as_batched(as_tensor(x), "conv2d")
    weight = as_tensor(weight)
    b, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {cin_w} "
                         f"(input {x.shape}, kernel {weight.shape})")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp or stride < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # channel-major im2col: (B, C_in*kh*kw, ho*wo), so both products stay NCHW
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, cin * kh * kw, ho * wo)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols).reshape(b, cout, ho, wo)
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data.reshape(1, cout, 1, 1)
        inputs.append(bias)

    def bw(g):
        g2 = g.reshape(b, cout, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.einsum("bop,bkp->ok", g2, cols, optimize=True).reshape(weight.shape)
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2).reshape(b, cin, kh, kw, ho, wo)
            gxp = np.zeros((b, cin, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                        j:j + stride * (wo - 1) + 1:stride] += dcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    y = make_result(out, inputs, bw, "conv2d")
    return reshape(y, y.shape[1:]) if squeeze else y


def box_filter(x, k: int) -> Tensor:
    """Mean over k x k windows without padding (valid extent)."""
    x, squeeze = _as_batched(as_tensor(x), "box_filter")
    h, w = x.shape[-2:]
    if k > h or k > w:
        raise ShapeError(f"box_filter: window {k} larger than input {h}x{w}")
    out = sliding_window_view(x.data, (k, k), axis=(2, 3)).mean(axis=(-2, -1))
    inv = 1.0 / (k * k)

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        return (sliding_window_view(gp, (k, k), axis=(2, 3)).sum(axis=(-2, -1)) * inv,)

    y = make_result(np.ascontiguousarray(out), (x,), bw, "box_filter")
    return reshape(y, y.shape[1:]) if squeeze else y


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.minimum(np.floor(src).astype(int), max(n_in - 2, 0))
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1 - f)
    np.add.at(m, (rows, i1), f)
    return m


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    # overlap of output cell [o*r, (o+1)*r) with input cell [i, i+1), r = n_in / n_out
    m = np.zeros((n_out, n_in))
    r = n_in / n_out
    for o in range(n_out):
        lo, hi = o * r, (o + 1) * r
        for i in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            m[o, i] = (min(hi, i + 1) - max(lo, i)) / r
    return m


def _nearest_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    idx = np.minimum(np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(int), n_in - 1)
    m[np.arange(n_out), idx] = 1.0
    return m


_RESAMPLE_CACHE: dict = {}


def resample_matrix(n_in: int, n_out: int, mode: str) -> np.ndarray:
    key = (n_in, n_out, mode)
    m = _RESAMPLE_CACHE.get(key)
    if m is None:
        if n_out < 1:
            raise ShapeError("resample: target extent must be >= 1")
        if n_in == n_out:
            m = np.eye(n_in)
        elif mode == "bilinear":
            m = _bilinear_matrix(n_in, n_out)
        elif mode in ("average", "average-pool", "area"):
            m = _area_matrix(n_in, n_out)
        elif mode == "nearest":
            m = _nearest_matrix(n_in, n_out)
        else:
            raise ValueError(f"unknown resample mode {mode!r}")
        m.setflags(write=False)
        _RESAMPLE_CACHE[key] = m
    return m


def resample(x, target_h: int, target_w: int, mode: str = "bilinear") -> Tensor:
    """Separable resampling of the last two axes.

    ``bilinear`` uses half-pixel centres (corners not aligned); ``average``
    averages the input cells covered by each output cell, which is exact
    average pooling when the extents divide; ``nearest`` replicates.
    """
    x = as_tensor(x)
    if target_h < 1 or target_w < 1:
        raise ShapeError("resample: target extents must be >= 1")
    h, w = x.shape[-2:]
    if (h, w) == (target_h, target_w):
        return x
    ry = resample_matrix(h, target_h, mode).astype(x.dtype)
    rx = resample_matrix(w, target_w, mode).astype(x.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)
    return make_result(out, (x,), lambda g: (np.matmul(np.matmul(ry.T, g), rx),), "resample")


def grid_sample(image, coords) -> tuple[Tensor, np.ndarray]:
    """Bilinear sampling at pixel coordinates, differentiable in image and coords.

    image: (B,C,H,W) or (C,H,W); coords: (B,H',W',2) or (H',W',2) holding (x, y)
    with integer values at pixel centres. Out-of-range coordinates are clamped
    to the border; the returned boolean mask is True where the coordinate lies
    inside [0, W-1] x [0, H-1].
    """
    image, squeeze = _as_batched(as_tensor(image), "grid_sample")
    coords = as_tensor(coords)
    if coords.ndim == 3:
        coords = reshape(coords, (1,) + coords.shape)
    if coords.ndim != 4 or coords.shape[-1] != 2:
        raise ShapeError(f"grid_sample: coords must be (B,H,W,2), got {coords.shape}")
    if coords.shape[0] != image.shape[0]:
        if coords.shape[0] == 1:
            coords = broadcast_to(coords, (image.shape[0],) + coords.shape[1:])
        else:
            raise ShapeError(f"grid_sample: batch {image.shape[0]} vs coords {coords.shape[0]}")
    img, crd = image.data, coords.data
    out, valid = _accel.grid_sample_forward(img, crd.astype(img.dtype, copy=False))

    def bw(g):
        gi, gc = _accel.grid_sample_backward(img, crd.astype(img.dtype, copy=False), g,
                                             image.requires_grad, coords.requires_grad)
        if gc is not None:
            gc = gc.astype(crd.dtype, copy=False)
        return gi, gc

    y = make_result(out, (image, coords), bw, "grid_sample")
    if squeeze:
        return reshape(y, y.shape[1:]), valid[0]
    return y, valid


# registry of primitives exercised by the gradient sweep
PRIMITIVES = (
    "add", "sub", "mul", "div", "scale", "neg", "square", "sqrt", "exp", "log", "abs",
    "relu", "sigmoid", "where", "sum", "mean", "reshape", "transpose", "index", "concat",
    "broadcast_to", "pad2d", "matmul", "softmax", "layer_norm", "conv2d", "box_filter",
    "resample", "grid_sample",
)

