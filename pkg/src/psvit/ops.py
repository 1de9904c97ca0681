"""Primitive differentiable operations.

Each primitive is a :class:`~psvit.autograd.DiffOp`. Forward functions work
on plain arrays of any float dtype, so the same code runs in float32 for
training and in float64 for gradient audits.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .autograd import DiffOp, unbroadcast

__all__ = [
    "add", "sub", "mul", "scale", "matmul", "transpose", "reshape", "index",
    "concat", "broadcast_to", "sum_all", "relu", "gelu", "softmax_rows",
    "layer_norm", "cross_entropy_smoothed", "dropout", "clamp",
    "bilinear_sample", "bilinear_backward", "conv2d", "max_pool2d",
    "batch_norm_train", "batch_norm_eval", "channel_affine", "REGISTRY",
    "ShapeError", "SamplingError",
]

LN_EPS = 1e-6


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class SamplingError(ValueError):
    """Invalid sampling location."""


REGISTRY: dict[str, DiffOp] = {}


def _register(op: DiffOp) -> DiffOp:
    REGISTRY[op.name] = op
    return op


# --- elementwise arithmetic -------------------------------------------------

add = _register(DiffOp(
    "add",
    lambda a, b: a + b,
    lambda x, out, g: (unbroadcast(g, x[0].shape), unbroadcast(g, x[1].shape)),
))

sub = _register(DiffOp(
    "sub",
    lambda a, b: a - b,
    lambda x, out, g: (unbroadcast(g, x[0].shape), unbroadcast(-g, x[1].shape)),
))

mul = _register(DiffOp(
    "mul",
    lambda a, b: a * b,
    lambda x, out, g: (unbroadcast(g * x[1], x[0].shape), unbroadcast(g * x[0], x[1].shape)),
))

scale = DiffOp(
    "scale",
    lambda a, factor: a * factor,
    lambda x, out, g, factor: (g * factor,),
)


# --- linear algebra and shape -----------------------------------------------

def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _matmul_adj(x, out, g):
    a, b = x
    da = g @ np.swapaxes(b, -1, -2)
    db = np.swapaxes(a, -1, -2) @ g
    return unbroadcast(da, a.shape), unbroadcast(db, b.shape)


matmul = _register(DiffOp("matmul", _matmul_fwd, _matmul_adj))


def _transpose_adj(x, out, g, axes):
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(axes)),)


transpose = DiffOp(
    "transpose",
    lambda a, axes: np.transpose(a, axes),
    _transpose_adj,
)

reshape = DiffOp(
    "reshape",
    lambda a, shape: a.reshape(shape),
    lambda x, out, g, shape: (g.reshape(x[0].shape),),
)


def _index_adj(x, out, g, key):
    d = np.zeros_like(x[0])
    np.add.at(d, key, g)
    return (d,)


index = DiffOp("index", lambda a, key: a[key], _index_adj)


def _concat_adj(x, out, g, axis):
    sizes = np.cumsum([a.shape[axis] for a in x])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


concat = DiffOp(
    "concat",
    lambda *arrays, axis: np.concatenate(arrays, axis=axis),
    _concat_adj,
)

broadcast_to = DiffOp(
    "broadcast_to",
    lambda a, shape: np.broadcast_to(a, shape).copy(),
    lambda x, out, g, shape: (unbroadcast(g, x[0].shape),),
)

sum_all = DiffOp(
    "sum_all",
    lambda a: np.sum(a),
    lambda x, out, g: (np.broadcast_to(g, x[0].shape).copy(),),
)


# --- activations ------------------------------------------------------------

relu = _register(DiffOp(
    "relu",
    lambda a: np.maximum(a, 0),
    lambda x, out, g: (g * (x[0] > 0),),
    lambda a: a > 0,
))

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu_fwd(a):
    return 0.5 * a * (1.0 + erf(a * _INV_SQRT2))


def _gelu_adj(x, out, g):
    a = x[0]
    cdf = 0.5 * (1.0 + erf(a * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * a * a)
    return (g * (cdf + a * pdf),)


gelu = _register(DiffOp("gelu", _gelu_fwd, _gelu_adj))


def _softmax_fwd(a):
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_adj(x, out, g):
    return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)


softmax_rows = _register(DiffOp("softmax_rows", _softmax_fwd, _softmax_adj))


def _dropout_fwd(a, mask, rate):
    return a * mask / (1.0 - rate)


dropout = DiffOp(
    "dropout",
    _dropout_fwd,
    lambda x, out, g, mask, rate: (g * mask / (1.0 - rate),),
)


# --- normalization ----------------------------------------------------------

def _ln_stats(a, eps):
    mu = a.mean(axis=-1, keepdims=True)
    var = a.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return (a - mu) * inv, inv


def _layer_norm_fwd(a, gamma, beta, axis=-1, eps=LN_EPS):
    xm = np.moveaxis(a, axis, -1)
    xhat, _ = _ln_stats(xm, eps)
    return np.moveaxis(xhat * gamma + beta, -1, axis)


def _layer_norm_adj(x, out, g, axis=-1, eps=LN_EPS):
    a, gamma, _ = x
    xm = np.moveaxis(a, axis, -1)
    gm = np.moveaxis(g, axis, -1)
    xhat, inv = _ln_stats(xm, eps)
    red = tuple(range(gm.ndim - 1))
    dgamma = np.sum(gm * xhat, axis=red)
    dbeta = np.sum(gm, axis=red)
    dxhat = gm * gamma
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    )
    return np.moveaxis(dx, -1, axis), dgamma, dbeta


layer_norm = _register(DiffOp("layer_norm", _layer_norm_fwd, _layer_norm_adj))


def _chan(v, ndim):
    return v.reshape((1, -1) + (1,) * (ndim - 2))


channel_affine = _register(DiffOp(
    "channel_affine",
    lambda a, gamma, beta: a * _chan(gamma, a.ndim) + _chan(beta, a.ndim),
    lambda x, out, g: (
        g * _chan(x[1], g.ndim),
        np.sum(g * x[0], axis=(0, 2, 3)),
        np.sum(g, axis=(0, 2, 3)),
    ),
))


def _bn_train_fwd(a, gamma, beta, eps):
    mu = a.mean(axis=(0, 2, 3), keepdims=True)
    var = a.var(axis=(0, 2, 3), keepdims=True)
    xhat = (a - mu) / np.sqrt(var + eps)
    return xhat * _chan(gamma, a.ndim) + _chan(beta, a.ndim)


def _bn_train_adj(x, out, g, eps):
    a, gamma, _ = x
    mu = a.mean(axis=(0, 2, 3), keepdims=True)
    var = a.var(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a - mu) * inv
    dgamma = np.sum(g * xhat, axis=(0, 2, 3))
    dbeta = np.sum(g, axis=(0, 2, 3))
    dxhat = g * _chan(gamma, a.ndim)
    dx = inv * (
        dxhat
        - dxhat.mean(axis=(0, 2, 3), keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=(0, 2, 3), keepdims=True)
    )
    return dx, dgamma, dbeta


batch_norm_train = _register(DiffOp("batch_norm_train", _bn_train_fwd, _bn_train_adj))


def _bn_eval_fwd(a, gamma, beta, mean, var, eps):
    s = gamma / np.sqrt(var + eps)
    return a * _chan(s, a.ndim) + _chan(beta - mean * s, a.ndim)


def _bn_eval_adj(x, out, g, mean, var, eps):
    a, gamma, _ = x
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a - _chan(mean, a.ndim)) * _chan(inv, a.ndim)
    return (
        g * _chan(gamma * inv, a.ndim),
        np.sum(g * xhat, axis=(0, 2, 3)),
        np.sum(g, axis=(0, 2, 3)),
    )


batch_norm_eval = DiffOp("batch_norm_eval", _bn_eval_fwd, _bn_eval_adj)


# --- loss -------------------------------------------------------------------

def _smoothed_targets(targets, k, eps, dtype):
    targets = np.asarray(targets).reshape(-1)
    if np.any(targets < 0) or np.any(targets >= k):
        raise IndexError(f"target index out of range for {k} classes: {targets.tolist()}")
    q = np.full((targets.size, k), eps / k, dtype=dtype)
    q[np.arange(targets.size), targets] = 1.0 - eps + eps / k
    return q


def _ce_fwd(logits, targets, eps):
    z = logits.reshape(-1, logits.shape[-1])
    q = _smoothed_targets(targets, z.shape[-1], eps, z.dtype)
    shifted = z - z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return -np.sum(q * logp) / z.shape[0]


def _ce_adj(x, out, g, targets, eps):
    logits = x[0]
    z = logits.reshape(-1, logits.shape[-1])
    q = _smoothed_targets(targets, z.shape[-1], eps, z.dtype)
    p = _softmax_fwd(z)
    return ((g * (p - q) / z.shape[0]).reshape(logits.shape),)


cross_entropy_smoothed = _register(DiffOp("cross_entropy_smoothed", _ce_fwd, _ce_adj))


# --- sampling ---------------------------------------------------------------

def _clamp_fwd(p, lo, hi):
    return np.clip(p, lo, hi)


def _clamp_adj(x, out, g, lo, hi):
    p = x[0]
    return (g * ((p >= lo) & (p <= hi)),)


clamp = _register(DiffOp(
    "clamp", _clamp_fwd, _clamp_adj,
    lambda p, lo, hi: np.stack(np.broadcast_arrays(p < lo, p > hi)),
))


def _corners(p, H, W):
    """Integer neighbours and fractional weights for locations ``p`` (B,2,L)."""
    if not np.all(np.isfinite(p)):
        bad = np.argwhere(~np.isfinite(p))[0]
        raise SamplingError(f"non-finite sampling location at index {int(bad[-1])}")
    py, px = p[:, 0], p[:, 1]
    tol = 1e-4
    if py.min() < -tol or px.min() < -tol or py.max() > H - 1 + tol or px.max() > W - 1 + tol:
        i = int(np.argwhere((py < -tol) | (px < -tol) | (py > H - 1 + tol) | (px > W - 1 + tol))[0][-1])
        raise SamplingError(f"sampling location {i} lies outside [0,{H - 1}]x[0,{W - 1}]; clamp first")
    y0 = np.clip(np.floor(py), 0, max(H - 2, 0)).astype(np.int64)
    x0 = np.clip(np.floor(px), 0, max(W - 2, 0)).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = py - y0
    wx = px - x0
    return y0, x0, y1, x1, wy, wx


def _gather(Ff, idx):
    # Ff: (B,C,HW), idx: (B,L) -> (B,C,L)
    return np.take_along_axis(Ff, idx[:, None, :], axis=2)


def _as_batched(F, p):
    batched = F.ndim == 4
    if not batched:
        F, p = F[None], p[None]
    return F, p, batched


def _bilinear_fwd(F, p):
    F, p, batched = _as_batched(F, p)
    B, C, H, W = F.shape
    y0, x0, y1, x1, wy, wx = _corners(p, H, W)
    Ff = F.reshape(B, C, H * W)
    out = (
        _gather(Ff, y0 * W + x0) * ((1 - wy) * (1 - wx))[:, None]
        + _gather(Ff, y0 * W + x1) * ((1 - wy) * wx)[:, None]
        + _gather(Ff, y1 * W + x0) * (wy * (1 - wx))[:, None]
        + _gather(Ff, y1 * W + x1) * (wy * wx)[:, None]
    )
    return out if batched else out[0]


def bilinear_backward(F: np.ndarray, p: np.ndarray, upstream: np.ndarray):
    """Gradients of bilinear sampling wrt the feature map and the locations.

    The location gradient differentiates the triangular kernel: along each
    axis the slope is +-1 times the weight on the orthogonal axis.
    """
    F, p, batched = _as_batched(F, p)
    g = upstream if batched else upstream[None]
    B, C, H, W = F.shape
    y0, x0, y1, x1, wy, wx = _corners(p, H, W)
    Ff = F.reshape(B, C, H * W)
    f00 = _gather(Ff, y0 * W + x0)
    f01 = _gather(Ff, y0 * W + x1)
    f10 = _gather(Ff, y1 * W + x0)
    f11 = _gather(Ff, y1 * W + x1)
    wy_, wx_ = wy[:, None], wx[:, None]
    dpy = np.sum(g * ((1 - wx_) * (f10 - f00) + wx_ * (f11 - f01)), axis=1)
    dpx = np.sum(g * ((1 - wy_) * (f01 - f00) + wy_ * (f11 - f10)), axis=1)
    # y1 == y0 only when H == 1; the kernel has no slope there
    dpy = np.where((y1 == y0), 0.0, dpy)
    dpx = np.where((x1 == x0), 0.0, dpx)
    dp = np.stack([dpy, dpx], axis=1).astype(p.dtype)

    base = (np.arange(B)[:, None, None] * C + np.arange(C)[None, :, None]) * (H * W)
    flat_idx = []
    flat_w = []
    for idx, w in (
        (y0 * W + x0, (1 - wy) * (1 - wx)),
        (y0 * W + x1, (1 - wy) * wx),
        (y1 * W + x0, wy * (1 - wx)),
        (y1 * W + x1, wy * wx),
    ):
        flat_idx.append((base + idx[:, None, :]).ravel())
        flat_w.append((g * w[:, None]).ravel())
    dF = np.bincount(
        np.concatenate(flat_idx), weights=np.concatenate(flat_w), minlength=B * C * H * W
    ).reshape(B, C, H, W).astype(F.dtype)
    if not batched:
        return dF[0], dp[0]
    return dF, dp


def _bilinear_region(F, p):
    return np.floor(p).astype(np.int64)


bilinear_sample = _register(DiffOp(
    "bilinear_sample",
    _bilinear_fwd,
    lambda x, out, g: bilinear_backward(x[0], x[1], g),
    _bilinear_region,
))


# --- convolution and pooling ------------------------------------------------

def conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _windows(xp, k, stride, Ho, Wo):
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]


def _conv_geometry(x, w, stride, padding):
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} does not conform with weight {w.shape}")
    k = w.shape[2]
    Ho = conv_out_size(x.shape[2], k, stride, padding)
    Wo = conv_out_size(x.shape[3], k, stride, padding)
    if Ho < 1 or Wo < 1 or stride < 1:
        raise ShapeError(f"conv2d: kernel {k} with padding {padding} does not fit input {x.shape}")
    return k, Ho, Wo


def _pad(x, padding, value=0.0):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


def _conv_fwd(x, w, stride=1, padding=0):
    k, Ho, Wo = _conv_geometry(x, w, stride, padding)
    if k == 1 and padding == 0:
        xs = x[:, :, ::stride, ::stride]
        B, C, h, ww = xs.shape
        return (w[:, :, 0, 0] @ xs.reshape(B, C, h * ww)).reshape(B, -1, h, ww)
    cols = _windows(_pad(x, padding), k, stride, Ho, Wo)
    return np.einsum("bchwij,ocij->bohw", cols, w, optimize=True)


def _conv_adj(x, out, g, stride=1, padding=0):
    a, w = x
    k, Ho, Wo = _conv_geometry(a, w, stride, padding)
    if k == 1 and padding == 0:
        xs = a[:, :, ::stride, ::stride]
        dw = np.einsum("bohw,bchw->oc", g, xs, optimize=True)[:, :, None, None]
        dxs = np.einsum("oc,bohw->bchw", w[:, :, 0, 0], g, optimize=True)
        if stride == 1:
            return dxs, dw
        dx = np.zeros_like(a)
        dx[:, :, ::stride, ::stride] = dxs
        return dx, dw
    cols = _windows(_pad(a, padding), k, stride, Ho, Wo)
    dw = np.einsum("bohw,bchwij->ocij", g, cols, optimize=True)
    dxp = np.zeros(
        (a.shape[0], a.shape[1], a.shape[2] + 2 * padding, a.shape[3] + 2 * padding), dtype=a.dtype
    )
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += np.einsum(
                "bohw,oc->bchw", g, w[:, :, i, j], optimize=True
            )
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp, dw


conv2d = _register(DiffOp("conv2d", _conv_fwd, _conv_adj))


def _pool_fwd(x, k=3, stride=2, padding=1):
    Ho = conv_out_size(x.shape[2], k, stride, padding)
    Wo = conv_out_size(x.shape[3], k, stride, padding)
    win = _windows(_pad(x, padding, -np.inf), k, stride, Ho, Wo)
    return win.max(axis=(-2, -1))


def _pool_argmax(a, k, stride, padding, Ho, Wo):
    win = _windows(_pad(a, padding, -np.inf), k, stride, Ho, Wo)
    return win.reshape(win.shape[:4] + (k * k,)).argmax(axis=-1)


def _pool_region(a, k=3, stride=2, padding=1):
    Ho = conv_out_size(a.shape[2], k, stride, padding)
    Wo = conv_out_size(a.shape[3], k, stride, padding)
    return _pool_argmax(a, k, stride, padding, Ho, Wo)


def _pool_adj(x, out, g, k=3, stride=2, padding=1):
    a = x[0]
    Ho, Wo = out.shape[2], out.shape[3]
    arg = _pool_argmax(a, k, stride, padding, Ho, Wo)
    dxp = np.zeros((a.shape[0], a.shape[1], a.shape[2] + 2 * padding, a.shape[3] + 2 * padding), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += g * (arg == i * k + j)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return (dxp,)


max_pool2d = _register(DiffOp("max_pool2d", _pool_fwd, _pool_adj, _pool_region))
