"""Differentiable operations on :class:`Tensor`.

Each op computes its forward value with numpy and attaches an explicit
backward closure. Fused ops (layer_norm, softmax, gelu, bce, conv) carry
hand-derived gradients; everything is checked against central finite
differences in the test suite.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, _needs_grad, make_result

GELU_C = math.sqrt(2.0 / math.pi)  # sqrt(2/pi)
GELU_A = 0.044715


class ShapeError(ValueError):
    pass


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return make_result(out, (a, b), backward, "div")


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(c (x + 0.044715 x^3))), c = sqrt(2/pi)."""
    xd = x.data
    x2 = xd * xd
    inner = GELU_C * xd * (1.0 + GELU_A * x2)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return make_result(out, (x,), backward, "gelu")


# ------------------------------------------------------------------ reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ------------------------------------------------------------------- movement

def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                       lambda g: (g.transpose(inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return make_result(np.ascontiguousarray(x.data[index]), (x,), backward, "getitem")


def concat(xs, axis: int = 0) -> Tensor:
    xs = list(xs)
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in xs], axis=axis), xs, backward, "concat")


def split(x: Tensor, index: int, axis: int) -> tuple:
    """Split ``x`` along ``axis`` into ``[:index]`` and ``[index:]``."""
    lead = (slice(None),) * (axis % x.ndim)
    return getitem(x, lead + (slice(None, index),)), getitem(x, lead + (slice(index, None),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return make_result(np.broadcast_to(x.data, shape).copy(), (x,),
                       lambda g: (_unbroadcast(g, orig),), "broadcast_to")


# ---------------------------------------------------------------------- linalg

def matmul(a, b) -> Tensor:
    """Batched matrix product; inner dimensions must agree.

    Accumulation order is whatever the BLAS gemm kernel uses; it is fixed for
    a given build and thread count, which is all determinism relies on.
    """
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = _needs_grad(a), _needs_grad(b)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if need_b else None
        return ga, gb

    return make_result(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is (in, out)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear shape mismatch: x {x.shape}, w {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear bias shape {b.shape} does not match w {w.shape}")
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, wd.shape[0])
    out = x2 @ wd
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (wd.shape[1],))

    need_x = _needs_grad(x)

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape) if need_x else None
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return make_result(out, parents, backward, "linear")


# --------------------------------------------------------------- normalization

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit (population) variance, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shape mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


# ---------------------------------------------------------------- convolution

def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """(B,C,H,W) -> (B,H,W,C*k*k) for a stride-1 'same' convolution."""
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((B, C, k, k, H, W), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + H, j:j + W]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(B, H, W, C * k * k)


def _col2im(cols: np.ndarray, shape: tuple, k: int, pad: int) -> np.ndarray:
    B, C, H, W = shape
    cols = cols.reshape(B, H, W, C, k, k).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + H, j:j + W] += cols[:, :, i, j]
    return xp[:, :, pad:pad + H, pad:pad + W]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution. x (B,C,H,W), w (O,C,k,k) with odd k."""
    B, C, H, W = x.shape
    O, Cw, k, k2 = w.shape
    if Cw != C or k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d shape mismatch: x {x.shape}, w {w.shape}")
    pad = k // 2
    cols = _im2col(x.data, k, pad) if k > 1 else x.data.transpose(0, 2, 3, 1)
    wm = w.data.reshape(O, C * k * k)
    out = cols.reshape(-1, C * k * k) @ wm.T
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.reshape(B, H, W, O).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols.reshape(-1, C * k * k)).reshape(w.shape)
        gcols = (g2 @ wm).reshape(B, H, W, C * k * k)
        if k > 1:
            gx = _col2im(gcols, x.shape, k, pad)
        else:
            gx = np.ascontiguousarray(gcols.transpose(0, 3, 1, 2))
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return make_result(out, parents, backward, "conv2d")


def space_to_depth(x: Tensor, f: int) -> Tensor:
    """(B,C,H,W) -> (B,H/f,W/f,C*f*f); channel-major within each block."""
    B, C, H, W = x.shape
    if H % f or W % f:
        raise ShapeError(f"space_to_depth: {H}x{W} not divisible by {f}")
    y = reshape(x, (B, C, H // f, f, W // f, f))
    y = transpose(y, (0, 2, 4, 1, 3, 5))
    return reshape(y, (B, H // f, W // f, C * f * f))


def depth_to_space(x: Tensor, f: int, channels: int) -> Tensor:
    """(B,h,w,C*f*f) -> (B,C,h*f,w*f); inverse of :func:`space_to_depth`."""
    B, h, w, _ = x.shape
    y = reshape(x, (B, h, w, channels, f, f))
    y = transpose(y, (0, 3, 1, 4, 2, 5))
    return reshape(y, (B, channels, h * f, w * f))


def conv_down2(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Kernel-2 stride-2 convolution; w is (C*4, O)."""
    y = linear(space_to_depth(x, 2), w, b)
    return transpose(y, (0, 3, 1, 2))


def deconv_up2(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Kernel-2 stride-2 transposed convolution; w is (C, O*4), b is (O,)."""
    out_ch = b.shape[0]
    y = linear(transpose(x, (0, 2, 3, 1)), w)
    y = depth_to_space(y, 2, out_ch)
    return add(y, reshape(b, (1, out_ch, 1, 1)))


def upsample_nearest(x: Tensor, f: int) -> Tensor:
    if f == 1:
        return x
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, f, W, f).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward, "upsample_nearest")


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float32) -> np.ndarray:
    """Row-stochastic (n_out, n_in) interpolation matrix, half-pixel centers."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m.astype(dtype)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize of (B,C,H,W) as two constant matmuls."""
    H, W = x.shape[-2:]
    if (H, W) == (out_h, out_w):
        return x
    ah = Tensor(bilinear_matrix(H, out_h, x.dtype))
    awt = Tensor(bilinear_matrix(W, out_w, x.dtype).T.copy())
    return matmul(matmul(ah, x), awt)


# --------------------------------------------------------------------- losses

def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy from logits: max(z,0) - z*y + log(1 + exp(-|z|))."""
    z = logits.data
    y = np.asarray(target, dtype=z.dtype)
    if y.shape != z.shape:
        raise ShapeError(f"bce shape mismatch: logits {z.shape}, mask {y.shape}")
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def backward(g):
        return (g * (_sigmoid_np(z) - y) / n,)

    return make_result(np.asarray(loss.mean(), dtype=z.dtype), (logits,), backward, "bce")
