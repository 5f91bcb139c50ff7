"""Differentiable operations on :class:`Tensor`.

Every op returns a new tensor; gradients are exact (no approximations beyond
floating point).  Spatial tensors follow the (B, C, D, W, H) layout.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor

NORM_EPS = 1e-5


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# -- elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return Tensor.from_op(a.data + a.data.dtype.type(b), (a,), lambda g: (g,), "add_scalar")
    if not isinstance(a, Tensor) and np.isscalar(a):
        return add(b, a)
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data + b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return add(a, -b)
    if not isinstance(a, Tensor) and np.isscalar(a):
        return add(scalar_mul(b, -1.0), a)
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data - b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return Tensor.from_op(a.data * s, (a,), lambda g: (g * s,), "scalar_mul")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scalar_mul(a, b)
    if not isinstance(a, Tensor) and np.isscalar(a):
        return scalar_mul(b, a)
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(ad * bd, (a, b), back, "mul")


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scalar_mul(a, 1.0 / b)
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(out, (a, b), back, "div")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor.from_op(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    xd = x.data
    pos = xd > 0
    s = xd.dtype.type(slope)
    out = np.where(pos, xd, xd * s)
    return Tensor.from_op(out, (x,), lambda g: (np.where(pos, g, g * s),), "leaky_relu")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    pos = xd > 0
    return Tensor.from_op(np.where(pos, xd, 0).astype(xd.dtype), (x,),
                          lambda g: (np.where(pos, g, 0).astype(g.dtype),), "relu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(y, (x,), back, "softmax")


# -- reductions and shape -------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(out, (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scalar_mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return Tensor.from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return Tensor.from_op(np.ascontiguousarray(x.data[index]), (x,), back, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ValueError(f"concat: incompatible shapes {[tt.shape for tt in tensors]} along axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


# -- convolution-like -----------------------------------------------------------

def _triple(v) -> tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding=0) -> Tensor:
    """3-D cross-correlation with zero padding, computed through im2col + GEMM."""
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(f"conv3d expects 5-D input and weight, got {x.shape} and {weight.shape}")
    B, cin, D, W, H = x.shape
    cout, wcin, kd, kw, kh = weight.shape
    if wcin != cin:
        raise ValueError(f"conv3d: weight expects {wcin} input channels but input has {cin} (input {x.shape}, weight {weight.shape})")
    if stride < 1:
        raise ValueError("conv3d: stride must be >= 1")
    pd, pw, ph = _triple(padding)
    out_sz = tuple(conv_output_size(n, k, stride, p) for n, k, p in zip((D, W, H), (kd, kw, kh), (pd, pw, ph)))
    if min(out_sz) < 1:
        raise ValueError(f"conv3d: kernel {(kd, kw, kh)} does not fit padded input {(D, W, H)}")
    Do, Wo, Ho = out_sz

    xd = x.data
    if pd or pw or ph:
        xp = np.zeros((B, cin, D + 2 * pd, W + 2 * pw, H + 2 * ph), dtype=xd.dtype)
        xp[:, :, pd:pd + D, pw:pw + W, ph:ph + H] = xd
    else:
        xp = np.ascontiguousarray(xd)
    sB, sC, sD, sW, sH = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(B, cin, kd, kw, kh, Do, Wo, Ho),
        strides=(sB, sC, sD, sW, sH, sD * stride, sW * stride, sH * stride), writeable=False)
    K = cin * kd * kw * kh
    V = Do * Wo * Ho
    cols = view.reshape(B, K, V)
    w2 = weight.data.reshape(cout, K)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1)
    out = out.reshape(B, cout, Do, Wo, Ho)
    xp_shape = xp.shape
    del xp, view

    def back(g):
        g2 = g.reshape(B, cout, V)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(B, cin, kd, kw, kh, Do, Wo, Ho)
            gxp = np.zeros(xp_shape, dtype=g.dtype)
            for i in range(kd):
                for j in range(kw):
                    for k in range(kh):
                        gxp[:, :, i:i + stride * Do:stride, j:j + stride * Wo:stride,
                            k:k + stride * Ho:stride] += gcols[:, :, i, j, k]
            gx = gxp[:, :, pd:pd + D, pw:pw + W, ph:ph + H]
            if pd or pw or ph:
                gx = np.ascontiguousarray(gx)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(out, parents, back, "conv3d")


def linear_pervoxel(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Apply the same affine map to every voxel's channel vector."""
    B, cin = x.shape[:2]
    spatial = x.shape[2:]
    cout, wcin = weight.shape
    if wcin != cin:
        raise ValueError(f"linear_pervoxel: weight has {wcin} columns but input has {cin} channels")
    xs = x.data.reshape(B, cin, -1)
    w = weight.data
    out = np.matmul(w, xs)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1)

    def back(g):
        g2 = g.reshape(B, cout, -1)
        gx = np.matmul(w.T, g2).reshape(x.shape) if x.requires_grad else None
        gw = np.tensordot(g2, xs, axes=([0, 2], [0, 2])) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=(0, 2)) if bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(out.reshape((B, cout) + spatial), parents, back, "linear_pervoxel")


# -- normalization --------------------------------------------------------------

def _normalize(xr: np.ndarray, axes: tuple[int, ...], eps: float):
    mu = xr.mean(axis=axes, keepdims=True)
    xc = xr - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv, var


def _normalize_back(gxhat: np.ndarray, xhat: np.ndarray, inv: np.ndarray, axes):
    m1 = gxhat.mean(axis=axes, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
    return inv * (gxhat - m1 - xhat * m2)


def _affine(xhat: np.ndarray, x: Tensor, gamma: Tensor | None, beta: Tensor | None, back_core, op: str) -> Tensor:
    C = x.shape[1]
    bshape = (1, C) + (1,) * (x.ndim - 2)
    red = (0,) + tuple(range(2, x.ndim))
    out = xhat
    if gamma is not None:
        out = out * gamma.data.reshape(bshape)
    if beta is not None:
        out = out + beta.data.reshape(bshape)

    def back(g):
        gxhat = g * gamma.data.reshape(bshape) if gamma is not None else g
        gx = back_core(gxhat) if x.requires_grad else None
        res = [gx]
        if gamma is not None:
            res.append((g * xhat).sum(axis=red) if gamma.requires_grad else None)
        if beta is not None:
            res.append(g.sum(axis=red) if beta.requires_grad else None)
        return tuple(res)

    parents = [x] + [t for t in (gamma, beta) if t is not None]
    return Tensor.from_op(out.astype(x.dtype, copy=False), parents, back, op)


def group_norm(x: Tensor, gamma: Tensor | None, beta: Tensor | None, groups: int, eps: float = NORM_EPS) -> Tensor:
    """Normalize over (channels-in-group, spatial) per sample.  groups == C is instance norm."""
    B, C = x.shape[:2]
    if groups < 1 or C % groups:
        raise ValueError(f"group_norm: {groups} groups do not divide {C} channels")
    xr = x.data.reshape(B, groups, -1)
    xhat_r, inv, _ = _normalize(xr, (2,), eps)
    xhat = xhat_r.reshape(x.shape)

    def core(gxhat):
        return _normalize_back(gxhat.reshape(B, groups, -1), xhat_r, inv, (2,)).reshape(x.shape)

    return _affine(xhat, x, gamma, beta, core, "group_norm")


def instance_norm(x: Tensor, gamma: Tensor | None, beta: Tensor | None, eps: float = NORM_EPS) -> Tensor:
    return group_norm(x, gamma, beta, groups=x.shape[1], eps=eps)


def batch_norm3d(x: Tensor, gamma: Tensor | None, beta: Tensor | None,
                 running_mean: np.ndarray | None = None, running_var: np.ndarray | None = None,
                 training: bool = True, momentum: float = 0.1, eps: float = NORM_EPS,
                 mode: str = "batch") -> Tensor:
    """Batch normalization over (B, spatial) per channel.

    ``mode="instance"`` switches to per-sample statistics, the fallback used
    for batch size 1.  In ``"batch"`` mode, training with a single sample is a
    configuration error.  Running statistics are updated in place.
    """
    if mode == "instance":
        return instance_norm(x, gamma, beta, eps)
    if mode != "batch":
        raise ValueError(f"unknown normalization mode {mode!r}")
    B, C = x.shape[:2]
    if training:
        if B < 2:
            raise ValueError("batch_norm3d: batch statistics need batch >= 2; "
                             "use mode='instance' for single-sample training")
        xr = np.moveaxis(x.data, 1, 0).reshape(C, B, -1)
        xhat_r, inv, var = _normalize(xr, (1, 2), eps)
        if running_mean is not None:
            n = xr.shape[1] * xr.shape[2]
            running_mean *= 1 - momentum
            running_mean += momentum * xr.mean(axis=(1, 2))
            running_var *= 1 - momentum
            running_var += momentum * var.reshape(C) * n / max(n - 1, 1)
        xhat = np.moveaxis(xhat_r.reshape((C, B) + x.shape[2:]), 0, 1)

        def core(gxhat):
            gr = np.moveaxis(gxhat, 1, 0).reshape(C, B, -1)
            gx = _normalize_back(gr, xhat_r, inv, (1, 2))
            return np.ascontiguousarray(np.moveaxis(gx.reshape((C, B) + x.shape[2:]), 0, 1))

        return _affine(np.ascontiguousarray(xhat), x, gamma, beta, core, "batch_norm3d")
    bshape = (1, C) + (1,) * (x.ndim - 2)
    inv = (1.0 / np.sqrt(running_var + eps)).reshape(bshape).astype(x.dtype)
    mu = running_mean.reshape(bshape).astype(x.dtype)
    xhat = (x.data - mu) * inv
    return _affine(xhat, x, gamma, beta, lambda gxhat: gxhat * inv, "batch_norm3d_eval")


# -- resampling -----------------------------------------------------------------

def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Align-corners linear interpolation matrix of shape (n_out, n_in)."""
    A = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        A[:, 0] = 1.0
        return A
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 2)
    f = pos - i0
    rows = np.arange(n_out)
    A[rows, i0] = 1.0 - f
    A[rows, i0 + 1] += f
    return A


def _apply_along(x: np.ndarray, A: np.ndarray, axis: int) -> np.ndarray:
    y = np.tensordot(x, A, axes=([axis], [1]))
    return np.moveaxis(y, -1, axis)


def trilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Align-corners trilinear upsampling of the three trailing axes by an integer factor."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return Tensor.from_op(x.data.copy(), (x,), lambda g: (g,), "upsample")
    mats = [interp_matrix(n, n * factor, x.dtype) for n in x.shape[-3:]]
    axes = [x.ndim - 3, x.ndim - 2, x.ndim - 1]
    y = x.data
    for A, ax in zip(mats, axes):
        y = _apply_along(y, A, ax)
    y = np.ascontiguousarray(y)

    def back(g):
        for A, ax in zip(mats, axes):
            g = _apply_along(g, A.T, ax)
        return (np.ascontiguousarray(g),)

    return Tensor.from_op(y, (x,), back, "upsample")


def _box_sum_np(x: np.ndarray, radius: int, axes) -> np.ndarray:
    for ax in axes:
        n = x.shape[ax]
        c = np.cumsum(x, axis=ax)
        pad_shape = list(c.shape)
        pad_shape[ax] = 1
        c = np.concatenate([np.zeros(pad_shape, dtype=x.dtype), c], axis=ax)
        idx = np.arange(n)
        hi = np.minimum(idx + radius, n - 1) + 1
        lo = np.maximum(idx - radius, 0)
        x = np.take(c, hi, axis=ax) - np.take(c, lo, axis=ax)
    return x


def box_sum3d(x: Tensor, window: int) -> Tensor:
    """Sum over a cubic window clipped to the grid (no padding values enter the sum).

    Window membership is symmetric, so the op is self-adjoint.
    """
    if window % 2 != 1:
        raise ValueError(f"box window must be odd, got {window}")
    r = window // 2
    axes = (x.ndim - 3, x.ndim - 2, x.ndim - 1)
    return Tensor.from_op(_box_sum_np(x.data, r, axes), (x,), lambda g: (_box_sum_np(g, r, axes),), "box_sum3d")


def box_count3d(shape: tuple[int, int, int], window: int, dtype=np.float64) -> np.ndarray:
    """Number of grid voxels inside each clipped window."""
    return _box_sum_np(np.ones(shape, dtype=dtype), window // 2, (0, 1, 2))
