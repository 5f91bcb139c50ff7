"""Spatial transformation by a displacement field.

Fields hold one vector per voxel in voxel units of the grid they live on,
channel order matching the spatial axis order (D, W, H).  Sampling positions
outside the grid are clamped to the border.
"""
from __future__ import annotations

import numpy as np

from .engine import Tensor
from .engine import functional as F


def _check_extents(volume_shape, field_shape):
    if len(field_shape) != 5 or field_shape[1] != 3:
        raise ValueError(f"displacement field must be (B, 3, D, W, H), got {field_shape}")
    if volume_shape[0] != field_shape[0] or tuple(volume_shape[2:]) != tuple(field_shape[2:]):
        raise ValueError(f"volume {volume_shape} and field {field_shape} extents differ")


def _corners(u: np.ndarray):
    """Lower corner indices, fractional offsets and in-range masks for p + u."""
    spatial = u.shape[2:]
    idx, frac, inside = [], [], []
    for ax, n in enumerate(spatial):
        shape = [1, 1, 1]
        shape[ax] = n
        grid = np.arange(n, dtype=u.dtype).reshape(shape)
        c = grid + u[:, ax]
        inside.append((c >= 0) & (c <= n - 1))
        c = np.clip(c, 0, n - 1)
        i0 = np.clip(np.floor(c), 0, max(n - 2, 0)).astype(np.intp)
        idx.append(i0)
        frac.append((c - i0).astype(u.dtype))
    return idx, frac, inside


def warp_trilinear(volume: Tensor, u: Tensor) -> Tensor:
    """Sample ``volume`` at ``p + u(p)`` with trilinear interpolation.

    Differentiable with respect to both the volume and the field.
    """
    _check_extents(volume.shape, u.shape)
    if not np.all(np.isfinite(u.data)):
        raise FloatingPointError("displacement field holds non-finite values")
    vol = volume.data
    B, C = vol.shape[:2]
    D, W, H = vol.shape[2:]
    V = D * W * H
    (i0, j0, k0), (fd, fw, fh), inside = _corners(u.data)
    step = (1 if D > 1 else 0, 1 if W > 1 else 0, 1 if H > 1 else 0)
    flat = vol.reshape(B, C, V)
    batch_off = (np.arange(B) * V).reshape(B, 1, 1, 1)

    corners = []
    for a in (0, 1):
        wa = fd if a else 1 - fd
        for b in (0, 1):
            wb = fw if b else 1 - fw
            for c in (0, 1):
                wc = fh if c else 1 - fh
                lin = ((i0 + a * step[0]) * W + (j0 + b * step[1])) * H + (k0 + c * step[2])
                corners.append((a, b, c, wa, wb, wc, lin))

    out = np.zeros_like(vol)
    gathered = []
    for a, b, c, wa, wb, wc, lin in corners:
        vals = np.take_along_axis(flat, lin.reshape(B, 1, V).repeat(C, axis=1), axis=2).reshape(vol.shape)
        gathered.append(vals)
        out += (wa * wb * wc)[:, None] * vals

    def back(g):
        gvol = gu = None
        if volume.requires_grad:
            acc = np.zeros(B * C * V, dtype=np.float64)
            chan_off = (np.arange(C) * V).reshape(1, C, 1)
            for a, b, c, wa, wb, wc, lin in corners:
                full = (lin.reshape(B, 1, V) + batch_off.reshape(B, 1, 1) * C + chan_off)
                w = ((wa * wb * wc)[:, None] * g).reshape(B, C, V)
                acc += np.bincount(full.ravel(), weights=w.ravel(), minlength=B * C * V)
            gvol = acc.reshape(vol.shape).astype(vol.dtype)
        if u.requires_grad:
            gd = np.zeros(u.shape[:1] + u.shape[2:], dtype=u.dtype)
            gw, gh = gd.copy(), gd.copy()
            for (a, b, c, wa, wb, wc, _), vals in zip(corners, gathered):
                gv = (g * vals).sum(axis=1)
                sa = 1 if a else -1
                sb = 1 if b else -1
                sc = 1 if c else -1
                gd += sa * wb * wc * gv
                gw += sb * wa * wc * gv
                gh += sc * wa * wb * gv
            gu = np.stack([gd * inside[0], gw * inside[1], gh * inside[2]], axis=1).astype(u.dtype)
        return gvol, gu

    return Tensor.from_op(out, (volume, u), back, "warp_trilinear")


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, np.floor(x + 0.5), np.ceil(x - 0.5))


def warp_nearest(labels: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Nearest-neighbour warp of an integer label map.

    ``labels`` is (D, W, H) or (B, 1, D, W, H); ``u`` matches with 3 channels.
    Positions are rounded half away from zero and then clamped.
    """
    squeeze = labels.ndim == 3
    lab = labels[None, None] if squeeze else labels
    field = u[None] if u.ndim == 4 else u
    _check_extents(lab.shape, field.shape)
    B = lab.shape[0]
    spatial = lab.shape[2:]
    coords = []
    for ax, n in enumerate(spatial):
        shape = [1, 1, 1]
        shape[ax] = n
        grid = np.arange(n).reshape(shape)
        coords.append(np.clip(round_half_away(grid + field[:, ax]), 0, n - 1).astype(np.intp))
    out = np.empty_like(lab)
    for b in range(B):
        out[b, 0] = lab[b, 0][coords[0][b], coords[1][b], coords[2][b]]
    return out[0, 0] if squeeze else out


def upsample_field(u: Tensor, factor: int) -> Tensor:
    """Bring a coarse field to a finer grid: trilinear resampling, then scale vectors by ``factor``."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"field upsampling factor must be a positive integer, got {factor}")
    if factor == 1:
        return u
    return F.scalar_mul(F.trilinear_upsample(u, int(factor)), float(factor))


def identity_grid(shape: tuple[int, int, int], dtype=np.float64) -> np.ndarray:
    """Voxel coordinates of a grid as a (3, D, W, H) array."""
    return np.stack(np.meshgrid(*[np.arange(n, dtype=dtype) for n in shape], indexing="ij"))


def warp_volume_np(volume: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Trilinear warp of a single (D, W, H) array by a (3, D, W, H) field, no graph."""
    out = warp_trilinear(Tensor(volume[None, None]), Tensor(u[None].astype(volume.dtype)))
    return out.data[0, 0]
