"""Training objective: local NCC, smoothness penalty and per-scale auxiliary terms."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import LossWeights
from .engine import Tensor
from .engine import functional as F
from .warp import upsample_field, warp_trilinear


def ncc_local(warped: Tensor, fixed: Tensor, window: int = 9, eps: float = 1e-5) -> Tensor:
    """Negative mean of the squared local correlation coefficient, in [-1, 0].

    Windows are clipped at the grid border, so every statistic uses only
    voxels that exist; this keeps the measure invariant to positive affine
    intensity changes everywhere.
    """
    if warped.shape != fixed.shape:
        raise ValueError(f"ncc_local: shapes differ {warped.shape} vs {fixed.shape}")
    if window % 2 != 1:
        raise ValueError("ncc_local: window must be odd")
    I, J = warped, fixed
    n = F.box_count3d(I.shape[-3:], window, I.dtype)
    I_sum = F.box_sum3d(I, window)
    J_sum = F.box_sum3d(J, window)
    I2_sum = F.box_sum3d(F.square(I), window)
    J2_sum = F.box_sum3d(F.square(J), window)
    IJ_sum = F.box_sum3d(F.mul(I, J), window)
    inv_n = Tensor(1.0 / n)
    cross = IJ_sum - I_sum * J_sum * inv_n
    # sum-of-squares variances can dip below zero by roundoff in flat windows
    I_var = F.relu(I2_sum - F.square(I_sum) * inv_n)
    J_var = F.relu(J2_sum - F.square(J_sum) * inv_n)
    cc = F.square(cross) / (I_var * J_var + eps)
    return F.scalar_mul(F.mean(cc), -1.0)


def smoothness(u: Tensor) -> Tensor:
    """Diffusion penalty: for each axis, the mean squared forward difference; summed over axes."""
    if u.ndim != 5 or u.shape[1] != 3:
        raise ValueError(f"smoothness expects (B, 3, D, W, H), got {u.shape}")
    total = None
    for ax in (2, 3, 4):
        n = u.shape[ax]
        if n < 2:
            continue
        hi = [slice(None)] * 5
        lo = [slice(None)] * 5
        hi[ax] = slice(1, n)
        lo[ax] = slice(0, n - 1)
        term = F.mean(F.square(u[tuple(hi)] - u[tuple(lo)]))
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros((), dtype=u.dtype))
    return total


def _shifted(u: Tensor, ax: int, start: int, stop_off: int) -> Tensor:
    idx = [slice(None)] * 5
    idx[ax] = slice(start, u.shape[ax] - stop_off)
    return u[tuple(idx)]


def bending_energy(u: Tensor) -> Tensor:
    """Mean squared second differences: pure terms plus twice the mixed terms."""
    total = Tensor(np.zeros((), dtype=u.dtype))
    axes = (2, 3, 4)
    for ax in axes:
        if u.shape[ax] < 3:
            continue
        d2 = _shifted(u, ax, 2, 0) - 2.0 * _shifted(u, ax, 1, 1) + _shifted(u, ax, 0, 2)
        total = total + F.mean(F.square(d2))
    for i, a in enumerate(axes):
        for b in axes[i + 1:]:
            if u.shape[a] < 2 or u.shape[b] < 2:
                continue
            da = _shifted(u, a, 1, 0) - _shifted(u, a, 0, 1)
            dab = _shifted(da, b, 1, 0) - _shifted(da, b, 0, 1)
            total = total + 2.0 * F.mean(F.square(dab))
    return total


def regularizer(u: Tensor, kind: str = "diffusion") -> Tensor:
    if kind == "diffusion":
        return smoothness(u)
    if kind == "bending":
        return bending_energy(u)
    raise ValueError(f"unknown regularizer {kind!r}")


@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict[str, float] = field(default_factory=dict)

    def __float__(self) -> float:
        return float(self.total.data)


def registration_loss(moving: Tensor, fixed: Tensor, u: Tensor, weights: LossWeights):
    """Similarity of the warped moving volume to the fixed one, and the field penalty."""
    sim = ncc_local(warp_trilinear(moving, u), fixed, weights.ncc_window, weights.ncc_eps)
    return sim, regularizer(u, weights.regularizer)


def total_loss(moving: Tensor, fixed: Tensor, u_final: Tensor, level_fields, weights: LossWeights,
               active=None) -> LossBreakdown:
    """Main term plus beta-weighted auxiliary terms of the active scales.

    ``level_fields[l-1]`` is u^l in voxels of the level-l grid; it is brought to
    full resolution before warping.  ``terms`` carries every weighted
    contribution; they add up to ``total``.
    """
    L = len(weights.betas)
    active = tuple(active) if active is not None else (True,) * L
    if len(level_fields) != L or len(active) != L:
        raise ValueError(f"expected {L} level fields and mask entries")
    lam = weights.lam
    main_sim, main_reg = registration_loss(moving, fixed, u_final, weights)
    main_reg_w = F.scalar_mul(main_reg, lam)
    parts = [("main_ncc", main_sim), ("main_reg", main_reg_w)]
    full = moving.shape[2]
    for l in range(1, L + 1):
        if not active[l - 1]:
            continue
        u_l = level_fields[l - 1]
        if u_l is None:
            raise ValueError(f"missing displacement field for active level {l}")
        factor = full // u_l.shape[2]
        sim, reg = registration_loss(moving, fixed, upsample_field(u_l, factor), weights)
        beta = weights.betas[l - 1]
        parts.append((f"aux_ncc_l{l}", F.scalar_mul(sim, beta)))
        parts.append((f"aux_reg_l{l}", F.scalar_mul(reg, beta * lam)))
    total = parts[0][1]
    for _, t in parts[1:]:
        total = total + t
    terms = {name: float(t.data) for name, t in parts}
    return LossBreakdown(total, terms)
