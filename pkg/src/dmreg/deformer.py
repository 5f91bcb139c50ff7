"""The Deformer: displacement as an attention-weighted sum of per-voxel bases.

At every voxel of a feature level, one branch projects the moving features to
``K*N`` three-component displacement bases, the other projects the
concatenated moving/fixed features to ``K*N`` logits normalized by a softmax.
The level displacement is the weighted sum of the bases averaged over heads.
Both projections act on each voxel independently.
"""
from __future__ import annotations

import numpy as np

from .config import DeformerConfig
from .engine import Tensor
from .engine import functional as F
from .init import kaiming_uniform, param, zeros

# Frozen bases of the fixed-basis variant, components in (D, W, H) order.
AXIS_BASES = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])


def init_params(cfg: DeformerConfig, feature_channels, rng: np.random.Generator,
                dtype=np.float32) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    K, N = cfg.heads, cfg.n_bases
    for l, c in enumerate(feature_channels, 1):
        pre = f"deformer.level{l}"
        if cfg.mode != "variant_b":
            cin = 2 * c if cfg.mode == "variant_a" else c
            w = (rng.standard_normal((K * N * 3, cin)) * cfg.basis_init_std).astype(dtype)
            params[f"{pre}.basis.weight"] = param(w, f"{pre}.basis.weight")
            params[f"{pre}.basis.bias"] = zeros((K * N * 3,), f"{pre}.basis.bias", dtype)
        params[f"{pre}.attn.weight"] = param(kaiming_uniform(rng, (K * N, 2 * c), 2 * c, 1.0, dtype), f"{pre}.attn.weight")
        params[f"{pre}.attn.bias"] = zeros((K * N,), f"{pre}.attn.bias", dtype)
    return params


def compute_bases(f_moving: Tensor, f_fixed: Tensor | None, params: dict[str, Tensor],
                  cfg: DeformerConfig, level: int) -> Tensor:
    """Per-voxel bases, shape (B, K, N, 3, d, w, h)."""
    B = f_moving.shape[0]
    spatial = f_moving.shape[2:]
    K, N = cfg.heads, cfg.n_bases
    if cfg.mode == "variant_b":
        v = np.broadcast_to(AXIS_BASES.astype(f_moving.dtype).reshape(1, 1, 3, 3, 1, 1, 1),
                            (B, K, 3, 3) + spatial)
        return Tensor(np.ascontiguousarray(v))
    pre = f"deformer.level{level}"
    x = f_moving
    if cfg.mode == "variant_a":
        if f_fixed is None:
            raise ValueError("variant_a bases need the fixed features too")
        x = F.concat([f_moving, f_fixed], axis=1)
    proj = F.linear_pervoxel(x, params[f"{pre}.basis.weight"], params[f"{pre}.basis.bias"])
    return F.reshape(proj, (B, K, N, 3) + spatial)


def compute_weights(f_moving: Tensor, f_fixed: Tensor, params: dict[str, Tensor],
                    cfg: DeformerConfig, level: int) -> Tensor:
    """Attention weights, shape (B, K, N, d, w, h), softmax-normalized per head by default."""
    if f_moving.shape != f_fixed.shape:
        raise ValueError(f"moving/fixed feature shapes differ: {f_moving.shape} vs {f_fixed.shape}")
    B = f_moving.shape[0]
    spatial = f_moving.shape[2:]
    K, N = cfg.heads, cfg.n_bases
    pre = f"deformer.level{level}"
    logits = F.linear_pervoxel(F.concat([f_moving, f_fixed], axis=1),
                               params[f"{pre}.attn.weight"], params[f"{pre}.attn.bias"])
    if cfg.softmax_over == "heads_bases":
        return F.reshape(F.softmax(logits, axis=1), (B, K, N) + spatial)
    return F.softmax(F.reshape(logits, (B, K, N) + spatial), axis=2)


def combine(bases: Tensor, weights: Tensor) -> Tensor:
    """u = (1/K) * sum_i sum_j w_ij v_ij at every voxel."""
    B, K, N = bases.shape[:3]
    if weights.shape[:3] != (B, K, N) or weights.shape[3:] != bases.shape[4:]:
        raise ValueError(f"bases {bases.shape} and weights {weights.shape} do not match")
    w = F.reshape(weights, (B, K, N, 1) + weights.shape[3:])
    return F.scalar_mul(F.sum(F.mul(w, bases), axis=(1, 2)), 1.0 / K)


def deform(f_moving: Tensor, f_fixed: Tensor, params: dict[str, Tensor], cfg: DeformerConfig, level: int) -> Tensor:
    """Level displacement u^l, shape (B, 3, d, w, h), in voxels of the level grid."""
    bases = compute_bases(f_moving, f_fixed, params, cfg, level)
    weights = compute_weights(f_moving, f_fixed, params, cfg, level)
    return combine(bases, weights)
