"""Refining network: fuse per-scale displacements coarse-to-fine and decode.

Each level's displacement is embedded into ``C`` channels by its own three
conv/GroupNorm/ReLU layers.  Going from coarse to fine, the previous fusion
output is upsampled, scaled by ``upsample_gain`` and added to the embedding,
concatenated with the level's moving/fixed features and reduced back to ``C``
channels.  A convolution head turns the finest fusion output into the
full-resolution field.
"""
from __future__ import annotations

import numpy as np

from .config import RefinerConfig
from .engine import Tensor
from .engine import functional as F
from .init import kaiming_uniform, ones, param, zeros


def _conv_params(params, rng, pre, cin, cout, kernel, dtype):
    fan_in = cin * int(np.prod(kernel))
    params[f"{pre}.weight"] = param(kaiming_uniform(rng, (cout, cin) + tuple(kernel), fan_in, 0.0, dtype), f"{pre}.weight")
    params[f"{pre}.bias"] = zeros((cout,), f"{pre}.bias", dtype)


def _norm_params(params, pre, c, dtype):
    params[f"{pre}.weight"] = ones((c,), f"{pre}.weight", dtype)
    params[f"{pre}.bias"] = zeros((c,), f"{pre}.bias", dtype)


def init_params(cfg: RefinerConfig, feature_channels, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    L = len(feature_channels)
    for l in range(1, L + 1):
        cin = 3
        for i, c in enumerate(cfg.embed_channels, 1):
            _conv_params(params, rng, f"refiner.embed{l}.conv{i}", cin, c, cfg.embed_kernels[l - 1], dtype)
            _norm_params(params, f"refiner.embed{l}.norm{i}", c, dtype)
            cin = c
    for l in range(1, L):
        cin = cfg.channels + 2 * feature_channels[l - 1]
        _conv_params(params, rng, f"refiner.fuse{l}.conv", cin, cfg.channels, (3, 3, 3), dtype)
        _norm_params(params, f"refiner.fuse{l}.norm", cfg.channels, dtype)
    cin = cfg.channels
    for i, c in enumerate(cfg.head_channels, 1):
        _conv_params(params, rng, f"refiner.head.conv{i}", cin, c, (3, 3, 3), dtype)
        cin = c
    _conv_params(params, rng, "refiner.head.out", cin, 3, (3, 3, 3), dtype)
    if cfg.zero_init_final:
        params["refiner.head.out.weight"].data[...] = 0
    else:
        params["refiner.head.out.weight"].data *= 0.1
    return params


def _same_padding(kernel) -> tuple[int, int, int]:
    if any(k % 2 == 0 for k in kernel):
        raise ValueError(f"kernel {tuple(kernel)} has an even extent; extent-preserving padding impossible")
    return tuple((k - 1) // 2 for k in kernel)


def _conv_gn_relu(x, params, conv, norm, padding, groups):
    x = F.conv3d(x, params[f"{conv}.weight"], params[f"{conv}.bias"], stride=1, padding=padding)
    x = F.group_norm(x, params[f"{norm}.weight"], params[f"{norm}.bias"], groups)
    return F.relu(x)


def embed_field(u: Tensor, params: dict[str, Tensor], cfg: RefinerConfig, level: int) -> Tensor:
    """h^l: the level displacement embedded into ``cfg.channels`` channels."""
    padding = _same_padding(cfg.embed_kernels[level - 1])
    x = u
    for i in range(1, len(cfg.embed_channels) + 1):
        x = _conv_gn_relu(x, params, f"refiner.embed{level}.conv{i}", f"refiner.embed{level}.norm{i}",
                          padding, cfg.groups)
    return x


def fusion_input(g_coarse: Tensor, h: Tensor, f_moving: Tensor, f_fixed: Tensor, gain: float) -> Tensor:
    """[gain * upsample(g^{l+1}) + h^l, f_M^l, f_F^l] before channel reduction."""
    if tuple(2 * n for n in g_coarse.shape[2:]) != tuple(h.shape[2:]):
        raise ValueError(f"coarse fusion output {g_coarse.shape} is not half of {h.shape}")
    t = F.add(F.scalar_mul(F.trilinear_upsample(g_coarse, 2), gain), h)
    return F.concat([t, f_moving, f_fixed], axis=1)


def fuse(g_coarse: Tensor | None, h: Tensor, f_moving: Tensor, f_fixed: Tensor,
         params: dict[str, Tensor], cfg: RefinerConfig, level: int) -> Tensor:
    """g^l; at the coarsest level (``g_coarse is None``) this is h^L itself."""
    if g_coarse is None:
        return h
    x = fusion_input(g_coarse, h, f_moving, f_fixed, cfg.upsample_gain)
    return _conv_gn_relu(x, params, f"refiner.fuse{level}.conv", f"refiner.fuse{level}.norm", 1, cfg.groups)


def decode_head(g1: Tensor, params: dict[str, Tensor], cfg: RefinerConfig) -> Tensor:
    x = g1
    for i in range(1, len(cfg.head_channels) + 1):
        x = F.conv3d(x, params[f"refiner.head.conv{i}.weight"], params[f"refiner.head.conv{i}.bias"], padding=1)
        x = F.relu(x)
        if i == 2:
            x = F.trilinear_upsample(x, 2)
    return F.conv3d(x, params["refiner.head.out.weight"], params["refiner.head.out.bias"], padding=1)


def refine(level_fields: list[Tensor], feats_moving: list[Tensor], feats_fixed: list[Tensor],
           params: dict[str, Tensor], cfg: RefinerConfig) -> Tensor:
    """Full-resolution displacement from the per-level fields and feature pyramids."""
    L = len(level_fields)
    g = None
    for l in range(L, 0, -1):
        h = embed_field(level_fields[l - 1], params, cfg, l)
        g = fuse(g, h, feats_moving[l - 1], feats_fixed[l - 1], params, cfg, l)
    return decode_head(g, params, cfg)
