"""Shared multi-scale convolutional encoder.

Level ``l`` runs conv(k=4, s=2, p=1) -> normalization -> LeakyReLU(0.2) on the
output of level ``l-1`` and halves every spatial extent.  The same parameters
serve the moving and the fixed volume.
"""
from __future__ import annotations

import numpy as np

from .config import ConfigError, EncoderConfig
from .engine import Tensor
from .engine import functional as F
from .init import kaiming_uniform, ones, param, zeros

KERNEL = 4
STRIDE = 2
PADDING = 1
SLOPE = 0.2


def init_params(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    c_prev = 1
    for l, c in enumerate(cfg.channels, 1):
        pre = f"encoder.block{l}"
        fan_in = c_prev * KERNEL ** 3
        params[f"{pre}.conv.weight"] = param(
            kaiming_uniform(rng, (c, c_prev, KERNEL, KERNEL, KERNEL), fan_in, SLOPE, dtype), f"{pre}.conv.weight")
        params[f"{pre}.conv.bias"] = zeros((c,), f"{pre}.conv.bias", dtype)
        params[f"{pre}.norm.weight"] = ones((c,), f"{pre}.norm.weight", dtype)
        params[f"{pre}.norm.bias"] = zeros((c,), f"{pre}.norm.bias", dtype)
        c_prev = c
    return params


def init_buffers(cfg: EncoderConfig) -> dict[str, np.ndarray]:
    buffers = {}
    for l, c in enumerate(cfg.channels, 1):
        buffers[f"encoder.block{l}.norm.running_mean"] = np.zeros(c, dtype=np.float32)
        buffers[f"encoder.block{l}.norm.running_var"] = np.ones(c, dtype=np.float32)
    return buffers


def expected_param_count(cfg: EncoderConfig) -> int:
    total, c_prev = 0, 1
    for c in cfg.channels:
        total += c_prev * c * KERNEL ** 3 + c + 2 * c
        c_prev = c
    return total


def check_extents(spatial, levels: int) -> None:
    step = 2 ** levels
    if any(n % step for n in spatial):
        raise ConfigError(f"volume extents {tuple(spatial)} must be divisible by 2^{levels}={step}")


def encode(volume: Tensor, params: dict[str, Tensor], cfg: EncoderConfig,
           buffers: dict[str, np.ndarray] | None = None, training: bool = True,
           norm_mode: str = "instance") -> list[Tensor]:
    """Return the feature pyramid ``[f^1, ..., f^L]`` at scales 1/2 ... 1/2^L."""
    if volume.ndim != 5 or volume.shape[1] != 1:
        raise ValueError(f"encoder input must be (B, 1, D, W, H), got {volume.shape}")
    check_extents(volume.shape[2:], cfg.levels)
    feats = []
    x = volume
    for l in range(1, cfg.levels + 1):
        pre = f"encoder.block{l}"
        x = F.conv3d(x, params[f"{pre}.conv.weight"], params[f"{pre}.conv.bias"], stride=STRIDE, padding=PADDING)
        rm = buffers.get(f"{pre}.norm.running_mean") if buffers is not None else None
        rv = buffers.get(f"{pre}.norm.running_var") if buffers is not None else None
        x = F.batch_norm3d(x, params[f"{pre}.norm.weight"], params[f"{pre}.norm.bias"],
                           running_mean=rm, running_var=rv, training=training, mode=norm_mode)
        x = F.leaky_relu(x, SLOPE)
        feats.append(x)
    return feats
