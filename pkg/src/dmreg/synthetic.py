"""Synthetic labeled registration pairs for desk-scale experiments.

A template holds a few rotated ellipsoids with distinct labels and
intensities plus a little noise.  A smooth random field ``u_gt`` is drawn and
the moving volume is built so that warping it by ``u_gt`` gives back the
template: ``moving(p + u_gt(p)) = template(p)``.  The fixed volume is the
template.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .io import normalize_intensity
from .warp import identity_grid, round_half_away, warp_nearest, warp_volume_np

NOISE_AMPLITUDE = 0.02


@dataclass
class SyntheticPair:
    fixed: np.ndarray
    moving: np.ndarray
    fixed_labels: np.ndarray
    moving_labels: np.ndarray
    u_gt: np.ndarray  # (3, D, W, H), voxels, maps the fixed grid into the moving volume
    seed: int


def _triple(size) -> tuple[int, int, int]:
    if np.isscalar(size):
        return (int(size),) * 3
    return tuple(int(s) for s in size)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def make_template(rng: np.random.Generator, shape, n_structures: int, radius_range=(0.16, 0.26)):
    """Ellipsoid phantom: (intensity in [0, 1], uint16 labels 1..n).

    Centers are drawn so bounding spheres do not overlap; when the grid is
    too crowded for that, the last structures may partly cover earlier ones.
    """
    grid = identity_grid(shape)
    extent = np.array(shape, dtype=float)
    radii = rng.uniform(*radius_range, size=(n_structures, 3)) * extent.min()
    intensities = np.linspace(0.25, 1.0, n_structures)[rng.permutation(n_structures)]
    image = np.zeros(shape)
    labels = np.zeros(shape, dtype=np.uint16)
    centers: list[np.ndarray] = []
    for k in range(n_structures):
        reach = radii[k].max()
        lo = np.minimum(reach + 1, (extent - 1) / 2)
        hi = np.maximum(extent - 2 - reach, lo)
        for _ in range(200):
            center = rng.uniform(lo, hi)
            if all(np.linalg.norm(center - c) > reach + radii[j].max() + 1 for j, c in enumerate(centers)):
                break
        centers.append(center)
        rot = _random_rotation(rng)
        local = np.tensordot(rot.T, grid - center.reshape(3, 1, 1, 1), axes=1)
        inside = np.sum((local / radii[k].reshape(3, 1, 1, 1)) ** 2, axis=0) <= 1.0
        image[inside] = intensities[k]
        labels[inside] = k + 1
    return image, labels


def smooth_field(rng: np.random.Generator, shape, sigma: float, max_disp: float) -> np.ndarray:
    """Gaussian-smoothed white-noise vector field rescaled to max |u| == max_disp."""
    noise = rng.standard_normal((3,) + tuple(shape))
    if max_disp == 0:
        return np.zeros_like(noise)
    field = np.stack([gaussian_filter(c, sigma, mode="wrap") for c in noise])
    peak = np.sqrt((field ** 2).sum(axis=0)).max()
    return field * (max_disp / peak)


def invert_field(u: np.ndarray, iterations: int = 40) -> np.ndarray:
    """v with v(q) = -u(q + v(q)), by fixed-point iteration."""
    v = -u.copy()
    for _ in range(iterations):
        v = -np.stack([warp_volume_np(c, v) for c in u])
    return v


def _splat_labels(fixed_labels: np.ndarray, u: np.ndarray, base: np.ndarray) -> np.ndarray:
    """Write each fixed label at the rounded voxel it maps to.

    Where several fixed voxels land on one moving voxel the most frequent
    label wins (ties go to the smaller label), which keeps the most of them
    recoverable by nearest-neighbour warping.
    """
    shape = fixed_labels.shape
    grid = identity_grid(shape)
    target = np.stack([np.clip(round_half_away(grid[a] + u[a]), 0, shape[a] - 1) for a in range(3)]).astype(np.intp)
    flat = np.ravel_multi_index(tuple(target.reshape(3, -1)), shape)
    lab = fixed_labels.reshape(-1).astype(np.int64)
    n_labels = int(lab.max()) + 1
    pairs, counts = np.unique(flat * n_labels + lab, return_counts=True)
    where, which = np.divmod(pairs, n_labels)
    # sort by voxel, then count descending, then label ascending; keep the first per voxel
    order = np.lexsort((which, -counts, where))
    where, which = where[order], which[order]
    first = np.r_[True, where[1:] != where[:-1]]
    out = base.copy().reshape(-1)
    out[where[first]] = which[first]
    return out.reshape(shape)


def gen_synthetic_pair(seed: int, size=32, n_structures: int = 5, smoothness_sigma: float = 12.0,
                       max_disp: float = 3.0) -> SyntheticPair:
    shape = _triple(size)
    if min(shape) < 16:
        raise ValueError(f"size must be >= 16 per axis, got {shape}")
    if not 0 <= max_disp < min(shape) / 4:
        raise ValueError(f"max_disp must lie in [0, {min(shape) / 4}), got {max_disp}")
    if n_structures < 1:
        raise ValueError("n_structures must be >= 1")
    if smoothness_sigma <= 0:
        raise ValueError("smoothness_sigma must be positive")
    rng = np.random.default_rng(seed)
    image, labels = make_template(rng, shape, n_structures)
    image = image + rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=shape)
    fixed = normalize_intensity(image)
    u = smooth_field(rng, shape, smoothness_sigma, max_disp)
    u32 = u.astype(np.float32)
    if max_disp == 0:
        moving = fixed.copy()
        moving_labels = labels.copy()
    else:
        v = invert_field(u)
        moving = warp_volume_np(fixed.astype(np.float64), v).astype(np.float32)
        moving_labels = _splat_labels(labels, u32, warp_nearest(labels, v))
    return SyntheticPair(fixed, moving, labels, moving_labels, u32, seed)
