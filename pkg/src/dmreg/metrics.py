"""Registration quality: label overlap and Jacobian-determinant statistics."""
from __future__ import annotations

import numpy as np


def dice(labels_a: np.ndarray, labels_b: np.ndarray, background: int = 0) -> tuple[dict[int, float], float]:
    """Per-label Dice over labels present in either map, and their mean.

    A label present in only one map scores 0.  Background is ignored.
    """
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValueError(f"label maps differ in shape: {a.shape} vs {b.shape}")
    labels = np.union1d(np.unique(a), np.unique(b))
    labels = labels[labels != background]
    scores: dict[int, float] = {}
    for lab in labels:
        ma = a == lab
        mb = b == lab
        denom = ma.sum() + mb.sum()
        scores[int(lab)] = float(2.0 * np.logical_and(ma, mb).sum() / denom)
    mean = float(np.mean(list(scores.values()))) if scores else float("nan")
    return scores, mean


def jacobian_determinant(u: np.ndarray) -> np.ndarray:
    """det(I + grad u) on interior voxels, central differences.

    ``u`` is (3, D, W, H) with components in axis order; result is
    (D-2, W-2, H-2).
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 4 or u.shape[0] != 3:
        raise ValueError(f"expected a (3, D, W, H) field, got {u.shape}")
    if min(u.shape[1:]) < 3:
        raise ValueError(f"field extents {u.shape[1:]} leave no interior voxels")
    inner = (slice(1, -1),) * 3
    J = np.empty((3, 3) + tuple(n - 2 for n in u.shape[1:]))
    for j in range(3):
        hi = list(inner)
        lo = list(inner)
        hi[j] = slice(2, None)
        lo[j] = slice(None, -2)
        for i in range(3):
            J[i, j] = (u[i][tuple(hi)] - u[i][tuple(lo)]) / 2.0
        J[j, j] += 1.0
    return (J[0, 0] * (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1])
            - J[0, 1] * (J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0])
            + J[0, 2] * (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0]))


def jacobian_stats(u: np.ndarray) -> dict[str, float]:
    """Percentage of interior voxels with det <= 0 and the std of det."""
    det = jacobian_determinant(u)
    return {
        "pct_nonpositive": float(100.0 * np.count_nonzero(det <= 0) / det.size),
        "std_det": float(det.std()),
    }
