"""Central finite-difference gradient checks."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def relative_error(a: float, b: float, floor: float = 1e-10) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def numeric_grad(f: Callable[[], Tensor], t: Tensor, index, rel_step: float = 1e-4) -> float:
    """d f / d t[index] by central differences with step rel_step * max(1, |t|)."""
    old = t.data[index]
    h = rel_step * max(1.0, abs(float(old)))
    t.data[index] = old + h
    fp = float(f().data)
    t.data[index] = old - h
    fm = float(f().data)
    t.data[index] = old
    return (fp - fm) / (2 * h)


def directional_numeric(f: Callable[[], Tensor], t: Tensor, direction: np.ndarray, rel_step: float = 1e-4) -> float:
    old = t.data.copy()
    h = rel_step * (max(1.0, float(np.abs(old).max())) if old.size else 1.0)
    t.data[...] = old + h * direction
    fp = float(f().data)
    t.data[...] = old - h * direction
    fm = float(f().data)
    t.data[...] = old
    return (fp - fm) / (2 * h)


def _best_over(steps, estimate, analytic: float, floor: float, settle: float = 1e-7) -> float:
    best = np.inf
    for h in steps:
        best = min(best, relative_error(analytic, estimate(h), floor))
        if best < settle:
            break
    return best


def check_gradients(f: Callable[[], Tensor], tensors: Sequence[Tensor], n_entries: int = 3,
                    rng: np.random.Generator | None = None, directional: bool = True,
                    rel_step: float | Sequence[float] = 1e-4, floor: float = 1e-10) -> dict[str, float]:
    """Compare autodiff gradients of scalar ``f()`` with central differences.

    For every tensor, ``n_entries`` random coordinates are checked, plus one
    random unit direction covering the whole tensor when ``directional`` is set.
    The entry with the largest analytic gradient is always included.
    Magnitudes below ``floor`` count as ``floor`` in the relative error, so
    exactly-zero gradients are compared against roundoff absolutely.
    ``rel_step`` may be a ladder of steps; each coordinate then keeps the
    best agreement over the ladder.  Large steps can straddle a ReLU kink and
    small ones drown in roundoff, but a wrong derivative disagrees at every
    step, so the ladder rejects bad estimates without hiding bad gradients.
    Returns the worst relative error per tensor (keyed by name or position).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    steps = (rel_step,) if np.isscalar(rel_step) else tuple(rel_step)
    for t in tensors:
        t.grad = None
    out = f()
    backward(out)
    report: dict[str, float] = {}
    for pos, t in enumerate(tensors):
        key = t.name or f"arg{pos}"
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = 0.0
        picks = set(rng.choice(t.size, size=min(n_entries, t.size), replace=False).tolist())
        picks.add(int(np.argmax(np.abs(g))))
        for flat in sorted(picks):
            idx = np.unravel_index(int(flat), t.shape)
            worst = max(worst, _best_over(steps, lambda h: numeric_grad(f, t, idx, h), float(g[idx]), floor))
        if directional and t.size > 1:
            d = rng.standard_normal(t.shape)
            d /= np.linalg.norm(d)
            worst = max(worst, _best_over(steps, lambda h: directional_numeric(f, t, d, h), float((g * d).sum()), floor))
        report[key] = worst
    return report
