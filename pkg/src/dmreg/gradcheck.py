"""Finite-difference verification of every differentiable operation and of the full loss."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import deformer
from .config import RunConfig, toy_config
from .engine import Tensor, check_gradients
from .engine import functional as F
from .losses import bending_energy, ncc_local, smoothness, total_loss
from .model import DMRNet
from .warp import upsample_field, warp_trilinear

THRESHOLDS = {"float64": 1e-4, "float32": 1e-2}


def _leaf(rng, shape, dtype, name, away_from_zero: float = 0.0) -> Tensor:
    data = rng.standard_normal(shape)
    if away_from_zero:
        data = np.sign(data) * (np.abs(data) + away_from_zero)
    return Tensor(data.astype(dtype), requires_grad=True, name=name)


def _weighted(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    """A fixed random projection turning a tensor output into a scalar."""
    w = Tensor(rng.standard_normal(out.shape).astype(out.dtype))
    return lambda t: F.sum(F.mul(t, w))


def _case(rng, fn, *leaves, n_entries=3, step=1e-4):
    w = _weighted(fn(*leaves), rng)
    report = check_gradients(lambda: w(fn(*leaves)), leaves, n_entries=n_entries, rng=rng, rel_step=step)
    return max(report.values())


def operation_suite(dtype: str = "float64", seed: int = 0) -> dict[str, float]:
    """Worst relative error per operation on small random tensors."""
    rng = np.random.default_rng(seed)
    dt = np.dtype(dtype)
    step = 1e-4 if dt == np.float64 else 1e-2

    def leaf(shape, name="x", away=0.0):
        return _leaf(rng, shape, dt, name, away)

    def case(fn, *leaves, **kw):
        return _case(rng, fn, *leaves, step=step, **kw)

    s = (2, 3, 4, 4, 4)
    out: dict[str, float] = {}
    out["add"] = case(F.add, leaf(s, "a"), leaf((1, 3, 1, 1, 1), "b"))
    out["sub"] = case(F.sub, leaf(s, "a"), leaf(s, "b"))
    out["mul"] = case(F.mul, leaf(s, "a"), leaf((1, 1, 4, 4, 4), "b"))
    out["div"] = case(F.div, leaf(s, "a"), leaf(s, "b", away=0.5))
    out["square"] = case(F.square, leaf(s))
    out["scalar_mul"] = case(lambda x: F.scalar_mul(x, -1.7), leaf(s))
    out["leaky_relu"] = case(lambda x: F.leaky_relu(x, 0.2), leaf(s, away=0.05))
    out["relu"] = case(F.relu, leaf(s, away=0.05))
    out["softmax"] = case(lambda x: F.softmax(x, axis=2), leaf((2, 2, 5, 3, 3, 3)))
    out["sum"] = case(lambda x: F.sum(x, axis=(1, 2)), leaf(s))
    out["mean"] = case(lambda x: F.mean(x, axis=3, keepdims=True), leaf(s))
    out["reshape"] = case(lambda x: F.reshape(x, (2, 12, 16)), leaf(s))
    out["transpose"] = case(lambda x: F.transpose(x, (0, 2, 1, 4, 3)), leaf(s))
    out["getitem"] = case(lambda x: x[:, 1:, ::2, :3], leaf(s))
    out["concat"] = case(lambda a, b: F.concat([a, b], axis=1), leaf(s, "a"), leaf((2, 5, 4, 4, 4), "b"))
    out["conv3d"] = case(lambda x, w, b: F.conv3d(x, w, b, stride=1, padding=1),
                         leaf((2, 3, 5, 5, 5)), leaf((4, 3, 3, 3, 3), "w"), leaf((4,), "b"))
    out["conv3d_stride2"] = case(lambda x, w, b: F.conv3d(x, w, b, stride=2, padding=1),
                                 leaf((2, 2, 6, 6, 6)), leaf((3, 2, 4, 4, 4), "w"), leaf((3,), "b"))
    out["conv3d_anisotropic"] = case(lambda x, w, b: F.conv3d(x, w, b, stride=1, padding=(2, 1, 0)),
                                     leaf((1, 2, 5, 5, 5)), leaf((2, 2, 5, 3, 1), "w"), leaf((2,), "b"))
    out["linear_pervoxel"] = case(F.linear_pervoxel, leaf(s), leaf((5, 3), "w"), leaf((5,), "b"))
    out["group_norm"] = case(lambda x, g, b: F.group_norm(x, g, b, groups=2),
                             leaf((2, 4, 3, 3, 3)), leaf((4,), "gamma"), leaf((4,), "beta"))
    out["instance_norm"] = case(F.instance_norm, leaf(s), leaf((3,), "gamma"), leaf((3,), "beta"))
    rm, rv = np.zeros(3), np.ones(3)
    out["batch_norm3d"] = case(lambda x, g, b: F.batch_norm3d(x, g, b, rm.copy(), rv.copy(), training=True),
                               leaf(s), leaf((3,), "gamma"), leaf((3,), "beta"))
    out["trilinear_upsample"] = case(lambda x: F.trilinear_upsample(x, 2), leaf((1, 2, 3, 3, 3)))
    out["box_sum3d"] = case(lambda x: F.box_sum3d(x, 3), leaf((1, 1, 5, 5, 5)))

    vol = Tensor(rng.random((1, 2, 6, 6, 6)).astype(dt), requires_grad=True, name="volume")
    frac = rng.uniform(0.2, 0.8, size=(1, 3, 6, 6, 6)) + rng.integers(-2, 2, size=(1, 3, 6, 6, 6))
    u = Tensor(frac.astype(dt), requires_grad=True, name="u")
    out["warp_trilinear"] = case(warp_trilinear, vol, u)
    out["upsample_field"] = case(lambda x: upsample_field(x, 4), leaf((1, 3, 2, 2, 2)))

    a = Tensor(rng.random((1, 1, 8, 8, 8)).astype(dt), requires_grad=True, name="warped")
    b = Tensor(rng.random((1, 1, 8, 8, 8)).astype(dt), requires_grad=True, name="fixed")
    out["ncc_local"] = case(lambda x, y: ncc_local(x, y, 5), a, b)
    out["smoothness"] = case(smoothness, leaf((1, 3, 4, 4, 4)))
    out["bending_energy"] = case(bending_energy, leaf((1, 3, 4, 4, 4)))

    bases = leaf((1, 2, 4, 3, 2, 2, 2), "bases")
    logits = leaf((1, 2, 4, 2, 2, 2), "logits")
    out["deformer_combine"] = case(lambda v, z: deformer.combine(v, F.softmax(z, axis=2)), bases, logits)
    return out


def model_suite(config: RunConfig | None = None, seed: int = 0, n_entries: int = 2,
                size: int = 16, rel_step=(1e-5, 1e-6, 1e-7), floor: float = 1e-5) -> dict[str, float]:
    """Worst relative error of d(total loss)/d(parameter) for every parameter tensor.

    Defaults to the toy configuration; 64-bit is expected for tight errors.
    Biases are redrawn at random first: at zero biases a 1-voxel level puts
    every normalized activation exactly on a ReLU kink, where one-sided and
    central differences disagree by construction.  A ladder of small steps
    keeps perturbations from straddling ReLU and trilinear-cell kinks, which
    a parameter feeding thousands of activations hits easily.  Roundoff in
    the differences reaches about 1e-10, so gradients smaller than ``floor``
    are compared absolutely; that also covers conv biases feeding batch
    statistics, whose gradient is exactly 0.
    """
    cfg = config if config is not None else toy_config()
    model = DMRNet(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for name, p in model.params.items():
        if name.endswith(".bias"):
            p.data[...] = rng.normal(0.0, 0.1, size=p.shape)
    shape = (cfg.batch_size, 1, size, size, size)
    M = Tensor(rng.random(shape).astype(model.dtype))
    Fx = Tensor(rng.random(shape).astype(model.dtype))
    buffers = {k: v.copy() for k, v in model.buffers.items()}

    def loss() -> Tensor:
        # running statistics must not drift between repeated evaluations
        model.buffers = {k: v.copy() for k, v in buffers.items()}
        out = model.forward(M, Fx, training=True)
        return total_loss(M, Fx, out.u_final, out.level_fields, cfg.loss, cfg.active_scales).total

    params = [p for p in model.params.values()]
    report = check_gradients(loss, params, n_entries=n_entries, rng=rng, rel_step=rel_step, floor=floor)
    model.buffers = buffers
    return report


def summarize(report: dict[str, float], group: Callable[[str], str] | None = None) -> dict[str, float]:
    """Collapse per-tensor errors into per-group maxima (by name prefix by default)."""
    group = group or (lambda name: name.split(".", 1)[0])
    out: dict[str, float] = {}
    for name, err in report.items():
        key = group(name)
        out[key] = max(out.get(key, 0.0), err)
    return out
