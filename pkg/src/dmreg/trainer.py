"""Unsupervised training, inference and evaluation."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .config import RunConfig
from .engine import Tensor, backward, no_grad
from .encoder import check_extents
from .losses import ncc_local, total_loss
from .metrics import dice, jacobian_stats
from .model import DMRNet
from .optim import Adam, NonFiniteGradient
from .warp import warp_nearest, warp_trilinear

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


class PairDataset:
    """Source of (moving, fixed) training pairs.

    Built either from explicit pairs, sampled uniformly, or from a list of
    volumes, from which an ordered pair of two different volumes is drawn.
    """

    def __init__(self, pairs: Sequence[tuple[np.ndarray, np.ndarray]] | None = None,
                 volumes: Sequence[np.ndarray] | None = None):
        if (pairs is None) == (volumes is None):
            raise ValueError("give either pairs or volumes")
        self.pairs = [(np.asarray(m), np.asarray(f)) for m, f in pairs] if pairs is not None else None
        self.volumes = [np.asarray(v) for v in volumes] if volumes is not None else None
        if self.volumes is not None and len(self.volumes) < 2:
            raise ValueError("a volume dataset needs at least two volumes")
        if self.pairs is not None and not self.pairs:
            raise ValueError("empty pair dataset")

    @classmethod
    def from_synthetic(cls, synthetic_pairs, both_orders: bool = True) -> "PairDataset":
        """Each pair in both directions by default: (moving, fixed) and (fixed, moving)."""
        pairs = [(p.moving, p.fixed) for p in synthetic_pairs]
        if both_orders:
            pairs += [(f, m) for m, f in pairs]
        return cls(pairs=pairs)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.pairs[0][0] if self.pairs is not None else self.volumes[0]).shape

    def __len__(self) -> int:
        return len(self.pairs) if self.pairs is not None else len(self.volumes)

    def sample(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if self.pairs is not None:
            return self.pairs[int(rng.integers(len(self.pairs)))]
        i, j = rng.choice(len(self.volumes), size=2, replace=False)
        return self.volumes[int(i)], self.volumes[int(j)]


def pair_rng(seed: int, iteration: int) -> np.random.Generator:
    """Sampling stream for one iteration; depends only on (seed, iteration)."""
    return np.random.default_rng([seed, iteration])


def log_columns(levels: int) -> list[str]:
    return (["iter", "total", "main_ncc", "main_reg"]
            + [f"aux_ncc_l{l}" for l in range(1, levels + 1)]
            + [f"aux_reg_l{l}" for l in range(1, levels + 1)]
            + ["lr", "wall_time_s"])


@dataclass
class TrainResult:
    model: DMRNet
    optimizer: Adam
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def save_training_state(path, model: DMRNet, optimizer: Adam) -> None:
    io.save_checkpoint(path, model.config, model.state_tensors(), optimizer.state_tensors())


def load_model(checkpoint) -> tuple[DMRNet, io.Checkpoint]:
    ckpt = io.load_checkpoint(checkpoint) if not isinstance(checkpoint, io.Checkpoint) else checkpoint
    model = DMRNet(ckpt.config)
    model.load_state_tensors(ckpt.tensors)
    return model, ckpt


def _batch(dataset: PairDataset, rng, batch_size: int, dtype):
    ms, fs = [], []
    for _ in range(batch_size):
        m, f = dataset.sample(rng)
        ms.append(m)
        fs.append(f)
    M = np.stack(ms)[:, None].astype(dtype)
    Fx = np.stack(fs)[:, None].astype(dtype)
    return Tensor(M), Tensor(Fx)


def train_step(model: DMRNet, optimizer: Adam, moving: Tensor, fixed: Tensor) -> dict[str, float]:
    cfg = model.config
    model.zero_grad()
    try:
        out = model.forward(moving, fixed, training=True)
        loss = total_loss(moving, fixed, out.u_final, out.level_fields, cfg.loss, cfg.active_scales)
    except FloatingPointError as exc:
        raise TrainingDiverged(str(exc)) from exc
    value = float(loss.total.data)
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value}")
    backward(loss.total)
    try:
        optimizer.step()
    except NonFiniteGradient as exc:
        raise TrainingDiverged(str(exc)) from exc
    row = {"total": value}
    row.update(loss.terms)
    return row


def train(config: RunConfig, dataset: PairDataset, out_dir=None, resume=None,
          iterations: int | None = None) -> TrainResult:
    """Train from scratch (or from ``resume``) up to ``config.iterations`` total steps.

    With ``out_dir``, writes ``train_log.csv``, periodic ``ckpt_<iter>.dmrc``
    files and ``final.dmrc``.  ``iterations`` overrides the stopping step.
    """
    config.validate()
    stop = config.iterations if iterations is None else iterations
    if resume is not None:
        model, ckpt = load_model(resume)
        optimizer = Adam(model.params, lr=config.lr, frozen=config.freeze)
        optimizer.load_state_tensors(ckpt.optimizer)
    else:
        model = DMRNet(config)
        optimizer = Adam(model.params, lr=config.lr, frozen=config.freeze)
    check_extents(dataset.shape, config.levels)

    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "train_log.csv", "a" if resume is not None else "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=log_columns(config.levels))
        if resume is None:
            writer.writeheader()
    result = TrainResult(model, optimizer)
    start = optimizer.step_count
    t0 = time.perf_counter()
    try:
        for it in range(start, stop):
            M, Fx = _batch(dataset, pair_rng(config.seed, it), config.batch_size, model.dtype)
            row = train_step(model, optimizer, M, Fx)
            full = {c: 0.0 for c in log_columns(config.levels)}
            full.update(row)
            full["iter"] = it + 1
            full["lr"] = optimizer.lr
            full["wall_time_s"] = time.perf_counter() - t0
            result.history.append(full)
            if writer is not None:
                writer.writerow(full)
            if it % 50 == 0:
                log.info("iter %d total %.5f main_ncc %.5f", it + 1, full["total"], full["main_ncc"])
            if out is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                save_training_state(out / f"ckpt_{it + 1:06d}.dmrc", model, optimizer)
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        result.checkpoint = out / "final.dmrc"
        save_training_state(result.checkpoint, model, optimizer)
    return result


@dataclass
class Registration:
    u_final: np.ndarray  # (3, D, W, H)
    warped: np.ndarray
    warped_labels: np.ndarray | None
    wall_time_s: float


def register(model, moving: np.ndarray, fixed: np.ndarray, moving_labels: np.ndarray | None = None) -> Registration:
    """Inference: predict the field aligning ``moving`` to ``fixed`` and apply it.

    ``model`` is a :class:`DMRNet`, a checkpoint path or a loaded checkpoint.
    """
    if not isinstance(model, DMRNet):
        model, _ = load_model(model)
    moving = np.asarray(moving)
    fixed = np.asarray(fixed)
    if moving.shape != fixed.shape:
        raise ValueError(f"moving {moving.shape} and fixed {fixed.shape} shapes differ")
    check_extents(moving.shape, model.config.levels)
    t0 = time.perf_counter()
    with no_grad():
        M = model.as_input(moving)
        out = model.forward(M, model.as_input(fixed), training=False)
        warped = warp_trilinear(M, out.u_final).data[0, 0]
    u = out.u_final.data[0]
    labels = warp_nearest(np.asarray(moving_labels), u) if moving_labels is not None else None
    return Registration(u, warped, labels, time.perf_counter() - t0)


def evaluate_pair(model, moving, fixed, moving_labels, fixed_labels) -> dict:
    reg = register(model, moving, fixed, moving_labels)
    per_label, mean = dice(reg.warped_labels, fixed_labels)
    jac = jacobian_stats(reg.u_final)
    row = {"mean_dice": mean, "pct_nonpos_jac": jac["pct_nonpositive"], "std_jac": jac["std_det"],
           "wall_time_s": reg.wall_time_s}
    row.update({f"dice_{k}": v for k, v in per_label.items()})
    return row


def mean_ncc(model: DMRNet, pairs) -> float:
    """Mean main similarity term over (moving, fixed) pairs, no graph."""
    vals = []
    with no_grad():
        for m, f in pairs:
            reg = register(model, m, f)
            vals.append(float(ncc_local(Tensor(reg.warped[None, None].astype(np.float64)),
                                        Tensor(np.asarray(f, dtype=np.float64)[None, None]),
                                        model.config.loss.ncc_window, model.config.loss.ncc_eps).data))
    return float(np.mean(vals))
