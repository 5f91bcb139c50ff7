"""The assembled multi-scale registration network."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import deformer, encoder, refiner
from .config import RunConfig
from .engine import Tensor


@dataclass
class ForwardOutput:
    u_final: Tensor
    level_fields: list  # u^1..u^L; constant zeros at inactive scales
    feats_moving: list
    feats_fixed: list


class DMRNet:
    """Encoder, one Deformer per scale and the refining network.

    Parameters live in ``self.params`` (name -> Tensor) in a fixed order;
    normalization running statistics live in ``self.buffers``.
    """

    def __init__(self, config: RunConfig, seed: int | None = None):
        self.config = config.validate()
        self.dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed if seed is None else seed)
        chans = config.encoder.channels
        self.params: dict[str, Tensor] = {}
        self.params.update(encoder.init_params(config.encoder, rng, self.dtype))
        self.params.update(deformer.init_params(config.deformer, chans, rng, self.dtype))
        self.params.update(refiner.init_params(config.refiner, chans, rng, self.dtype))
        self.buffers = encoder.init_buffers(config.encoder)

    def __repr__(self) -> str:
        return f"DMRNet(levels={self.config.levels}, params={self.num_parameters()})"

    def num_parameters(self, prefix: str = "") -> int:
        return sum(p.size for k, p in self.params.items() if k.startswith(prefix))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def as_input(self, volume) -> Tensor:
        """Wrap a (D, W, H) or (B, 1, D, W, H) array as a network input tensor."""
        if isinstance(volume, Tensor):
            return volume
        arr = np.asarray(volume, dtype=self.dtype)
        if arr.ndim == 3:
            arr = arr[None, None]
        return Tensor(arr)

    def forward(self, moving, fixed, training: bool = True) -> ForwardOutput:
        cfg = self.config
        M, Fx = self.as_input(moving), self.as_input(fixed)
        if M.shape != Fx.shape:
            raise ValueError(f"moving {M.shape} and fixed {Fx.shape} shapes differ")
        norm = cfg.norm_mode
        fm = encoder.encode(M, self.params, cfg.encoder, self.buffers, training, norm)
        ff = encoder.encode(Fx, self.params, cfg.encoder, self.buffers, training, norm)
        fields = []
        for l, active in enumerate(cfg.active_scales, 1):
            if active:
                fields.append(deformer.deform(fm[l - 1], ff[l - 1], self.params, cfg.deformer, l))
            else:
                shape = (M.shape[0], 3) + fm[l - 1].shape[2:]
                fields.append(Tensor(np.zeros(shape, dtype=self.dtype)))
        u = refiner.refine(fields, fm, ff, self.params, cfg.refiner)
        return ForwardOutput(u, fields, fm, ff)

    __call__ = forward

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Parameters and buffers by name, as stored in checkpoints."""
        out = {k: p.data for k, p in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in tensors:
                raise KeyError(f"checkpoint lacks parameter {k}")
            if tensors[k].shape != p.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {tensors[k].shape} != model {p.shape}")
            p.data = np.array(tensors[k], dtype=self.dtype)
        for k in self.buffers:
            if k in tensors:
                self.buffers[k] = np.array(tensors[k], dtype=np.float32)

