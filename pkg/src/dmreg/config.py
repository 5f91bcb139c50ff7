"""Hyperparameter records and their flat ``key=value`` text form.

The text form is what checkpoints embed and what the command line reads:
one ``section.field=value`` per line, ``#`` starts a comment, tuples are
comma separated and kernel triples are written ``5x5x3``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import get_type_hints


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    levels: int = 4
    channels: tuple[int, ...] = (16, 32, 64, 128)
    # "batch", "instance", or "auto" (batch statistics when batch_size >= 2)
    norm: str = "auto"


@dataclass
class DeformerConfig:
    heads: int = 8
    bases: int = 64
    mode: str = "standard"  # standard | variant_a | variant_b
    softmax_over: str = "bases"  # bases | heads_bases
    basis_init_std: float = 1e-3

    @property
    def n_bases(self) -> int:
        return 3 if self.mode == "variant_b" else self.bases


@dataclass
class RefinerConfig:
    channels: int = 128
    embed_channels: tuple[int, ...] = (16, 64, 128)
    embed_kernels: tuple[tuple[int, int, int], ...] = ((5, 5, 5), (5, 5, 3), (5, 3, 3), (3, 3, 3))
    head_channels: tuple[int, ...] = (64, 64, 32, 32, 16, 16)
    upsample_gain: float = 2.0
    groups: int = 8
    zero_init_final: bool = True


@dataclass
class LossWeights:
    lam: float = 1.0
    betas: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    ncc_window: int = 9
    ncc_eps: float = 1e-5
    regularizer: str = "diffusion"  # diffusion | bending


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    deformer: DeformerConfig = field(default_factory=DeformerConfig)
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    lr: float = 4e-4
    iterations: int = 1000
    batch_size: int = 1
    seed: int = 0
    active_scales: tuple[bool, ...] = (True, True, True, True)
    checkpoint_every: int = 0
    dtype: str = "float32"
    freeze: tuple[str, ...] = ()
    data_dir: str = ""
    out_dir: str = ""

    @property
    def levels(self) -> int:
        return self.encoder.levels

    @property
    def norm_mode(self) -> str:
        if self.encoder.norm == "auto":
            return "batch" if self.batch_size >= 2 else "instance"
        return self.encoder.norm

    def validate(self) -> "RunConfig":
        L = self.encoder.levels
        if L < 1:
            raise ConfigError("encoder.levels must be >= 1")
        checks = {
            "encoder.channels": len(self.encoder.channels),
            "refiner.embed_kernels": len(self.refiner.embed_kernels),
            "loss.betas": len(self.loss.betas),
            "active_scales": len(self.active_scales),
        }
        for key, n in checks.items():
            if n != L:
                raise ConfigError(f"{key} has {n} entries but encoder.levels={L}")
        if min(self.encoder.channels) < 1:
            raise ConfigError("encoder channel counts must be >= 1")
        if self.encoder.norm not in ("auto", "batch", "instance"):
            raise ConfigError(f"unknown encoder.norm {self.encoder.norm!r}")
        if self.deformer.heads < 1 or self.deformer.bases < 1:
            raise ConfigError("deformer.heads and deformer.bases must be >= 1")
        if self.deformer.mode not in ("standard", "variant_a", "variant_b"):
            raise ConfigError(f"unknown deformer.mode {self.deformer.mode!r}")
        if self.deformer.softmax_over not in ("bases", "heads_bases"):
            raise ConfigError(f"unknown deformer.softmax_over {self.deformer.softmax_over!r}")
        r = self.refiner
        if len(r.embed_channels) < 1 or r.embed_channels[-1] != r.channels:
            raise ConfigError("last refiner.embed_channels entry must equal refiner.channels")
        for k in r.embed_kernels:
            if any(e % 2 == 0 for e in k):
                raise ConfigError(f"embedding kernel {k} has an even extent")
        if len(r.head_channels) != 6:
            raise ConfigError("refiner.head_channels needs 6 widths (three blocks of two convs)")
        for c in tuple(r.embed_channels) + (r.channels,):
            if c % r.groups:
                raise ConfigError(f"refiner.groups={r.groups} does not divide {c} channels")
        if self.loss.lam < 0 or min(self.loss.betas) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.loss.ncc_window % 2 == 0:
            raise ConfigError("loss.ncc_window must be odd")
        if self.loss.regularizer not in ("diffusion", "bending"):
            raise ConfigError(f"unknown loss.regularizer {self.loss.regularizer!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.batch_size < 1 or self.iterations < 0 or self.lr < 0:
            raise ConfigError("batch_size >= 1, iterations >= 0 and lr >= 0 required")
        if self.norm_mode == "batch" and self.batch_size < 2:
            raise ConfigError("batch normalization needs batch_size >= 2; set encoder.norm=instance")
        return self

    # -- text form ---------------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for key, value, kind in _walk(self):
            lines.append(f"{key}={_encode(value, kind)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        slots = {key: (owner, name, kind) for key, owner, name, kind in _slots(cfg)}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in slots:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            owner, name, kind = slots[key]
            try:
                setattr(owner, name, _decode(value, kind))
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
        return cfg

    def copy(self) -> "RunConfig":
        return RunConfig.from_text(self.to_text())

    def replace(self, **updates) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"deformer.heads": 2})``."""
        text = self.to_text()
        cfg = RunConfig.from_text(text)
        slots = {key: (owner, name) for key, owner, name, _ in _slots(cfg)}
        for key, value in updates.items():
            key = key.replace("__", ".")
            if key not in slots:
                raise ConfigError(f"unknown key {key!r}")
            owner, name = slots[key]
            setattr(owner, name, value)
        return cfg


def _slots(cfg):
    hints = get_type_hints(type(cfg))
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            sub_hints = get_type_hints(type(value))
            for sf in dataclasses.fields(value):
                yield f"{f.name}.{sf.name}", value, sf.name, sub_hints[sf.name]
        else:
            yield f.name, cfg, f.name, hints[f.name]


def _walk(cfg):
    for key, owner, name, kind in _slots(cfg):
        yield key, getattr(owner, name), kind


def _encode(value, kind) -> str:
    if kind is bool:
        return "1" if value else "0"
    if kind is float:
        return repr(float(value))
    if kind in (int, str):
        return str(value)
    inner = kind.__args__[0]
    if inner is bool:
        return ",".join("1" if v else "0" for v in value)
    if inner is float:
        return ",".join(repr(float(v)) for v in value)
    if inner in (int, str):
        return ",".join(str(v) for v in value)
    return ",".join("x".join(str(e) for e in t) for t in value)


def _decode(text: str, kind):
    if kind is bool:
        if text not in ("0", "1", "true", "false"):
            raise ValueError(f"boolean expected, got {text!r}")
        return text in ("1", "true")
    if kind in (int, float, str):
        return kind(text)
    inner = kind.__args__[0]
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if inner is bool:
        return tuple(_decode(p, bool) for p in parts)
    if inner in (int, float, str):
        return tuple(inner(p) for p in parts)
    return tuple(tuple(int(e) for e in p.split("x")) for p in parts)


def desk_config(**overrides) -> RunConfig:
    """Scaled-down setup for 32^3 synthetic volumes on a CPU."""
    cfg = RunConfig(
        encoder=EncoderConfig(levels=4, channels=(16, 32, 64, 128), norm="instance"),
        deformer=DeformerConfig(heads=8, bases=16),
        refiner=RefinerConfig(channels=32, embed_channels=(8, 16, 32),
                              head_channels=(32, 32, 16, 16, 8, 8)),
        iterations=500,
    )
    return cfg.replace(**overrides) if overrides else cfg


def toy_config(**overrides) -> RunConfig:
    """16^3, L=4, K=2, N=4, C=16 setup used for gradient verification."""
    cfg = RunConfig(
        encoder=EncoderConfig(levels=4, channels=(4, 8, 8, 16), norm="batch"),
        deformer=DeformerConfig(heads=2, bases=4, basis_init_std=0.5),
        refiner=RefinerConfig(channels=16, embed_channels=(8, 8, 16), head_channels=(8, 8, 8, 8, 8, 8),
                              zero_init_final=False),
        batch_size=2,
        dtype="float64",
        iterations=2,
    )
    return cfg.replace(**overrides) if overrides else cfg
