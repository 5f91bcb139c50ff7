"""Binary volume and checkpoint files.

Volume file (little-endian)::

    b"DMRV" | version u32 | dtype code u32 | D u32 | W u32 | H u32 | payload

dtype codes: 0 float32 scalar volume, 1 uint16 label map, 2 float32 3-channel
field (stored channel-major).  Payload is row-major with H fastest.

Checkpoint file (little-endian)::

    b"DMRC" | version u32 | config length u32 | config (UTF-8 key=value lines)
    | tensor count u32 | tensors... | tensor count u32 | optimizer tensors...

with each tensor written as name length u32, UTF-8 name, rank u32, extents
u32 x rank and a float32 payload.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig

VOLUME_MAGIC = b"DMRV"
CHECKPOINT_MAGIC = b"DMRC"
FORMAT_VERSION = 1

FLOAT32, LABELS, FIELD = 0, 1, 2
_HEADER = struct.Struct("<4sIIIII")
_DTYPES = {FLOAT32: ("<f4", 1), LABELS: ("<u2", 1), FIELD: ("<f4", 3)}


class FormatError(ValueError):
    """Raised for malformed, truncated or unsupported files."""


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def volume_code(array: np.ndarray) -> int:
    if array.ndim == 4 and array.shape[0] == 3:
        return FIELD
    if array.ndim != 3:
        raise ValueError(f"cannot store array of shape {array.shape}; need (D, W, H) or (3, D, W, H)")
    if np.issubdtype(array.dtype, np.integer) or array.dtype == bool:
        return LABELS
    return FLOAT32


def encode_volume(array: np.ndarray, code: int | None = None) -> bytes:
    array = np.asarray(array)
    code = volume_code(array) if code is None else code
    if code not in _DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    dt, channels = _DTYPES[code]
    dims = array.shape[-3:]
    if code == LABELS and array.size and (array.min() < 0 or array.max() > 65535):
        raise ValueError("label values must fit in uint16")
    header = _HEADER.pack(VOLUME_MAGIC, FORMAT_VERSION, code, *dims)
    return header + np.ascontiguousarray(array, dtype=dt).tobytes()


def decode_volume(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise FormatError(f"file too short for a volume header ({len(blob)} bytes)")
    magic, version, code, D, W, H = _HEADER.unpack_from(blob)
    if magic != VOLUME_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {VOLUME_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported volume format version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dt, channels = _DTYPES[code]
    expected = np.dtype(dt).itemsize * channels * D * W * H
    payload = len(blob) - _HEADER.size
    if payload < expected:
        raise FormatError(f"truncated payload: header declares {expected} bytes, file holds {payload}")
    if payload > expected:
        raise FormatError(f"payload has {payload - expected} trailing bytes")
    arr = np.frombuffer(blob, dtype=dt, offset=_HEADER.size).reshape(((3,) if channels == 3 else ()) + (D, W, H))
    native = np.float32 if code != LABELS else np.uint16
    return arr.astype(native)


def write_volume(array: np.ndarray, path, code: int | None = None) -> None:
    _atomic_write(path, encode_volume(array, code))


def read_volume(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_volume(fh.read())


def normalize_intensity(volume: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant volume maps to zeros."""
    v = np.asarray(volume, dtype=np.float32)
    if not np.all(np.isfinite(v)):
        raise ValueError("volume contains NaN or Inf")
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.zeros_like(v)
    return ((v - lo) / (hi - lo)).astype(np.float32)


# -- checkpoints ----------------------------------------------------------------

@dataclass
class Checkpoint:
    config: RunConfig
    tensors: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    chunks = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for _ in range(self.u32()):
            name = self.take(self.u32()).decode("utf-8")
            rank = self.u32()
            shape = struct.unpack(f"<{rank}I", self.take(4 * rank))
            count = int(np.prod(shape)) if rank else 1
            out[name] = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        return out


def encode_checkpoint(config: RunConfig, tensors: dict[str, np.ndarray],
                      optimizer: dict[str, np.ndarray] | None = None) -> bytes:
    text = config.to_text().encode("utf-8")
    head = CHECKPOINT_MAGIC + struct.pack("<II", FORMAT_VERSION, len(text)) + text
    return head + _pack_tensors(tensors) + _pack_tensors(optimizer or {})


def decode_checkpoint(blob: bytes) -> Checkpoint:
    r = _Reader(blob)
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    config = RunConfig.from_text(r.take(r.u32()).decode("utf-8"))
    tensors = r.tensors()
    optimizer = r.tensors()
    if r.pos != len(blob):
        raise FormatError(f"checkpoint has {len(blob) - r.pos} trailing bytes")
    return Checkpoint(config, tensors, optimizer)


def save_checkpoint(path, config: RunConfig, tensors, optimizer=None) -> None:
    _atomic_write(path, encode_checkpoint(config, tensors, optimizer))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
