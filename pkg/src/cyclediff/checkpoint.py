"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"CDMC"  u16 version
    str16 fingerprint        str32 config text       str16 phase
    str16 schedule kind      u32 T
    str32 RNG state (JSON)   str32 meta (JSON, sorted keys)
    u32 tensor count, then per tensor:
        str16 name  u8 rank  u32 extent * rank  f32 payload (C order)

``strN`` is a uN byte length followed by UTF-8 bytes.  Tensors keep their
insertion order, so save -> load -> save reproduces the same bytes.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .io import atomic_write_bytes
from .ndtensor import Tensor

MAGIC = b"CDMC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    fingerprint: str
    config_text: str
    phase: str
    schedule_kind: str
    timesteps: int
    rng_state: str = ""
    meta: dict = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def add_group(self, prefix: str, arrays: dict) -> None:
        for k, v in arrays.items():
            self.tensors[f"{prefix}.{k}"] = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float32)

    # -- bytes ----------------------------------------------------------------

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        out += struct.pack("<H", VERSION)
        _put_str(out, self.fingerprint, 16)
        _put_str(out, self.config_text, 32)
        _put_str(out, self.phase, 16)
        _put_str(out, self.schedule_kind, 16)
        out += struct.pack("<I", self.timesteps)
        _put_str(out, self.rng_state, 32)
        _put_str(out, json.dumps(self.meta, sort_keys=True, separators=(",", ":")), 32)
        out += struct.pack("<I", len(self.tensors))
        for name, arr in self.tensors.items():
            a = np.asarray(arr, dtype="<f4", order="C")
            if a.ndim > 255:
                raise CheckpointError(f"tensor {name!r} has too many axes")
            _put_str(out, name, 16)
            out += struct.pack("<B", a.ndim)
            out += struct.pack(f"<{a.ndim}I", *a.shape)
            out += a.tobytes()
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        r = _Reader(data)
        magic = r.take(4)
        if magic != MAGIC:
            raise CheckpointError(f"not a checkpoint (magic {magic!r}, expected {MAGIC!r})")
        (version,) = r.unpack("<H")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
        fp = r.str(16)
        cfg = r.str(32)
        phase = r.str(16)
        kind = r.str(16)
        (T,) = r.unpack("<I")
        rng_state = r.str(32)
        meta = json.loads(r.str(32))
        (n,) = r.unpack("<I")
        tensors = {}
        for _ in range(n):
            name = r.str(16)
            (rank,) = r.unpack("<B")
            shape = r.unpack(f"<{rank}I") if rank else ()
            count = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        if not r.done():
            raise CheckpointError("trailing bytes after tensor table")
        return cls(fp, cfg, phase, kind, T, rng_state, meta, tensors)

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        try:
            with open(path, "rb") as f:
                data = f.read()
        except OSError as e:
            raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
        return cls.from_bytes(data)


def _put_str(out: bytearray, s: str, bits: int) -> None:
    b = s.encode("utf-8")
    fmt = "<H" if bits == 16 else "<I"
    if len(b) >= 1 << bits:
        raise CheckpointError("string field too long")
    out += struct.pack(fmt, len(b)) + b


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def str(self, bits: int) -> str:
        (n,) = self.unpack("<H" if bits == 16 else "<I")
        return self.take(n).decode("utf-8")

    def done(self) -> bool:
        return self.pos == len(self.data)
