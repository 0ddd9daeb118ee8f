"""Binary checkpoint format.

Layout (all integers little-endian unsigned 32-bit unless noted)::

    b"ADMD"                      magic
    u8 version                   currently 1
    u32 len, utf-8 JSON          config echo (config, network specs, run metadata)
    u32 count, count x record    parameter tensors
    u32 count, count x record    optimiser tensors
    u64 step                     schedule position
    u32 len, utf-8 JSON          RNG bit-generator state

    record := u32 name_len, name (utf-8), u32 rank, rank x u32 dims,
              prod(dims) x float64 (little-endian)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"ADMD"
VERSION = 1


class CheckpointError(Exception):
    """Raised for unreadable checkpoints; ``code`` names the failure."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass
class Checkpoint:
    echo: dict
    params: dict[str, np.ndarray]
    opt: dict[str, np.ndarray]
    step: int
    rng_state: dict


def _pack_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8")
    out = [_pack_text(name), struct.pack("<I", arr.ndim)]
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<B", VERSION), _pack_text(json.dumps(ckpt.echo, sort_keys=True))]
    for section in (ckpt.params, ckpt.opt):
        parts.append(struct.pack("<I", len(section)))
        parts.extend(_pack_tensor(k, v) for k, v in section.items())
    parts.append(struct.pack("<Q", ckpt.step))
    parts.append(_pack_text(json.dumps(ckpt.rng_state, sort_keys=True)))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated", f"needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def tensor(self) -> tuple[str, np.ndarray]:
        name = self.text()
        rank = self.u32()
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
        return name, arr


def decode_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointError("bad_magic", f"expected {MAGIC!r}, found {data[:4]!r}")
    r.take(4)
    version = struct.unpack("<B", r.take(1))[0]
    if version != VERSION:
        raise CheckpointError("unsupported_version", f"format version {version}, this reader supports {VERSION}")
    echo = json.loads(r.text())
    sections = []
    for _ in range(2):
        sections.append(dict(r.tensor() for _ in range(r.u32())))
    step = struct.unpack("<Q", r.take(8))[0]
    rng_state = json.loads(r.text())
    if r.pos != len(data):
        raise CheckpointError("trailing_data", f"{len(data) - r.pos} unexpected bytes after RNG state")
    return Checkpoint(echo, sections[0], sections[1], step, rng_state)


def write_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def read_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
