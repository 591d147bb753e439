"""Binary checkpoint format.

Layout (little-endian)::

    b"VFNETCKP" | u32 version | u32 header length | JSON header
    | float32 blocks in header order | u32 CRC32 of all preceding bytes
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumError, ParseError, VersionMismatchError
from .model import ModelConfig, VFNet
from .training import Checkpoint, TrainConfig

MAGIC = b"VFNETCKP"
FORMAT_VERSION = 1


def _header(ck: Checkpoint) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "train_config": ck.config.to_dict(),
        "model_config": ck.model.config.to_dict(),
        "epoch": int(ck.epoch),
        "rng_state": ck.rng_state,
        "blocks": [[b.name, list(b.values.shape)] for b in ck.model.blocks()],
    }


def to_bytes(ck: Checkpoint, version: int = FORMAT_VERSION) -> bytes:
    header = json.dumps(_header(ck), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", version, len(header)), header]
    for b in ck.model.blocks():
        parts.append(np.ascontiguousarray(b.values, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(ck: Checkpoint, path: str | os.PathLike) -> str:
    """Write ``ck`` and return the SHA-256 of the file. Parameters are stored as float32."""
    data = to_bytes(ck)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def from_bytes(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(data) < len(MAGIC) + 12 or not data.startswith(MAGIC):
        raise ParseError("not a vfnet checkpoint (bad magic)", path=source)
    version, hlen = struct.unpack_from("<II", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(version, FORMAT_VERSION)
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{source}: CRC32 mismatch, file is corrupted")
    off = len(MAGIC) + 8
    header = json.loads(body[off:off + hlen].decode("utf-8"))
    off += hlen
    model_cfg = ModelConfig(**header["model_config"])
    cfg = TrainConfig.from_dict(header["train_config"])
    model = VFNet(model_cfg, dtype=np.float32)
    state = {}
    for name, shape in header["blocks"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(shape)
        state[name] = arr.astype(np.float32)
        off += 4 * count
    if off != len(body):
        raise ParseError(f"trailing bytes after parameter blocks ({len(body) - off})", path=source)
    model.load_state(state)
    return Checkpoint(model, cfg, header["epoch"], header["rng_state"])


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), str(path))


def file_sha256(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
