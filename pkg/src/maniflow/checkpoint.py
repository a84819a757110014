"""Binary checkpoint format.

Layout: magic bytes, a little-endian u32 format version, a length-prefixed
UTF-8 JSON header (config text, dataset standardization statistics, RNG
state), a u32 array count, then per array a length-prefixed name, a u64
element count and raw little-endian float64 data, and finally a CRC32 of
everything before it. Loading verifies the checksum before parsing, so a
corrupted file never yields a partial model.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"MANIFLOW"
VERSION = 1


@dataclass
class CheckpointData:
    config_text: str
    arrays: dict[str, np.ndarray]
    shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)
    stats: dict[str, list[float]] = field(default_factory=dict)
    rng_state: dict | None = None


def save_checkpoint(path, config_text: str, params, stats: dict | None = None,
                    rng: np.random.Generator | None = None) -> None:
    """Write parameters (a ParamStore or name-to-array mapping) to disk."""
    if hasattr(params, "snapshot"):
        arrays = params.snapshot()
    else:
        arrays = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    header = {
        "config": config_text,
        "stats": {k: np.asarray(v, dtype=np.float64).ravel().tolist()
                  for k, v in (stats or {}).items()},
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
    }
    header_bytes = json.dumps(header).encode("utf-8")
    body = bytearray()
    body += MAGIC
    body += struct.pack("<I", VERSION)
    body += struct.pack("<Q", len(header_bytes))
    body += header_bytes
    body += struct.pack("<I", len(arrays))
    for name, value in arrays.items():
        name_bytes = name.encode("utf-8")
        body += struct.pack("<H", len(name_bytes))
        body += name_bytes
        flat = np.ascontiguousarray(value, dtype="<f8").ravel()
        body += struct.pack("<Q", flat.size)
        body += flat.tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path) -> CheckpointData:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic bytes)")
    payload, tail = raw[:-4], raw[-4:]
    (stored_crc,) = struct.unpack("<I", tail)
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"{path} failed its checksum; refusing partial load")

    offset = len(MAGIC)

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(payload):
            raise CheckpointError(f"{path} is truncated")
        out = struct.unpack_from(fmt, payload, offset)
        offset += size
        return out[0]

    version = take("<I")
    if version != VERSION:
        raise CheckpointError(
            f"{path} has format version {version}; this build reads version {VERSION}"
        )
    header_len = take("<Q")
    header = json.loads(payload[offset : offset + header_len].decode("utf-8"))
    offset += header_len
    count = take("<I")
    arrays: dict[str, np.ndarray] = {}
    shapes: dict[str, tuple[int, ...]] = {}
    for _ in range(count):
        name_len = take("<H")
        name = payload[offset : offset + name_len].decode("utf-8")
        offset += name_len
        size = take("<Q")
        nbytes = size * 8
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path} is truncated inside array {name!r}")
        flat = np.frombuffer(payload, dtype="<f8", count=size, offset=offset).copy()
        offset += nbytes
        shape = tuple(header.get("shapes", {}).get(name, [size]))
        arrays[name] = flat.reshape(shape)
        shapes[name] = shape
    if offset != len(payload):
        raise CheckpointError(f"{path} carries {len(payload) - offset} trailing bytes")
    return CheckpointData(
        config_text=header["config"],
        arrays=arrays,
        shapes=shapes,
        stats={k: v for k, v in header.get("stats", {}).items()},
        rng_state=header.get("rng_state"),
    )
