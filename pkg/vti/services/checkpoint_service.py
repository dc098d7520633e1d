# vti/services/checkpoint_service.py
"""
Checkpoint Persistence

Little-endian layout:

    "VTI1" | u32 version | u32 tensor count
    per tensor: u16 name length | name (UTF-8) | u8 rank | u32 dims[rank] | float32 data
    u32 metadata length | metadata (UTF-8 JSON)
    u32 CRC-32 of everything before it

Optimizer moments are stored as ordinary tensors named adam.m.<param> / adam.v.<param>.
"""

import copy
import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from vti.core.errors import DatasetIOError, FormatError, ParseError
from vti.core.logger import log
from vti.schemas.config import NetworkConfig
from vti.services.model_service import VtiModel

MAGIC = b"VTI1"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sII")
_NAME_LEN = struct.Struct("<H")
_RANK = struct.Struct("<B")
_U32 = struct.Struct("<I")

ADAM_M_PREFIX = "adam.m."
ADAM_V_PREFIX = "adam.v."


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict[str, Any] = field(default_factory=dict)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict[str, Any] | None = None
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epoch: int = 0
    step: int = 0
    bad_epochs: int = 0
    history: list[dict[str, Any]] = field(default_factory=list)
    version: int = FORMAT_VERSION

    @property
    def network_config(self) -> NetworkConfig:
        return NetworkConfig(**self.config["network"])

    def metadata(self) -> dict[str, Any]:
        return {
            "config": self.config,
            "rng_state": self.rng_state,
            "best_val_loss": None if math.isinf(self.best_val_loss) else self.best_val_loss,
            "best_epoch": self.best_epoch,
            "epoch": self.epoch,
            "step": self.step,
            "bad_epochs": self.bad_epochs,
            "history": self.history,
        }

    def copy(self) -> "Checkpoint":
        return copy.deepcopy(self)


def _all_tensors(c: Checkpoint) -> list[tuple[str, np.ndarray]]:
    items = list(c.tensors.items())
    items += [(ADAM_M_PREFIX + name, a) for name, a in c.adam_m.items()]
    items += [(ADAM_V_PREFIX + name, a) for name, a in c.adam_v.items()]
    return items


def encode_checkpoint(c: Checkpoint) -> bytes:
    tensors = _all_tensors(c)
    parts = [_HEADER.pack(MAGIC, c.version, len(tensors))]
    for name, array in tensors:
        raw_name = name.encode("utf-8")
        data = np.ascontiguousarray(array, dtype="<f4")
        parts.append(_NAME_LEN.pack(len(raw_name)))
        parts.append(raw_name)
        parts.append(_RANK.pack(data.ndim))
        parts.extend(_U32.pack(d) for d in data.shape)
        parts.append(data.tobytes())
    meta = json.dumps(c.metadata(), sort_keys=True).encode("utf-8")
    parts.append(_U32.pack(len(meta)))
    parts.append(meta)
    payload = b"".join(parts)
    return payload + _U32.pack(zlib.crc32(payload))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ParseError(f"checkpoint truncated: need {n} bytes, {len(self.data) - self.pos} left",
                             offset=self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, s: struct.Struct) -> tuple:
        return s.unpack(self.take(s.size))


def decode_checkpoint(data: bytes) -> Checkpoint:
    """
    Raises:
        ParseError: truncated data (offset of the failed read)
        FormatError: wrong magic, unsupported version or CRC mismatch
    """
    reader = _Reader(data)
    if len(data) >= 4 and data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", offset=0)
    magic, version, count = reader.unpack(_HEADER)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})", offset=4)

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack(_NAME_LEN)
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack(_RANK)
        shape = tuple(reader.unpack(_U32)[0] for _ in range(rank))
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(reader.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)

    (meta_len,) = reader.unpack(_U32)
    meta_at = reader.pos
    meta_raw = reader.take(meta_len)
    payload_end = reader.pos
    (stored_crc,) = reader.unpack(_U32)
    if zlib.crc32(data[:payload_end]) != stored_crc:
        raise FormatError("checkpoint CRC-32 mismatch", offset=payload_end)
    try:
        meta = json.loads(meta_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"checkpoint metadata is not valid JSON: {e}", offset=meta_at) from e

    params = {k: v for k, v in tensors.items() if not k.startswith(("adam.m.", "adam.v."))}
    best = meta.get("best_val_loss")
    return Checkpoint(
        tensors=params,
        config=meta.get("config", {}),
        adam_m={k[len(ADAM_M_PREFIX):]: v for k, v in tensors.items() if k.startswith(ADAM_M_PREFIX)},
        adam_v={k[len(ADAM_V_PREFIX):]: v for k, v in tensors.items() if k.startswith(ADAM_V_PREFIX)},
        rng_state=meta.get("rng_state"),
        best_val_loss=math.inf if best is None else float(best),
        best_epoch=int(meta.get("best_epoch", 0)),
        epoch=int(meta.get("epoch", 0)),
        step=int(meta.get("step", 0)),
        bad_epochs=int(meta.get("bad_epochs", 0)),
        history=list(meta.get("history", [])),
        version=version,
    )


def save_checkpoint(c: Checkpoint, path: str | Path) -> Path:
    """Write atomically (temporary file + rename)"""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(encode_checkpoint(c))
        os.replace(tmp, path)
    except OSError as e:
        log.error(f"Cannot write checkpoint {path}: {e}")
        raise DatasetIOError(f"cannot write checkpoint ({e.strerror})", path) from e
    log.debug(f"Saved checkpoint {path} ({len(c.tensors)} tensors, epoch {c.epoch})")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        log.error(f"Checkpoint not found: {path}")
        raise DatasetIOError("checkpoint not found", path)
    return decode_checkpoint(path.read_bytes())


def model_from_checkpoint(c: Checkpoint) -> VtiModel:
    """Rebuild the network from the config snapshot and load its parameters"""
    model = VtiModel(c.network_config)
    model.load_state(c.tensors)
    return model
