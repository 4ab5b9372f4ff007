"""
Checkpoint container for trained networks.

Layout (little-endian)::

    "AOIS" | version u16
    spec_len u32 | canonical spec JSON
    meta_len u32 | canonical metadata JSON
    n_params u32 | n_params x (name_len u16 | name | ndim u8 | ndim x u32)
    float32 parameter blobs in declaration order
    crc32 u32 over everything before it
"""

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np
from pydantic import ValidationError

from .exceptions import FormatError, IntegrityError
from .network import EVENT, NetworkSpec, SpikingNetwork
from .tensor import CHECKPOINT_DTYPE, Tensor, parameter

logger = logging.getLogger(__name__)

MAGIC = b"AOIS"
VERSION = 1
_BLOB_DTYPE = np.dtype(CHECKPOINT_DTYPE).newbyteorder("<")


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: Dict[str, np.ndarray]  # float32, declaration order
    meta: Dict[str, Any] = field(default_factory=dict)
    version: int = VERSION

    def network(self, mode: Optional[str] = None) -> SpikingNetwork:
        """A network evaluating these parameters (widened to the compute dtype)."""
        params = {name: parameter(value.astype(np.float64), name=name) for name, value in self.params.items()}
        return SpikingNetwork(self.spec, params=params, mode=mode or self.meta.get("mode", EVENT))


def _canonical(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _as_array(value: Union[Tensor, np.ndarray]) -> np.ndarray:
    data = value.data if isinstance(value, Tensor) else np.asarray(value)
    return np.ascontiguousarray(data, dtype=_BLOB_DTYPE)


def encode_checkpoint(spec: NetworkSpec, params: Mapping[str, Union[Tensor, np.ndarray]],
                      meta: Optional[Mapping[str, Any]] = None) -> bytes:
    expected = spec.parameter_shapes()
    missing = [name for name in expected if name not in params]
    if missing:
        raise IntegrityError(f"checkpoint is missing parameters {missing}")
    spec_bytes = spec.canonical_json().encode("utf-8")
    meta_bytes = _canonical(dict(meta or {}))
    parts = [MAGIC, struct.pack("<H", VERSION),
             struct.pack("<I", len(spec_bytes)), spec_bytes,
             struct.pack("<I", len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(expected))]
    blobs = []
    for name, shape in expected.items():
        array = _as_array(params[name])
        if array.shape != tuple(shape):
            raise IntegrityError(f"parameter {name} has shape {array.shape}, spec expects {shape}")
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_bytes)) + name_bytes)
        parts.append(struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
        blobs.append(array.tobytes())
    body = b"".join(parts + blobs)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.raw):
            raise IntegrityError(f"{self.source}: truncated checkpoint")
        chunk = self.raw[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    """Validate magic, version, CRC and shape table before accepting anything."""
    if len(raw) < len(MAGIC) + 2:
        raise IntegrityError(f"{source}: truncated checkpoint")
    if raw[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<H", raw[4:6])
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    if len(raw) < 10:
        raise IntegrityError(f"{source}: truncated checkpoint")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise IntegrityError(f"{source}: CRC mismatch (truncated or corrupted)")

    reader = _Reader(body, source)
    reader.take(6)
    (spec_len,) = reader.unpack("<I")
    spec_text = reader.take(spec_len).decode("utf-8")
    (meta_len,) = reader.unpack("<I")
    meta = json.loads(reader.take(meta_len).decode("utf-8"))
    try:
        spec = NetworkSpec.model_validate_json(spec_text)
    except ValidationError as e:
        raise IntegrityError(f"{source}: embedded network spec is invalid: {e.errors()[0]['msg']}") from e

    (count,) = reader.unpack("<I")
    table = []
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        table.append((name, tuple(shape)))
    expected = list(spec.parameter_shapes().items())
    if table != [(name, tuple(shape)) for name, shape in expected]:
        raise IntegrityError(f"{source}: shape table does not match the embedded network spec")

    params = {}
    for name, shape in table:
        size = int(np.prod(shape)) * _BLOB_DTYPE.itemsize
        params[name] = np.frombuffer(reader.take(size), dtype=_BLOB_DTYPE).reshape(shape).copy()
    if reader.offset != len(body):
        raise IntegrityError(f"{source}: {len(body) - reader.offset} trailing bytes after parameter blobs")
    return Checkpoint(spec=spec, params=params, meta=meta, version=version)


def checkpoint_save(spec: NetworkSpec, params: Mapping[str, Union[Tensor, np.ndarray]],
                    meta: Optional[Mapping[str, Any]], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_bytes(encode_checkpoint(spec, params, meta))
    logger.info(f"Saved checkpoint to {path}")
    return path


def checkpoint_load(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise IntegrityError(f"checkpoint {path} not found")
    return decode_checkpoint(path.read_bytes(), str(path))
