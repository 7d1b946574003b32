"""MPU1 binary frames.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"MPU1"
    4       1     version (1)
    5       1     message type
    6       4     header length H (u32)
    10      H     header, UTF-8 JSON
    10+H    ...   payload: concatenated block data

The header carries ``round``, ``copy``, ``config_digest`` and ``blocks``, a
manifest of ``{name, shape, dtype, offset}`` entries with byte offsets into
the payload. Block data is little-endian ``f32`` by default; ``f64`` is
accepted for full-precision sessions.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass

import numpy as np

from ..tensorcore import ParamSet

__all__ = ["MAGIC", "VERSION", "PREFIX", "MessageType", "ProtocolMessage", "CodecError", "encode", "decode"]

MAGIC = b"MPU1"
VERSION = 1
PREFIX = struct.Struct("<4sBBI")

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class CodecError(ValueError):
    pass


class MessageType(enum.IntEnum):
    HELLO = 1
    PUBLISH_COPY = 2
    RETURN_DELTA = 3
    ROUND_DONE = 4
    SHUTDOWN = 5


@dataclass(frozen=True)
class ProtocolMessage:
    type: MessageType
    round: int = 0
    copy: int = 0
    config_digest: str = ""
    payload: ParamSet | None = None

    def __eq__(self, other):
        if not isinstance(other, ProtocolMessage):
            return NotImplemented
        same_head = (self.type, self.round, self.copy, self.config_digest) == (
            other.type, other.round, other.copy, other.config_digest)
        if not same_head:
            return False
        if self.payload is None or other.payload is None:
            return self.payload is None and other.payload is None
        return self.payload.array_equal(other.payload)


def encode(msg: ProtocolMessage, dtype: str = "f32") -> bytes:
    if dtype not in _DTYPES:
        raise CodecError(f"unsupported dtype {dtype!r}")
    np_dtype = _DTYPES[dtype]
    blocks, chunks, offset = [], [], 0
    if msg.payload is not None:
        for name, arr in msg.payload.items():
            raw = np.ascontiguousarray(arr, dtype=np_dtype).tobytes()
            blocks.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset})
            chunks.append(raw)
            offset += len(raw)
    header = {
        "round": int(msg.round),
        "copy": int(msg.copy),
        "config_digest": msg.config_digest,
        "blocks": blocks,
    }
    hbytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return PREFIX.pack(MAGIC, VERSION, int(msg.type), len(hbytes)) + hbytes + b"".join(chunks)


def decode(frame: bytes, expected_digest: str | None = None) -> ProtocolMessage:
    """Parse a frame; optionally require a specific config digest."""
    if len(frame) < PREFIX.size:
        raise CodecError("truncated frame")
    magic, version, mtype, hlen = PREFIX.unpack_from(frame, 0)
    if magic != MAGIC:
        raise CodecError("bad magic")
    if version != VERSION:
        raise CodecError(f"unsupported version {version}")
    try:
        mtype = MessageType(mtype)
    except ValueError as exc:
        raise CodecError(f"unknown message type {mtype}") from exc
    end = PREFIX.size + hlen
    if len(frame) < end:
        raise CodecError("truncated frame")
    try:
        header = json.loads(frame[PREFIX.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CodecError("malformed header") from exc
    digest = header.get("config_digest", "")
    if expected_digest is not None and digest != expected_digest:
        raise CodecError(f"config digest mismatch: {digest!r} != {expected_digest!r}")
    payload_bytes = memoryview(frame)[end:]
    blocks = header.get("blocks", [])
    expected_offset = 0
    arrays = []
    for b in blocks:
        np_dtype = _DTYPES.get(b.get("dtype"))
        if np_dtype is None:
            raise CodecError(f"unsupported dtype {b.get('dtype')!r}")
        shape = tuple(int(s) for s in b["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize
        if b["offset"] != expected_offset:
            raise CodecError("manifest offsets are not contiguous")
        if b["offset"] + nbytes > len(payload_bytes):
            raise CodecError("payload shorter than manifest")
        arr = np.frombuffer(payload_bytes, dtype=np_dtype, count=nbytes // np_dtype.itemsize, offset=b["offset"])
        arrays.append((b["name"], arr.astype(np.float64).reshape(shape)))
        expected_offset += nbytes
    if expected_offset != len(payload_bytes):
        raise CodecError("payload length does not match manifest")
    payload = ParamSet(arrays) if blocks else None
    return ProtocolMessage(mtype, int(header.get("round", 0)), int(header.get("copy", 0)), digest, payload)
