"""Checkpoint files: a JSON manifest next to a raw little-endian payload.

``save(path, theta, cfg)`` writes ``<path>.json`` and ``<path>.bin``. The
manifest holds the model config, its digest, and a block table of name,
shape, dtype and byte offset; blocks are stored back to back in canonical
order.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from ..tensorcore import ParamSet
from ..tinyformer import ModelConfig, block_layout

__all__ = ["CheckpointError", "save", "load", "read_manifest", "FORMAT"]

FORMAT = "mpu-checkpoint/1"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".bin")


def save(path, theta: ParamSet, cfg: ModelConfig, *, dtype: str = "f64") -> Path:
    if dtype not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {dtype!r}")
    layout = block_layout(cfg)
    if [n for n, _ in layout] != list(theta.keys()):
        raise CheckpointError("parameters do not match the config's block layout")
    mpath, bpath = _paths(path)
    mpath.parent.mkdir(parents=True, exist_ok=True)
    blocks, chunks, offset = [], [], 0
    for name, arr in theta.items():
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        blocks.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format": FORMAT,
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "payload": bpath.name,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "blocks": blocks,
    }
    tmp = bpath.with_name(bpath.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, bpath)
    mpath.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return mpath


def read_manifest(path) -> dict:
    mpath, _ = _paths(path)
    try:
        return json.loads(mpath.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing manifest {mpath}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed manifest: {exc}") from exc


def load(path, expected: ModelConfig | None = None) -> tuple[ParamSet, ModelConfig]:
    manifest = read_manifest(path)
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
    cfg = ModelConfig.from_dict(manifest["config"])
    if cfg.digest() != manifest["config_digest"]:
        raise CheckpointError("config digest mismatch: manifest config was altered")
    if expected is not None and expected.digest() != cfg.digest():
        raise CheckpointError(f"config digest mismatch: file has {cfg.digest()}, expected {expected.digest()}")
    mpath, _ = _paths(path)
    bpath = mpath.with_name(manifest["payload"])
    try:
        payload = bpath.read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing payload {bpath}") from exc
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(f"payload is {len(payload)} bytes, manifest says {manifest['payload_bytes']}"
                              " (truncated or padded file)")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError("payload checksum mismatch")

    layout = block_layout(cfg)
    table = manifest["blocks"]
    if [b["name"] for b in table] != [n for n, _ in layout]:
        raise CheckpointError("block table does not match the config's layout")
    blocks, expect_off = [], 0
    for entry, (name, shape) in zip(table, layout):
        if tuple(entry["shape"]) != shape:
            raise CheckpointError(f"block {name!r} shape {entry['shape']} != {list(shape)}")
        dt = _DTYPES.get(entry["dtype"])
        if dt is None:
            raise CheckpointError(f"unsupported dtype {entry['dtype']!r}")
        if entry["offset"] != expect_off:
            raise CheckpointError(f"block {name!r} offset {entry['offset']} is not contiguous")
        nbytes = int(np.prod(shape)) * dt.itemsize
        arr = np.frombuffer(payload, dtype=dt, count=int(np.prod(shape)), offset=expect_off)
        blocks.append((name, arr.astype(np.float64).reshape(shape)))
        expect_off += nbytes
    if expect_off != len(payload):
        raise CheckpointError("payload length does not match the block table")
    return ParamSet(blocks), cfg
