"""Deterministic, splittable random streams.

Every random quantity in a run is a pure function of a :class:`StreamKey`.
The key fields are serialized to a fixed byte layout, hashed with BLAKE2b
(16-byte digest) and the digest becomes the 128-bit key of a Philox-4x64
counter-based generator. The counter always starts at zero, so a stream is
fully determined by its key.

Gaussians are produced by the Box-Muller transform on pairs of uniform
doubles in ``(0, 1]``; permutations by a Fisher-Yates shuffle driven by the
same uniform stream. Both transforms are frozen: changing them changes every
noise draw and reparameterization of a run.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "Purpose",
    "StreamKey",
    "uniform_stream",
    "gaussian_stream",
    "permutation_stream",
    "rotation_angles_stream",
]

_KEY_LAYOUT = struct.Struct("<QqqqB")
_DOMAIN = b"mpu.rngkit.v1"


class Purpose(enum.IntEnum):
    BASE_NOISE = 0
    PERMUTATION = 1
    HEAD_ROTATION = 2
    DATA_SHUFFLE = 3
    INIT = 4


@dataclass(frozen=True)
class StreamKey:
    """Identifies one random stream.

    ``round`` and ``copy`` may be 0 for streams that are not tied to a
    protocol round or published copy (initialization, data shuffling,
    reparameterizations keyed by a per-round seed).
    """

    master_seed: int
    round: int = 0
    copy: int = 0
    block_id: int = 0
    purpose: Purpose = Purpose.BASE_NOISE

    def __post_init__(self):
        if not 0 <= self.master_seed < 2**64:
            raise ValueError(f"master_seed must fit in 64 bits, got {self.master_seed}")
        for name in ("round", "copy", "block_id"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        object.__setattr__(self, "purpose", Purpose(self.purpose))

    def with_(self, **changes) -> "StreamKey":
        return replace(self, **changes)

    def digest(self) -> bytes:
        packed = _KEY_LAYOUT.pack(
            self.master_seed, self.round, self.copy, self.block_id, int(self.purpose)
        )
        return hashlib.blake2b(packed, digest_size=16, person=_DOMAIN[:16]).digest()

    def generator(self) -> np.random.Generator:
        words = np.frombuffer(self.digest(), dtype="<u8").astype(np.uint64)
        return np.random.Generator(np.random.Philox(key=words, counter=0))


def uniform_stream(key: StreamKey, n: int) -> np.ndarray:
    """``n`` doubles uniform on ``[0, 1)``."""
    if n < 0:
        raise ValueError("n must be >= 0")
    return key.generator().random(n)


def gaussian_stream(key: StreamKey, n: int) -> np.ndarray:
    """``n`` standard normal samples via Box-Muller."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return np.empty(0)
    half = (n + 1) // 2
    u = key.generator().random(2 * half)
    u1 = 1.0 - u[:half]  # (0, 1], keeps log finite
    u2 = u[half:]
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    out = np.empty(2 * half)
    out[0::2] = radius * np.cos(angle)
    out[1::2] = radius * np.sin(angle)
    return out[:n]


def permutation_stream(key: StreamKey, n: int) -> np.ndarray:
    """Uniform random permutation of ``range(n)`` by Fisher-Yates."""
    if n < 1:
        raise ValueError("permutation length must be >= 1")
    perm = np.arange(n)
    if n == 1:
        return perm
    u = key.generator().random(n - 1)
    for step, i in enumerate(range(n - 1, 0, -1)):
        j = int(u[step] * (i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def rotation_angles_stream(key: StreamKey, n_planes: int) -> np.ndarray:
    """``n_planes`` angles uniform on ``[0, 2*pi)``."""
    if n_planes < 1:
        raise ValueError("n_planes must be >= 1")
    angles = 2.0 * np.pi * key.generator().random(n_planes)
    # guard the rounding edge where u*2pi lands exactly on 2pi
    return np.where(angles >= 2.0 * np.pi, 0.0, angles)
