"""Block-structured parameter container and the dense kernels built on it."""

from __future__ import annotations

from collections.abc import Iterable, Iterator, Mapping

import numpy as np

__all__ = [
    "StructureError",
    "Block",
    "ParamSet",
    "Delta",
    "axpy",
    "rms",
    "matmul",
    "matvec",
    "transpose",
    "softmax_rows",
    "log_softmax_rows",
]


class StructureError(ValueError):
    """Two parameter collections do not share block names and shapes."""


def _frozen(array, dtype=np.float64) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


class Block:
    """A named tensor. ``data`` is stored with its shape; ``flat`` is a view."""

    __slots__ = ("name", "data")

    def __init__(self, name: str, data, dtype=np.float64):
        self.name = name
        self.data = _frozen(data, dtype)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def __repr__(self):
        return f"Block({self.name!r}, shape={self.shape})"


class ParamSet(Mapping):
    """Ordered, immutable mapping ``name -> ndarray`` (float64 by default).

    Block order is the canonical model declaration order and is preserved by
    every operation. Arithmetic returns new sets; the arrays of an existing
    set are read-only.
    """

    __slots__ = ("_blocks",)

    def __init__(self, blocks: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]] = (), *, dtype=np.float64):
        items = blocks.items() if isinstance(blocks, Mapping) else blocks
        built: dict[str, Block] = {}
        for name, value in items:
            if name in built:
                raise StructureError(f"duplicate block name {name!r}")
            built[name] = value if isinstance(value, Block) and value.data.dtype == dtype else Block(name, value, dtype)
        self._blocks = built

    # Mapping protocol ------------------------------------------------------
    def __getitem__(self, name: str) -> np.ndarray:
        return self._blocks[name].data

    def __iter__(self) -> Iterator[str]:
        return iter(self._blocks)

    def __len__(self) -> int:
        return len(self._blocks)

    def __repr__(self):
        return f"ParamSet({len(self)} blocks, d={self.total_dim})"

    # structure ---------------------------------------------------------------
    def blocks(self) -> list[Block]:
        return list(self._blocks.values())

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: b.shape for n, b in self._blocks.items()}

    @property
    def total_dim(self) -> int:
        return sum(b.size for b in self._blocks.values())

    def same_structure(self, other: Mapping) -> bool:
        if list(self.keys()) != list(other.keys()):
            return False
        return all(self[n].shape == np.shape(other[n]) for n in self)

    def check_structure(self, other: Mapping) -> None:
        if list(self.keys()) != list(other.keys()):
            raise StructureError(f"block names differ: {list(self)} vs {list(other)}")
        for n in self:
            if self[n].shape != np.shape(other[n]):
                raise StructureError(f"block {n!r}: shape {self[n].shape} vs {np.shape(other[n])}")

    # construction helpers --------------------------------------------------
    def replace(self, **updates) -> "ParamSet":
        """Copy with some blocks replaced (names use ``__`` for ``.``)."""
        return self.with_blocks({k.replace("__", "."): v for k, v in updates.items()})

    def with_blocks(self, updates: Mapping[str, np.ndarray]) -> "ParamSet":
        unknown = set(updates) - set(self._blocks)
        if unknown:
            raise StructureError(f"unknown blocks {sorted(unknown)}")
        out = []
        for n, b in self._blocks.items():
            if n in updates:
                value = np.asarray(updates[n])
                if value.shape != b.shape:
                    raise StructureError(f"block {n!r}: shape {value.shape} vs {b.shape}")
                out.append((n, value))
            else:
                out.append((n, b))
        return ParamSet(out)

    def map(self, fn) -> "ParamSet":
        return ParamSet((n, fn(a)) for n, a in self.items())

    def zeros_like(self) -> "ParamSet":
        return self.map(np.zeros_like)

    def copy(self) -> "ParamSet":
        return ParamSet(self.items())

    def flatten(self) -> np.ndarray:
        if not self._blocks:
            return np.empty(0)
        return np.concatenate([b.flat for b in self._blocks.values()])

    def unflatten(self, vector) -> "ParamSet":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.total_dim,):
            raise StructureError(f"vector has shape {vector.shape}, expected ({self.total_dim},)")
        out, offset = [], 0
        for n, b in self._blocks.items():
            out.append((n, vector[offset:offset + b.size].reshape(b.shape)))
            offset += b.size
        return ParamSet(out)

    def offsets(self) -> dict[str, int]:
        out, offset = {}, 0
        for n, b in self._blocks.items():
            out[n] = offset
            offset += b.size
        return out

    # arithmetic --------------------------------------------------------------
    def _zip(self, other: Mapping, fn) -> "ParamSet":
        self.check_structure(other)
        return ParamSet((n, fn(a, other[n])) for n, a in self.items())

    def __add__(self, other):
        return self._zip(other, np.add)

    def __sub__(self, other):
        return self._zip(other, np.subtract)

    def __neg__(self):
        return self.map(np.negative)

    def __mul__(self, scalar):
        return self.map(lambda a: a * float(scalar))

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self.map(lambda a: a / float(scalar))

    def dot(self, other: Mapping) -> float:
        self.check_structure(other)
        return float(sum(np.vdot(a, other[n]) for n, a in self.items()))

    def norm(self) -> float:
        return float(np.sqrt(sum(np.vdot(a, a) for a in self.values())))

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(a))) for a in self.values() if a.size), default=0.0)

    def allclose(self, other: Mapping, *, rtol=0.0, atol=0.0) -> bool:
        if not self.same_structure(other):
            return False
        return all(np.allclose(a, other[n], rtol=rtol, atol=atol) for n, a in self.items())

    def array_equal(self, other: Mapping) -> bool:
        if not self.same_structure(other):
            return False
        return all(np.array_equal(a, other[n]) for n, a in self.items())


# A displacement carries the same layout as the parameters it moves.
Delta = ParamSet


def axpy(a: float, x: ParamSet, y: ParamSet) -> ParamSet:
    """Blockwise ``a*x + y``."""
    x.check_structure(y)
    return ParamSet((n, a * xv + y[n]) for n, xv in x.items())


def rms(block) -> float:
    """Root mean square of a block (``Block`` or array)."""
    v = block.flat if isinstance(block, Block) else np.asarray(block, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("rms of an empty block")
    return float(np.sqrt(np.mean(v * v)))


def matmul(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} x {b.shape}")
    return a @ b


def matvec(a, x) -> np.ndarray:
    a, x = np.asarray(a), np.asarray(x)
    if a.ndim != 2 or x.ndim != 1 or a.shape[1] != x.shape[0]:
        raise ValueError(f"matvec shape mismatch {a.shape} x {x.shape}")
    return a @ x


def transpose(a) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError("transpose expects a matrix")
    return a.T.copy()


def softmax_rows(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax_rows(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
