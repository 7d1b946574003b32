"""Harmonic aggregation with streaming sufficient statistics."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from ..tensorcore import Delta, ParamSet, StructureError

__all__ = ["harmonic_weights", "RoundAccumulator", "aggregate", "variance_prefactor"]


def harmonic_weights(alpha: Sequence[float]) -> np.ndarray:
    """``w_k = alpha_k^-1 / sum_j alpha_j^-1``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.size == 0 or np.any(alpha <= 0):
        raise ValueError("alphas must be non-empty and positive")
    inv = 1.0 / alpha
    return inv / inv.sum()


def variance_prefactor(alpha: Sequence[float]) -> float:
    """``sum alpha^-2 / (sum alpha^-1)^2``: variance multiplier on independent client noise."""
    w = harmonic_weights(alpha)
    return float(np.sum(w * w))


class RoundAccumulator:
    """Running ``S0 = sum 1/alpha_k`` and ``S1 = sum Delta_k / alpha_k``."""

    def __init__(self, like: ParamSet):
        self._names = list(like.keys())
        self._shapes = like.shapes
        self._offsets = like.offsets()
        self.S0 = 0.0
        self._S1 = np.zeros(like.total_dim)
        self._template = like
        self.count = 0

    def accumulate(self, alpha_k: float, delta: Delta) -> "RoundAccumulator":
        if alpha_k <= 0:
            raise ValueError("alpha_k must be > 0")
        if list(delta.keys()) != self._names or delta.shapes != self._shapes:
            raise StructureError("update layout does not match the accumulator")
        inv = 1.0 / float(alpha_k)
        self.S0 += inv
        for name, arr in delta.items():
            off = self._offsets[name]
            self._S1[off:off + arr.size] += inv * arr.reshape(-1)
        self.count += 1
        return self

    @property
    def S1(self) -> Delta:
        return self._template.unflatten(self._S1)

    def mean(self) -> Delta:
        if self.count == 0:
            raise ValueError("no updates accumulated")
        return self._template.unflatten(self._S1 / self.S0)


def aggregate(updates: Sequence[Delta], alpha: Sequence[float]) -> Delta:
    """Batch harmonic average of stored updates."""
    if len(updates) != len(alpha):
        raise ValueError("one alpha per update")
    w = harmonic_weights(alpha)
    stacked = np.stack([u.flatten() for u in updates])
    return updates[0].unflatten(w @ stacked)
