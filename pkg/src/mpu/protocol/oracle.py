"""Synthetic displacement map with known linear and quadratic response.

``Delta(anchor + u) = delta_star + J u + 0.5 * sum_j (g_j . u)^2 h_j``

with ``J = left @ right.T`` of rank ``rho``. Its Jacobian at ``u`` is
``J + sum_j (g_j . u) h_j g_j^T``, which is Lipschitz with constant
``sum_j |h_j| |g_j|^2``.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from ..noisegen import NoisePlan, draw
from ..rngkit import Purpose, StreamKey, gaussian_stream
from ..tensorcore import Delta, ParamSet
from .aggregate import harmonic_weights

__all__ = ["LinearResponseOracle", "cancellation_residual", "second_order_bound", "CancellationResult"]


@dataclass(frozen=True)
class LinearResponseOracle:
    anchor: ParamSet
    delta_star: Delta
    left: np.ndarray                  # (d, rho)
    right: np.ndarray                 # (d, rho)
    quad_dirs: np.ndarray | None = None  # (d, q) the g_j
    quad_out: np.ndarray | None = None   # (d, q) the h_j

    @classmethod
    def random(cls, anchor: ParamSet, *, rank: int = 4, seed: int = 0, delta_scale: float = 1e-2,
               jacobian_scale: float = 0.1, quadratic: int = 0, quadratic_scale: float = 1.0) -> "LinearResponseOracle":
        d = anchor.total_dim

        def gauss(block, n):
            return gaussian_stream(StreamKey(seed, block_id=block, purpose=Purpose.INIT), n)

        delta_star = anchor.unflatten(delta_scale * gauss(0, d))
        left = gauss(1, d * rank).reshape(d, rank) / np.sqrt(d)
        right = gauss(2, d * rank).reshape(d, rank) * (jacobian_scale / np.sqrt(d))
        qd = qo = None
        if quadratic:
            qd = gauss(3, d * quadratic).reshape(d, quadratic) / np.sqrt(d)
            qo = gauss(4, d * quadratic).reshape(d, quadratic) * (quadratic_scale / np.sqrt(d))
        return cls(anchor, delta_star, left, right, qd, qo)

    @property
    def is_linear(self) -> bool:
        return self.quad_dirs is None

    @property
    def lipschitz_jacobian(self) -> float:
        if self.is_linear:
            return 0.0
        return float(np.sum(np.linalg.norm(self.quad_out, axis=0) * np.linalg.norm(self.quad_dirs, axis=0) ** 2))

    def jacobian_apply(self, u: np.ndarray) -> np.ndarray:
        return self.left @ (self.right.T @ u)

    def response(self, theta: ParamSet) -> Delta:
        """Displacement produced when unlearning starts at ``theta``."""
        u = (theta - self.anchor).flatten()
        out = self.delta_star.flatten() + self.jacobian_apply(u)
        if not self.is_linear:
            proj = self.quad_dirs.T @ u
            out = out + 0.5 * self.quad_out @ (proj * proj)
        return self.anchor.unflatten(out)

    __call__ = response


@dataclass(frozen=True)
class CancellationResult:
    residual: float
    relative: float
    bound: float
    weights: np.ndarray


def second_order_bound(oracle: LinearResponseOracle, noises: Sequence[Delta], weights) -> float:
    """``(L_J / 2) * sum_k w_k |eps_k|^2``."""
    return 0.5 * oracle.lipschitz_jacobian * float(sum(w * e.norm() ** 2 for w, e in zip(weights, noises)))


def cancellation_residual(oracle: LinearResponseOracle, plan: NoisePlan, weights_override=None, *,
                          r: int = 1, s_r: int = 0) -> CancellationResult:
    """``|aggregate - delta_star|`` when each copy starts at ``anchor + eps_k``."""
    weights = harmonic_weights(plan.alpha) if weights_override is None else np.asarray(weights_override, dtype=np.float64)
    if weights.shape != (plan.m,):
        raise ValueError(f"need {plan.m} weights")
    if abs(weights.sum() - 1.0) > 1e-12:
        raise ValueError("weights must sum to 1")
    noise = draw(plan, r, s_r)
    agg = np.zeros(oracle.anchor.total_dim)
    for w, eps in zip(weights, noise.scaled):
        agg += w * oracle.response(oracle.anchor + eps).flatten()
    diff = agg - oracle.delta_star.flatten()
    res = float(np.linalg.norm(diff))
    return CancellationResult(
        residual=res,
        relative=res / max(oracle.delta_star.norm(), 1e-300),
        bound=second_order_bound(oracle, noise.scaled, weights),
        weights=weights,
    )
