"""Analytic gradients of unlearning objectives, with finite-difference oracles."""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, replace

import numpy as np

from .objectives import ObjectiveConfig, ObjectiveKind, UnlearnData, evaluate_terms, loss
from .rngkit import Purpose, StreamKey, gaussian_stream
from .tensorcore import ParamSet
from .tinyformer import ModelConfig, backward

__all__ = ["GradResult", "HessianEstimate", "grad", "fd_grad", "top_eigenvalue", "hessian_spectrum_fd", "relative_error"]


@dataclass(frozen=True)
class GradResult:
    loss: float
    grad: ParamSet


def grad(objective: ObjectiveConfig, theta: ParamSet, cfg: ModelConfig, data: UnlearnData) -> GradResult:
    """Loss and exact gradient of the composed objective."""
    value, parts = evaluate_terms(objective, theta, cfg, data)
    if not parts:
        return GradResult(value, theta.zeros_like())
    total = None
    for cache, dlogits in parts:
        g = backward(theta, cfg, cache, dlogits)
        total = g if total is None else total + g
    return GradResult(value, total)


def _loss_fn(objective, theta, cfg, data) -> Callable[[ParamSet], float]:
    if isinstance(objective, ObjectiveConfig):
        if objective.kind is ObjectiveKind.SATIMP and objective.satimp_weight_params is None:
            # differentiate the stop-gradient surrogate, weights frozen at theta
            objective = replace(objective, satimp_weight_params=theta)
        return lambda th: loss(objective, th, cfg, data)
    return objective


def fd_grad(objective, theta: ParamSet, cfg: ModelConfig | None = None, data: UnlearnData | None = None,
            coords: Sequence[int] = (), h: float = 1e-5) -> np.ndarray:
    """Central differences at flat coordinate indices.

    ``objective`` is an :class:`ObjectiveConfig` or any callable
    ``ParamSet -> float``.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    fn = _loss_fn(objective, theta, cfg, data)
    base = theta.flatten()
    out = np.empty(len(coords))
    for j, i in enumerate(coords):
        x = base.copy()
        x[i] += h
        up = fn(theta.unflatten(x))
        x[i] = base[i] - h
        down = fn(theta.unflatten(x))
        out[j] = (up - down) / (2.0 * h)
    return out


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


@dataclass(frozen=True)
class HessianEstimate:
    value: float
    converged: bool
    iterations: int
    ritz_values: np.ndarray


def top_eigenvalue(hvp: Callable[[np.ndarray], np.ndarray], dim: int, subspace_dim: int = 4, *,
                   max_iter: int = 200, tol: float = 1e-6, seed: int = 0) -> HessianEstimate:
    """Largest Ritz value from block power iteration with Rayleigh-Ritz.

    The iteration converges to the dominant-magnitude invariant subspace; the
    reported value is the largest algebraic Ritz value within it.
    """
    k = max(1, min(subspace_dim, dim))
    V = gaussian_stream(StreamKey(seed, purpose=Purpose.INIT, block_id=0), dim * k).reshape(dim, k)
    V, _ = np.linalg.qr(V)
    prev = None
    ritz = np.zeros(k)
    for it in range(1, max_iter + 1):
        W = np.column_stack([hvp(V[:, j]) for j in range(k)])
        small = V.T @ W
        small = 0.5 * (small + small.T)
        ritz, vecs = np.linalg.eigh(small)
        value = float(ritz[-1])
        if not np.any(W):
            return HessianEstimate(0.0, True, it, ritz)
        # rotate W onto the Ritz basis before re-orthonormalizing
        V, _ = np.linalg.qr(W @ vecs[:, ::-1])
        if prev is not None and abs(value - prev) <= tol * max(abs(value), 1e-12):
            return HessianEstimate(value, True, it, ritz)
        prev = value
    return HessianEstimate(float(ritz[-1]), False, max_iter, ritz)


def hessian_spectrum_fd(objective, theta: ParamSet, cfg: ModelConfig | None = None, data: UnlearnData | None = None,
                        subspace_dim: int = 4, *, h: float = 1e-5, max_iter: int = 200, tol: float = 1e-6,
                        seed: int = 0) -> HessianEstimate:
    """Estimate lambda_max of the Hessian from finite differences of gradients.

    ``objective`` is an :class:`ObjectiveConfig` or a callable
    ``ParamSet -> ParamSet`` returning the gradient.
    """
    if isinstance(objective, ObjectiveConfig):
        def gfn(th):
            return grad(objective, th, cfg, data).grad
    else:
        gfn = objective

    def hvp(v):
        g_plus = gfn(theta.unflatten(base + h * v)).flatten()
        g_minus = gfn(theta.unflatten(base - h * v)).flatten()
        return (g_plus - g_minus) / (2.0 * h)

    base = theta.flatten()
    return top_eigenvalue(hvp, base.size, subspace_dim, max_iter=max_iter, tol=tol, seed=seed)
