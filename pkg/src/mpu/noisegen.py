"""Block-wise zero-sum noise for the published copies."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .rngkit import Purpose, StreamKey, gaussian_stream
from .tensorcore import Delta, ParamSet, rms

__all__ = [
    "NoisePlan",
    "NoiseDraw",
    "default_alphas",
    "build_plan",
    "draw",
    "draw_single",
    "stream_copies",
    "zero_sum_factor",
    "copy_covariance_factor",
    "CovarianceReport",
    "empirical_covariance_check",
]


def default_alphas(m: int) -> np.ndarray:
    """``alpha_k = 1 + (k-1)/(m-1)``, i.e. evenly spaced from 1 to 2."""
    if m < 2:
        raise ValueError("m must be >= 2")
    return 1.0 + np.arange(m) / (m - 1)


def zero_sum_factor(m: int) -> float:
    return float(np.sqrt(m / (m - 1)))


@dataclass(frozen=True)
class NoisePlan:
    kappa: float
    m: int
    alpha: np.ndarray
    sigma: dict[str, float]
    shapes: dict[str, tuple[int, ...]]

    @property
    def mean_alpha(self) -> float:
        return float(np.mean(self.alpha))

    def block_names(self) -> list[str]:
        return list(self.shapes)


def build_plan(kappa: float, m: int, alpha: Sequence[float] | None, current: ParamSet, reference: ParamSet) -> NoisePlan:
    """``sigma_l = kappa * RMS(current_l - reference_l)`` for every block."""
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    if m < 2:
        raise ValueError("m must be >= 2")
    current.check_structure(reference)
    alpha = default_alphas(m) if alpha is None else np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (m,):
        raise ValueError(f"need {m} scaling factors, got {alpha.shape}")
    if np.any(alpha <= 0):
        raise ValueError("every alpha_k must be > 0")
    task = current - reference
    sigma = {n: float(kappa * rms(v)) for n, v in task.items()}
    return NoisePlan(float(kappa), int(m), alpha, sigma, current.shapes)


@dataclass(frozen=True)
class NoiseDraw:
    round: int
    base: tuple[Delta, ...]
    scaled: tuple[Delta, ...]


def _block_noise(plan: NoisePlan, r: int, seed: int, copy: int, block_id: int, name: str, scale: float = 1.0) -> np.ndarray:
    shape = plan.shapes[name]
    n = int(np.prod(shape))
    sig = plan.sigma[name] * scale
    if sig == 0.0:
        return np.zeros(shape)
    z = gaussian_stream(StreamKey(seed, round=r, copy=copy, block_id=block_id, purpose=Purpose.BASE_NOISE), n)
    return (sig * z).reshape(shape)


def draw(plan: NoisePlan, r: int, s_r: int) -> NoiseDraw:
    """Zero-sum base noises for the ``m`` copies and their scaled versions."""
    m = plan.m
    factor = zero_sum_factor(m)
    base = [dict() for _ in range(m)]
    for block_id, name in enumerate(plan.shapes):
        z = np.stack([_block_noise(plan, r, s_r, k + 1, block_id, name) for k in range(m)])
        eps0 = factor * (z - z.mean(axis=0))
        # close the last copy so the two-copy case is an exact negation
        eps0[-1] = -eps0[:-1].sum(axis=0)
        for k in range(m):
            base[k][name] = eps0[k]
    base_sets = tuple(ParamSet(b) for b in base)
    scaled = tuple(b * float(a) for b, a in zip(base_sets, plan.alpha))
    return NoiseDraw(r, base_sets, scaled)


def stream_copies(plan: NoisePlan, r: int, s_r: int):
    """Yield ``(k, alpha_k, scaled noise)`` one copy at a time in O(d) memory.

    The per-block mean over copies is accumulated in a first pass; each
    copy's Gaussian is then regenerated from its key, and the last copy is
    minus the running sum of the others. Values equal :func:`draw` exactly.
    """
    m = plan.m
    factor = zero_sum_factor(m)
    names = list(plan.shapes)
    means = {}
    for block_id, name in enumerate(names):
        acc = np.zeros(plan.shapes[name])
        for k in range(m):
            acc = acc + _block_noise(plan, r, s_r, k + 1, block_id, name)
        means[name] = acc / m
    running = {name: np.zeros(plan.shapes[name]) for name in names}
    for k in range(m):
        blocks = []
        for block_id, name in enumerate(names):
            if k == m - 1:
                e = -running[name]
            else:
                e = factor * (_block_noise(plan, r, s_r, k + 1, block_id, name) - means[name])
                running[name] = running[name] + e
            blocks.append((name, e))
        yield k + 1, float(plan.alpha[k]), ParamSet(blocks) * float(plan.alpha[k])


def draw_single(plan: NoisePlan, r: int, s_r: int, scale: float | None = None) -> Delta:
    """Independent ``N(0, (scale*sigma_l)^2)`` noise for the single-copy baseline.

    ``scale`` defaults to the mean copy scaling ``E_k[alpha_k]``.
    """
    scale = plan.mean_alpha if scale is None else scale
    return ParamSet(
        (name, _block_noise(plan, r, s_r, 1, block_id, name, scale))
        for block_id, name in enumerate(plan.shapes)
    )


def copy_covariance_factor(alpha: Sequence[float]) -> np.ndarray:
    """``D B D`` with ``B = m/(m-1) I - 1/(m-1) 11^T`` and ``D = diag(alpha)``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    m = alpha.size
    B = (m / (m - 1)) * np.eye(m) - np.ones((m, m)) / (m - 1)
    return alpha[:, None] * B * alpha[None, :]


@dataclass(frozen=True)
class CovarianceReport:
    n_draws: int
    zero_sum_max: float            # max |sum_k eps0_k| / sigma over all coordinates and draws
    variance_ratio: np.ndarray     # per copy: pooled Var(eps0_k) / sigma^2
    covariance_ratio: np.ndarray   # m x m pooled Cov(eps0_k, eps0_j) / sigma^2
    per_coord_variance_dev: float  # max relative deviation of per-coordinate variance
    scaled_factor: np.ndarray      # empirical Cov of scaled copies / sigma^2
    scaled_eigenvalues: np.ndarray
    expected_eigenvalues: np.ndarray

    @property
    def variance_error(self) -> float:
        return float(np.max(np.abs(self.variance_ratio - 1.0)))

    def covariance_error(self) -> float:
        m = self.covariance_ratio.shape[0]
        target = -1.0 / (m - 1)
        off = self.covariance_ratio[~np.eye(m, dtype=bool)]
        return float(np.max(np.abs(off - target) / abs(target)))

    @property
    def empirical_rank(self) -> int:
        ev = np.abs(self.scaled_eigenvalues)
        return int(np.sum(ev > 0.01 * ev.max()))


def empirical_covariance_check(plan: NoisePlan, n_draws: int, *, seed: int = 0) -> CovarianceReport:
    """Monte Carlo estimate of the copy-noise statistics over ``n_draws`` rounds.

    Statistics are normalized by ``sigma_l^2`` per block and pooled over all
    coordinates with ``sigma_l > 0``. Each draw uses round index ``1..n``.
    """
    if n_draws < 1000:
        raise ValueError("n_draws must be >= 1000")
    names = [n for n in plan.shapes if plan.sigma[n] > 0]
    if not names:
        raise ValueError("plan has no noised blocks")
    m = plan.m
    samples = []  # (n_draws, m, n_coords) normalized base noise
    zero_sum = 0.0
    for r in range(1, n_draws + 1):
        d = draw(plan, r, seed)
        row = np.stack([np.concatenate([d.base[k][n].reshape(-1) / plan.sigma[n] for n in names]) for k in range(m)])
        zero_sum = max(zero_sum, float(np.max(np.abs(row.sum(axis=0)))))
        samples.append(row)
    X = np.stack(samples)  # draws, copies, coords
    Xc = X - X.mean(axis=0, keepdims=True)
    cov_per_coord = np.einsum("nkc,njc->kjc", Xc, Xc) / (n_draws - 1)
    pooled = cov_per_coord.mean(axis=2)
    var_per_coord = np.einsum("kkc->kc", cov_per_coord)
    scaled = plan.alpha[:, None] * pooled * plan.alpha[None, :]
    return CovarianceReport(
        n_draws=n_draws,
        zero_sum_max=zero_sum,
        variance_ratio=np.diag(pooled).copy(),
        covariance_ratio=pooled,
        per_coord_variance_dev=float(np.max(np.abs(var_per_coord - 1.0))),
        scaled_factor=scaled,
        scaled_eigenvalues=np.linalg.eigvalsh(scaled)[::-1],
        expected_eigenvalues=np.linalg.eigvalsh(copy_covariance_factor(plan.alpha))[::-1],
    )
