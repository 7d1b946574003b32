"""Client-side unlearning objectives.

Every objective is assembled from per-sequence log-likelihoods
``s_i = log p(y_i | x_i)`` (summed over masked target tokens) or from
per-token terms. Each head returns the loss together with its gradient
with respect to the logits of the batch it consumed; :mod:`mpu.gradengine`
pushes those logit gradients through the network.

Expectations over a dataset are means over examples. The retain regularizer
``lambda_ret * E[CE(retain)]`` is added to every objective except
GradAscent, whose definition has no retention term, and GradDiff, which
carries its own forget/retain weights.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .tensorcore import ParamSet, log_softmax_rows, softmax_rows
from .tinyformer import Batch, ModelConfig, Role, forward, forward_with_cache

__all__ = [
    "ObjectiveKind",
    "ObjectiveConfig",
    "UnlearnData",
    "MissingReferenceError",
    "seq_logprob_head",
    "undial_head",
    "satimp_head",
    "softplus",
    "sigmoid",
    "evaluate_terms",
    "loss",
    "forget_ce",
    "retain_ce",
]


class ObjectiveKind(str, enum.Enum):
    GRAD_ASCENT = "grad_ascent"
    GRAD_DIFF = "grad_diff"
    DPO = "dpo"
    NPO = "npo"
    SIMNPO = "simnpo"
    UNDIAL = "undial"
    SATIMP = "satimp"


_NEEDS_REFERENCE = {ObjectiveKind.DPO, ObjectiveKind.NPO, ObjectiveKind.UNDIAL}


class MissingReferenceError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectiveConfig:
    kind: ObjectiveKind = ObjectiveKind.GRAD_ASCENT
    beta: float = 1.0
    gamma: float = 0.0
    gamma_ud: float = 2.0
    beta1: float = 1.0
    beta2: float = 1.0
    lambda_f: float = 1.0
    lambda_ret: float = 1.0
    reference_params: ParamSet | None = None
    # SatImp weights come from this model when set (default: the model being
    # trained). Freezing them at a point gives the surrogate whose gradient
    # the stop-gradient rule computes.
    satimp_weight_params: ParamSet | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ObjectiveKind(self.kind))
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        for name in ("gamma", "gamma_ud", "beta1", "beta2", "lambda_f", "lambda_ret"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def needs_reference(self) -> bool:
        return self.kind in _NEEDS_REFERENCE

    @property
    def uses_retain(self) -> bool:
        return self.kind is not ObjectiveKind.GRAD_ASCENT

    def with_reference(self, theta: ParamSet | None) -> "ObjectiveConfig":
        return replace(self, reference_params=theta)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value, "beta": self.beta, "gamma": self.gamma,
            "gamma_ud": self.gamma_ud, "beta1": self.beta1, "beta2": self.beta2,
            "lambda_f": self.lambda_f, "lambda_ret": self.lambda_ret,
        }


@dataclass(frozen=True)
class UnlearnData:
    """The client's private data for one unlearning run."""

    forget: Batch | None = None
    retain: Batch | None = None
    preference: Batch | None = None

    def __post_init__(self):
        if self.preference is not None and self.preference.role is not Role.PREFERENCE_PAIR:
            raise ValueError("preference batch must have role PREFERENCE_PAIR")

    def validate(self, cfg: ModelConfig) -> None:
        for b in (self.forget, self.retain, self.preference):
            if b is not None:
                b.validate(cfg)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


def softplus(x):
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# logit-level heads

def seq_logprob_head(logits: np.ndarray, tokens: np.ndarray, mask: np.ndarray):
    """Per-sequence ``s_i`` and ``ds_i/dlogits`` (row i only touches example i)."""
    lsm = log_softmax_rows(logits[:, :-1])
    tgt = tokens[:, 1:]
    m = mask[:, 1:].astype(np.float64)
    lp = np.take_along_axis(lsm, tgt[..., None], axis=-1)[..., 0]
    s = (lp * m).sum(axis=1)
    ds = np.zeros_like(logits)
    inner = -np.exp(lsm)
    np.put_along_axis(inner, tgt[..., None], np.take_along_axis(inner, tgt[..., None], axis=-1) + 1.0, axis=-1)
    ds[:, :-1] = inner * m[..., None]
    return s, ds


def undial_head(student_logits, teacher_logits, tokens, mask, gamma_ud: float):
    """Per-example sum over positions of ``H(p_adj, p_student)`` and its logit gradient."""
    z_adj = np.array(teacher_logits[:, :-1], dtype=np.float64)
    tgt = tokens[:, 1:]
    np.put_along_axis(z_adj, tgt[..., None], np.take_along_axis(z_adj, tgt[..., None], axis=-1) - gamma_ud, axis=-1)
    p_adj = softmax_rows(z_adj)
    lsm = log_softmax_rows(student_logits[:, :-1])
    m = mask[:, 1:].astype(np.float64)
    per_pos = -(p_adj * lsm).sum(axis=-1)
    loss_i = (per_pos * m).sum(axis=1)
    grad = np.zeros_like(student_logits)
    grad[:, :-1] = (np.exp(lsm) - p_adj) * m[..., None]
    return loss_i, grad


def satimp_head(logits, tokens, mask, beta1: float, beta2: float, weight_logits=None):
    """Per-example ``sum_k w_k log p_k`` with ``w = p^b1 (1-p)^b2`` held constant.

    ``weight_logits`` (default ``logits``) supplies the probabilities used
    inside the weights.
    """
    lsm = log_softmax_rows(logits[:, :-1])
    tgt = tokens[:, 1:]
    m = mask[:, 1:].astype(np.float64)
    lp = np.take_along_axis(lsm, tgt[..., None], axis=-1)[..., 0]
    if weight_logits is None:
        p = np.exp(lp)
    else:
        wl = log_softmax_rows(weight_logits[:, :-1])
        p = np.exp(np.take_along_axis(wl, tgt[..., None], axis=-1)[..., 0])
    w = p ** beta1 * (1.0 - p) ** beta2
    loss_i = (w * lp * m).sum(axis=1)
    inner = -np.exp(lsm)
    np.put_along_axis(inner, tgt[..., None], np.take_along_axis(inner, tgt[..., None], axis=-1) + 1.0, axis=-1)
    grad = np.zeros_like(logits)
    grad[:, :-1] = inner * (w * m)[..., None]
    return loss_i, grad


# ---------------------------------------------------------------------------
# objective assembly

def _nonempty(b: Batch | None) -> bool:
    return b is not None and len(b) > 0


def evaluate_terms(obj: ObjectiveConfig, theta: ParamSet, cfg: ModelConfig, data: UnlearnData, *, with_cache: bool = True):
    """Loss and a list of ``(cache_or_tokens, dlogits)`` pairs.

    With ``with_cache`` the first element of each pair is the forward cache
    needed by :func:`mpu.tinyformer.backward`.
    """
    if obj.needs_reference and obj.reference_params is None:
        raise MissingReferenceError(f"{obj.kind.value} needs reference_params")
    data.validate(cfg)
    fwd = forward_with_cache if with_cache else (lambda th, c, t: (forward(th, c, t), t))
    ref = obj.reference_params
    kind = obj.kind
    total = 0.0
    parts = []

    if kind is ObjectiveKind.DPO:
        pref = data.preference
        if not _nonempty(pref):
            if _nonempty(data.forget):
                raise ValueError("DPO needs a preference-pair batch")
        else:
            n = len(pref)
            lw_logits, cw = fwd(theta, cfg, pref.tokens)
            ll_logits, cl = fwd(theta, cfg, pref.rejected_tokens)
            sw, dsw = seq_logprob_head(lw_logits, pref.tokens, pref.mask)
            sl, dsl = seq_logprob_head(ll_logits, pref.rejected_tokens, pref.rejected_mask)
            rw, _ = seq_logprob_head(forward(ref, cfg, pref.tokens), pref.tokens, pref.mask)
            rl, _ = seq_logprob_head(forward(ref, cfg, pref.rejected_tokens), pref.rejected_tokens, pref.rejected_mask)
            u = obj.beta * ((sw - rw) - (sl - rl))
            total += float(np.mean(softplus(-u)))
            c = obj.beta * sigmoid(-u) / n
            parts.append((cw, -c[:, None, None] * dsw))
            parts.append((cl, c[:, None, None] * dsl))
    elif _nonempty(data.forget):
        fb = data.forget
        n = len(fb)
        logits, cache = fwd(theta, cfg, fb.tokens)
        if kind in (ObjectiveKind.GRAD_ASCENT, ObjectiveKind.GRAD_DIFF):
            s, ds = seq_logprob_head(logits, fb.tokens, fb.mask)
            lam = obj.lambda_f if kind is ObjectiveKind.GRAD_DIFF else 1.0
            total += lam * float(np.mean(s))
            parts.append((cache, (lam / n) * ds))
        elif kind is ObjectiveKind.NPO:
            s, ds = seq_logprob_head(logits, fb.tokens, fb.mask)
            s_ref, _ = seq_logprob_head(forward(ref, cfg, fb.tokens), fb.tokens, fb.mask)
            z = obj.beta * (s - s_ref)
            total += (2.0 / obj.beta) * float(np.mean(softplus(z)))
            c = 2.0 * sigmoid(z) / n
            parts.append((cache, c[:, None, None] * ds))
        elif kind is ObjectiveKind.SIMNPO:
            s, ds = seq_logprob_head(logits, fb.tokens, fb.mask)
            length = np.maximum(fb.mask[:, 1:].sum(axis=1), 1)
            z = obj.beta * s / length + obj.gamma
            total += (2.0 / obj.beta) * float(np.mean(softplus(z)))
            c = 2.0 * sigmoid(z) / (length * n)
            parts.append((cache, c[:, None, None] * ds))
        elif kind is ObjectiveKind.UNDIAL:
            teacher = forward(ref, cfg, fb.tokens)
            li, g = undial_head(logits, teacher, fb.tokens, fb.mask, obj.gamma_ud)
            total += float(np.mean(li))
            parts.append((cache, g / n))
        elif kind is ObjectiveKind.SATIMP:
            wsrc = obj.satimp_weight_params
            wl = None if wsrc is None else forward(wsrc, cfg, fb.tokens)
            li, g = satimp_head(logits, fb.tokens, fb.mask, obj.beta1, obj.beta2, wl)
            total += float(np.mean(li))
            parts.append((cache, g / n))

    if obj.uses_retain and _nonempty(data.retain) and obj.lambda_ret > 0:
        rb = data.retain
        logits, cache = fwd(theta, cfg, rb.tokens)
        s, ds = seq_logprob_head(logits, rb.tokens, rb.mask)
        total += obj.lambda_ret * float(-np.mean(s))
        parts.append((cache, (-obj.lambda_ret / len(rb)) * ds))

    if not np.isfinite(total):
        raise FloatingPointError(f"non-finite {kind.value} loss: {total}")
    return total, parts


def loss(obj: ObjectiveConfig, theta: ParamSet, cfg: ModelConfig, forget: Batch | None = None,
         retain: Batch | None = None, preference: Batch | None = None) -> float:
    """Scalar objective value (forward passes only)."""
    data = forget if isinstance(forget, UnlearnData) else UnlearnData(forget, retain, preference)
    return evaluate_terms(obj, theta, cfg, data, with_cache=False)[0]


def _mean_ce(theta: ParamSet, cfg: ModelConfig, batch: Batch | None) -> float:
    if not _nonempty(batch):
        return float("nan")
    s, _ = seq_logprob_head(forward(theta, cfg, batch.tokens), batch.tokens, batch.mask)
    ntok = batch.mask[:, 1:].sum()
    return float(-s.sum() / max(ntok, 1))


def forget_ce(theta: ParamSet, cfg: ModelConfig, data: UnlearnData) -> float:
    """Per-token cross-entropy on the forget set (higher = more forgotten)."""
    return _mean_ce(theta, cfg, data.forget)


def retain_ce(theta: ParamSet, cfg: ModelConfig, data: UnlearnData) -> float:
    """Per-token cross-entropy on the retain set (utility proxy)."""
    return _mean_ce(theta, cfg, data.retain)
