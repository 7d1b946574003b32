"""A small decoder-only Transformer in numpy.

Pre-norm residual blocks with RMS normalization, grouped-query attention
with optional rotary embeddings, and a plain or gated feed-forward layer.
Row vectors throughout: ``Q = X @ W_Q``; the FFN input projection
``W1`` has shape ``(d_ff, d_model)`` and acts as ``X @ W1.T``.

The forward pass keeps the intermediates needed by :func:`backward`, which
implements the reverse-mode rules for this fixed architecture.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import erf

from .rngkit import Purpose, StreamKey, gaussian_stream
from .tensorcore import ParamSet, StructureError, log_softmax_rows, softmax_rows

__all__ = [
    "Activation",
    "Role",
    "ModelConfig",
    "Batch",
    "block_layout",
    "init_params",
    "forward",
    "forward_logits",
    "forward_with_cache",
    "backward",
    "token_logprobs",
    "sequence_logprob",
    "rope_angles",
    "rope_matrix",
    "apply_rope",
]


class Activation(str, enum.Enum):
    SILU = "silu"
    GELU = "gelu"
    RELU = "relu"


class Role(str, enum.Enum):
    FORGET = "forget"
    RETAIN = "retain"
    PREFERENCE_PAIR = "preference_pair"


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_q_heads: int = 4
    n_kv_heads: int = 2
    d_head: int = 8
    d_ff: int = 64
    max_seq: int = 16
    use_rope: bool = True
    rope_base: float = 10000.0
    gated_ffn: bool = False
    activation: Activation = Activation.SILU
    attn_bias: bool = False
    norm_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "activation", Activation(self.activation))
        for name in ("vocab", "d_model", "n_layers", "n_q_heads", "n_kv_heads", "d_head", "d_ff", "max_seq"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_q_heads % self.n_kv_heads:
            raise ValueError("n_q_heads must be a multiple of n_kv_heads")
        if self.n_q_heads * self.d_head != self.d_model:
            raise ValueError("n_q_heads * d_head must equal d_model")
        if self.use_rope:
            if self.d_head % 2:
                raise ValueError("d_head must be even when use_rope")
            freqs = self.rope_frequencies()
            if len(np.unique(freqs)) != len(freqs):
                raise ValueError("RoPE frequencies must be pairwise distinct")

    @property
    def group_size(self) -> int:
        return self.n_q_heads // self.n_kv_heads

    @property
    def head_map(self) -> np.ndarray:
        """Query head ``i`` reads key/value head ``floor(i * H_KV / H_Q)``."""
        return np.arange(self.n_q_heads) * self.n_kv_heads // self.n_q_heads

    def rope_frequencies(self) -> np.ndarray:
        r = np.arange(self.d_head // 2)
        return self.rope_base ** (-2.0 * r / self.d_head)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["activation"] = self.activation.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def block_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list; every ParamSet of ``cfg`` uses this order."""
    D, F = cfg.d_model, cfg.d_ff
    q_dim, kv_dim = cfg.n_q_heads * cfg.d_head, cfg.n_kv_heads * cfg.d_head
    out = [("embed", (cfg.vocab, D))]
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        out.append((p + "attn_norm", (D,)))
        out += [(p + "W_Q", (D, q_dim)), (p + "W_K", (D, kv_dim)), (p + "W_V", (D, kv_dim))]
        if cfg.attn_bias:
            out += [(p + "b_Q", (q_dim,)), (p + "b_K", (kv_dim,)), (p + "b_V", (kv_dim,))]
        out.append((p + "W_O", (q_dim, D)))
        if cfg.attn_bias:
            out.append((p + "b_O", (D,)))
        out.append((p + "ffn_norm", (D,)))
        if cfg.gated_ffn:
            out += [(p + "W_gate", (F, D)), (p + "W_up", (F, D))]
        else:
            out.append((p + "W1", (F, D)))
        out += [(p + "b1", (F,)), (p + "W2", (D, F)), (p + "b2", (D,))]
    out += [("final_norm", (D,)), ("lm_head", (D, cfg.vocab))]
    return out


def init_params(cfg: ModelConfig, seed: int, *, scale: float = 1.0) -> ParamSet:
    """Gaussian init with 1/sqrt(fan_in) scaling; norm gains start at 1, biases small."""
    blocks = []
    for idx, (name, shape) in enumerate(block_layout(cfg)):
        n = int(np.prod(shape))
        z = gaussian_stream(StreamKey(seed, block_id=idx, purpose=Purpose.INIT), n).reshape(shape)
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("norm"):
            value = np.ones(shape)
        elif len(shape) == 1:
            value = 0.02 * scale * z
        elif name == "embed":
            value = scale * z
        else:
            fan_in = shape[1] if leaf in ("W1", "W_gate", "W_up", "W2") else shape[0]
            value = scale * z / math.sqrt(fan_in)
        blocks.append((name, value))
    return ParamSet(blocks)


@dataclass(frozen=True)
class Batch:
    """Token sequences with per-position target masks.

    ``mask[b, t]`` marks token ``t`` as a scored target, predicted from the
    logits at position ``t - 1``; column 0 is never a target. Preference
    pairs store the preferred completion in ``tokens``/``mask`` and the
    dispreferred one in ``rejected_tokens``/``rejected_mask``.
    """

    tokens: np.ndarray
    mask: np.ndarray
    role: Role = Role.RETAIN
    rejected_tokens: np.ndarray | None = None
    rejected_mask: np.ndarray | None = None

    def __post_init__(self):
        tokens = np.atleast_2d(np.asarray(self.tokens, dtype=np.int64))
        mask = np.atleast_2d(np.asarray(self.mask, dtype=bool))
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "role", Role(self.role))
        if tokens.shape != mask.shape:
            raise ValueError("tokens and mask shapes differ")
        if tokens.size and mask[:, 0].any():
            raise ValueError("position 0 cannot be a target")
        if self.role is Role.PREFERENCE_PAIR:
            if self.rejected_tokens is None or self.rejected_mask is None:
                raise ValueError("preference pairs need rejected tokens and mask")
            rt = np.atleast_2d(np.asarray(self.rejected_tokens, dtype=np.int64))
            rm = np.atleast_2d(np.asarray(self.rejected_mask, dtype=bool))
            if rt.shape != rm.shape or rt.shape[0] != tokens.shape[0]:
                raise ValueError("rejected tokens/mask do not pair with the chosen batch")
            if rt.size and rm[:, 0].any():
                raise ValueError("position 0 cannot be a target")
            object.__setattr__(self, "rejected_tokens", rt)
            object.__setattr__(self, "rejected_mask", rm)

    def __len__(self) -> int:
        return 0 if self.tokens.size == 0 else self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    def take(self, idx) -> "Batch":
        idx = np.asarray(idx, dtype=np.int64)
        if self.role is Role.PREFERENCE_PAIR:
            return Batch(self.tokens[idx], self.mask[idx], self.role,
                         self.rejected_tokens[idx], self.rejected_mask[idx])
        return Batch(self.tokens[idx], self.mask[idx], self.role)

    def validate(self, cfg: ModelConfig) -> None:
        for toks in (self.tokens, self.rejected_tokens):
            if toks is None or toks.size == 0:
                continue
            if toks.shape[1] > cfg.max_seq:
                raise ValueError(f"sequence length {toks.shape[1]} exceeds max_seq {cfg.max_seq}")
            if toks.min() < 0 or toks.max() >= cfg.vocab:
                raise ValueError("token id out of range")


# ---------------------------------------------------------------------------
# rotary embeddings

def rope_angles(cfg: ModelConfig, seq_len: int) -> np.ndarray:
    """(seq_len, d_head/2) rotation angles ``omega_r * p``."""
    return np.arange(seq_len)[:, None] * cfg.rope_frequencies()[None, :]


def rope_matrix(cfg: ModelConfig, p: int) -> np.ndarray:
    """Block-diagonal ``Phi(p)`` acting on adjacent coordinate pairs."""
    out = np.zeros((cfg.d_head, cfg.d_head))
    for r, ang in enumerate(p * cfg.rope_frequencies()):
        c, s = math.cos(ang), math.sin(ang)
        out[2 * r:2 * r + 2, 2 * r:2 * r + 2] = [[c, -s], [s, c]]
    return out


def apply_rope(x: np.ndarray, angles: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Rotate rows ``x[..., t, h, :]`` by ``Phi(t)^T`` (or ``Phi(t)`` if inverse).

    ``x`` has shape (B, T, H, d_head); ``angles`` (T, d_head/2).
    """
    cos = np.cos(angles)[None, :, None, :]
    sin = np.sin(angles)[None, :, None, :]
    if inverse:
        sin = -sin
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = cos * even - sin * odd
    out[..., 1::2] = sin * even + cos * odd
    return out


# ---------------------------------------------------------------------------
# pieces

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _act(kind: Activation, x):
    if kind is Activation.SILU:
        return x / (1.0 + np.exp(-x))
    if kind is Activation.GELU:
        return 0.5 * x * (1.0 + erf(x * _SQRT1_2))
    return np.maximum(x, 0.0)


def _act_grad(kind: Activation, x):
    if kind is Activation.SILU:
        s = 1.0 / (1.0 + np.exp(-x))
        return s * (1.0 + x * (1.0 - s))
    if kind is Activation.GELU:
        return 0.5 * (1.0 + erf(x * _SQRT1_2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (x > 0).astype(x.dtype)


def _rmsnorm(x, gain, eps):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * r * gain, r


def _rmsnorm_back(dy, x, r, gain):
    u = dy * gain
    dgain = (dy * x * r).reshape(-1, x.shape[-1]).sum(axis=0)
    dx = r * u - (r ** 3) * x * np.mean(u * x, axis=-1, keepdims=True)
    return dx, dgain


def _check(theta: ParamSet, cfg: ModelConfig) -> None:
    layout = block_layout(cfg)
    if list(theta.keys()) != [n for n, _ in layout]:
        raise StructureError("parameter blocks do not match the model config layout")
    for n, shape in layout:
        if theta[n].shape != shape:
            raise StructureError(f"block {n!r} has shape {theta[n].shape}, expected {shape}")


def _as_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] == 0:
        raise ValueError("tokens must be a non-empty (B, T) array")
    if tokens.shape[1] > cfg.max_seq:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_seq {cfg.max_seq}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ValueError("token id out of range")
    return tokens


# ---------------------------------------------------------------------------
# forward / backward

@dataclass
class _Cache:
    tokens: np.ndarray
    layers: list = field(default_factory=list)
    x_final: np.ndarray | None = None
    r_final: np.ndarray | None = None
    h_final: np.ndarray | None = None


def forward_with_cache(theta: ParamSet, cfg: ModelConfig, tokens) -> tuple[np.ndarray, _Cache]:
    """Logits of shape (B, T, vocab) and the cache for :func:`backward`."""
    _check(theta, cfg)
    tokens = _as_tokens(cfg, tokens)
    B, T = tokens.shape
    HQ, HKV, dh, G = cfg.n_q_heads, cfg.n_kv_heads, cfg.d_head, cfg.group_size
    eps = cfg.norm_eps
    angles = rope_angles(cfg, T) if cfg.use_rope else None
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)
    scale = 1.0 / math.sqrt(dh)

    cache = _Cache(tokens=tokens)
    x = theta["embed"][tokens]
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        lc = {"x_in": x}
        a_in, r1 = _rmsnorm(x, theta[p + "attn_norm"], eps)
        q = a_in @ theta[p + "W_Q"]
        k = a_in @ theta[p + "W_K"]
        v = a_in @ theta[p + "W_V"]
        if cfg.attn_bias:
            q = q + theta[p + "b_Q"]
            k = k + theta[p + "b_K"]
            v = v + theta[p + "b_V"]
        q = q.reshape(B, T, HQ, dh)
        k = k.reshape(B, T, HKV, dh)
        v = v.reshape(B, T, HKV, dh)
        if cfg.use_rope:
            q = apply_rope(q, angles)
            k = apply_rope(k, angles)
        k_e = np.repeat(k, G, axis=2)
        v_e = np.repeat(v, G, axis=2)
        scores = np.einsum("bthd,bshd->bhts", q, k_e) * scale
        scores = np.where(causal, -np.inf, scores)
        A = softmax_rows(scores)
        o = np.einsum("bhts,bshd->bthd", A, v_e).reshape(B, T, HQ * dh)
        attn = o @ theta[p + "W_O"]
        if cfg.attn_bias:
            attn = attn + theta[p + "b_O"]
        x = x + attn
        lc.update(a_in=a_in, r1=r1, q=q, k_e=k_e, v_e=v_e, A=A, o=o, x_mid=x)

        f_in, r2 = _rmsnorm(x, theta[p + "ffn_norm"], eps)
        if cfg.gated_ffn:
            g_pre = f_in @ theta[p + "W_gate"].T + theta[p + "b1"]
            u = f_in @ theta[p + "W_up"].T
            g_act = _act(cfg.activation, g_pre)
            h = g_act * u
            lc.update(g_pre=g_pre, u=u, g_act=g_act)
        else:
            pre = f_in @ theta[p + "W1"].T + theta[p + "b1"]
            h = _act(cfg.activation, pre)
            lc.update(pre=pre)
        x = x + h @ theta[p + "W2"].T + theta[p + "b2"]
        lc.update(f_in=f_in, r2=r2, h=h)
        cache.layers.append(lc)

    hf, rf = _rmsnorm(x, theta["final_norm"], eps)
    cache.x_final, cache.r_final, cache.h_final = x, rf, hf
    return hf @ theta["lm_head"], cache


def forward(theta: ParamSet, cfg: ModelConfig, tokens) -> np.ndarray:
    return forward_with_cache(theta, cfg, tokens)[0]


def forward_logits(theta: ParamSet, cfg: ModelConfig, tokens) -> np.ndarray:
    """Logits for a single sequence (T, vocab) or a batch (B, T, vocab)."""
    if isinstance(tokens, Batch):
        tokens.validate(cfg)
        return forward(theta, cfg, tokens.tokens)
    arr = np.asarray(tokens)
    logits = forward(theta, cfg, arr)
    return logits[0] if arr.ndim == 1 else logits


def backward(theta: ParamSet, cfg: ModelConfig, cache: _Cache, dlogits: np.ndarray) -> ParamSet:
    """Gradient of ``sum(dlogits * logits)`` with respect to every block."""
    tokens = cache.tokens
    B, T = tokens.shape
    HQ, HKV, dh, G = cfg.n_q_heads, cfg.n_kv_heads, cfg.d_head, cfg.group_size
    scale = 1.0 / math.sqrt(dh)
    angles = rope_angles(cfg, T) if cfg.use_rope else None
    grads: dict[str, np.ndarray] = {}

    grads["lm_head"] = np.einsum("btd,btv->dv", cache.h_final, dlogits)
    dh_final = dlogits @ theta["lm_head"].T
    dx, grads["final_norm"] = _rmsnorm_back(dh_final, cache.x_final, cache.r_final, theta["final_norm"])

    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}."
        lc = cache.layers[i]
        # FFN
        grads[p + "b2"] = dx.sum(axis=(0, 1))
        grads[p + "W2"] = np.einsum("btd,btf->df", dx, lc["h"])
        dh_ = dx @ theta[p + "W2"]
        f_in = lc["f_in"]
        if cfg.gated_ffn:
            dg_pre = dh_ * lc["u"] * _act_grad(cfg.activation, lc["g_pre"])
            du = dh_ * lc["g_act"]
            grads[p + "W_gate"] = np.einsum("btf,btd->fd", dg_pre, f_in)
            grads[p + "W_up"] = np.einsum("btf,btd->fd", du, f_in)
            grads[p + "b1"] = dg_pre.sum(axis=(0, 1))
            df_in = dg_pre @ theta[p + "W_gate"] + du @ theta[p + "W_up"]
        else:
            dpre = dh_ * _act_grad(cfg.activation, lc["pre"])
            grads[p + "W1"] = np.einsum("btf,btd->fd", dpre, f_in)
            grads[p + "b1"] = dpre.sum(axis=(0, 1))
            df_in = dpre @ theta[p + "W1"]
        dxn, grads[p + "ffn_norm"] = _rmsnorm_back(df_in, lc["x_mid"], lc["r2"], theta[p + "ffn_norm"])
        dx = dx + dxn

        # attention
        if cfg.attn_bias:
            grads[p + "b_O"] = dx.sum(axis=(0, 1))
        grads[p + "W_O"] = np.einsum("btk,btd->kd", lc["o"], dx)
        do = (dx @ theta[p + "W_O"].T).reshape(B, T, HQ, dh)
        A, q, k_e, v_e = lc["A"], lc["q"], lc["k_e"], lc["v_e"]
        dA = np.einsum("bthd,bshd->bhts", do, v_e)
        dv_e = np.einsum("bhts,bthd->bshd", A, do)
        dscores = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) * scale
        dq = np.einsum("bhts,bshd->bthd", dscores, k_e)
        dk_e = np.einsum("bhts,bthd->bshd", dscores, q)
        dk = dk_e.reshape(B, T, HKV, G, dh).sum(axis=3)
        dv = dv_e.reshape(B, T, HKV, G, dh).sum(axis=3)
        if cfg.use_rope:
            dq = apply_rope(dq, angles, inverse=True)
            dk = apply_rope(dk, angles, inverse=True)
        dq = dq.reshape(B, T, HQ * dh)
        dk = dk.reshape(B, T, HKV * dh)
        dv = dv.reshape(B, T, HKV * dh)
        a_in = lc["a_in"]
        grads[p + "W_Q"] = np.einsum("btd,btk->dk", a_in, dq)
        grads[p + "W_K"] = np.einsum("btd,btk->dk", a_in, dk)
        grads[p + "W_V"] = np.einsum("btd,btk->dk", a_in, dv)
        if cfg.attn_bias:
            grads[p + "b_Q"] = dq.sum(axis=(0, 1))
            grads[p + "b_K"] = dk.sum(axis=(0, 1))
            grads[p + "b_V"] = dv.sum(axis=(0, 1))
        da_in = dq @ theta[p + "W_Q"].T + dk @ theta[p + "W_K"].T + dv @ theta[p + "W_V"].T
        dxn, grads[p + "attn_norm"] = _rmsnorm_back(da_in, lc["x_in"], lc["r1"], theta[p + "attn_norm"])
        dx = dx + dxn

    dembed = np.zeros_like(theta["embed"])
    np.add.at(dembed, tokens.reshape(-1), dx.reshape(-1, cfg.d_model))
    grads["embed"] = dembed
    return ParamSet((n, grads[n]) for n in theta)


# ---------------------------------------------------------------------------
# log-probabilities

def token_logprobs(logits: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """``log p(tokens[:, t] | <t)`` for t >= 1, shape (B, T-1)."""
    lsm = log_softmax_rows(logits[:, :-1])
    return np.take_along_axis(lsm, tokens[:, 1:, None], axis=-1)[..., 0]


def sequence_logprob(theta: ParamSet, cfg: ModelConfig, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    """Per-token log-probabilities (masked entries zeroed) and per-sequence sums."""
    batch.validate(cfg)
    if len(batch) == 0:
        return np.zeros((0, max(batch.seq_len - 1, 0))), np.zeros(0)
    logits = forward(theta, cfg, batch.tokens)
    lp = token_logprobs(logits, batch.tokens) * batch.mask[:, 1:]
    return lp, lp.sum(axis=1)
