"""Slow, independent reference computations used to check the fast paths.

Nothing here imports the model, the protocol or the noise code. Oracles
take plain mappings of arrays (a ``ParamSet`` works) and config objects by
attribute, and :func:`run_all` receives the implementations under test as
injected callables.
"""

from __future__ import annotations

import math
import struct
from collections import Counter
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

__all__ = [
    "OracleReport",
    "brute_force_aggregation",
    "brute_force_attention",
    "naive_forward",
    "naive_token_logprob",
    "rms_oracle",
    "f32_le_bytes",
    "zero_sum_covariance",
    "ols_fit",
    "permutation_frequencies",
    "run_all",
]

MAX_SEQ = 4
MAX_HEAD = 4


@dataclass(frozen=True)
class OracleReport:
    check: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.check}: {self.value:.3g} (tol {self.tolerance:g}) {self.detail}".rstrip()


def _report(name, value, tol, passed=None, detail=""):
    value = float(value)
    ok = (value <= tol) if passed is None else bool(passed)
    return OracleReport(name, value, float(tol), ok, detail)


# ---------------------------------------------------------------------------
# aggregation

def brute_force_aggregation(updates: Sequence[Mapping[str, np.ndarray]], alpha: Sequence[float]) -> dict:
    """``sum_k Delta_k / alpha_k  /  sum_k 1/alpha_k`` coordinate by coordinate."""
    if not updates:
        raise ValueError("need at least one update")
    denom = 0.0
    for a in alpha:
        denom += 1.0 / a
    out = {}
    for name in updates[0]:
        shape = np.shape(updates[0][name])
        flat = np.zeros(int(np.prod(shape)))
        cols = [np.ravel(u[name]) for u in updates]
        for i in range(flat.size):
            acc = 0.0
            for a, c in zip(alpha, cols):
                acc += c[i] / a
            flat[i] = acc / denom
        out[name] = flat.reshape(shape)
    return out


# ---------------------------------------------------------------------------
# transformer pieces written as explicit loops

def _freqs(cfg) -> list[float]:
    return [cfg.rope_base ** (-2.0 * r / cfg.d_head) for r in range(cfg.d_head // 2)]


def _rotate(vec, p, freqs):
    out = list(vec)
    for r, w in enumerate(freqs):
        c, s = math.cos(w * p), math.sin(w * p)
        a, b = vec[2 * r], vec[2 * r + 1]
        out[2 * r] = c * a - s * b
        out[2 * r + 1] = s * a + c * b
    return out


def _rmsnorm_rows(x, gain, eps):
    out = np.zeros_like(x)
    for t in range(x.shape[0]):
        ms = 0.0
        for v in x[t]:
            ms += v * v
        ms /= x.shape[1]
        r = 1.0 / math.sqrt(ms + eps)
        for j in range(x.shape[1]):
            out[t, j] = x[t, j] * r * gain[j]
    return out


def _vecmat(v, W):
    out = np.zeros(W.shape[1])
    for j in range(W.shape[1]):
        acc = 0.0
        for i in range(W.shape[0]):
            acc += v[i] * W[i, j]
        out[j] = acc
    return out


def _attention_layer(theta, cfg, x, layer):
    """Per-head scores, weights and outputs of one attention sublayer."""
    p = f"layers.{layer}."
    T = x.shape[0]
    HQ, HKV, dh = cfg.n_q_heads, cfg.n_kv_heads, cfg.d_head
    a_in = _rmsnorm_rows(x, theta[p + "attn_norm"], cfg.norm_eps)
    freqs = _freqs(cfg)
    q = np.zeros((T, HQ, dh))
    k = np.zeros((T, HKV, dh))
    v = np.zeros((T, HKV, dh))
    for t in range(T):
        qt = _vecmat(a_in[t], theta[p + "W_Q"])
        kt = _vecmat(a_in[t], theta[p + "W_K"])
        vt = _vecmat(a_in[t], theta[p + "W_V"])
        if cfg.attn_bias:
            qt, kt, vt = qt + theta[p + "b_Q"], kt + theta[p + "b_K"], vt + theta[p + "b_V"]
        for h in range(HQ):
            seg = list(qt[h * dh:(h + 1) * dh])
            q[t, h] = _rotate(seg, t, freqs) if cfg.use_rope else seg
        for h in range(HKV):
            seg = list(kt[h * dh:(h + 1) * dh])
            k[t, h] = _rotate(seg, t, freqs) if cfg.use_rope else seg
            v[t, h] = vt[h * dh:(h + 1) * dh]
    scores = np.full((HQ, T, T), -np.inf)
    weights = np.zeros((HQ, T, T))
    out = np.zeros((HQ, T, dh))
    for i in range(HQ):
        j = (i * HKV) // HQ
        for t in range(T):
            for s in range(t + 1):
                acc = 0.0
                for d in range(dh):
                    acc += q[t, i, d] * k[s, j, d]
                scores[i, t, s] = acc / math.sqrt(dh)
            top = max(scores[i, t, :t + 1])
            z = 0.0
            for s in range(t + 1):
                weights[i, t, s] = math.exp(scores[i, t, s] - top)
                z += weights[i, t, s]
            for s in range(t + 1):
                weights[i, t, s] /= z
                for d in range(dh):
                    out[i, t, d] += weights[i, t, s] * v[s, j, d]
    return scores, weights, out


def brute_force_attention(theta: Mapping[str, np.ndarray], cfg, tokens: Sequence[int], layer: int = 0) -> dict:
    """Attention of ``layer`` for one sequence (layers before it run naively too).

    Returns ``scores`` (pre-softmax, causal entries -inf), ``weights`` and
    per-head ``outputs``, each indexed by query head first.
    """
    tokens = list(tokens)
    if len(tokens) > MAX_SEQ or cfg.d_head > MAX_HEAD:
        raise ValueError(f"brute-force attention is capped at seq <= {MAX_SEQ}, d_head <= {MAX_HEAD}")
    x = _embed(theta, tokens)
    for i in range(layer):
        x = _block(theta, cfg, x, i)
    s, w, o = _attention_layer(theta, cfg, x, layer)
    return {"scores": s, "weights": w, "outputs": o}


def _embed(theta, tokens):
    E = theta["embed"]
    return np.array([[E[t, j] for j in range(E.shape[1])] for t in tokens], dtype=np.float64)


def _act(name, x):
    if name == "silu":
        return x / (1.0 + math.exp(-x))
    if name == "gelu":
        return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))
    return max(x, 0.0)


def _block(theta, cfg, x, layer):
    p = f"layers.{layer}."
    T, D = x.shape
    _, _, o = _attention_layer(theta, cfg, x, layer)
    HQ, dh = cfg.n_q_heads, cfg.d_head
    x = x.copy()
    for t in range(T):
        cat = np.array([o[h, t, d] for h in range(HQ) for d in range(dh)])
        x[t] += _vecmat(cat, theta[p + "W_O"]) + (theta[p + "b_O"] if cfg.attn_bias else 0.0)
    f_in = _rmsnorm_rows(x, theta[p + "ffn_norm"], cfg.norm_eps)
    act = getattr(cfg.activation, "value", cfg.activation)
    for t in range(T):
        hidden = np.zeros(cfg.d_ff)
        for n in range(cfg.d_ff):
            if cfg.gated_ffn:
                g = u = 0.0
                for j in range(D):
                    g += theta[p + "W_gate"][n, j] * f_in[t, j]
                    u += theta[p + "W_up"][n, j] * f_in[t, j]
                hidden[n] = _act(act, g + theta[p + "b1"][n]) * u
            else:
                a = 0.0
                for j in range(D):
                    a += theta[p + "W1"][n, j] * f_in[t, j]
                hidden[n] = _act(act, a + theta[p + "b1"][n])
        for j in range(D):
            acc = theta[p + "b2"][j]
            for n in range(cfg.d_ff):
                acc += theta[p + "W2"][j, n] * hidden[n]
            x[t, j] += acc
    return x


def naive_forward(theta: Mapping[str, np.ndarray], cfg, tokens: Sequence[int]) -> np.ndarray:
    """Logits (T, vocab) for one short sequence, computed with explicit loops."""
    x = _embed(theta, list(tokens))
    for i in range(cfg.n_layers):
        x = _block(theta, cfg, x, i)
    h = _rmsnorm_rows(x, theta["final_norm"], cfg.norm_eps)
    return np.array([_vecmat(h[t], theta["lm_head"]) for t in range(h.shape[0])])


def naive_token_logprob(logits_row: Sequence[float], target: int) -> float:
    top = max(logits_row)
    z = 0.0
    for v in logits_row:
        z += math.exp(v - top)
    return logits_row[target] - top - math.log(z)


# ---------------------------------------------------------------------------
# small numeric oracles

def rms_oracle(values: Sequence[float]) -> float:
    acc = 0.0
    for v in values:
        acc += v * v
    return math.sqrt(acc / len(values))


def f32_le_bytes(values: Sequence[float]) -> bytes:
    return b"".join(struct.pack("<f", v) for v in values)


def zero_sum_covariance(alpha: Sequence[float], sigma: float = 1.0) -> np.ndarray:
    """Covariance across copies of ``alpha_k * eps0_k`` for one coordinate."""
    m = len(alpha)
    cov = np.zeros((m, m))
    for i in range(m):
        for j in range(m):
            base = sigma * sigma if i == j else -sigma * sigma / (m - 1)
            cov[i, j] = alpha[i] * alpha[j] * base
    return cov


def ols_fit(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Slope, intercept and R^2 by the textbook formulas."""
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxx = sum((a - mx) ** 2 for a in x)
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    syy = sum((b - my) ** 2 for b in y)
    slope = sxy / sxx
    r2 = (sxy * sxy) / (sxx * syy) if syy > 0 else 1.0
    return slope, my - slope * mx, r2


def permutation_frequencies(perms) -> dict[tuple, float]:
    counts = Counter(tuple(int(v) for v in p) for p in perms)
    total = sum(counts.values())
    return {k: c / total for k, c in counts.items()}


# ---------------------------------------------------------------------------
# suite

def run_all(impl: Mapping[str, Callable], *, quick: bool = True) -> list[OracleReport]:
    """Check the injected implementations against the oracles above.

    ``impl`` keys used (each optional): ``aggregate_stream(updates, alpha)``,
    ``attention(theta, cfg, tokens, layer) -> (weights, outputs)``,
    ``forward(theta, cfg, tokens)``, ``micro_cases()`` yielding
    ``(theta, cfg, tokens, theta_rotated)``, ``rms``, ``encode_delta``,
    ``permutation(seed, n)``, ``gaussian(seed, n)``, ``angles(seed, n)``,
    ``noise_draws(alpha, n_draws)``, ``loglog_slope(x, y)``,
    ``sequence_logprob(theta, cfg, tokens, mask)``.
    """
    out: list[OracleReport] = []
    rng = np.random.default_rng(1234)

    agg = brute_force_aggregation([{"x": np.array([3.0])}, {"x": np.array([6.0])}], [1.0, 2.0])["x"][0]
    out.append(_report("aggregation hand case (alpha=(1,2), [3],[6]) -> [4]", abs(agg - 4.0), 1e-15))
    out.append(_report("rms oracle (3,4) -> sqrt(12.5)", abs(rms_oracle([3.0, 4.0]) - math.sqrt(12.5)), 1e-15))
    out.append(_report("ieee f32 [1.0, -2.5] bytes", 0.0, 0.0,
                       f32_le_bytes([1.0, -2.5]) == bytes.fromhex("0000803f000020c0")))

    if "aggregate_stream" in impl:
        worst = 0.0
        for _ in range(100):
            m = int(rng.integers(2, 6))
            alpha = rng.uniform(0.5, 3.0, size=m)
            ups = [{"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)} for _ in range(m)]
            ref = brute_force_aggregation(ups, alpha)
            got = impl["aggregate_stream"](ups, alpha)
            worst = max(worst, max(float(np.max(np.abs(got[n] - ref[n]))) for n in ref))
        out.append(_report("streaming aggregation == brute force (100 cases)", worst, 1e-12))

    if "rms" in impl:
        out.append(_report("rms(3,4)", abs(impl["rms"]([3.0, 4.0]) - rms_oracle([3.0, 4.0])), 1e-12))

    if "encode_delta" in impl:
        raw = impl["encode_delta"]([1.0, -2.5])
        out.append(_report("codec payload bytes", 0.0, 0.0, raw.endswith(f32_le_bytes([1.0, -2.5]))))

    if "micro_cases" in impl:
        w_err = o_err = s_err = f_err = 0.0
        for theta, cfg, tokens, theta_rot in impl["micro_cases"]():
            ref = brute_force_attention(theta, cfg, tokens)
            if "attention" in impl:
                w, o = impl["attention"](theta, cfg, tokens, 0)
                w_err = max(w_err, float(np.max(np.abs(np.nan_to_num(w - ref["weights"])))))
                o_err = max(o_err, float(np.max(np.abs(o - ref["outputs"]))))
            rot = brute_force_attention(theta_rot, cfg, tokens)
            finite = np.isfinite(ref["scores"])
            s_err = max(s_err, float(np.max(np.abs(rot["scores"][finite] - ref["scores"][finite]))))
            if "forward" in impl:
                f_err = max(f_err, float(np.max(np.abs(impl["forward"](theta, cfg, tokens) - naive_forward(theta, cfg, tokens)))))
        if "attention" in impl:
            out.append(_report("attention weights vs triple loop", w_err, 1e-10))
            out.append(_report("attention outputs vs triple loop", o_err, 1e-10))
        out.append(_report("attention logits unchanged by head rotation", s_err, 1e-10))
        if "forward" in impl:
            out.append(_report("forward logits vs naive loops", f_err, 1e-10))

    if "sequence_logprob" in impl and "micro_cases" in impl:
        worst = 0.0
        for theta, cfg, tokens, _ in impl["micro_cases"]():
            mask = np.ones(len(tokens), dtype=bool)
            mask[0] = False
            logits = naive_forward(theta, cfg, tokens)
            ref = sum(naive_token_logprob(list(logits[t - 1]), tokens[t]) for t in range(1, len(tokens)))
            worst = max(worst, abs(impl["sequence_logprob"](theta, cfg, tokens, mask) - ref))
        out.append(_report("sequence log-prob vs positionwise gathers", worst, 1e-10))

    n_stat = 20_000 if quick else 100_000
    if "gaussian" in impl:
        z = np.asarray(impl["gaussian"](7, n_stat))
        out.append(_report(f"gaussian mean ({n_stat})", abs(z.mean()), 0.02))
        out.append(_report(f"gaussian variance ({n_stat})", abs(z.var() - 1.0), 0.02 if not quick else 0.04))
    if "angles" in impl:
        a = np.asarray(impl["angles"](7, n_stat))
        inside = bool(np.all((a >= 0) & (a < 2 * math.pi)))
        out.append(_report("angle mean near pi", abs(a.mean() - math.pi), 0.03 if not quick else 0.05,
                           passed=inside and abs(a.mean() - math.pi) <= (0.03 if not quick else 0.05)))
    if "permutation" in impl:
        draws = 12_000 if quick else 60_000
        freqs = permutation_frequencies(impl["permutation"](s, 3) for s in range(draws))
        dev = max(abs(f - 1 / 6) for f in freqs.values()) if len(freqs) == 6 else 1.0
        out.append(_report(f"permutation uniformity n=3 ({draws} draws)", dev, 0.01 if not quick else 0.02))
    if "noise_draws" in impl:
        for m in (2, 3, 4):
            alpha = [1.0] * m
            samples = np.asarray(impl["noise_draws"](alpha, 4_000 if quick else 10_000))  # (n, m)
            emp = np.cov(samples, rowvar=False)
            ref = zero_sum_covariance(alpha)
            out.append(_report(f"zero-sum covariance m={m}", float(np.max(np.abs(emp - ref))), 0.1 if quick else 0.05))
    if "loglog_slope" in impl:
        x = [0.01, 0.02, 0.04, 0.08]
        y = [3.0 * v ** 2 * (1 + 0.05 * ((-1) ** i)) for i, v in enumerate(x)]
        ref, _, _ = ols_fit([math.log(v) for v in x], [math.log(v) for v in y])
        out.append(_report("log-log slope regression", abs(impl["loglog_slope"](x, y) - ref), 1e-12))
    return out
