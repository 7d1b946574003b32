"""Invariant suite behind the ``verify`` command.

Wires the fast implementations into :func:`mpu.oracleverify.run_all` and
adds the protocol-level invariants that need whole components.
"""

from __future__ import annotations

import numpy as np

from .. import oracleverify
from ..noisegen import build_plan, draw
from ..objectives import seq_logprob_head
from ..protocol import (
    InProcessTransport,
    LinearResponseOracle,
    OracleClient,
    RoundAccumulator,
    ServerSession,
    ServerState,
    cancellation_residual,
    reparam_resolver,
    round_seeds,
    run_round_mpu,
)
from ..protocol.codec import MessageType, ProtocolMessage, encode
from ..rngkit import Purpose, StreamKey, gaussian_stream, permutation_stream, rotation_angles_stream
from ..symmetry import apply, invert, sample_reparam
from ..tensorcore import ParamSet, rms
from ..tinyformer import ModelConfig, forward_logits, forward_with_cache, init_params
from .experiment import loglog_slope

__all__ = ["implementations", "run_verify", "micro_configs"]


def micro_configs() -> list[ModelConfig]:
    base = dict(vocab=7, d_model=8, n_layers=1, n_q_heads=2, n_kv_heads=1, d_head=4, d_ff=6, max_seq=4)
    return [
        ModelConfig(**base),
        ModelConfig(**{**base, "use_rope": False}),
        ModelConfig(**{**base, "gated_ffn": True, "attn_bias": True}),
        ModelConfig(**{**base, "n_layers": 2, "n_kv_heads": 2, "activation": "gelu"}),
    ]


def _micro_cases():
    for i, cfg in enumerate(micro_configs()):
        theta = init_params(cfg, 100 + i)
        spec = sample_reparam(200 + i, 1, cfg)
        rng = np.random.default_rng(i)
        tokens = [int(t) for t in rng.integers(cfg.vocab, size=cfg.max_seq)]
        yield theta, cfg, tokens, apply(spec, theta)


def _attention(theta, cfg, tokens, layer):
    _, cache = forward_with_cache(theta, cfg, np.asarray(tokens)[None, :])
    lc = cache.layers[layer]
    T = len(tokens)
    return lc["A"][0], lc["o"][0].reshape(T, cfg.n_q_heads, cfg.d_head).transpose(1, 0, 2)


def _aggregate_stream(updates, alpha):
    sets = [ParamSet(u) for u in updates]
    acc = RoundAccumulator(sets[0])
    for a, u in zip(alpha, sets):
        acc.accumulate(a, u)
    return dict(acc.mean().items())


def _seq_lp(theta, cfg, tokens, mask):
    logits = forward_logits(theta, cfg, np.asarray(tokens)[None, :])
    s, _ = seq_logprob_head(logits, np.asarray(tokens)[None, :], np.asarray(mask)[None, :])
    return float(s[0])


def _noise_draws(alpha, n_draws):
    like = ParamSet({"x": np.zeros(1)})
    ref = ParamSet({"x": np.ones(1)})
    plan = build_plan(1.0, len(alpha), alpha, ref, like)
    return np.array([[float(e["x"][0]) for e in draw(plan, r, 11).scaled] for r in range(1, n_draws + 1)])


def implementations() -> dict:
    return {
        "aggregate_stream": _aggregate_stream,
        "rms": lambda v: rms(np.asarray(v, dtype=np.float64)),
        "encode_delta": lambda v: encode(ProtocolMessage(MessageType.RETURN_DELTA, 1, 1, "x",
                                                         ParamSet({"d": np.asarray(v, dtype=np.float64)}))),
        "micro_cases": _micro_cases,
        "attention": _attention,
        "forward": lambda th, cfg, t: forward_logits(th, cfg, np.asarray(t)),
        "sequence_logprob": _seq_lp,
        "gaussian": lambda s, n: gaussian_stream(StreamKey(s, purpose=Purpose.BASE_NOISE), n),
        "angles": lambda s, n: rotation_angles_stream(StreamKey(s, purpose=Purpose.HEAD_ROTATION), n),
        "permutation": lambda s, n: permutation_stream(StreamKey(s, purpose=Purpose.PERMUTATION), n),
        "noise_draws": _noise_draws,
        "loglog_slope": lambda x, y: loglog_slope(x, y).slope,
    }


def _protocol_checks() -> list[oracleverify.OracleReport]:
    out = []
    cfg = ModelConfig()
    theta = init_params(cfg, 1)
    ref = init_params(cfg, 2)

    worst = 0.0
    for i, c in enumerate([cfg, ModelConfig(use_rope=False, gated_ffn=True)]):
        th = init_params(c, 10 + i)
        spec = sample_reparam(5, 1, c)
        x = np.arange(c.max_seq) % c.vocab
        worst = max(worst, float(np.max(np.abs(forward_logits(apply(spec, th), c, x) - forward_logits(th, c, x)))))
        worst = max(worst, (invert(spec, apply(spec, th)) - th).max_abs())
    out.append(oracleverify.OracleReport("function preservation and round trip", worst, 1e-9, worst <= 1e-9))

    oracle = LinearResponseOracle.random(theta, seed=3)
    plan = build_plan(0.1, 3, None, theta, ref)
    res = cancellation_residual(oracle, plan).relative
    out.append(oracleverify.OracleReport("linear-oracle cancellation (harmonic weights)", res, 1e-9, res <= 1e-9))

    seeds = lambda r: round_seeds(9, r)
    client = OracleClient(cfg, oracle, reparam_resolver(cfg, seeds), wire_dtype="f64")
    session = ServerSession(InProcessTransport(client), cfg, "f64")
    session.hello()
    _, trace = run_round_mpu(ServerState(theta, cfg), session, plan, 1, seeds(1))
    session.shutdown()
    rel = (trace.delta_bar - oracle.delta_star).norm() / oracle.delta_star.norm()
    out.append(oracleverify.OracleReport("MPU round with oracle client", rel, 1e-9, rel <= 1e-9))
    out.append(oracleverify.OracleReport("peak live copies", trace.peak_live_copies, 1,
                                         trace.peak_live_copies == 1))
    return out


def run_verify(quick: bool = True) -> list[oracleverify.OracleReport]:
    return oracleverify.run_all(implementations(), quick=quick) + _protocol_checks()
