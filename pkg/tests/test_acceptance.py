"""Acceptance criteria, one test per criterion.

Each test is tagged with ``acceptance_label``; the conftest hook prints a
PASS/FAIL line per criterion at the end of the run, with the measured
quantity attached through ``acceptance_detail``.
"""

import time

import numpy as np
import pytest

from mpu.client import ClientTrainConfig, run_sgd
from mpu.gradengine import fd_grad, grad, hessian_spectrum_fd, relative_error
from mpu.harness import checkpoint
from mpu.harness.checkpoint import CheckpointError
from mpu.harness.experiment import ExperimentConfig, run_experiment, sweep
from mpu.noisegen import build_plan, default_alphas, empirical_covariance_check
from mpu.objectives import ObjectiveConfig, ObjectiveKind
from mpu.protocol import (
    CodecError,
    InProcessTransport,
    LinearResponseOracle,
    MessageType,
    OracleClient,
    ProtocolMessage,
    RoundAccumulator,
    ServerSession,
    ServerState,
    aggregate,
    cancellation_residual,
    decode,
    encode,
    harmonic_weights,
    reparam_resolver,
    round_seeds,
    run_round_mpu,
    run_round_noised,
)
from mpu.symmetry import LayerReparam, ReparamSpec, apply, invert, sample_reparam
from mpu.tensorcore import ParamSet
from mpu.tinyformer import ModelConfig, forward, init_params

from .conftest import make_data


def criterion(label):
    def mark(fn):
        fn.acceptance_label = label
        fn.acceptance_detail = ""
        return fn
    return mark


def note(fn, text):
    fn.acceptance_detail = text


SMALL = ModelConfig(vocab=11, d_model=16, n_layers=2, n_q_heads=4, n_kv_heads=2, d_head=4, d_ff=12, max_seq=8)

SYMMETRY_CONFIGS = [
    ModelConfig(vocab=11, d_model=16, n_layers=2, n_q_heads=4, n_kv_heads=2, d_head=4, d_ff=12, max_seq=8),
    ModelConfig(vocab=11, d_model=16, n_layers=2, n_q_heads=4, n_kv_heads=2, d_head=4, d_ff=12, max_seq=8,
                gated_ffn=True),
    ModelConfig(vocab=9, d_model=12, n_layers=2, n_q_heads=4, n_kv_heads=1, d_head=3, d_ff=10, max_seq=6,
                use_rope=False),
    ModelConfig(vocab=9, d_model=12, n_layers=2, n_q_heads=4, n_kv_heads=2, d_head=3, d_ff=10, max_seq=6,
                use_rope=False, gated_ffn=True, activation="gelu", attn_bias=True),
]


def _oracle_session(cfg, oracle, resolver):
    session = ServerSession(InProcessTransport(OracleClient(cfg, oracle, resolver, "f64")), cfg, "f64")
    session.hello()
    return session


# ------------------------------------------------------------------------- 1


@criterion("1. Function preservation")
def test_function_preservation():
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(20):
        cfg = SYMMETRY_CONFIGS[i % 4]
        theta = init_params(cfg, 1000 + i)
        spec = sample_reparam(5000 + i, 1 + i % 3, cfg)
        x = np.random.default_rng(i).integers(0, cfg.vocab, (4, cfg.max_seq))
        worst = max(worst, float(np.max(np.abs(forward(apply(spec, theta), cfg, x) - forward(theta, cfg, x)))))
    elapsed = time.perf_counter() - t0
    note(test_function_preservation, f"max dev {worst:.2e}, {elapsed:.2f}s")
    assert worst <= 1e-9
    assert elapsed < 10


# ------------------------------------------------------------------------- 2


@criterion("2. Reflection negative control")
def test_reflection_negative_control():
    cfg = SYMMETRY_CONFIGS[0]
    theta = init_params(cfg, 7)
    spec = sample_reparam(3, 1, cfg)
    first = spec.layers[0]
    blocks = first.head_blocks.copy()
    blocks[1] = blocks[1] @ np.diag([1.0, 1.0, 1.0, -1.0])
    bad = ReparamSpec(cfg, (LayerReparam(first.ffn_perm, blocks),) + spec.layers[1:])
    x = np.random.default_rng(0).integers(0, cfg.vocab, (8, cfg.max_seq))
    dev = float(np.max(np.abs(forward(apply(bad, theta), cfg, x) - forward(theta, cfg, x))))
    note(test_reflection_negative_control, f"dev {dev:.3g}")
    assert dev > 1e-3


# ------------------------------------------------------------------------- 3


@criterion("3. Zero-sum noise statistics")
def test_zero_sum_noise_statistics():
    t0 = time.perf_counter()
    parts = []
    for m in (2, 3, 4):
        plan = build_plan(1.0, m, None, ParamSet({"w": np.ones(8)}), ParamSet({"w": np.zeros(8)}))
        rep = empirical_covariance_check(plan, 10_000, seed=m)
        parts.append(f"m={m}: zs {rep.zero_sum_max:.1e} var {rep.variance_error:.3f} cov {rep.covariance_error():.3f}")
        assert rep.zero_sum_max <= 1e-10
        assert rep.variance_error <= 0.05
        assert rep.covariance_error() <= 0.05
        assert rep.empirical_rank == m - 1
    elapsed = time.perf_counter() - t0
    note(test_zero_sum_noise_statistics, "; ".join(parts) + f"; {elapsed:.1f}s")
    assert elapsed < 30


# ------------------------------------------------------------------------- 4


@criterion("4. Exact first-order cancellation")
def test_exact_cancellation_through_protocol():
    theta = init_params(SMALL, 1)
    ref = init_params(SMALL, 2)
    oracle = LinearResponseOracle.random(theta, seed=4)
    g = np.random.default_rng(4)
    worst = 0.0
    for m in (2, 3, 5):
        for alpha in (None, g.uniform(0.3, 3.0, m)):
            for kappa in (0.01, 0.1, 1.0):
                seeds = round_seeds(m, int(kappa * 100))
                session = _oracle_session(SMALL, oracle, reparam_resolver(SMALL, lambda r, s=seeds: s))
                plan = build_plan(kappa, m, alpha, theta, ref)
                _, trace = run_round_mpu(ServerState(theta, SMALL), session, plan, 1, seeds)
                session.shutdown()
                worst = max(worst, (trace.delta_bar - oracle.delta_star).norm() / oracle.delta_star.norm())
    note(test_exact_cancellation_through_protocol, f"max rel residual {worst:.2e}")
    assert worst <= 1e-9


# ------------------------------------------------------------------------- 5


@criterion("5. Harmonic-weight uniqueness")
def test_harmonic_weight_uniqueness():
    theta = init_params(SMALL, 1)
    oracle = LinearResponseOracle.random(theta, seed=5)
    kappas = [0.01, 0.02, 0.04, 0.08]
    alpha = default_alphas(3)
    slopes = []
    for w in ([1 / 3, 1 / 3, 1 / 3], [0.5, 0.3, 0.2], [0.2, 0.2, 0.6]):
        assert np.ptp(np.asarray(w) * alpha) > 0
        res = [cancellation_residual(oracle, build_plan(k, 3, alpha, theta, theta * 0.0), w).residual for k in kappas]
        slopes.append(float(np.polyfit(np.log(kappas), np.log(res), 1)[0]))
    harmonic = max(cancellation_residual(oracle, build_plan(k, 3, alpha, theta, theta * 0.0)).relative for k in kappas)
    note(test_harmonic_weight_uniqueness, f"slopes {np.round(slopes, 3).tolist()}, harmonic {harmonic:.1e}")
    assert all(0.8 <= s <= 1.2 for s in slopes)
    assert harmonic < 1e-9


# ------------------------------------------------------------------------- 6


@criterion("6. Second-order remainder")
def test_second_order_remainder():
    t0 = time.perf_counter()
    theta = init_params(SMALL, 1)
    oracle = LinearResponseOracle.random(theta, seed=6, quadratic=4)
    ratios = []
    for kappa in (0.2, 0.1, 0.05):
        a = cancellation_residual(oracle, build_plan(kappa, 2, None, theta, theta * 0.0)).residual
        b = cancellation_residual(oracle, build_plan(kappa / 2, 2, None, theta, theta * 0.0)).residual
        ratios.append(a / b)
    rep = sweep(ExperimentConfig(wire_dtype="f64"), "kappa", [0.01, 0.02, 0.04, 0.08], out_dir=None)
    mpu, noised = rep.fits["mpu"].slope, rep.fits["noised"].slope
    elapsed = time.perf_counter() - t0
    note(test_second_order_remainder,
         f"halving ratios {np.round(ratios, 3).tolist()}, GA slopes mpu {mpu:.3f} noised {noised:.3f}, {elapsed:.0f}s")
    assert all(3.4 <= r <= 4.6 for r in ratios)
    assert mpu >= 1.7
    assert 0.8 <= noised <= 1.2
    assert elapsed < 300


# ------------------------------------------------------------------------- 7


@criterion("7. Trajectory equivariance")
def test_trajectory_equivariance():
    theta = init_params(SMALL, 3)
    data = make_data(SMALL, seed=1, n_forget=4, n_retain=6)
    spec = sample_reparam(21, 2, SMALL)
    worst = 0.0
    for kind in (ObjectiveKind.GRAD_ASCENT, ObjectiveKind.GRAD_DIFF):
        for wd in (0.0, 0.05):
            tc = ClientTrainConfig(epochs=20, learning_rate=0.02, weight_decay=wd, batch_size=2, retain_batch_size=2,
                                   max_steps=20)
            plain, tr = run_sgd(theta, ObjectiveConfig(kind=kind), tc, SMALL, data)
            moved, _ = run_sgd(apply(spec, theta), ObjectiveConfig(kind=kind), tc, SMALL, data)
            assert tr.steps == 20
            back = invert(spec, moved).flatten()
            ref = plain.flatten()
            err = np.abs(back - ref) / np.maximum(np.abs(ref), 1e-8)
            worst = max(worst, float(err.max()))
    note(test_trajectory_equivariance, f"max per-coordinate rel err {worst:.2e}")
    assert worst <= 1e-6


# ------------------------------------------------------------------------- 8


@criterion("8. Hessian-spectrum preservation")
def test_hessian_spectrum_preservation():
    cfg = ModelConfig(vocab=6, d_model=4, n_layers=1, n_q_heads=2, n_kv_heads=1, d_head=2, d_ff=4, max_seq=6)
    theta = init_params(cfg, 2)
    data = make_data(cfg, seed=3)
    obj = ObjectiveConfig(kind="grad_diff")
    spec = sample_reparam(8, 1, cfg)
    a = hessian_spectrum_fd(obj, theta, cfg, data, 6, max_iter=500, tol=1e-9)
    b = hessian_spectrum_fd(obj, apply(spec, theta), cfg, data, 6, max_iter=500, tol=1e-9)
    rel = abs(a.value - b.value) / abs(a.value)
    note(test_hessian_spectrum_preservation, f"lambda_max {a.value:.5f} vs {b.value:.5f}, rel {rel:.1e}")
    assert a.converged and b.converged
    assert rel <= 0.02


# ------------------------------------------------------------------------- 9


@criterion("9. Streaming equivalence")
def test_streaming_equivalence():
    g = np.random.default_rng(9)
    worst = 0.0
    for _ in range(100):
        m = int(g.integers(2, 7))
        alpha = g.uniform(0.5, 2.5, m)
        ups = [ParamSet({"a": g.standard_normal((4, 3)), "b": g.standard_normal(7)}) for _ in range(m)]
        acc = RoundAccumulator(ups[0])
        for k in g.permutation(m):
            acc.accumulate(alpha[k], ups[k])
        worst = max(worst, (acc.mean() - aggregate(ups, alpha)).max_abs())
    theta = init_params(SMALL, 1)
    oracle = LinearResponseOracle.random(theta, seed=9)
    seeds = round_seeds(9, 1)
    session = _oracle_session(SMALL, oracle, reparam_resolver(SMALL, lambda r: seeds))
    _, trace = run_round_mpu(ServerState(theta, SMALL), session, build_plan(0.1, 5, None, theta, theta * 0.0), 1,
                             seeds)
    session.shutdown()
    note(test_streaming_equivalence, f"max diff {worst:.1e}, peak live copies {trace.peak_live_copies}")
    assert worst <= 1e-12
    assert trace.peak_live_copies == 1


# ------------------------------------------------------------------------ 10


@criterion("10. Gradient correctness")
def test_gradient_correctness():
    worst = 0.0
    for seed in range(5):
        theta = init_params(SMALL, 40 + seed)
        ref = init_params(SMALL, 80 + seed)
        data = make_data(SMALL, seed=seed)
        coords = np.random.default_rng(seed).choice(theta.total_dim, 50, replace=False)
        for kind in ObjectiveKind:
            obj = ObjectiveConfig(kind=kind, reference_params=ref)
            ana = grad(obj, theta, SMALL, data).grad.flatten()[coords]
            num = fd_grad(obj, theta, SMALL, data, coords, h=1e-5)
            worst = max(worst, float(relative_error(ana, num).max()))
    note(test_gradient_correctness, f"max rel err {worst:.2e}")
    assert worst <= 1e-4


# ------------------------------------------------------------------------ 11


@criterion("11. Degenerate equivalence")
def test_degenerate_equivalence():
    base = ExperimentConfig(kappa=0.0, rounds=2, wire_dtype="f64", paired_clean=False)
    mpu = run_experiment(base, None).theta.flatten()
    clean = run_experiment(base.with_overrides(mode="clean"), None).theta.flatten()
    err = np.abs(mpu - clean) / np.maximum(np.abs(clean), 1e-12)
    note(test_degenerate_equivalence, f"max per-coordinate rel diff {err.max():.2e}")
    assert err.max() <= 1e-9


# ------------------------------------------------------------------------ 12


@criterion("12. Noise accumulation vs denoised tracking")
def test_noise_accumulation_vs_denoised():
    from scipy import stats

    theta = init_params(SMALL, 1)
    oracle = LinearResponseOracle.random(theta, seed=12, delta_scale=1e-3)
    plan = build_plan(0.05, 2, None, theta, theta * 0.0)
    R, n_seeds = 8, 24
    noised = np.zeros((n_seeds, R, theta.total_dim))
    mpu_final = np.zeros((n_seeds, theta.total_dim))
    for s in range(n_seeds):
        seeds_for = lambda r, s=s: round_seeds(1000 + s, r)
        plain = _oracle_session(SMALL, oracle, lambda r, k: None)
        state = ServerState(theta, SMALL)
        for r in range(1, R + 1):
            state, _ = run_round_noised(state, plain, plan, r, seeds_for(r))
            noised[s, r - 1] = state.theta.flatten()
        plain.shutdown()
        session = _oracle_session(SMALL, oracle, reparam_resolver(SMALL, seeds_for))
        state = ServerState(theta, SMALL)
        for r in range(1, R + 1):
            state, _ = run_round_mpu(state, session, plan, r, seeds_for(r))
        session.shutdown()
        mpu_final[s] = state.theta.flatten()
    var_r = noised.var(axis=0, ddof=1).mean(axis=1)
    fit = stats.linregress(np.arange(1, R + 1), var_r)
    mpu_var = float(mpu_final.var(axis=0, ddof=1).mean())
    note(test_noise_accumulation_vs_denoised,
         f"noised R^2 {fit.rvalue ** 2:.4f}, final var noised {var_r[-1]:.2e} vs mpu {mpu_var:.2e}")
    assert fit.rvalue ** 2 >= 0.9 and fit.slope > 0
    assert mpu_var * 10 <= var_r[-1]


# ------------------------------------------------------------------------ 13


@criterion("13. Behavioral proxy")
@pytest.mark.parametrize("kind", ["grad_ascent", "grad_diff", "npo"])
def test_behavioral_proxy(kind):
    t0 = time.perf_counter()
    obj = {**ExperimentConfig().objective.to_dict(), "kind": kind}
    cfg = ExperimentConfig().with_overrides(objective=obj, kappa=0.05, m=2)
    mpu = run_experiment(cfg, None).rows[-1]
    clean = run_experiment(cfg.with_overrides(mode="clean"), None).rows[-1]
    df = abs(mpu.forget_ce - clean.forget_ce) / clean.forget_ce
    dr = abs(mpu.retain_ce - clean.retain_ce) / clean.retain_ce
    elapsed = time.perf_counter() - t0
    prev = test_behavioral_proxy.acceptance_detail
    note(test_behavioral_proxy, (prev + "; " if prev else "") + f"{kind}: forget {df:.2%} retain {dr:.2%}")
    assert df <= 0.10 and dr <= 0.10
    assert elapsed < 300


# ------------------------------------------------------------------------ 14


@criterion("14. Wire and persistence round trips")
def test_wire_and_persistence_round_trips(tmp_path):
    theta = init_params(SMALL, 5)
    digest = SMALL.digest()
    for mtype in MessageType:
        for payload in (None, theta):
            msg = ProtocolMessage(mtype, 3, 2, digest, payload)
            assert decode(encode(msg, "f64"), expected_digest=digest) == msg
    # hand-assembled frame: ReturnDelta carrying [1.0, -2.5] as f32
    header = b'{"round":1,"copy":1,"config_digest":"","blocks":[{"name":"d","shape":[2],"dtype":"f32","offset":0}]}'
    frame = b"MPU1" + bytes([1, 3]) + len(header).to_bytes(4, "little") + header + bytes.fromhex("0000803F000020C0")
    got = decode(frame)
    assert got.type is MessageType.RETURN_DELTA and got.payload["d"].tolist() == [1.0, -2.5]
    assert encode(got) == frame
    with pytest.raises(CodecError):
        decode(encode(ProtocolMessage(MessageType.HELLO, config_digest=digest)), expected_digest="other")

    checkpoint.save(tmp_path / "ck", theta, SMALL)
    back, cfg = checkpoint.load(tmp_path / "ck", expected=SMALL)
    assert back.array_equal(theta) and cfg == SMALL
    assert (tmp_path / "ck.bin").read_bytes() == b"".join(a.astype("<f8").tobytes() for a in theta.values())
    other = ModelConfig(vocab=12, d_model=16, n_layers=2, n_q_heads=4, n_kv_heads=2, d_head=4, d_ff=12, max_seq=8)
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "ck", expected=other)
    note(test_wire_and_persistence_round_trips, f"{len(MessageType)} message types x 2 payload kinds")


def test_harmonic_weights_sum_to_one():
    # sanity guard used by several criteria above
    assert harmonic_weights(default_alphas(4)).sum() == pytest.approx(1.0, abs=1e-15)
