"""
One protocol round against a linear-response client
====================================================

With a client whose update is exactly linear in its input, harmonic weights
cancel the noise terms and the server recovers the clean update.
"""

# %%
from mpu.noisegen import build_plan
from mpu.protocol import (InProcessTransport, LinearResponseOracle, OracleClient, ServerSession, ServerState,
                          reparam_resolver, round_seeds, run_round_mpu, run_round_noised)
from mpu.tinyformer import ModelConfig, init_params

cfg = ModelConfig(vocab=11, d_model=16, n_layers=2, n_q_heads=4, n_kv_heads=2, d_head=4, d_ff=12, max_seq=8)
theta = init_params(cfg, 1)
oracle = LinearResponseOracle.random(theta, seed=3)
seeds = round_seeds(5, 1)
plan = build_plan(0.5, 3, None, theta, theta * 0.0)

# %%
session = ServerSession(InProcessTransport(OracleClient(cfg, oracle, reparam_resolver(cfg, lambda r: seeds), "f64")),
                        cfg, "f64")
session.hello()
_, trace = run_round_mpu(ServerState(theta, cfg), session, plan, 1, seeds)
print("MPU residual   ", (trace.delta_bar - oracle.delta_star).norm() / oracle.delta_star.norm())
print("peak live copies", trace.peak_live_copies, "frames", trace.frames_sent)

# %%
# a single noisy copy keeps its first-order noise term
_, ntrace = run_round_noised(ServerState(theta, cfg), session, plan, 1, seeds)
print("noised residual", (ntrace.delta_bar - oracle.delta_star).norm() / oracle.delta_star.norm())
session.shutdown()
