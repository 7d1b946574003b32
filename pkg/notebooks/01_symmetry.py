"""
Hidden symmetries of a small transformer
========================================

Permuting FFN neurons and rotating each key/value head group leaves the
network function unchanged. A reflection does not commute with RoPE.
"""

# %%
import numpy as np

from mpu.symmetry import LayerReparam, ReparamSpec, apply, invert, sample_reparam
from mpu.tinyformer import ModelConfig, forward, init_params

cfg = ModelConfig(vocab=11, d_model=16, n_layers=2, n_q_heads=4, n_kv_heads=2, d_head=4, d_ff=12, max_seq=8)
theta = init_params(cfg, 0)
x = np.random.default_rng(0).integers(0, cfg.vocab, (4, cfg.max_seq))

# %%
spec = sample_reparam(7, 1, cfg)
moved = apply(spec, theta)
print("weights moved by", (moved - theta).norm() / theta.norm())
print("output change  ", np.abs(forward(moved, cfg, x) - forward(theta, cfg, x)).max())
print("round trip     ", (invert(spec, moved) - theta).max_abs())

# %%
# flip one axis of a head block: still orthogonal, no longer a symmetry
layer = spec.layers[0]
blocks = layer.head_blocks.copy()
blocks[0] = blocks[0] @ np.diag([1.0, 1.0, 1.0, -1.0])
bad = ReparamSpec(cfg, (LayerReparam(layer.ffn_perm, blocks),) + spec.layers[1:])
print("reflection change", np.abs(forward(apply(bad, theta), cfg, x) - forward(theta, cfg, x)).max())
