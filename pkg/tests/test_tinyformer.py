import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mpu.oracleverify import naive_forward, naive_token_logprob
from mpu.tensorcore import ParamSet, StructureError
from mpu.tinyformer import (
    Batch,
    ModelConfig,
    Role,
    apply_rope,
    block_layout,
    forward_logits,
    init_params,
    rope_angles,
    rope_matrix,
    sequence_logprob,
)


def zeros(cfg):
    return ParamSet((n, np.zeros(s)) for n, s in block_layout(cfg))


def test_config_invariants():
    cfg = ModelConfig(n_q_heads=8, n_kv_heads=2, d_head=4, d_model=32)
    assert cfg.head_map.tolist() == [i * 2 // 8 for i in range(8)]
    with pytest.raises(ValueError):
        ModelConfig(n_q_heads=4, n_kv_heads=3, d_head=8, d_model=32)
    with pytest.raises(ValueError):
        ModelConfig(n_q_heads=4, d_head=8, d_model=30)
    with pytest.raises(ValueError):
        ModelConfig(n_q_heads=4, n_kv_heads=2, d_head=3, d_model=12)
    ModelConfig(n_q_heads=4, n_kv_heads=2, d_head=3, d_model=12, use_rope=False)


@pytest.mark.parametrize("d_head", [2, 4, 8, 16, 32, 64])
def test_rope_frequencies_distinct(d_head):
    f = ModelConfig(n_q_heads=1, n_kv_heads=1, d_head=d_head, d_model=d_head).rope_frequencies()
    assert len(np.unique(f)) == len(f) == d_head // 2


def test_zero_weights_give_uniform_distribution():
    cfg = ModelConfig()
    logits = forward_logits(zeros(cfg), cfg, np.arange(5))
    assert np.all(logits == 0.0)
    p = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    assert np.allclose(p, 1.0 / cfg.vocab)


def test_single_position_hand_chain():
    cfg = ModelConfig(vocab=3, d_model=2, n_layers=1, n_q_heads=1, n_kv_heads=1, d_head=2, d_ff=2,
                      max_seq=1, activation="relu", norm_eps=0.0)
    E = np.array([[1.0, 2.0], [0.5, -1.0], [0.0, 3.0]])
    W_V = np.array([[1.0, 0.0], [1.0, 1.0]])
    W_O = np.array([[0.5, 0.0], [0.0, 2.0]])
    W1 = np.array([[1.0, -1.0], [0.5, 0.5]])
    b1 = np.array([0.1, -0.2])
    W2 = np.array([[1.0, 0.0], [2.0, -1.0]])
    b2 = np.array([0.0, 0.3])
    head = np.array([[1.0, 0.0, -1.0], [0.0, 1.0, 1.0]])
    values = {
        "embed": E, "layers.0.attn_norm": np.ones(2), "layers.0.W_Q": np.eye(2) * 3, "layers.0.W_K": -np.eye(2),
        "layers.0.W_V": W_V, "layers.0.W_O": W_O, "layers.0.ffn_norm": np.ones(2), "layers.0.W1": W1,
        "layers.0.b1": b1, "layers.0.W2": W2, "layers.0.b2": b2, "final_norm": np.ones(2), "lm_head": head,
    }
    theta = ParamSet((n, values[n]) for n, _ in block_layout(cfg))
    x = E[1]
    n1 = x / math.sqrt(np.mean(x * x))
    x = x + (n1 @ W_V) @ W_O          # one key: softmax weight 1, RoPE at p=0 is identity
    n2 = x / math.sqrt(np.mean(x * x))
    x = x + W2 @ np.maximum(W1 @ n2 + b1, 0.0) + b2
    hf = x / math.sqrt(np.mean(x * x))
    expected = hf @ head
    assert np.allclose(forward_logits(theta, cfg, [1])[0], expected, atol=1e-12)


@pytest.mark.parametrize("variant", [
    {}, {"use_rope": False}, {"gated_ffn": True}, {"attn_bias": True, "activation": "gelu"},
    {"n_kv_heads": 1}, {"activation": "relu", "gated_ffn": True, "use_rope": False},
])
def test_forward_matches_naive_loops(variant):
    cfg = ModelConfig(**{**dict(vocab=9, d_model=8, n_layers=2, n_q_heads=2, n_kv_heads=2, d_head=4, d_ff=6,
                                max_seq=5), **variant})
    theta = init_params(cfg, 5)
    tokens = [3, 1, 4, 1, 5]
    assert np.max(np.abs(forward_logits(theta, cfg, tokens) - naive_forward(theta, cfg, tokens))) < 1e-10


def test_layout_and_token_errors(small_cfg, small_theta):
    with pytest.raises(ValueError):
        forward_logits(small_theta, small_cfg, [small_cfg.vocab])
    with pytest.raises(ValueError):
        forward_logits(small_theta, small_cfg, np.zeros(small_cfg.max_seq + 1, dtype=int))
    other = init_params(ModelConfig(), 0)
    with pytest.raises(StructureError):
        forward_logits(other, small_cfg, [0, 1])


def test_batch_validation():
    with pytest.raises(ValueError):
        Batch([[1, 2]], [[True, False]])        # position 0 cannot be a target
    with pytest.raises(ValueError):
        Batch([[1, 2]], [[False, True]], Role.PREFERENCE_PAIR)
    pair = Batch([[1, 2]], [[False, True]], Role.PREFERENCE_PAIR, [[1, 3]], [[False, True]])
    assert len(pair.take([0])) == 1


def test_sequence_logprob_uniform_binary():
    cfg = ModelConfig(vocab=2, d_model=2, n_layers=1, n_q_heads=1, n_kv_heads=1, d_head=2, d_ff=2, max_seq=2)
    lp, total = sequence_logprob(zeros(cfg), cfg, Batch([[0, 1]], [[False, True]]))
    assert total[0] == pytest.approx(-0.693147, abs=1e-6)


def test_sequence_logprob_empty_mask(small_cfg, small_theta):
    _, total = sequence_logprob(small_theta, small_cfg, Batch([[1, 2, 3]], [[False, False, False]]))
    assert total[0] == 0.0


def test_sequence_logprob_positionwise(small_cfg, small_theta):
    tokens = [4, 2, 7, 1, 9]
    mask = [False, True, False, True, True]
    _, total = sequence_logprob(small_theta, small_cfg, Batch([tokens], [mask]))
    logits = naive_forward(small_theta, small_cfg, tokens)
    ref = sum(naive_token_logprob(list(logits[t - 1]), tokens[t]) for t in (1, 3, 4))
    assert total[0] == pytest.approx(ref, abs=1e-10)


def test_rope_matches_matrix_form(small_cfg, rng):
    x = rng.normal(size=(1, 6, 3, small_cfg.d_head))
    rotated = apply_rope(x, rope_angles(small_cfg, 6))
    for p in range(6):
        ref = x[0, p] @ rope_matrix(small_cfg, p).T
        assert np.allclose(rotated[0, p], ref, atol=1e-14)
    assert np.allclose(apply_rope(rotated, rope_angles(small_cfg, 6), inverse=True), x, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (1, 8, 2, 4), elements=st.floats(-10, 10)))
def test_rope_preserves_norms(x):
    cfg = ModelConfig(n_q_heads=1, n_kv_heads=1, d_head=4, d_model=4, max_seq=8)
    y = apply_rope(x, rope_angles(cfg, 8))
    assert np.allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), atol=1e-12)


def test_causality(small_cfg, small_theta):
    a = forward_logits(small_theta, small_cfg, [1, 2, 3, 4])
    b = forward_logits(small_theta, small_cfg, [1, 2, 3, 9])
    assert np.array_equal(a[:3], b[:3])
