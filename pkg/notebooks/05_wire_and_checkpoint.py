"""
Wire frames and checkpoints
===========================
"""

# %%
import tempfile
from pathlib import Path

from mpu.harness import checkpoint
from mpu.protocol import MessageType, ProtocolMessage, decode, encode
from mpu.tinyformer import ModelConfig, init_params

cfg = ModelConfig(vocab=11, d_model=16, n_layers=1, n_q_heads=4, n_kv_heads=2, d_head=4, d_ff=12, max_seq=8)
theta = init_params(cfg, 0)

# %%
msg = ProtocolMessage(MessageType.PUBLISH_COPY, 1, 2, cfg.digest(), theta)
frame = encode(msg, "f64")
print(len(frame), "bytes, magic", frame[:4], "type", frame[5])
print("round trip equal:", decode(frame) == msg)

# %%
with tempfile.TemporaryDirectory() as tmp:
    checkpoint.save(Path(tmp) / "theta", theta, cfg)
    back, _ = checkpoint.load(Path(tmp) / "theta", expected=cfg)
    print("bit identical:", back.array_equal(theta))
