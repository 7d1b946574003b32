"""Function-preserving reparameterizations of the tiny Transformer.

Two symmetry families are combined per layer:

* a permutation of the FFN hidden channels, applied to the rows of the input
  projection(s) and bias and to the columns of the output projection;
* one orthogonal ``d_head x d_head`` block per key/value head, applied on the
  right of ``W_K``/``W_V`` and, through the fixed query-to-KV head map, on
  the right of ``W_Q`` and on the left of ``W_O``.

With rotary embeddings the head blocks are restricted to per-plane 2x2
rotations, which commute with every position's rotary operator. Embeddings,
norm gains and the LM head are never touched.

Every transform is a linear isometry of the flattened parameter vector, so
the same map (and its transpose as inverse) is applied to parameters and to
displacements alike.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rngkit import Purpose, StreamKey, gaussian_stream, permutation_stream, rotation_angles_stream
from .tensorcore import ParamSet, StructureError
from .tinyformer import ModelConfig, block_layout, rope_matrix

__all__ = [
    "LayerReparam",
    "ReparamSpec",
    "sample_reparam",
    "identity_spec",
    "apply",
    "invert",
    "compose",
    "plane_rotations",
    "haar_orthogonal",
    "validate_spec",
    "spec_to_manifest",
]


@dataclass(frozen=True)
class LayerReparam:
    ffn_perm: np.ndarray
    head_blocks: np.ndarray          # (H_KV, d_head, d_head)
    angles: np.ndarray | None = None  # (H_KV, d_head/2) when built from rotations


@dataclass(frozen=True)
class ReparamSpec:
    cfg: ModelConfig
    layers: tuple[LayerReparam, ...]
    provenance: tuple[int, int] | None = None

    def inverse(self) -> "ReparamSpec":
        layers = tuple(
            LayerReparam(np.argsort(l.ffn_perm), np.transpose(l.head_blocks, (0, 2, 1)),
                         None if l.angles is None else -l.angles)
            for l in self.layers
        )
        return ReparamSpec(self.cfg, layers, self.provenance)


def plane_rotations(angles: np.ndarray) -> np.ndarray:
    """Block-diagonal matrix of 2x2 rotations on adjacent coordinate pairs."""
    angles = np.asarray(angles, dtype=np.float64)
    d = 2 * angles.size
    out = np.zeros((d, d))
    c, s = np.cos(angles), np.sin(angles)
    idx = np.arange(angles.size) * 2
    out[idx, idx] = c
    out[idx, idx + 1] = -s
    out[idx + 1, idx] = s
    out[idx + 1, idx + 1] = c
    return out


def haar_orthogonal(key: StreamKey, n: int) -> np.ndarray:
    """Haar-distributed element of O(n): QR of a Gaussian matrix with sign-fixed R."""
    z = gaussian_stream(key, n * n).reshape(n, n)
    q, r = np.linalg.qr(z)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs[None, :]


def sample_reparam(t_r: int, k: int, cfg: ModelConfig) -> ReparamSpec:
    """Sample the reparameterization for copy ``k`` from the round seed ``t_r``."""
    layers = []
    for layer in range(cfg.n_layers):
        perm_key = StreamKey(t_r, copy=k, block_id=layer, purpose=Purpose.PERMUTATION)
        perm = permutation_stream(perm_key, cfg.d_ff)
        blocks, angles = [], []
        for j in range(cfg.n_kv_heads):
            key = StreamKey(t_r, copy=k, block_id=layer * cfg.n_kv_heads + j, purpose=Purpose.HEAD_ROTATION)
            if cfg.use_rope:
                phi = rotation_angles_stream(key, cfg.d_head // 2)
                angles.append(phi)
                blocks.append(plane_rotations(phi))
            else:
                blocks.append(haar_orthogonal(key, cfg.d_head))
        layers.append(LayerReparam(perm, np.stack(blocks), np.stack(angles) if cfg.use_rope else None))
    return ReparamSpec(cfg, tuple(layers), (t_r, k))


def identity_spec(cfg: ModelConfig) -> ReparamSpec:
    eye = np.broadcast_to(np.eye(cfg.d_head), (cfg.n_kv_heads, cfg.d_head, cfg.d_head)).copy()
    layer = LayerReparam(np.arange(cfg.d_ff), eye, np.zeros((cfg.n_kv_heads, cfg.d_head // 2)) if cfg.use_rope else None)
    return ReparamSpec(cfg, (layer,) * cfg.n_layers)


def compose(second: ReparamSpec, first: ReparamSpec) -> ReparamSpec:
    """Spec equal to applying ``first`` then ``second``."""
    if first.cfg != second.cfg:
        raise StructureError("cannot compose specs for different configs")
    layers = []
    for a, b in zip(first.layers, second.layers):
        angles = None if a.angles is None or b.angles is None else a.angles + b.angles
        layers.append(LayerReparam(a.ffn_perm[b.ffn_perm], a.head_blocks @ b.head_blocks, angles))
    return ReparamSpec(first.cfg, tuple(layers))


def _check_layout(spec: ReparamSpec, x: ParamSet) -> None:
    names = [n for n, _ in block_layout(spec.cfg)]
    if list(x.keys()) != names:
        raise StructureError("parameter layout does not match the reparameterization's config")
    for n, shape in block_layout(spec.cfg):
        if x[n].shape != shape:
            raise StructureError(f"block {n!r} has shape {x[n].shape}, expected {shape}")


def apply(spec: ReparamSpec, x: ParamSet) -> ParamSet:
    """Map parameters (or a displacement) into the reparameterized coordinates."""
    _check_layout(spec, x)
    cfg = spec.cfg
    D, HQ, HKV, dh = cfg.d_model, cfg.n_q_heads, cfg.n_kv_heads, cfg.d_head
    hmap = cfg.head_map
    out: dict[str, np.ndarray] = {}
    for i, lr in enumerate(spec.layers):
        p = f"layers.{i}."
        S = lr.head_blocks
        U = S[hmap]
        out[p + "W_Q"] = np.einsum("dha,hab->dhb", x[p + "W_Q"].reshape(D, HQ, dh), U).reshape(D, HQ * dh)
        out[p + "W_K"] = np.einsum("dha,hab->dhb", x[p + "W_K"].reshape(D, HKV, dh), S).reshape(D, HKV * dh)
        out[p + "W_V"] = np.einsum("dha,hab->dhb", x[p + "W_V"].reshape(D, HKV, dh), S).reshape(D, HKV * dh)
        out[p + "W_O"] = np.einsum("hab,had->hbd", U, x[p + "W_O"].reshape(HQ, dh, D)).reshape(HQ * dh, D)
        if cfg.attn_bias:
            out[p + "b_Q"] = np.einsum("ha,hab->hb", x[p + "b_Q"].reshape(HQ, dh), U).reshape(-1)
            out[p + "b_K"] = np.einsum("ha,hab->hb", x[p + "b_K"].reshape(HKV, dh), S).reshape(-1)
            out[p + "b_V"] = np.einsum("ha,hab->hb", x[p + "b_V"].reshape(HKV, dh), S).reshape(-1)
        perm = lr.ffn_perm
        for name in (("W_gate", "W_up") if cfg.gated_ffn else ("W1",)):
            out[p + name] = x[p + name][perm]
        out[p + "b1"] = x[p + "b1"][perm]
        out[p + "W2"] = x[p + "W2"][:, perm]
    return x.with_blocks(out)


def invert(spec: ReparamSpec, x: ParamSet) -> ParamSet:
    """Inverse map; transposes every orthogonal block and inverts every permutation."""
    return apply(spec.inverse(), x)


def validate_spec(spec: ReparamSpec, tol: float = 1e-10) -> dict:
    """Orthogonality and (with RoPE) commutation residuals; raises if above ``tol``."""
    cfg = spec.cfg
    eye = np.eye(cfg.d_head)
    ortho = max(float(np.max(np.abs(S.T @ S - eye))) for l in spec.layers for S in l.head_blocks)
    commute = 0.0
    if cfg.use_rope:
        phis = [rope_matrix(cfg, p) for p in range(cfg.max_seq)]
        commute = max(float(np.max(np.abs(S @ P - P @ S))) for l in spec.layers for S in l.head_blocks for P in phis)
    perms_ok = all(np.array_equal(np.sort(l.ffn_perm), np.arange(cfg.d_ff)) for l in spec.layers)
    report = {"orthogonality": ortho, "rope_commutation": commute, "permutations_valid": perms_ok}
    if ortho > tol or commute > tol or not perms_ok:
        raise ValueError(f"invalid reparameterization: {report}")
    return report


def spec_to_manifest(spec: ReparamSpec) -> dict:
    """Debug dump: permutations plus RoPE angles or raw head matrices."""
    layers = []
    for l in spec.layers:
        entry = {"ffn_perm": l.ffn_perm.tolist()}
        if l.angles is not None:
            entry["angles"] = l.angles.tolist()
        else:
            entry["head_blocks"] = l.head_blocks.tolist()
        layers.append(entry)
    return {"config_digest": spec.cfg.digest(), "provenance": spec.provenance, "layers": layers}
