"""Synthetic prompt/completion corpus with a small memorized forget split.

Retain sequences follow a sparse random Markov chain, so they are
learnable as a language. Forget completions are uniform random tokens
appended to chain-generated prompts: they can only be memorized, which is
what unlearning then has to remove. Preference pairs match each forget
prompt with a fixed refusal completion (preferred) and the memorized
completion (dispreferred).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..objectives import UnlearnData
from ..rngkit import Purpose, StreamKey
from ..tinyformer import Batch, ModelConfig, Role

__all__ = ["DatasetSpec", "Dataset", "gen_dataset", "refusal_sequence"]


@dataclass(frozen=True)
class DatasetSpec:
    n_forget: int = 8
    n_retain: int = 120
    seq_len: int = 12
    prompt_len: int | None = None   # defaults to seq_len // 2
    branching: int = 3              # successors per token in the retain chain

    def __post_init__(self):
        if self.n_forget < 0 or self.n_retain < 0:
            raise ValueError("set sizes must be >= 0")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")
        if not 1 <= self.prompt_length < self.seq_len:
            raise ValueError("prompt_len must be in [1, seq_len)")
        if self.branching < 1:
            raise ValueError("branching must be >= 1")

    @property
    def prompt_length(self) -> int:
        return self.seq_len // 2 if self.prompt_len is None else self.prompt_len

    @property
    def forget_fraction(self) -> float:
        total = self.n_forget + self.n_retain
        return self.n_forget / total if total else 0.0

    @classmethod
    def from_fraction(cls, total: int, forget_fraction: float, **kw) -> "DatasetSpec":
        if not 0.0 <= forget_fraction <= 1.0:
            raise ValueError("forget_fraction must be in [0, 1]")
        n_forget = int(round(total * forget_fraction))
        return cls(n_forget=n_forget, n_retain=total - n_forget, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Dataset:
    forget: Batch
    retain: Batch
    preference: Batch
    refusal: np.ndarray

    def unlearn_data(self, with_preference: bool = False) -> UnlearnData:
        return UnlearnData(self.forget, self.retain, self.preference if with_preference else None)

    def all_lm(self) -> Batch:
        """Forget and retain sequences together, as seen during pretraining."""
        return Batch(np.concatenate([self.forget.tokens, self.retain.tokens]),
                     np.concatenate([self.forget.mask, self.retain.mask]), Role.RETAIN)


def refusal_sequence(vocab: int, length: int) -> np.ndarray:
    """Fixed completion used as the preferred answer in preference pairs."""
    return (np.arange(length) * 7 + 1) % vocab


def _chain(rng: np.random.Generator, vocab: int, branching: int) -> np.ndarray:
    """Row-stochastic transition matrix with ``branching`` successors per token."""
    trans = np.zeros((vocab, vocab))
    for v in range(vocab):
        succ = rng.choice(vocab, size=min(branching, vocab), replace=False)
        trans[v, succ] = rng.dirichlet(np.full(succ.size, 2.0))
    return trans


def _walk(rng, trans, start, length):
    out = np.empty(length, dtype=np.int64)
    out[0] = start
    for t in range(1, length):
        out[t] = rng.choice(trans.shape[0], p=trans[out[t - 1]])
    return out


def gen_dataset(spec: DatasetSpec, cfg: ModelConfig, seed: int) -> Dataset:
    if spec.seq_len > cfg.max_seq:
        raise ValueError(f"seq_len {spec.seq_len} exceeds max_seq {cfg.max_seq}")
    rng = StreamKey(seed, purpose=Purpose.DATA_SHUFFLE, block_id=1 << 20).generator()
    V, T, P = cfg.vocab, spec.seq_len, spec.prompt_length
    trans = _chain(rng, V, spec.branching)

    retain = np.stack([_walk(rng, trans, rng.integers(V), T) for _ in range(spec.n_retain)]) \
        if spec.n_retain else np.zeros((0, T), dtype=np.int64)
    seen = {tuple(row) for row in retain}
    forget = []
    while len(forget) < spec.n_forget:
        row = np.concatenate([_walk(rng, trans, rng.integers(V), P), rng.integers(V, size=T - P)])
        if tuple(row) not in seen:
            seen.add(tuple(row))
            forget.append(row)
    forget = np.stack(forget) if forget else np.zeros((0, T), dtype=np.int64)

    completion = np.zeros(T, dtype=bool)
    completion[P:] = True
    full = np.zeros(T, dtype=bool)
    full[1:] = True
    refusal = refusal_sequence(V, T - P)
    chosen = forget.copy()
    chosen[:, P:] = refusal
    return Dataset(
        forget=Batch(forget, np.tile(completion, (len(forget), 1)), Role.FORGET),
        retain=Batch(retain, np.tile(full, (len(retain), 1)), Role.RETAIN),
        preference=Batch(chosen, np.tile(completion, (len(forget), 1)), Role.PREFERENCE_PAIR,
                         forget.copy(), np.tile(completion, (len(forget), 1))),
        refusal=refusal,
    )
