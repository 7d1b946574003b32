"""Deterministic local SGD trainer used by the unlearning client."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .gradengine import grad
from .objectives import ObjectiveConfig, UnlearnData
from .rngkit import Purpose, StreamKey, permutation_stream
from .tensorcore import Delta, ParamSet
from .tinyformer import Batch, ModelConfig

__all__ = ["ClientTrainConfig", "TrainTrace", "DivergenceError", "run_sgd", "client_unlearn", "minibatch_schedule"]

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ClientTrainConfig:
    epochs: int = 1
    learning_rate: float = 1e-2
    weight_decay: float = 0.0
    momentum: float = 0.0
    batch_size: int = 8
    retain_batch_size: int = 8
    batch_order_seed: StreamKey = field(default_factory=lambda: StreamKey(0, purpose=Purpose.DATA_SHUFFLE))
    max_steps: int | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or self.retain_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")

    def to_dict(self) -> dict:
        k = self.batch_order_seed
        return {
            "epochs": self.epochs, "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay, "momentum": self.momentum,
            "batch_size": self.batch_size, "retain_batch_size": self.retain_batch_size,
            "batch_order_seed": k.master_seed, "max_steps": self.max_steps,
        }


@dataclass
class TrainTrace:
    losses: list[float] = field(default_factory=list)
    steps: int = 0


def _order(key: StreamKey, n: int, epoch: int, salt: int) -> np.ndarray:
    if n == 0:
        return np.arange(0)
    return permutation_stream(key.with_(block_id=2 * epoch + salt), n)


def minibatch_schedule(train_cfg: ClientTrainConfig, data: UnlearnData):
    """Yield ``UnlearnData`` minibatches in the fixed order given by the seed.

    Forget examples (and the preference pairs built from them) are shuffled
    per epoch and cut into ``batch_size`` chunks; each step also draws the
    next ``retain_batch_size`` retain examples from a per-epoch shuffle,
    wrapping around as needed.
    """
    key = train_cfg.batch_order_seed
    primary = data.preference if data.preference is not None and len(data.preference) else data.forget
    n = 0 if primary is None else len(primary)
    n_ret = 0 if data.retain is None else len(data.retain)
    if n == 0:
        return
    steps_per_epoch = math.ceil(n / train_cfg.batch_size)
    taken = 0
    for epoch in range(train_cfg.epochs):
        order = _order(key, n, epoch, 0)
        r_order = _order(key, n_ret, epoch, 1)
        r_pos = 0
        for s in range(steps_per_epoch):
            if train_cfg.max_steps is not None and taken >= train_cfg.max_steps:
                return
            idx = order[s * train_cfg.batch_size:(s + 1) * train_cfg.batch_size]
            retain = None
            if n_ret:
                ridx = r_order[np.arange(r_pos, r_pos + train_cfg.retain_batch_size) % n_ret]
                r_pos += train_cfg.retain_batch_size
                retain = data.retain.take(ridx)
            yield UnlearnData(
                forget=None if data.forget is None or not len(data.forget) else data.forget.take(idx),
                retain=retain,
                preference=None if data.preference is None or not len(data.preference) else data.preference.take(idx),
            )
            taken += 1


def run_sgd(theta: ParamSet, obj: ObjectiveConfig, train_cfg: ClientTrainConfig, cfg: ModelConfig,
            data: UnlearnData) -> tuple[ParamSet, TrainTrace]:
    """SGD with optional heavy-ball momentum and decoupled weight decay.

    Objectives that need a frozen reference model use ``theta`` (the model
    as received) when ``obj.reference_params`` is unset.
    """
    if obj.needs_reference and obj.reference_params is None:
        obj = obj.with_reference(theta)
    lr, wd, mu = train_cfg.learning_rate, train_cfg.weight_decay, train_cfg.momentum
    trace = TrainTrace()
    x = theta.flatten()
    velocity = np.zeros_like(x)
    for batch in minibatch_schedule(train_cfg, data):
        try:
            res = grad(obj, theta.unflatten(x), cfg, batch)
        except FloatingPointError as exc:
            raise DivergenceError(f"step {trace.steps}: {exc}; last losses {trace.losses[-3:]}") from exc
        g = res.grad.flatten()
        if mu:
            velocity = mu * velocity + g
            g = velocity
        x = x - lr * g - lr * wd * x if wd else x - lr * g
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"parameters became non-finite at step {trace.steps}")
        trace.losses.append(res.loss)
        trace.steps += 1
    log.debug("client ran %d steps, last loss %s", trace.steps, trace.losses[-1] if trace.losses else None)
    return theta.unflatten(x), trace


def client_unlearn(theta_pub: ParamSet, obj: ObjectiveConfig, train_cfg: ClientTrainConfig, cfg: ModelConfig,
                   data: UnlearnData) -> Delta:
    """Displacement ``theta_after - theta_pub`` in the published coordinates."""
    after, _ = run_sgd(theta_pub, obj, train_cfg, cfg, data)
    return after - theta_pub
