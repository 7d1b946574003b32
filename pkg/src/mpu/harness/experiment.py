"""Experiment drivers: pretraining, single runs in one of three modes, sweeps."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from ..client import ClientTrainConfig, DivergenceError
from ..gradengine import grad
from ..noisegen import build_plan
from ..objectives import ObjectiveConfig, ObjectiveKind, UnlearnData, forget_ce, retain_ce
from ..protocol import (
    InProcessTransport,
    RoundSeeds,
    ServerSession,
    ServerState,
    TcpTransport,
    UnlearningClient,
    round_seeds,
    run_round_clean,
    run_round_mpu,
    run_round_noised,
)
from ..rngkit import Purpose, StreamKey, permutation_stream
from ..tensorcore import ParamSet
from ..tinyformer import Batch, ModelConfig, init_params
from . import checkpoint, metrics
from .data import Dataset, DatasetSpec, gen_dataset

__all__ = [
    "OUTPUT_ROOT_ENV",
    "output_root",
    "PretrainResult",
    "pretrain",
    "ExperimentConfig",
    "RunContext",
    "run_context",
    "ExperimentResult",
    "run_experiment",
    "SweepReport",
    "sweep",
    "loglog_slope",
]

log = logging.getLogger(__name__)
OUTPUT_ROOT_ENV = "MPU_OUTPUT_ROOT"
MODES = ("clean", "noised", "mpu")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "mpu_runs"))


# ---------------------------------------------------------------------------
# pretraining

@dataclass(frozen=True)
class PretrainResult:
    theta0: ParamSet
    task_vector: ParamSet
    losses: list[float]


_LM = ObjectiveConfig(ObjectiveKind.GRAD_DIFF, lambda_f=0.0, lambda_ret=1.0)


def pretrain(theta_init: ParamSet, cfg: ModelConfig, data: Batch, steps: int, *, learning_rate: float = 0.1,
             momentum: float = 0.9, batch_size: int = 32, seed: int = 0,
             frozen: Callable[[str], bool] | None = None) -> PretrainResult:
    """Language-model SGD on ``data``; returns ``theta0`` and ``theta0 - theta_init``.

    Blocks for which ``frozen(name)`` is true keep their initial values.
    """
    if len(data) == 0:
        raise ValueError("pretraining data is empty")
    x = theta_init.flatten()
    keep = np.ones_like(x)
    if frozen is not None:
        offsets = theta_init.offsets()
        for name, arr in theta_init.items():
            if frozen(name):
                keep[offsets[name]:offsets[name] + arr.size] = 0.0
    vel = np.zeros_like(x)
    n = len(data)
    per_epoch = math.ceil(n / batch_size)
    losses = []
    order = None
    for step in range(steps):
        epoch, s = divmod(step, per_epoch)
        if s == 0:
            order = permutation_stream(StreamKey(seed, block_id=epoch, purpose=Purpose.DATA_SHUFFLE), n)
        idx = order[s * batch_size:(s + 1) * batch_size]
        res = grad(_LM, theta_init.unflatten(x), cfg, UnlearnData(retain=data.take(idx)))
        if not np.isfinite(res.loss):
            raise DivergenceError(f"pretraining diverged at step {step}")
        vel = momentum * vel + keep * res.grad.flatten()
        x = x - learning_rate * vel
        losses.append(res.loss)
    theta0 = theta_init.unflatten(x)
    return PretrainResult(theta0, theta0 - theta_init, losses)


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=lambda: ObjectiveConfig(ObjectiveKind.GRAD_ASCENT))
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    mode: str = "mpu"
    kappa: float = 0.05
    m: int = 2
    alpha: tuple[float, ...] | None = None
    rounds: int = 1
    epochs: int = 10
    learning_rate: float = 0.003
    batch_size: int = 8
    retain_batch_size: int = 8
    weight_decay: float = 0.0
    momentum: float = 0.0
    eta_srv: float = 1.0
    master_seed: int = 0
    s_schedule: tuple[int, ...] | None = None
    t_schedule: tuple[int, ...] | None = None
    init_seed: int = 0
    data_seed: int = 0
    pretrain_steps: int = 300
    pretrain_lr: float = 0.1
    finetune_steps: int = 30
    finetune_lr: float = 0.05
    finetune_norms: bool = False
    wire_dtype: str = "f32"
    paired_clean: bool = True
    reparameterize: bool = True
    record_timing: bool = False
    run_id: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.rounds < 0 or self.epochs < 0:
            raise ValueError("rounds and epochs must be >= 0")
        if self.m < 2:
            raise ValueError("m must be >= 2")
        if self.alpha is not None and len(self.alpha) != self.m:
            raise ValueError("alpha must have m entries")
        for sched in (self.s_schedule, self.t_schedule):
            if sched is not None and len(sched) < self.rounds:
                raise ValueError("seed schedules need one entry per round")
        if self.wire_dtype not in ("f32", "f64"):
            raise ValueError("wire_dtype must be f32 or f64")

    def seeds(self, r: int) -> RoundSeeds:
        base = round_seeds(self.master_seed, r)
        s = base.s_r if self.s_schedule is None else int(self.s_schedule[r - 1])
        t = base.t_r if self.t_schedule is None else int(self.t_schedule[r - 1])
        return RoundSeeds(s, t)

    def to_dict(self) -> dict:
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d["model"] = self.model.to_dict()
        d["objective"] = self.objective.to_dict()
        d["dataset"] = self.dataset.to_dict()
        for k in ("alpha", "s_schedule", "t_schedule"):
            d[k] = None if d[k] is None else list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "objective" in d:
            o = dict(d["objective"])
            o["kind"] = ObjectiveKind(o["kind"])
            d["objective"] = ObjectiveConfig(**o)
        if "dataset" in d:
            d["dataset"] = DatasetSpec(**d["dataset"])
        for k in ("alpha", "s_schedule", "t_schedule"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return ExperimentConfig.from_dict({**self.to_dict(), **kw})

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def name(self) -> str:
        return self.run_id or f"{self.mode}-{self.objective.kind.value}-{self.digest()[:8]}"

    def train_config(self) -> ClientTrainConfig:
        return ClientTrainConfig(
            epochs=self.epochs, learning_rate=self.learning_rate, weight_decay=self.weight_decay,
            momentum=self.momentum, batch_size=self.batch_size, retain_batch_size=self.retain_batch_size,
            batch_order_seed=StreamKey(self.master_seed, purpose=Purpose.DATA_SHUFFLE),
        )


# ---------------------------------------------------------------------------
# shared run context (pretrained model and data), memoized per process

@dataclass(frozen=True)
class RunContext:
    """Models and data shared by every run with the same model/data settings.

    ``theta_base`` is the public reference checkpoint (trained on retain
    data only) and ``theta0`` the fine-tuned model that has seen the forget
    set. Noise scales use the task vector ``theta - theta_base``.
    """

    theta_init: ParamSet
    theta_base: ParamSet
    theta0: ParamSet
    dataset: Dataset
    pretrain_losses: list[float]
    finetune_losses: list[float]

    @property
    def task_vector(self) -> ParamSet:
        return self.theta0 - self.theta_base

    def unlearn_data(self, objective: ObjectiveConfig) -> UnlearnData:
        return self.dataset.unlearn_data(with_preference=objective.kind is ObjectiveKind.DPO)


def _is_norm(name: str) -> bool:
    return name.endswith("norm")


_CONTEXTS: dict[str, RunContext] = {}
_CONTEXT_LOCK = threading.Lock()


def _context_key(cfg: ExperimentConfig) -> str:
    blob = json.dumps([cfg.model.to_dict(), cfg.dataset.to_dict(), cfg.init_seed, cfg.data_seed,
                       cfg.pretrain_steps, cfg.pretrain_lr, cfg.finetune_steps, cfg.finetune_lr, cfg.finetune_norms], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def run_context(cfg: ExperimentConfig) -> RunContext:
    key = _context_key(cfg)
    with _CONTEXT_LOCK:
        if key not in _CONTEXTS:
            theta_init = init_params(cfg.model, cfg.init_seed)
            ds = gen_dataset(cfg.dataset, cfg.model, cfg.data_seed)
            base = pretrain(theta_init, cfg.model, ds.retain, cfg.pretrain_steps,
                            learning_rate=cfg.pretrain_lr, seed=cfg.init_seed)
            tuned = pretrain(base.theta0, cfg.model, ds.all_lm(), cfg.finetune_steps,
                             learning_rate=cfg.finetune_lr, seed=cfg.init_seed + 1,
                             frozen=None if cfg.finetune_norms else _is_norm)
            _CONTEXTS[key] = RunContext(theta_init, base.theta0, tuned.theta0, ds, base.losses, tuned.losses)
        return _CONTEXTS[key]


# ---------------------------------------------------------------------------
# single run

@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[metrics.MetricsRow]
    theta: ParamSet
    out_dir: Path | None
    traces: list = field(default_factory=list)


def _session(cfg: ExperimentConfig, data: UnlearnData, connect: str | None = None) -> ServerSession:
    if connect:
        host, _, port = connect.rpartition(":")
        transport = TcpTransport(host or "127.0.0.1", int(port))
    else:
        transport = InProcessTransport(UnlearningClient(cfg.model, cfg.objective, cfg.train_config(), data, cfg.wire_dtype))
    sess = ServerSession(transport, cfg.model, cfg.wire_dtype)
    sess.hello()
    return sess


def _write_outputs(out_dir: Path, cfg: ExperimentConfig, rows, theta=None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    metrics.write_csv(out_dir / "metrics.csv", rows)
    metrics.write_json(out_dir / "metrics.json", rows)
    if theta is not None:
        checkpoint.save(out_dir / "final", theta, cfg.model)


def run_experiment(cfg: ExperimentConfig, out_dir: Path | str | None = "auto", *,
                   connect: str | None = None) -> ExperimentResult:
    """Run ``cfg.rounds`` rounds in ``cfg.mode``.

    With ``paired_clean`` every round also asks the same deterministic client
    for a clean update at the current server parameters and reports
    ``|step - clean step| / |clean step|``. ``out_dir="auto"`` writes under
    the output root; ``None`` keeps everything in memory. Metrics are
    flushed after every round so a failed run leaves its partial rows.
    ``connect="host:port"`` sends the published copies to a TCP client
    (see ``mpu client``); the paired clean reference stays in-process.
    """
    if out_dir == "auto":
        out_dir = output_root() / cfg.name
    out_dir = None if out_dir is None else Path(out_dir)
    ctx = run_context(cfg)
    data = ctx.unlearn_data(cfg.objective)
    session = _session(cfg, data, connect)
    paired = _session(cfg, data) if cfg.paired_clean else None
    state = ServerState(ctx.theta0, cfg.model, eta_srv=cfg.eta_srv)
    # noise scales come from the round-0 task vector and stay fixed for the run
    plan = build_plan(cfg.kappa, cfg.m, cfg.alpha, ctx.theta0, ctx.theta_base)
    rows, traces = [], []
    try:
        for r in range(1, cfg.rounds + 1):
            seeds = cfg.seeds(r)
            if cfg.mode == "clean":
                new, trace = run_round_clean(state, session, r, timing=cfg.record_timing)
            else:
                if cfg.mode == "mpu":
                    new, trace = run_round_mpu(state, session, plan, r, seeds,
                                               reparameterize=cfg.reparameterize, timing=cfg.record_timing)
                else:
                    new, trace = run_round_noised(state, session, plan, r, seeds, timing=cfg.record_timing)
            residual = None
            if paired is not None:
                _, ref = run_round_clean(state, paired, r)
                denom = ref.delta_bar.norm()
                residual = float((trace.delta_bar - ref.delta_bar).norm() / denom) if denom > 0 else 0.0
            state = new
            traces.append(trace)
            rows.append(metrics.MetricsRow(
                run_id=cfg.name, mode=cfg.mode, round=r, kappa=float(cfg.kappa), m=cfg.m,
                forget_ce=forget_ce(state.theta, cfg.model, data),
                retain_ce=retain_ce(state.theta, cfg.model, data),
                update_residual=residual, wall_ms=float(trace.wall_ms),
            ))
            if out_dir is not None:
                _write_outputs(out_dir, cfg, rows)
    finally:
        session.shutdown()
        if paired is not None:
            paired.shutdown()
    if out_dir is not None:
        _write_outputs(out_dir, cfg, rows, state.theta)
    return ExperimentResult(cfg, rows, state.theta, out_dir, traces)


# ---------------------------------------------------------------------------
# sweeps

@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    r_squared: float


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> SlopeFit:
    fit = stats.linregress(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)))
    return SlopeFit(float(fit.slope), float(fit.intercept), float(fit.rvalue ** 2))


def linear_fit(x: Sequence[float], y: Sequence[float]) -> SlopeFit:
    fit = stats.linregress(np.asarray(x, float), np.asarray(y, float))
    return SlopeFit(float(fit.slope), float(fit.intercept), float(fit.rvalue ** 2))


@dataclass
class SweepReport:
    axis: str
    values: list
    cells: list[dict]
    fits: dict[str, SlopeFit]

    def to_dict(self) -> dict:
        return {"axis": self.axis, "values": [list(v) if isinstance(v, tuple) else v for v in self.values],
                "cells": self.cells, "fits": {k: asdict(v) for k, v in self.fits.items()}}


def _cell_summary(res: ExperimentResult, value) -> dict:
    last = res.rows[-1] if res.rows else None
    resid = [r.update_residual for r in res.rows if r.update_residual is not None]
    return {
        "value": list(value) if isinstance(value, tuple) else value,
        "mode": res.config.mode,
        "run_id": res.config.name,
        "rounds": res.config.rounds,
        "epochs": res.config.epochs,
        "total_epochs": res.config.rounds * res.config.epochs,
        "forget_ce": None if last is None else last.forget_ce,
        "retain_ce": None if last is None else last.retain_ce,
        "mean_residual": float(np.mean(resid)) if resid else None,
        "wall_ms": float(sum(r.wall_ms for r in res.rows)),
    }


def sweep(cfg: ExperimentConfig, axis: str, values: Sequence, *, modes: Sequence[str] | None = None,
          out_dir: Path | str | None = "auto", workers: int = 1) -> SweepReport:
    """Run a grid along ``axis`` in {kappa, copies, round_epoch}.

    kappa: each value runs ``modes`` (default mpu and noised) with paired
    clean residuals; the report fits log residual against log kappa per mode.
    copies: values are copy counts m with per-copy client work held fixed;
    wall time is recorded and fitted linearly in m.
    round_epoch: values are (R, E) pairs, typically with R*E constant.
    """
    if not values:
        raise ValueError("values must be non-empty")
    if axis not in ("kappa", "copies", "round_epoch"):
        raise ValueError(f"unknown sweep axis {axis!r}")
    if out_dir == "auto":
        out_dir = output_root() / f"sweep-{axis}-{cfg.digest()[:8]}"
    out_dir = None if out_dir is None else Path(out_dir)
    modes = list(modes or (["mpu", "noised"] if axis == "kappa" else [cfg.mode]))

    jobs = []
    for v in values:
        for mode in modes:
            if axis == "kappa":
                c = replace(cfg, kappa=float(v), mode=mode)
            elif axis == "copies":
                c = replace(cfg, m=int(v), alpha=None, mode=mode, record_timing=True)
            else:
                R, E = (int(x) for x in v)
                c = replace(cfg, rounds=R, epochs=E, mode=mode)
            c = replace(c, run_id=f"{axis}={'x'.join(map(str, v)) if isinstance(v, (tuple, list)) else v}-{mode}")
            jobs.append((v, c))

    def work(job):
        v, c = job
        sub = None if out_dir is None else out_dir / c.run_id
        return _cell_summary(run_experiment(c, sub), tuple(v) if isinstance(v, list) else v)

    run_context(cfg)  # build the shared context once before fanning out
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(work, jobs))
    else:
        cells = [work(j) for j in jobs]

    fits = {}
    if axis == "kappa":
        for mode in modes:
            pts = [(c["value"], c["mean_residual"]) for c in cells if c["mode"] == mode]
            if len(pts) >= 2 and all(y is not None and y > 0 and x > 0 for x, y in pts):
                fits[mode] = loglog_slope(*zip(*pts))
    elif axis == "copies":
        for mode in modes:
            pts = [(c["value"], c["wall_ms"]) for c in cells if c["mode"] == mode]
            if len(pts) >= 2:
                fits[mode] = linear_fit(*zip(*pts))
    report = SweepReport(axis, list(values), cells, fits)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "sweep.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n", encoding="utf-8")
    return report
