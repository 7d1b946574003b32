"""Server side of the round loop: MPU, single-copy noised, and clean rounds.

Every round function takes a :class:`ServerState` and returns a new one; a
failure anywhere in the round raises :class:`RoundAborted` and the caller's
state object is left as it was.
"""

from __future__ import annotations

import hashlib
import struct
import threading
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace

import numpy as np

from ..noisegen import NoisePlan, draw_single, stream_copies
from ..symmetry import ReparamSpec, apply, identity_spec, invert, sample_reparam
from ..tensorcore import Delta, ParamSet, StructureError
from ..tinyformer import ModelConfig, block_layout
from .aggregate import RoundAccumulator
from .codec import CodecError, MessageType, ProtocolMessage, decode, encode
from .transport import TransportError

__all__ = [
    "DEFAULT_SERVER_STEP",
    "RoundAborted",
    "RoundSeeds",
    "round_seeds",
    "ServerState",
    "RoundTrace",
    "ServerSession",
    "reparam_resolver",
    "run_round_mpu",
    "run_round_noised",
    "run_round_clean",
]

DEFAULT_SERVER_STEP = 1.0


class RoundAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class RoundSeeds:
    s_r: int  # noise seed
    t_r: int  # reparameterization seed


def _derive(master: int, tag: bytes, r: int) -> int:
    h = hashlib.blake2b(tag + struct.pack("<qq", master, r), digest_size=8, person=b"mpu.rounds.v1")
    return int.from_bytes(h.digest(), "little") >> 1


def round_seeds(master: int, r: int) -> RoundSeeds:
    """Per-round ``(s_r, t_r)`` expanded from one master seed."""
    return RoundSeeds(_derive(master, b"s", r), _derive(master, b"t", r))


def reparam_resolver(cfg: ModelConfig, seeds_for: Callable[[int], RoundSeeds]) -> Callable[[int, int], ReparamSpec]:
    """Server-side lookup ``(round, copy) -> spec``; only test doubles get this."""
    return lambda r, k: sample_reparam(seeds_for(r).t_r, k, cfg)


@dataclass(frozen=True)
class ServerState:
    theta: ParamSet
    cfg: ModelConfig
    round: int = 0
    eta_srv: float = DEFAULT_SERVER_STEP

    def __post_init__(self):
        layout = block_layout(self.cfg)
        if [n for n, _ in layout] != list(self.theta.keys()):
            raise StructureError("server parameters do not match the model config")


@dataclass
class RoundTrace:
    round: int
    mode: str
    m: int
    alpha: tuple[float, ...] = ()
    delta_bar: Delta | None = None
    peak_live_copies: int = 0
    frames_sent: int = 0
    bytes_sent: int = 0
    wall_ms: float = 0.0
    copy_order: list[int] = field(default_factory=list)


class ServerSession:
    """Server end of a connection: framing, digests and the Hello/Shutdown handshake."""

    def __init__(self, transport, cfg: ModelConfig, wire_dtype: str = "f32"):
        self.transport, self.cfg, self.wire_dtype = transport, cfg, wire_dtype
        self.digest = cfg.digest()
        self.frames_sent = 0
        self.bytes_sent = 0

    def _send(self, msg: ProtocolMessage) -> ProtocolMessage:
        frame = encode(msg, self.wire_dtype)
        self.frames_sent += 1
        self.bytes_sent += len(frame)
        reply = decode(self.transport.exchange(frame), expected_digest=self.digest)
        return reply

    def hello(self) -> None:
        reply = self._send(ProtocolMessage(MessageType.HELLO, config_digest=self.digest))
        if reply.type is not MessageType.HELLO:
            raise TransportError(f"expected Hello, got {reply.type.name}")

    def publish(self, r: int, k: int, theta_pub: ParamSet) -> Delta:
        reply = self._send(ProtocolMessage(MessageType.PUBLISH_COPY, r, k, self.digest, theta_pub))
        if reply.type is not MessageType.RETURN_DELTA or (reply.round, reply.copy) != (r, k):
            raise TransportError(f"unexpected reply {reply.type.name} for round {r} copy {k}")
        if reply.payload is None:
            raise TransportError("ReturnDelta without payload")
        theta_pub.check_structure(reply.payload)
        return reply.payload

    def round_done(self, r: int) -> None:
        self._send(ProtocolMessage(MessageType.ROUND_DONE, r, 0, self.digest))

    def shutdown(self) -> None:
        self._send(ProtocolMessage(MessageType.SHUTDOWN, config_digest=self.digest))
        self.transport.close()


_FAILURES = (TransportError, CodecError, StructureError, TimeoutError)


def _sessions(endpoint) -> list[ServerSession]:
    return list(endpoint) if isinstance(endpoint, (list, tuple)) else [endpoint]


def run_round_mpu(state: ServerState, endpoint, plan: NoisePlan, r: int, seeds: RoundSeeds, *,
                  reparameterize: bool = True, parallel: bool = False, timing: bool = False
                  ) -> tuple[ServerState, RoundTrace]:
    """One MPU round.

    Copies are produced one at a time from the noise stream, published,
    mapped back and folded into the accumulator, so at most one copy is live
    in sequential mode. ``endpoint`` may be a list of sessions; with
    ``parallel=True`` copies are spread over them and merged under a lock.
    """
    t0 = time.perf_counter()
    sessions = _sessions(endpoint)
    theta = state.theta
    acc = RoundAccumulator(theta)
    trace = RoundTrace(r, "mpu", plan.m, tuple(float(a) for a in plan.alpha))
    lock = threading.Lock()
    live = 0

    def spec_for(k):
        return sample_reparam(seeds.t_r, k, state.cfg) if reparameterize else identity_spec(state.cfg)

    def publish(session, k, alpha_k, eps):
        nonlocal live
        spec = spec_for(k)
        with lock:
            live += 1
            trace.peak_live_copies = max(trace.peak_live_copies, live)
        theta_pub = apply(spec, theta + eps)
        del eps
        delta = session.publish(r, k, theta_pub)
        return k, alpha_k, invert(spec, delta)

    def merge(k, alpha_k, delta_hat):
        nonlocal live
        with lock:
            acc.accumulate(alpha_k, delta_hat)
            trace.copy_order.append(k)
            live -= 1

    sent0 = [(s.frames_sent, s.bytes_sent) for s in sessions]
    try:
        copies = stream_copies(plan, r, seeds.s_r)
        if parallel and len(sessions) > 1:
            with ThreadPoolExecutor(max_workers=len(sessions)) as pool:
                futures = [pool.submit(publish, sessions[i % len(sessions)], k, a, e)
                           for i, (k, a, e) in enumerate(copies)]
                for fut in as_completed(futures):
                    merge(*fut.result())
        else:
            session = sessions[0]
            for k, alpha_k, eps in copies:
                merge(*publish(session, k, alpha_k, eps))
        for s in sessions:
            s.round_done(r)
    except _FAILURES as exc:
        raise RoundAborted(f"round {r} aborted: {exc}") from exc
    delta_bar = acc.mean()
    trace.delta_bar = delta_bar
    _fill_counters(trace, sessions, sent0)
    if timing:
        trace.wall_ms = (time.perf_counter() - t0) * 1e3
    new = replace(state, theta=theta + delta_bar * state.eta_srv, round=r)
    return new, trace


def run_round_noised(state: ServerState, endpoint, plan: NoisePlan, r: int, seeds: RoundSeeds, *,
                     timing: bool = False) -> tuple[ServerState, RoundTrace]:
    """Single-copy baseline: ``theta + eps + eta * Delta(theta + eps)``.

    The noise scale is the plan's ``sigma`` times ``E_k[alpha_k]`` and the
    noise stays in the new state. ``delta_bar`` in the trace is the whole
    committed step ``eps + eta * Delta``.
    """
    t0 = time.perf_counter()
    session = _sessions(endpoint)[0]
    sent0 = [(session.frames_sent, session.bytes_sent)]
    eps = draw_single(plan, r, seeds.s_r)
    noisy = state.theta + eps
    trace = RoundTrace(r, "noised", 1, (plan.mean_alpha,), peak_live_copies=1)
    try:
        delta = session.publish(r, 1, noisy)
        session.round_done(r)
    except _FAILURES as exc:
        raise RoundAborted(f"round {r} aborted: {exc}") from exc
    new_theta = noisy + delta * state.eta_srv
    trace.delta_bar = new_theta - state.theta
    trace.copy_order.append(1)
    _fill_counters(trace, [session], sent0)
    if timing:
        trace.wall_ms = (time.perf_counter() - t0) * 1e3
    return replace(state, theta=new_theta, round=r), trace


def run_round_clean(state: ServerState, endpoint, r: int, *, timing: bool = False) -> tuple[ServerState, RoundTrace]:
    """Noise-free reference: publish ``theta`` itself."""
    t0 = time.perf_counter()
    session = _sessions(endpoint)[0]
    sent0 = [(session.frames_sent, session.bytes_sent)]
    trace = RoundTrace(r, "clean", 1, (1.0,), peak_live_copies=1)
    try:
        delta = session.publish(r, 1, state.theta)
        session.round_done(r)
    except _FAILURES as exc:
        raise RoundAborted(f"round {r} aborted: {exc}") from exc
    trace.delta_bar = delta * state.eta_srv
    trace.copy_order.append(1)
    _fill_counters(trace, [session], sent0)
    if timing:
        trace.wall_ms = (time.perf_counter() - t0) * 1e3
    return replace(state, theta=state.theta + trace.delta_bar, round=r), trace


def _fill_counters(trace: RoundTrace, sessions: Sequence[ServerSession], before) -> None:
    trace.frames_sent = sum(s.frames_sent - f for s, (f, _) in zip(sessions, before))
    trace.bytes_sent = sum(s.bytes_sent - b for s, (_, b) in zip(sessions, before))
