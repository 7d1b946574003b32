"""Byte transports and the client-side message handlers.

A transport moves whole MPU1 frames: ``exchange`` sends one frame and
returns the reply frame. The in-process transport runs the handler on a
worker thread fed by a queue; the TCP transport prefixes every frame with
its length as an unsigned 64-bit little-endian integer.
"""

from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
from collections.abc import Callable
from dataclasses import replace

from ..client import ClientTrainConfig, client_unlearn
from ..objectives import ObjectiveConfig, UnlearnData
from ..symmetry import ReparamSpec, apply, invert
from ..tinyformer import ModelConfig
from .codec import MessageType, ProtocolMessage, decode, encode
from .oracle import LinearResponseOracle

__all__ = [
    "TransportError",
    "TransportTimeout",
    "UnlearningClient",
    "OracleClient",
    "InProcessTransport",
    "TapTransport",
    "TcpTransport",
    "serve_tcp",
]

log = logging.getLogger(__name__)
_LEN = struct.Struct("<Q")


class TransportError(RuntimeError):
    pass


class TransportTimeout(TransportError):
    pass


class _Handler:
    """Client state machine over decoded messages."""

    cfg: ModelConfig
    wire_dtype: str = "f32"

    def handle_frame(self, frame: bytes) -> bytes:
        msg = decode(frame, expected_digest=self.cfg.digest())
        reply = self.handle(msg)
        return encode(reply, self.wire_dtype)

    def handle(self, msg: ProtocolMessage) -> ProtocolMessage:
        digest = self.cfg.digest()
        if msg.type is MessageType.PUBLISH_COPY:
            if msg.payload is None:
                raise TransportError("published copy without payload")
            delta = self.unlearn(msg)
            return ProtocolMessage(MessageType.RETURN_DELTA, msg.round, msg.copy, digest, delta)
        if msg.type in (MessageType.HELLO, MessageType.ROUND_DONE, MessageType.SHUTDOWN):
            return ProtocolMessage(msg.type, msg.round, msg.copy, digest)
        raise TransportError(f"client cannot handle {msg.type.name}")

    def unlearn(self, msg: ProtocolMessage):
        raise NotImplementedError


class UnlearningClient(_Handler):
    """Runs the local unlearning trainer on every published copy.

    The minibatch order is keyed by the configured seed and the round, so
    every copy of a round (and the clean reference) sees the same batches.
    """

    def __init__(self, cfg: ModelConfig, objective: ObjectiveConfig, train_cfg: ClientTrainConfig,
                 data: UnlearnData, wire_dtype: str = "f32"):
        self.cfg, self.objective, self.train_cfg, self.data = cfg, objective, train_cfg, data
        self.wire_dtype = wire_dtype
        self.copies_seen = 0

    def unlearn(self, msg):
        self.copies_seen += 1
        train_cfg = replace(self.train_cfg, batch_order_seed=self.train_cfg.batch_order_seed.with_(round=msg.round))
        return client_unlearn(msg.payload, self.objective, train_cfg, self.cfg, self.data)


class OracleClient(_Handler):
    """Test double answering with a :class:`LinearResponseOracle`.

    The oracle is defined in canonical coordinates, so this client is handed
    a ``resolver(round, copy) -> ReparamSpec`` to map the published copy
    back and the response forward. Real clients never see the spec.
    """

    def __init__(self, cfg: ModelConfig, oracle: LinearResponseOracle,
                 resolver: Callable[[int, int], ReparamSpec | None], wire_dtype: str = "f64"):
        self.cfg, self.oracle, self.resolver, self.wire_dtype = cfg, oracle, resolver, wire_dtype

    def unlearn(self, msg):
        spec = self.resolver(msg.round, msg.copy)
        theta = msg.payload if spec is None else invert(spec, msg.payload)
        delta = self.oracle.response(theta)
        return delta if spec is None else apply(spec, delta)


class InProcessTransport:
    """Queue pair serviced by a daemon worker thread running ``handler``."""

    def __init__(self, handler: _Handler, timeout: float | None = 60.0):
        self.handler = handler
        self.timeout = timeout
        self._inbox: queue.Queue = queue.Queue()
        self._outbox: queue.Queue = queue.Queue()
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    def _serve(self):
        while True:
            frame = self._inbox.get()
            if frame is None:
                return
            try:
                self._outbox.put(("ok", self.handler.handle_frame(frame)))
            except Exception as exc:  # surfaced to the server side
                log.exception("client handler failed")
                self._outbox.put(("error", exc))

    def exchange(self, frame: bytes) -> bytes:
        self._inbox.put(frame)
        try:
            status, value = self._outbox.get(timeout=self.timeout)
        except queue.Empty as exc:
            raise TransportTimeout("client did not answer in time") from exc
        if status == "error":
            raise TransportError(f"client failed: {value}") from value
        return value

    def close(self):
        self._inbox.put(None)
        self._thread.join(timeout=5)


class TapTransport:
    """Wraps a transport and records every frame in both directions."""

    def __init__(self, inner):
        self.inner = inner
        self.sent: list[bytes] = []
        self.received: list[bytes] = []

    def exchange(self, frame: bytes) -> bytes:
        self.sent.append(frame)
        reply = self.inner.exchange(frame)
        self.received.append(reply)
        return reply

    def close(self):
        self.inner.close()


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportError("connection closed mid-frame")
        buf += chunk
    return bytes(buf)


def _send_frame(sock: socket.socket, frame: bytes) -> None:
    sock.sendall(_LEN.pack(len(frame)) + frame)


def _recv_frame(sock: socket.socket) -> bytes:
    (n,) = _LEN.unpack(_recv_exact(sock, _LEN.size))
    return _recv_exact(sock, n)


class TcpTransport:
    """Server-side connection to a client listening on ``host:port``."""

    def __init__(self, host: str, port: int, timeout: float = 60.0):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
        self.sock.settimeout(timeout)

    def exchange(self, frame: bytes) -> bytes:
        try:
            _send_frame(self.sock, frame)
            return _recv_frame(self.sock)
        except socket.timeout as exc:
            raise TransportTimeout("client did not answer in time") from exc
        except OSError as exc:
            raise TransportError(str(exc)) from exc

    def close(self):
        self.sock.close()


def serve_tcp(handler: _Handler, host: str = "127.0.0.1", port: int = 0,
              ready: Callable[[int], None] | None = None) -> None:
    """Accept one server connection and answer frames until Shutdown."""
    with socket.create_server((host, port)) as srv:
        if ready is not None:
            ready(srv.getsockname()[1])
        conn, _ = srv.accept()
        with conn:
            while True:
                try:
                    frame = _recv_frame(conn)
                except TransportError:
                    return
                reply = handler.handle_frame(frame)
                _send_frame(conn, reply)
                if decode(frame).type is MessageType.SHUTDOWN:
                    return
