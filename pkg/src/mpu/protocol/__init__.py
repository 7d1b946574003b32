"""Server/client round protocol, wire codec, aggregation and the response oracle."""

from .aggregate import RoundAccumulator, aggregate, harmonic_weights, variance_prefactor
from .codec import CodecError, MessageType, ProtocolMessage, decode, encode
from .oracle import CancellationResult, LinearResponseOracle, cancellation_residual, second_order_bound
from .rounds import (
    DEFAULT_SERVER_STEP,
    RoundAborted,
    RoundSeeds,
    RoundTrace,
    ServerSession,
    ServerState,
    reparam_resolver,
    round_seeds,
    run_round_clean,
    run_round_mpu,
    run_round_noised,
)
from .transport import (
    InProcessTransport,
    OracleClient,
    TapTransport,
    TcpTransport,
    TransportError,
    TransportTimeout,
    UnlearningClient,
    serve_tcp,
)

__all__ = [
    "RoundAccumulator", "aggregate", "harmonic_weights", "variance_prefactor",
    "CodecError", "MessageType", "ProtocolMessage", "decode", "encode",
    "CancellationResult", "LinearResponseOracle", "cancellation_residual", "second_order_bound",
    "DEFAULT_SERVER_STEP", "RoundAborted", "RoundSeeds", "RoundTrace", "ServerSession", "ServerState",
    "reparam_resolver", "round_seeds", "run_round_clean", "run_round_mpu", "run_round_noised",
    "InProcessTransport", "OracleClient", "TapTransport", "TcpTransport", "TransportError",
    "TransportTimeout", "UnlearningClient", "serve_tcp",
]
