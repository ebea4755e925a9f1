"""Point-to-point fabric: deterministic simulator and TCP backends."""
from .base import Endpoint, LoopbackEndpoint, ThreadRuntime
from .envelope import Envelope, MsgKind, decode_frame, encode_frame
from .sim import SimFabric, SimNetwork, SimScheduler
from .tcp import TcpEndpoint, parse_peers

__all__ = [
    "Endpoint", "LoopbackEndpoint", "ThreadRuntime", "Envelope", "MsgKind", "decode_frame", "encode_frame",
    "SimFabric", "SimNetwork", "SimScheduler", "TcpEndpoint", "parse_peers",
]
