"""Messages exchanged by the fabric and their binary frame encoding.

Frame layout (all integers little-endian)::

    u32  total frame length in bytes, this field included
    u8   msg_kind
    u32  round_tag
    u32  src
    u32  dst
    u16  name length, then the UTF-8 name
    u8   dtype code (1 = float64, the only one)
    u8   ndim, then ndim x u32 dims
    ...  float64 payload
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import CommunicationError

DTYPE_F64 = 1
_HEAD = struct.Struct("<IBIIIH")
_EMPTY = np.zeros(0)
_EMPTY.setflags(write=False)


class MsgKind(enum.IntEnum):
    DATA = 0
    NEGOTIATE = 1
    WINDOW_PUT = 2
    WINDOW_GET_REQUEST = 3
    WINDOW_GET_REPLY = 4
    WINDOW_ACCUMULATE = 5
    MUTEX_ACQUIRE = 6
    MUTEX_RELEASE = 7
    BARRIER = 8
    SHUTDOWN = 9


# Streams are independently FIFO per (src, dst). Barriers travel with window
# traffic so that a barrier also flushes earlier one-sided writes.
STREAM_OF = {
    MsgKind.DATA: "coll",
    MsgKind.NEGOTIATE: "ctrl",
    MsgKind.SHUTDOWN: "ctrl",
    MsgKind.WINDOW_PUT: "win",
    MsgKind.WINDOW_GET_REQUEST: "win",
    MsgKind.WINDOW_GET_REPLY: "win",
    MsgKind.WINDOW_ACCUMULATE: "win",
    MsgKind.MUTEX_ACQUIRE: "win",
    MsgKind.MUTEX_RELEASE: "win",
    MsgKind.BARRIER: "win",
}


@dataclass(frozen=True, eq=False)
class Envelope:
    kind: MsgKind
    op_name: str
    src: int
    dst: int
    round_tag: int = 0
    payload: np.ndarray = field(default=_EMPTY, repr=False)

    @property
    def stream(self) -> str:
        return STREAM_OF[self.kind]

    @property
    def nbytes(self) -> int:
        return int(self.payload.size) * 8

    def identity(self) -> tuple:
        return (self.op_name, self.src, self.dst, self.round_tag, int(self.kind))

    def __eq__(self, other):
        if not isinstance(other, Envelope):
            return NotImplemented
        return (self.identity() == other.identity()
                and self.payload.shape == other.payload.shape
                and self.payload.tobytes() == other.payload.tobytes())


def encode_frame(env: Envelope) -> bytes:
    name = env.op_name.encode("utf-8")
    payload = np.ascontiguousarray(env.payload, dtype="<f8")
    if payload.ndim > 255 or len(name) > 0xFFFF:
        raise CommunicationError("envelope too large to frame")
    dims = struct.pack(f"<BB{payload.ndim}I", DTYPE_F64, payload.ndim, *payload.shape)
    body = payload.tobytes()
    total = _HEAD.size + len(name) + len(dims) + len(body)
    head = _HEAD.pack(total, int(env.kind), env.round_tag, env.src, env.dst, len(name))
    return b"".join((head, name, dims, body))


def decode_frame(frame: bytes) -> Envelope:
    mv = memoryview(frame)
    if len(mv) < _HEAD.size:
        raise CommunicationError("truncated frame header")
    total, kind, tag, src, dst, nlen = _HEAD.unpack_from(mv, 0)
    if total != len(mv):
        raise CommunicationError(f"frame length field {total} != {len(mv)} bytes received")
    off = _HEAD.size
    name = bytes(mv[off:off + nlen]).decode("utf-8")
    off += nlen
    dtype, ndim = struct.unpack_from("<BB", mv, off)
    off += 2
    if dtype != DTYPE_F64:
        raise CommunicationError(f"unsupported dtype code {dtype}")
    shape = struct.unpack_from(f"<{ndim}I", mv, off)
    off += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    if off + 8 * count != total:
        raise CommunicationError("payload size does not match declared shape")
    payload = np.frombuffer(mv, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
    try:
        kind = MsgKind(kind)
    except ValueError:
        raise CommunicationError(f"unknown message kind {kind}") from None
    return Envelope(kind, name, src, dst, tag, payload)
