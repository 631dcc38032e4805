"""Binary wire format for hyperconnection traffic.

Frame: u32 little-endian body length, then the body::

    version u8 | msg_type u8 | source_node u16 | inference_id u64 |
    null_flag u8 | dim u32 | dim x float32 (little-endian)

A null marker (the output of a failed node) has ``null_flag=1`` and no payload.
"""
from __future__ import annotations

import asyncio
import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

VERSION = 1
HEADER = struct.Struct("<BBHQBI")
LENGTH = struct.Struct("<I")
MAX_BODY = 64 * 1024 * 1024

SINK_ID = 0xFFFF
COORDINATOR_ID = 0xFFFE

# HELLO.inference_id values
LINK_OPEN = 0
NODE_READY = 1


class MsgType(IntEnum):
    HELLO = 0
    DATA = 1
    KEEPALIVE = 2
    KEEPALIVE_ACK = 3
    SHUTDOWN = 4


class ProtocolError(Exception):
    pass


@dataclass(frozen=True, eq=False)
class WireMessage:
    msg_type: MsgType
    source_node: int
    inference_id: int = 0
    null: bool = False
    payload: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype="<f4"))
    version: int = VERSION

    def __post_init__(self):
        object.__setattr__(self, "payload", np.ascontiguousarray(self.payload, dtype="<f4").reshape(-1))
        if self.null and self.payload.size:
            raise ValueError("a null marker carries no payload")

    @property
    def dim(self) -> int:
        return int(self.payload.size)

    def __eq__(self, other):
        if not isinstance(other, WireMessage):
            return NotImplemented
        return (
            self.msg_type == other.msg_type
            and self.source_node == other.source_node
            and self.inference_id == other.inference_id
            and self.null == other.null
            and self.version == other.version
            and self.payload.tobytes() == other.payload.tobytes()
        )

    @classmethod
    def data(cls, source: int, inference_id: int, vector) -> "WireMessage":
        """DATA carrying ``vector``, or a null marker when ``vector`` is None."""
        if vector is None:
            return cls(MsgType.DATA, source, inference_id, True)
        return cls(MsgType.DATA, source, inference_id, False, vector)


def encode(msg: WireMessage) -> bytes:
    return HEADER.pack(
        msg.version, int(msg.msg_type), msg.source_node, msg.inference_id, int(msg.null), msg.dim
    ) + msg.payload.tobytes()


def decode(body: bytes) -> WireMessage:
    if len(body) < HEADER.size:
        raise ProtocolError(f"body of {len(body)} bytes is shorter than the header")
    version, mtype, src, inf_id, null, dim = HEADER.unpack_from(body)
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    try:
        mtype = MsgType(mtype)
    except ValueError as exc:
        raise ProtocolError(f"unknown message type {mtype}") from exc
    if null not in (0, 1):
        raise ProtocolError(f"bad null flag {null}")
    if null and dim:
        raise ProtocolError("null marker with a non-empty payload")
    if len(body) != HEADER.size + 4 * dim:
        raise ProtocolError(f"payload length {len(body) - HEADER.size} does not match dim {dim}")
    payload = np.frombuffer(body, dtype="<f4", count=dim, offset=HEADER.size).copy()
    return WireMessage(mtype, src, inf_id, bool(null), payload, version)


def frame(msg: WireMessage) -> bytes:
    body = encode(msg)
    return LENGTH.pack(len(body)) + body


class FrameDecoder:
    """Incremental decoder for a byte stream of length-prefixed frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[WireMessage]:
        self._buf += data
        out = []
        while len(self._buf) >= LENGTH.size:
            (n,) = LENGTH.unpack_from(self._buf)
            if n > MAX_BODY:
                raise ProtocolError(f"frame of {n} bytes exceeds the limit")
            if len(self._buf) < LENGTH.size + n:
                break
            out.append(decode(bytes(self._buf[LENGTH.size : LENGTH.size + n])))
            del self._buf[: LENGTH.size + n]
        return out


async def read_message(reader: asyncio.StreamReader) -> WireMessage:
    (n,) = LENGTH.unpack(await reader.readexactly(LENGTH.size))
    if n > MAX_BODY:
        raise ProtocolError(f"frame of {n} bytes exceeds the limit")
    return decode(await reader.readexactly(n))


def write_message(writer: asyncio.StreamWriter, msg: WireMessage) -> None:
    writer.write(frame(msg))
