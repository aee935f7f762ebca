"""Length-prefixed frames for the server/client protocol.

Frame: ``u32 length | u8 type | u32 round | u32 client_id | payload``.
``length`` counts every byte after itself (9 + payload length).
"""

from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass

_HEAD = struct.Struct("<IBII")
FRAME_OVERHEAD = _HEAD.size  # 13 bytes
MAX_FRAME = 1 << 31


class ProtocolError(RuntimeError):
    pass


class ConnectionClosed(ProtocolError):
    pass


class MsgType(enum.IntEnum):
    HELLO = 1
    GLOBAL_PARAMS = 2
    LOCAL_PARAMS = 3
    METRICS = 4
    BYE = 5


@dataclass(frozen=True)
class WireMessage:
    type: MsgType
    round: int
    client_id: int
    payload: bytes = b""

    def encode(self) -> bytes:
        return _HEAD.pack(len(self.payload) + FRAME_OVERHEAD - 4, int(self.type), self.round, self.client_id) + self.payload

    @property
    def wire_size(self) -> int:
        return FRAME_OVERHEAD + len(self.payload)


def decode(frame: bytes) -> WireMessage:
    if len(frame) < FRAME_OVERHEAD:
        raise ProtocolError(f"frame of {len(frame)} bytes is shorter than the {FRAME_OVERHEAD}-byte header")
    length, mtype, rnd, cid = _HEAD.unpack_from(frame)
    if length != len(frame) - 4:
        raise ProtocolError(f"length field {length} != remaining byte count {len(frame) - 4}")
    try:
        kind = MsgType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown message type {mtype}") from None
    return WireMessage(kind, rnd, cid, frame[FRAME_OVERHEAD:])


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            raise ConnectionClosed(f"peer closed with {remaining} of {n} bytes outstanding")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def send_message(sock: socket.socket, msg: WireMessage) -> int:
    data = msg.encode()
    sock.sendall(data)
    return len(data)


def recv_message(sock: socket.socket) -> WireMessage:
    head = _recv_exact(sock, 4)
    (length,) = struct.unpack("<I", head)
    if length < FRAME_OVERHEAD - 4 or length > MAX_FRAME:
        raise ProtocolError(f"implausible frame length {length}")
    return decode(head + _recv_exact(sock, length))
