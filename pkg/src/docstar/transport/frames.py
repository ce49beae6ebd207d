"""Binary framing shared by client-server and server-server traffic.

A frame is ``length (u32) | type (u8) | session id (16 bytes) | payload``
with ``length`` covering everything after itself. A non-empty payload is
``u32 vector count``, then per vector ``u32 element count`` and 8-byte
big-endian elements, then optional UTF-8 text filling the rest of the frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from ..errors import FramingError, ProtocolError

MAX_FRAME = 64 * 1024 * 1024
SESSION_BYTES = 16
HEADER_BYTES = 4 + 1 + SESSION_BYTES


class MsgType(IntEnum):
    HELLO = 1
    P1_QUERY = 2
    P1_ANS = 3
    P2_VECTOR = 4
    P2_ANS = 5
    ADDR_ANS = 6
    OPTINV_VECTORS = 7
    OPTINV_ANS = 8
    P3_VECTOR = 9
    P3_POSITIONS = 10
    P3_KPV = 11
    P3_FILE = 12
    UPDATE = 13
    RN_CONTRIB = 14
    RN_CHECK = 15
    TEST_SHARE = 16
    DEGRED_MASKED = 17
    DEGRED_RESHARE = 18
    ABORT = 19
    OWNER_SCAN = 20
    OWNER_READ = 21
    OWNER_ANS = 22
    ACK = 23


@dataclass
class Frame:
    msg_type: MsgType
    session_id: bytes = bytes(SESSION_BYTES)
    vectors: list[np.ndarray] = field(default_factory=list)
    text: str = ""

    @property
    def elements(self) -> int:
        return sum(int(np.size(v)) for v in self.vectors)

    @property
    def size(self) -> int:
        """Encoded length in bytes, computed without encoding."""
        return frame_size(self, self.elements)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Frame):
            return NotImplemented
        return (
            self.msg_type == other.msg_type
            and self.session_id == other.session_id
            and self.text == other.text
            and len(self.vectors) == len(other.vectors)
            and all(np.array_equal(np.ravel(a), np.ravel(b)) for a, b in zip(self.vectors, other.vectors))
        )


def frame_size(frame: Frame, elements: int) -> int:
    """Encoded length of ``frame`` given its element count."""
    if not frame.vectors and not frame.text:
        return HEADER_BYTES
    return HEADER_BYTES + 4 + 4 * len(frame.vectors) + 8 * elements + len(frame.text.encode())


def encode_frame(frame: Frame) -> bytes:
    if len(frame.session_id) != SESSION_BYTES:
        raise FramingError("session id must be 16 bytes")
    parts = []
    if frame.vectors or frame.text:
        parts.append(struct.pack(">I", len(frame.vectors)))
        for vec in frame.vectors:
            flat = np.ravel(np.asarray(vec, dtype=np.int64))
            if flat.size and flat.min() < 0:
                raise FramingError("field elements must be non-negative")
            parts.append(struct.pack(">I", flat.size))
            parts.append(flat.astype(">u8").tobytes())
        parts.append(frame.text.encode())
    payload = b"".join(parts)
    length = 1 + SESSION_BYTES + len(payload)
    if length > MAX_FRAME:
        raise FramingError(f"frame of {length} bytes exceeds the 64 MiB limit")
    return struct.pack(">IB", length, int(frame.msg_type)) + frame.session_id + payload


def decode_frame(data: bytes) -> Frame:
    """Decode exactly one frame occupying all of ``data``."""
    if len(data) < HEADER_BYTES:
        raise FramingError("truncated frame header")
    (length,) = struct.unpack_from(">I", data)
    if length > MAX_FRAME:
        raise FramingError("frame exceeds the 64 MiB limit")
    if length < 1 + SESSION_BYTES or len(data) != 4 + length:
        raise FramingError(f"length field {length} disagrees with {len(data) - 4} bytes")
    return decode_body(data[4:])


def decode_body(body: bytes) -> Frame:
    """Decode a frame without its leading length word."""
    raw_type = body[0]
    try:
        msg_type = MsgType(raw_type)
    except ValueError:
        raise ProtocolError(f"unknown message type {raw_type}") from None
    session_id = bytes(body[1:1 + SESSION_BYTES])
    payload = body[1 + SESSION_BYTES:]
    vectors = []
    text = ""
    if payload:
        if len(payload) < 4:
            raise FramingError("truncated vector count")
        (count,) = struct.unpack_from(">I", payload)
        offset = 4
        for _ in range(count):
            if offset + 4 > len(payload):
                raise FramingError("truncated vector header")
            (n,) = struct.unpack_from(">I", payload, offset)
            offset += 4
            end = offset + 8 * n
            if end > len(payload):
                raise FramingError("truncated vector body")
            vectors.append(np.frombuffer(payload[offset:end], dtype=">u8").astype(np.int64))
            offset = end
        try:
            text = payload[offset:].decode()
        except UnicodeDecodeError:
            raise FramingError("trailing text is not UTF-8") from None
    return Frame(msg_type, session_id, vectors, text)


def read_frame(stream) -> Frame | None:
    """Read one frame from a binary file-like object; None on clean EOF."""
    head = stream.read(4)
    if not head:
        return None
    if len(head) < 4:
        raise FramingError("truncated length word")
    (length,) = struct.unpack(">I", head)
    if length > MAX_FRAME or length < 1 + SESSION_BYTES:
        raise FramingError(f"bad frame length {length}")
    body = stream.read(length)
    if len(body) != length:
        raise FramingError("connection closed mid-frame")
    return decode_body(body)
