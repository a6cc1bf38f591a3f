"""Binary framing shared by the producer KV service and the broker.

A frame is ``u32 length | u8 opcode | payload`` where ``length`` counts the
opcode byte plus the payload, big-endian. KV payloads are binary; broker
control payloads are UTF-8 JSON objects. See ``docs/protocol.md``.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass
from typing import Optional

MAX_PAYLOAD = 16 * 2**20
HEADER = struct.Struct(">I")


class ProtocolError(Exception):
    """The byte stream cannot be a valid frame sequence; the connection must close."""


class Opcode(enum.IntEnum):
    GET = 0x01
    PUT = 0x02
    DELETE = 0x03
    PING = 0x04

    OK = 0x80
    VALUE = 0x81
    NOT_FOUND = 0x82
    RATE_LIMITED = 0x83
    EVICTED = 0x84
    LEASE_EXPIRED = 0x85
    ERR = 0xFF

    REGISTER = 0x10
    DEREGISTER = 0x11
    REPORT = 0x12
    REQUEST = 0x13
    ASSIGN = 0x14
    RENEW = 0x15
    EVICT_NOTICE = 0x16
    PRICE_QUERY = 0x17


KNOWN_OPCODES = frozenset(int(o) for o in Opcode)


class ErrorCode(enum.IntEnum):
    UNKNOWN_OPCODE = 1
    MALFORMED = 2
    NOT_AUTHENTICATED = 3
    BAD_LEASE = 4
    TOO_LARGE = 5
    QUEUED = 6
    UNKNOWN_PARTY = 7
    REJECTED = 8
    INTERNAL = 9


class KeyMode(enum.IntEnum):
    FIXED = 0      # 8-byte substitute keys
    PREFIXED = 1   # u16 length + key bytes


@dataclass(frozen=True)
class Frame:
    opcode: int
    payload: bytes = b""


def encode(frame: Frame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(frame.payload)} bytes exceeds {MAX_PAYLOAD}")
    if not 0 <= frame.opcode <= 0xFF:
        raise ProtocolError(f"opcode {frame.opcode} out of range")
    return HEADER.pack(1 + len(frame.payload)) + bytes((frame.opcode,)) + frame.payload


def decode(buf) -> Optional[tuple[Frame, int]]:
    """Decode one frame from the front of ``buf``.

    Returns ``(frame, consumed)`` or None when more bytes are needed.
    Nothing is consumed on a partial frame.
    """
    if len(buf) < 4:
        return None
    (length,) = HEADER.unpack_from(buf, 0)
    if length == 0:
        raise ProtocolError("zero-length frame has no opcode")
    if length - 1 > MAX_PAYLOAD:
        raise ProtocolError(f"frame length {length} exceeds limit")
    end = 4 + length
    if len(buf) < end:
        return None
    return Frame(buf[4], bytes(buf[5:end])), end


class FrameDecoder:
    """Incremental decoder holding one connection's unread bytes."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Frame]:
        self._buf += data
        out = []
        while True:
            got = decode(self._buf)
            if got is None:
                return out
            frame, n = got
            del self._buf[:n]
            out.append(frame)

    @property
    def pending(self) -> int:
        return len(self._buf)


# -- KV payloads ------------------------------------------------------------


def pack_key(key: bytes, mode: KeyMode) -> bytes:
    if mode is KeyMode.FIXED:
        if len(key) != 8:
            raise ProtocolError("fixed-width keys are 8 bytes")
        return key
    if len(key) > 0xFFFF:
        raise ProtocolError("key too long")
    return struct.pack(">H", len(key)) + key


def unpack_key(payload: bytes, mode: KeyMode) -> tuple[bytes, int]:
    if mode is KeyMode.FIXED:
        if len(payload) < 8:
            raise ProtocolError("truncated key")
        return payload[:8], 8
    if len(payload) < 2:
        raise ProtocolError("truncated key length")
    (n,) = struct.unpack_from(">H", payload, 0)
    if len(payload) < 2 + n:
        raise ProtocolError("truncated key")
    return payload[2:2 + n], 2 + n


@dataclass(frozen=True)
class KvRequest:
    op: Opcode
    key: bytes = b""
    value: Optional[bytes] = None


def kv_frame(op: Opcode, key: bytes = b"", value: Optional[bytes] = None,
             mode: KeyMode = KeyMode.FIXED) -> Frame:
    if op is Opcode.PING:
        return Frame(op)
    body = pack_key(key, mode)
    if op is Opcode.PUT:
        body += struct.pack(">I", len(value)) + value
    return Frame(op, body)


def parse_kv(frame: Frame, mode: KeyMode) -> KvRequest:
    op = Opcode(frame.opcode)
    if op is Opcode.PING:
        return KvRequest(op)
    key, off = unpack_key(frame.payload, mode)
    if op is Opcode.PUT:
        if len(frame.payload) < off + 4:
            raise ProtocolError("truncated value length")
        (n,) = struct.unpack_from(">I", frame.payload, off)
        value = frame.payload[off + 4:]
        if len(value) != n:
            raise ProtocolError("value length mismatch")
        return KvRequest(op, key, value)
    if len(frame.payload) != off:
        raise ProtocolError("trailing bytes after key")
    return KvRequest(op, key)


def rate_limited(retry_after_ms: int) -> Frame:
    return Frame(Opcode.RATE_LIMITED, struct.pack(">I", max(0, min(retry_after_ms, 0xFFFFFFFF))))


def retry_after_of(frame: Frame) -> int:
    return struct.unpack(">I", frame.payload)[0]


def error(code: ErrorCode, text: str = "") -> Frame:
    return Frame(Opcode.ERR, struct.pack(">H", code) + text.encode())


def error_of(frame: Frame) -> tuple[int, str]:
    if len(frame.payload) < 2:
        raise ProtocolError("truncated error frame")
    (code,) = struct.unpack_from(">H", frame.payload, 0)
    return code, frame.payload[2:].decode(errors="replace")


@dataclass(frozen=True)
class Handshake:
    lease_id: int
    key_mode: KeyMode
    token: bytes


def handshake_frame(h: Handshake) -> Frame:
    return Frame(Opcode.RENEW, struct.pack(">QB", h.lease_id, h.key_mode) + h.token)


def parse_handshake(frame: Frame) -> Handshake:
    if frame.opcode != Opcode.RENEW or len(frame.payload) < 9:
        raise ProtocolError("expected a lease handshake")
    lease_id, mode = struct.unpack_from(">QB", frame.payload, 0)
    try:
        km = KeyMode(mode)
    except ValueError:
        raise ProtocolError(f"unknown key mode {mode}") from None
    return Handshake(lease_id, km, frame.payload[9:])


# -- control payloads -------------------------------------------------------


def json_frame(op: Opcode, obj: dict) -> Frame:
    return Frame(op, json.dumps(obj, sort_keys=True, separators=(",", ":")).encode())


def json_of(frame: Frame) -> dict:
    try:
        obj = json.loads(frame.payload.decode()) if frame.payload else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"bad JSON payload: {exc}") from None
    if not isinstance(obj, dict):
        raise ProtocolError("control payload must be a JSON object")
    return obj
