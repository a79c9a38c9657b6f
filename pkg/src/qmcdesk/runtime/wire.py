"""WireFrame binary protocol.

Every frame is an 18-byte little-endian header followed by the payload::

    0   4s  magic b"QMCC"
    4   u8  version (1)
    5   u8  message type
    6   u32 critical key
    10  u32 uncompressed payload length
    14  u32 compressed payload length

The payload is raw DEFLATE (no zlib/gzip wrapper) over the canonical JSON
text of the body: UTF-8, sorted keys, no insignificant whitespace, with a
``"v": 1`` body-version field.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum

MAGIC = b"QMCC"
VERSION = 1
BODY_VERSION = 1
HEADER = struct.Struct("<4sBBIII")
MAX_PAYLOAD = 256 * 1024 * 1024


class MsgType(IntEnum):
    INPUT_REQUEST = 1
    INPUT_BUNDLE = 2
    RESULT_BATCH = 3
    WALKER_LIST = 4
    STOP = 5
    TERMINATED = 6
    PING = 7


DATA_TYPES = (MsgType.RESULT_BATCH, MsgType.WALKER_LIST)


class FrameError(ValueError):
    pass


@dataclass
class Frame:
    msg_type: MsgType
    key: int
    body: dict


def canonical_text(body: dict) -> bytes:
    body = dict(body)
    body.setdefault("v", BODY_VERSION)
    return json.dumps(body, sort_keys=True, separators=(",", ":"), allow_nan=True).encode()


def _deflate(data: bytes) -> bytes:
    c = zlib.compressobj(6, zlib.DEFLATED, -15)
    return c.compress(data) + c.flush()


def _inflate(data: bytes, expected: int) -> bytes:
    d = zlib.decompressobj(-15)
    out = d.decompress(data, expected + 1)
    if len(out) != expected or d.unconsumed_tail or not d.eof:
        raise FrameError("payload does not inflate to the declared length")
    return out


def encode_frame(msg_type: int, key: int, body: dict) -> bytes:
    raw = canonical_text(body)
    comp = _deflate(raw)
    return HEADER.pack(MAGIC, VERSION, int(msg_type), key & 0xFFFFFFFF, len(raw), len(comp)) + comp


def decode_header(header: bytes) -> tuple[MsgType, int, int, int]:
    if len(header) != HEADER.size:
        raise FrameError("short header")
    magic, version, mtype, key, ulen, clen = HEADER.unpack(header)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FrameError(f"unsupported protocol version {version}")
    try:
        mt = MsgType(mtype)
    except ValueError:
        raise FrameError(f"unknown message type {mtype}") from None
    if ulen > MAX_PAYLOAD or clen > MAX_PAYLOAD:
        raise FrameError("frame exceeds size limit")
    return mt, key, ulen, clen


def decode_payload(payload: bytes, ulen: int) -> dict:
    raw = _inflate(payload, ulen)
    try:
        body = json.loads(raw)
    except ValueError as exc:
        raise FrameError(f"payload is not valid JSON: {exc}") from None
    if not isinstance(body, dict):
        raise FrameError("payload body must be an object")
    if body.get("v") != BODY_VERSION:
        raise FrameError(f"unsupported body version {body.get('v')!r}")
    return body


def decode_frame(data: bytes) -> Frame:
    mt, key, ulen, clen = decode_header(data[: HEADER.size])
    payload = data[HEADER.size:]
    if len(payload) != clen:
        raise FrameError("payload length does not match header")
    return Frame(mt, key, decode_payload(payload, ulen))


def _read_exact(stream, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf)) if hasattr(stream, "read") else stream.recv(n - len(buf))
        if not chunk:
            if buf:
                raise FrameError("connection closed mid-frame")
            raise EOFError
        buf += chunk
    return bytes(buf)


def read_frame(stream) -> Frame:
    """Read one frame from a binary file object or socket; EOFError on clean close."""
    mt, key, ulen, clen = decode_header(_read_exact(stream, HEADER.size))
    payload = _read_exact(stream, clen) if clen else b""
    return Frame(mt, key, decode_payload(payload, ulen))


def write_frame(stream, msg_type: int, key: int, body: dict) -> None:
    data = encode_frame(msg_type, key, body)
    if hasattr(stream, "sendall"):
        stream.sendall(data)
    else:
        stream.write(data)
        stream.flush()
