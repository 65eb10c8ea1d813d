"""Framed binary message format for client/controller/minion traffic.

A connection carries length-prefixed frames (u32 big-endian byte count,
then the body). A frame body is either one control message or, inside a
bulk-copy sequence, a raw payload chunk. Control messages are a compact
tag-value encoding: single-byte field tags, length-prefixed UTF-8 strings.
Encoding is deterministic (fields sorted by tag) so decode(encode(m)) == m
and golden byte fixtures stay stable.

There is no resynchronization: a corrupt length poisons the connection and
the connection must be closed. See docs/wire.md for the byte-level layout.
"""

from __future__ import annotations

import enum
import socket
import struct
import zlib
from dataclasses import dataclass, field
from typing import Any, Iterator, Optional

PROTOCOL_VERSION = 0
MAX_FRAME_BYTES = 64 * 1024 * 1024
BULK_CHUNK_BYTES = 1024 * 1024

_LEN = struct.Struct(">I")
_HEADER = struct.Struct(">BBQB")  # version, msg type, request id, field count
_U64 = struct.Struct(">Q")
_I64 = struct.Struct(">q")


class WireError(Exception):
    pass


class TruncatedFrameError(WireError):
    pass


class FrameTooLargeError(WireError):
    pass


class UnknownTypeError(WireError):
    pass


class MissingFieldError(WireError):
    pass


class ConnectionClosed(WireError):
    pass


class MsgType(enum.IntEnum):
    REGISTER = 1
    CREATE = 2
    USE = 3
    COPY = 4
    ACCESS_WAIT = 5
    ACCESS_GRANT_NOTIFY = 6
    TRANSFER = 7
    DESTROY = 8
    READ = 9
    WRITE = 10
    MINION_ALLOCATE = 11
    MINION_REVOKE = 12
    MINION_GRANT = 13
    MINION_SET_OWNER = 14
    MINION_COPY_PUSH = 15
    MINION_DEALLOCATE = 16
    REPLY = 17
    DIAGNOSTICS = 18


# Field kinds on the wire.
_KIND_U64 = 0
_KIND_I64 = 1
_KIND_STR = 2
_KIND_BYTES = 3
_KIND_BOOL = 4

# tag -> (name, kind). Tags are stable; never reuse a tag for a new meaning.
_FIELDS = {
    1: ("key", _KIND_STR),
    2: ("size", _KIND_U64),
    3: ("container", _KIND_U64),
    4: ("target", _KIND_U64),
    5: ("status", _KIND_I64),
    6: ("token", _KIND_BYTES),
    7: ("segment", _KIND_STR),
    8: ("host", _KIND_STR),
    9: ("container_addr", _KIND_STR),
    10: ("host_addr", _KIND_STR),
    11: ("offset", _KIND_U64),
    12: ("length", _KIND_U64),
    13: ("payload", _KIND_BYTES),
    14: ("new_key", _KIND_STR),
    15: ("total_bytes", _KIND_U64),
    16: ("clone_from", _KIND_STR),
    17: ("dest_addr", _KIND_STR),
    18: ("dest_key", _KIND_STR),
    19: ("error", _KIND_STR),
    20: ("error_detail", _KIND_STR),
    21: ("mode", _KIND_STR),
    22: ("minion_addr", _KIND_STR),
    23: ("timeout_ms", _KIND_U64),
    24: ("payload_bytes_in", _KIND_U64),
    25: ("payload_bytes_out", _KIND_U64),
    26: ("capacity", _KIND_U64),
    27: ("owner", _KIND_U64),
}
_TAG_BY_NAME = {name: (tag, kind) for tag, (name, kind) in _FIELDS.items()}

# Fields every message of a given type must carry; encode and decode both
# enforce this so a malformed peer is caught at the boundary.
REQUIRED_FIELDS = {
    MsgType.REGISTER: ("container", "container_addr", "host_addr"),
    MsgType.CREATE: ("container", "key", "size"),
    MsgType.USE: ("container", "key"),
    MsgType.COPY: ("container", "key", "new_key"),
    MsgType.ACCESS_WAIT: ("container", "key"),
    MsgType.ACCESS_GRANT_NOTIFY: ("key",),
    MsgType.TRANSFER: ("container", "key", "target"),
    MsgType.DESTROY: ("container", "key"),
    MsgType.READ: ("key", "token", "offset", "length"),
    MsgType.WRITE: ("key", "token", "offset", "payload"),
    MsgType.MINION_ALLOCATE: ("key", "size"),
    MsgType.MINION_REVOKE: ("key",),
    MsgType.MINION_GRANT: ("key", "container"),
    MsgType.MINION_SET_OWNER: ("key", "container"),
    MsgType.MINION_COPY_PUSH: ("key",),
    MsgType.MINION_DEALLOCATE: ("key",),
    MsgType.REPLY: ("status",),
    MsgType.DIAGNOSTICS: (),
}


@dataclass
class ControlMessage:
    msg_type: MsgType
    request_id: int = 0
    fields: dict[str, Any] = field(default_factory=dict)

    def get(self, name: str, default: Any = None) -> Any:
        return self.fields.get(name, default)

    def __getitem__(self, name: str) -> Any:
        try:
            return self.fields[name]
        except KeyError:
            raise MissingFieldError("%s missing field %r" % (self.msg_type.name, name))


def _encode_field(tag: int, kind: int, value: Any) -> bytes:
    head = bytes((tag, kind))
    if kind == _KIND_U64:
        return head + _U64.pack(int(value))
    if kind == _KIND_I64:
        return head + _I64.pack(int(value))
    if kind == _KIND_STR:
        raw = value.encode("utf-8")
        return head + _LEN.pack(len(raw)) + raw
    if kind == _KIND_BYTES:
        raw = bytes(value)
        return head + _LEN.pack(len(raw)) + raw
    if kind == _KIND_BOOL:
        return head + (b"\x01" if value else b"\x00")
    raise WireError("unencodable kind %d" % kind)


def encode(msg: ControlMessage, max_frame: int = MAX_FRAME_BYTES) -> bytes:
    """Encode one control message into a complete frame (length included)."""
    for name in REQUIRED_FIELDS[msg.msg_type]:
        if name not in msg.fields:
            raise MissingFieldError("%s requires field %r" % (msg.msg_type.name, name))
    parts = []
    tagged = []
    for name, value in msg.fields.items():
        if name not in _TAG_BY_NAME:
            raise WireError("unknown field %r" % name)
        tag, kind = _TAG_BY_NAME[name]
        tagged.append((tag, kind, value))
    tagged.sort(key=lambda t: t[0])
    if len(tagged) > 255:
        raise WireError("too many fields")
    for tag, kind, value in tagged:
        parts.append(_encode_field(tag, kind, value))
    body = _HEADER.pack(PROTOCOL_VERSION, int(msg.msg_type), msg.request_id, len(tagged)) + b"".join(parts)
    if len(body) > max_frame:
        raise FrameTooLargeError("frame body %d exceeds ceiling %d" % (len(body), max_frame))
    return _LEN.pack(len(body)) + body


def decode(body: bytes) -> ControlMessage:
    """Decode one frame body into a control message."""
    if len(body) < _HEADER.size:
        raise TruncatedFrameError("body shorter than header")
    version, raw_type, request_id, count = _HEADER.unpack_from(body, 0)
    if version != PROTOCOL_VERSION:
        raise WireError("unsupported protocol version %d" % version)
    try:
        msg_type = MsgType(raw_type)
    except ValueError:
        raise UnknownTypeError("unknown message type %d" % raw_type)
    fields: dict[str, Any] = {}
    pos = _HEADER.size
    for _ in range(count):
        if pos + 2 > len(body):
            raise TruncatedFrameError("field header truncated")
        tag, kind = body[pos], body[pos + 1]
        pos += 2
        if tag not in _FIELDS:
            raise WireError("unknown field tag %d" % tag)
        name, expected_kind = _FIELDS[tag]
        if kind != expected_kind:
            raise WireError("field %r has kind %d, expected %d" % (name, kind, expected_kind))
        if kind in (_KIND_U64, _KIND_I64):
            if pos + 8 > len(body):
                raise TruncatedFrameError("scalar field truncated")
            st = _U64 if kind == _KIND_U64 else _I64
            fields[name] = st.unpack_from(body, pos)[0]
            pos += 8
        elif kind in (_KIND_STR, _KIND_BYTES):
            if pos + 4 > len(body):
                raise TruncatedFrameError("length prefix truncated")
            (n,) = _LEN.unpack_from(body, pos)
            pos += 4
            if pos + n > len(body):
                raise TruncatedFrameError("field payload truncated")
            raw = body[pos : pos + n]
            fields[name] = raw.decode("utf-8") if kind == _KIND_STR else raw
            pos += n
        else:  # _KIND_BOOL
            if pos + 1 > len(body):
                raise TruncatedFrameError("bool field truncated")
            fields[name] = body[pos] != 0
            pos += 1
    if pos != len(body):
        raise WireError("trailing bytes after %d fields" % count)
    for name in REQUIRED_FIELDS[msg_type]:
        if name not in fields:
            raise MissingFieldError("%s requires field %r" % (msg_type.name, name))
    return ControlMessage(msg_type, request_id, fields)


def recv_exact(sock: socket.socket, n: int) -> bytes:
    """Read exactly n bytes or raise; a clean EOF at a frame boundary raises
    ConnectionClosed, mid-frame EOF raises TruncatedFrameError."""
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        r = sock.recv_into(view[got:], n - got)
        if r == 0:
            if got == 0:
                raise ConnectionClosed("peer closed")
            raise TruncatedFrameError("connection closed mid-frame (%d/%d)" % (got, n))
        got += r
    return bytes(buf)


def recv_into_exact(sock: socket.socket, view: memoryview) -> None:
    got = 0
    n = len(view)
    while got < n:
        r = sock.recv_into(view[got:], n - got)
        if r == 0:
            raise TruncatedFrameError("connection closed mid-frame (%d/%d)" % (got, n))
        got += r


def read_frame(sock: socket.socket, max_frame: int = MAX_FRAME_BYTES) -> bytes:
    raw_len = recv_exact(sock, 4)
    (n,) = _LEN.unpack(raw_len)
    if n > max_frame:
        raise FrameTooLargeError("frame of %d bytes exceeds ceiling %d" % (n, max_frame))
    return recv_exact(sock, n)


class FramedConnection:
    """One framed stream channel over a TCP socket.

    send() is locked by callers that share the connection; this class itself
    performs no locking.
    """

    def __init__(self, sock: socket.socket, max_frame: int = MAX_FRAME_BYTES):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock
        self.max_frame = max_frame

    @classmethod
    def connect(cls, addr: tuple[str, int], timeout: Optional[float] = None) -> "FramedConnection":
        sock = socket.create_connection(addr, timeout=timeout)
        sock.settimeout(None)
        return cls(sock)

    def send_message(self, msg: ControlMessage) -> None:
        self.sock.sendall(encode(msg, self.max_frame))

    def recv_message(self) -> ControlMessage:
        return decode(read_frame(self.sock, self.max_frame))

    def send_raw_frame(self, chunk: bytes | memoryview) -> None:
        self.sock.sendall(_LEN.pack(len(chunk)))
        self.sock.sendall(chunk)

    def recv_raw_frame_into(self, view: memoryview) -> int:
        raw_len = recv_exact(self.sock, 4)
        (n,) = _LEN.unpack(raw_len)
        if n > len(view):
            raise FrameTooLargeError("chunk of %d bytes exceeds window %d" % (n, len(view)))
        recv_into_exact(self.sock, view[:n])
        return n

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def send_bulk(conn: FramedConnection, key: str, data: memoryview, request_id: int = 0) -> None:
    """Stream one segment's bytes: an announce message, then raw chunks of at
    most BULK_CHUNK_BYTES, then a CRC32 trailer frame."""
    total = len(data)
    announce = ControlMessage(
        MsgType.MINION_COPY_PUSH,
        request_id,
        {"key": key, "total_bytes": total},
    )
    conn.send_message(announce)
    crc = 0
    for off in range(0, total, BULK_CHUNK_BYTES):
        chunk = data[off : off + BULK_CHUNK_BYTES]
        crc = zlib.crc32(chunk, crc)
        conn.send_raw_frame(chunk)
    conn.send_raw_frame(_LEN.pack(crc))


def recv_bulk(conn: FramedConnection, total: int, dest: memoryview) -> None:
    """Receive the chunk+trailer tail of a bulk stream into dest.

    Raises WireError on byte-count or checksum mismatch; the caller decides
    what to do with the partially written destination.
    """
    if total > len(dest):
        raise WireError("stream of %d bytes exceeds destination %d" % (total, len(dest)))
    got = 0
    crc = 0
    while got < total:
        window = dest[got : got + BULK_CHUNK_BYTES]
        n = conn.recv_raw_frame_into(window)
        if n == 0:
            raise TruncatedFrameError("empty chunk before stream end")
        crc = zlib.crc32(window[:n], crc)
        got += n
    if got != total:
        raise WireError("stream delivered %d bytes, announced %d" % (got, total))
    trailer = read_frame(conn.sock, conn.max_frame)
    if len(trailer) != 4:
        raise WireError("bad checksum trailer")
    (expected,) = _LEN.unpack(trailer)
    if expected != crc:
        raise WireError("checksum mismatch: trailer %08x, computed %08x" % (expected, crc))


def bulk_chunks(total: int) -> Iterator[tuple[int, int]]:
    for off in range(0, total, BULK_CHUNK_BYTES):
        yield off, min(BULK_CHUNK_BYTES, total - off)


def parse_addr(text: str) -> tuple[str, int]:
    """Parse 'host:port'; raises ValueError on malformed input."""
    if not text or ":" not in text:
        raise ValueError("endpoint must be host:port, got %r" % text)
    host, _, port = text.rpartition(":")
    if not host:
        raise ValueError("endpoint must be host:port, got %r" % text)
    return host, int(port)


def format_addr(addr: tuple[str, int]) -> str:
    return "%s:%d" % addr
