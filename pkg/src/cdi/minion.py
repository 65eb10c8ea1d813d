"""Per-host agent: owns the storage segments backing data items on one
host, enforces per-grant access tokens, and moves segment bytes to peer
agents for cross-host ownership transfers.

Segments are plain files in a shared-memory directory (/dev/shm where
available), mapped with mmap. A co-located process holding a grant maps
the same file and reads/writes it directly; nothing crosses a socket on
that path. Remote access and bulk copies go through the framed message
protocol and are the only paths that touch the per-segment payload byte
counters.
"""

from __future__ import annotations

import hashlib
import hmac
import logging
import mmap
import os
import secrets
import tempfile
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from . import rpc, wire
from .model import (
    OK,
    AccessDeniedError,
    BudgetExceededError,
    CdiError,
    CopyFailedError,
    OutOfBoundsError,
    ProtocolViolation,
    SegmentExistsError,
    UnknownKeyError,
)

logger = logging.getLogger(__name__)

DEFAULT_BUDGET = 1024 * 1024 * 1024  # 1 GiB


def default_shm_dir() -> Path:
    shm = Path("/dev/shm")
    if shm.is_dir() and os.access(shm, os.W_OK):
        return shm
    return Path(tempfile.gettempdir())


@dataclass
class Segment:
    key: str
    capacity: int
    path: Path
    mm: mmap.mmap
    file: Any
    token: Optional[bytes] = None
    granted_to: Optional[int] = None
    cached_owner: Optional[int] = None
    payload_bytes_in: int = 0
    payload_bytes_out: int = 0
    lock: threading.RLock = field(default_factory=threading.RLock)


class Minion:
    """Storage and access-control engine for one host.

    All public methods are thread safe: per-segment state is guarded by the
    segment lock, the segment table and budget by the minion lock. Bulk
    copies hold only the source segment's lock, so control traffic for
    other segments proceeds in parallel.
    """

    def __init__(
        self,
        host_id: str = "host",
        budget: int = DEFAULT_BUDGET,
        shm_dir: Optional[Path] = None,
    ):
        self.host_id = host_id
        self.max_bytes = budget
        self.used_bytes = 0
        self.shm_dir = Path(shm_dir) if shm_dir else default_shm_dir()
        self.shm_dir.mkdir(parents=True, exist_ok=True)
        self._segments: dict[str, Segment] = {}
        self._lock = threading.Lock()
        self._seq = 0
        # Lifetime payload totals; unlike the per-segment counters these
        # survive deallocation, so a post-hoc audit sees all traffic.
        self.total_payload_in = 0
        self.total_payload_out = 0
        # Test hook: when set, the next copy_push flips one payload bit after
        # checksumming, so the receiver must detect the corruption.
        self.corrupt_next_push = False

    # -- storage ----------------------------------------------------------

    def _segment_path(self, key: str) -> Path:
        digest = hashlib.sha1(key.encode("utf-8")).hexdigest()[:12]
        self._seq += 1
        return self.shm_dir / ("cdi-%s-%s-%d.seg" % (self.host_id, digest, self._seq))

    def _get(self, key: str) -> Segment:
        with self._lock:
            seg = self._segments.get(key)
        if seg is None:
            raise UnknownKeyError("no segment for key %r" % key)
        return seg

    def allocate(self, key: str, size: int, clone_from: Optional[str] = None) -> Segment:
        """Reserve a zero-filled segment of exactly `size` bytes.

        With clone_from, the new segment's content is initialized from an
        existing local segment instead (data-item duplication); sizes must
        match. Budget is debited up front and credited back on any failure.
        """
        if size <= 0:
            raise CdiError("segment size must be positive")
        src: Optional[Segment] = None
        with self._lock:
            if key in self._segments:
                raise SegmentExistsError("segment %r already allocated" % key)
            if clone_from is not None:
                src = self._segments.get(clone_from)
                if src is None:
                    raise UnknownKeyError("clone source %r missing" % clone_from)
                if src.capacity != size:
                    raise CdiError("clone size %d != source capacity %d" % (size, src.capacity))
            if self.used_bytes + size > self.max_bytes:
                raise BudgetExceededError(
                    "budget %d of %d used, cannot allocate %d"
                    % (self.used_bytes, self.max_bytes, size)
                )
            self.used_bytes += size
            path = self._segment_path(key)
        try:
            file = open(path, "w+b")
            file.truncate(size)
            mm = mmap.mmap(file.fileno(), size)
        except OSError as exc:
            with self._lock:
                self.used_bytes -= size
            path.unlink(missing_ok=True)
            raise CdiError("segment allocation failed: %s" % exc)
        seg = Segment(key=key, capacity=size, path=path, mm=mm, file=file)
        if src is not None:
            with src.lock:
                seg.mm[:] = src.mm[:]
        with self._lock:
            if key in self._segments:  # lost a race; undo
                self.used_bytes -= size
                mm.close()
                file.close()
                path.unlink(missing_ok=True)
                raise SegmentExistsError("segment %r already allocated" % key)
            self._segments[key] = seg
        return seg

    def deallocate(self, key: str) -> None:
        with self._lock:
            seg = self._segments.pop(key, None)
            if seg is None:
                raise UnknownKeyError("no segment for key %r" % key)
            self.used_bytes -= seg.capacity
        with seg.lock:
            seg.token = None
            seg.granted_to = None
            seg.mm.close()
            seg.file.close()
            seg.path.unlink(missing_ok=True)

    # -- access control ---------------------------------------------------

    def grant(self, key: str, container: int) -> tuple[bytes, str]:
        """Grant exclusive access, returning (token, segment path).

        A grant while another grant is live is a protocol violation: it
        means the coordination layer is about to break the single-owner
        guarantee, so fail loudly instead.
        """
        seg = self._get(key)
        with seg.lock:
            if seg.granted_to is not None:
                raise ProtocolViolation(
                    "segment %r already granted to %d" % (key, seg.granted_to)
                )
            seg.token = secrets.token_bytes(16)
            seg.granted_to = container
            self._chmod(seg, 0o600)
            return seg.token, str(seg.path)

    def revoke(self, key: str) -> None:
        """Invalidate the current grant; idempotent on ungranted segments."""
        seg = self._get(key)
        with seg.lock:
            seg.token = None
            seg.granted_to = None
            self._chmod(seg, 0o000)

    @staticmethod
    def _chmod(seg: Segment, mode: int) -> None:
        # Best-effort OS-level flip; already-mapped processes keep their
        # mapping regardless, the token check is the authoritative gate.
        try:
            os.chmod(seg.path, mode)
        except OSError:
            pass

    def set_owner(self, key: str, owner: int) -> None:
        seg = self._get(key)
        with seg.lock:
            seg.cached_owner = owner

    def _check_token(self, seg: Segment, token: bytes) -> None:
        if seg.token is None or not hmac.compare_digest(seg.token, token):
            raise AccessDeniedError("token not valid for %r" % seg.key)

    # -- data path (remote message access) --------------------------------

    def read(self, key: str, token: bytes, offset: int, length: int, count: bool = False) -> bytes:
        seg = self._get(key)
        with seg.lock:
            self._check_token(seg, token)
            if offset < 0 or length < 0 or offset + length > seg.capacity:
                raise OutOfBoundsError(
                    "read [%d, %d) outside capacity %d" % (offset, offset + length, seg.capacity)
                )
            if count:
                seg.payload_bytes_out += length
                self.total_payload_out += length
            return bytes(seg.mm[offset : offset + length])

    def write(self, key: str, token: bytes, offset: int, payload: bytes, count: bool = False) -> None:
        seg = self._get(key)
        with seg.lock:
            self._check_token(seg, token)
            end = offset + len(payload)
            if offset < 0 or end > seg.capacity:
                raise OutOfBoundsError(
                    "write [%d, %d) outside capacity %d" % (offset, end, seg.capacity)
                )
            if count:
                seg.payload_bytes_in += len(payload)
                self.total_payload_in += len(payload)
            seg.mm[offset:end] = payload

    # -- bulk copy ---------------------------------------------------------

    def copy_push(self, key: str, dest_addr: str) -> None:
        """Stream a revoked segment to a peer agent, checksummed.

        The source segment is retained; the coordination layer orders its
        deallocation once the hand-off is complete, so a failed push can
        roll back to the source copy.
        """
        seg = self._get(key)
        with seg.lock:
            if seg.granted_to is not None:
                raise ProtocolViolation("push of %r while granted to %d" % (key, seg.granted_to))
            corrupt = self.corrupt_next_push
            self.corrupt_next_push = False
            conn = wire.FramedConnection.connect(wire.parse_addr(dest_addr), timeout=10.0)
            try:
                conn.send_message(
                    wire.ControlMessage(
                        wire.MsgType.MINION_COPY_PUSH,
                        0,
                        {"key": key, "total_bytes": seg.capacity},
                    )
                )
                data = memoryview(seg.mm)
                crc = 0
                for off, n in wire.bulk_chunks(seg.capacity):
                    chunk = data[off : off + n]
                    crc = zlib.crc32(chunk, crc)
                    if corrupt and off == 0:
                        bad = bytearray(chunk)
                        bad[n // 2] ^= 0x01
                        chunk = memoryview(bad)
                    conn.send_raw_frame(chunk)
                conn.send_raw_frame(crc.to_bytes(4, "big"))
                reply = conn.recv_message()
                rpc.check_reply(reply)
                if reply["status"] != OK:
                    raise CopyFailedError("peer rejected stream for %r" % key)
                seg.payload_bytes_out += seg.capacity
                self.total_payload_out += seg.capacity
            except (wire.WireError, OSError) as exc:
                raise CopyFailedError("push of %r to %s failed: %s" % (key, dest_addr, exc))
            finally:
                conn.close()

    def receive_push(self, conn: wire.FramedConnection, key: str, total: int) -> None:
        """Accept an incoming segment stream (runs on the connection thread)."""
        with self._lock:
            existing = self._segments.get(key)
        if existing is not None:
            with existing.lock:
                if existing.granted_to is not None:
                    raise ProtocolViolation(
                        "incoming stream for %r which is granted locally" % key
                    )
            self.deallocate(key)
        seg = self.allocate(key, total)
        try:
            with seg.lock:
                wire.recv_bulk(conn, total, memoryview(seg.mm))
                seg.payload_bytes_in += total
                self.total_payload_in += total
        except wire.WireError as exc:
            self.deallocate(key)
            raise CopyFailedError("stream for %r failed: %s" % (key, exc))

    # -- diagnostics -------------------------------------------------------

    def diagnostics(self, key: Optional[str] = None) -> tuple[int, int]:
        if key is not None:
            seg = self._get(key)
            with seg.lock:
                return seg.payload_bytes_in, seg.payload_bytes_out
        return self.total_payload_in, self.total_payload_out

    def grant_snapshot(self) -> dict[str, Optional[int]]:
        """key -> grant holder, for invariant audits."""
        with self._lock:
            segs = list(self._segments.items())
        return {key: seg.granted_to for key, seg in segs}

    def close(self) -> None:
        with self._lock:
            keys = list(self._segments)
        for key in keys:
            try:
                self.deallocate(key)
            except UnknownKeyError:
                pass


class MinionServer(rpc.MessageServer):
    """Network face of a Minion."""

    def __init__(self, minion: Minion, host: str = "127.0.0.1", port: int = 0):
        super().__init__(host, port)
        self.minion = minion

    def handle_inline(self, ctx: rpc.ConnContext, msg: wire.ControlMessage) -> bool:
        # An announce carrying total_bytes opens a bulk stream whose chunk
        # frames follow on this same connection, so it cannot be handed to a
        # worker thread.
        if msg.msg_type == wire.MsgType.MINION_COPY_PUSH:
            if "total_bytes" not in msg.fields:
                return False  # outbound-push directive: blocks, keep it off this thread
            try:
                self.minion.receive_push(ctx.conn, msg["key"], msg["total_bytes"])
                ctx.reply(msg.request_id, status=OK)
            except Exception as exc:
                if not isinstance(exc, CdiError):
                    logger.exception("bulk receive failed")
                try:
                    ctx.reply_error(msg.request_id, exc)
                except OSError:
                    pass
            return True
        # Every other directive is short and never parks, so skipping the
        # dispatch thread saves a context switch per request.
        try:
            self.handle(ctx, msg)
        except Exception as exc:
            if not isinstance(exc, CdiError):
                logger.exception("handler failure for %s", msg.msg_type.name)
            try:
                ctx.reply_error(msg.request_id, exc)
            except OSError:
                pass
        return True

    def handle(self, ctx: rpc.ConnContext, msg: wire.ControlMessage) -> None:
        m = self.minion
        t = msg.msg_type
        fields: dict[str, Any] = {}
        if t == wire.MsgType.MINION_ALLOCATE:
            m.allocate(msg["key"], msg["size"], msg.get("clone_from"))
        elif t == wire.MsgType.MINION_GRANT:
            token, segment = m.grant(msg["key"], msg["container"])
            fields = {"token": token, "segment": segment, "host": m.host_id}
        elif t == wire.MsgType.MINION_REVOKE:
            m.revoke(msg["key"])
        elif t == wire.MsgType.MINION_SET_OWNER:
            m.set_owner(msg["key"], msg["container"])
        elif t == wire.MsgType.MINION_COPY_PUSH:
            m.copy_push(msg["key"], msg["dest_addr"])
        elif t == wire.MsgType.MINION_DEALLOCATE:
            m.deallocate(msg["key"])
        elif t == wire.MsgType.READ:
            data = m.read(msg["key"], msg["token"], msg["offset"], msg["length"], count=True)
            fields = {"payload": data}
        elif t == wire.MsgType.WRITE:
            m.write(msg["key"], msg["token"], msg["offset"], msg["payload"], count=True)
        elif t == wire.MsgType.DIAGNOSTICS:
            bytes_in, bytes_out = m.diagnostics(msg.get("key"))
            fields = {"payload_bytes_in": bytes_in, "payload_bytes_out": bytes_out}
        else:
            raise CdiError("minion cannot handle %s" % t.name)
        ctx.reply(msg.request_id, status=OK, fields=fields)
