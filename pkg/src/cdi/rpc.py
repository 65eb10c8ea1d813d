"""Request/reply plumbing over framed connections.

`RpcChannel` multiplexes concurrent requests from many threads over one
socket, matching replies by request id (a parked blocking call therefore
does not stall other callers). `MessageServer` is the accept-loop base the
controller and minion services build on; each request is handled on its
own thread so one blocked handler never stalls a connection.
"""

from __future__ import annotations

import itertools
import logging
import socket
import threading
from typing import Any, Callable, Optional

from . import wire
from .model import CdiError, WaitTimeout, error_from_code

logger = logging.getLogger(__name__)

# Sentinel status for replies that carry a protocol error rather than one of
# the application-level return codes.
ERROR_STATUS = -127


class ChannelClosed(CdiError):
    code = "channel-closed"


class _Slot:
    __slots__ = ("event", "reply")

    def __init__(self):
        self.event = threading.Event()
        self.reply: Optional[wire.ControlMessage] = None


class RpcChannel:
    """Client side of a framed request/reply connection."""

    def __init__(self, conn: wire.FramedConnection):
        self._conn = conn
        self._send_lock = threading.Lock()
        self._pending_lock = threading.Lock()
        self._pending: dict[int, _Slot] = {}
        self._ids = itertools.count(1)
        self._closed = False
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    @classmethod
    def connect(cls, addr: str, timeout: Optional[float] = 10.0) -> "RpcChannel":
        conn = wire.FramedConnection.connect(wire.parse_addr(addr), timeout=timeout)
        return cls(conn)

    @property
    def local_addr(self) -> str:
        return wire.format_addr(self._conn.sock.getsockname()[:2])

    def _read_loop(self) -> None:
        try:
            while True:
                msg = self._conn.recv_message()
                with self._pending_lock:
                    slot = self._pending.pop(msg.request_id, None)
                if slot is None:
                    logger.debug("dropping reply for unknown request %d", msg.request_id)
                    continue
                slot.reply = msg
                slot.event.set()
        except (wire.WireError, OSError):
            pass
        finally:
            self._fail_pending()

    def _fail_pending(self) -> None:
        self._closed = True
        with self._pending_lock:
            slots = list(self._pending.values())
            self._pending.clear()
        for slot in slots:
            slot.event.set()

    def request(
        self,
        msg_type: wire.MsgType,
        fields: Optional[dict[str, Any]] = None,
        timeout: Optional[float] = None,
    ) -> wire.ControlMessage:
        """Send one request and block for its reply.

        Raises the mapped CdiError when the reply carries an error field,
        WaitTimeout when no reply arrives in time, ChannelClosed when the
        connection died.
        """
        if self._closed:
            raise ChannelClosed("channel is closed")
        rid = next(self._ids)
        slot = _Slot()
        with self._pending_lock:
            self._pending[rid] = slot
        msg = wire.ControlMessage(msg_type, rid, dict(fields or {}))
        try:
            with self._send_lock:
                self._conn.send_message(msg)
        except OSError as exc:
            with self._pending_lock:
                self._pending.pop(rid, None)
            raise ChannelClosed(str(exc))
        if not slot.event.wait(timeout):
            with self._pending_lock:
                self._pending.pop(rid, None)
            raise WaitTimeout("no reply to %s within %.1fs" % (msg_type.name, timeout or 0))
        if slot.reply is None:
            raise ChannelClosed("connection closed awaiting %s" % msg_type.name)
        return check_reply(slot.reply)

    def close(self) -> None:
        self._closed = True
        self._conn.close()


def check_reply(reply: wire.ControlMessage) -> wire.ControlMessage:
    err = reply.get("error")
    if err:
        exc = error_from_code(err, reply.get("error_detail", ""))
        exc.reply_fields = dict(reply.fields)  # lets callers recover e.g. a restored grant
        raise exc
    return reply


class ConnContext:
    """Per-connection state handed to request handlers."""

    def __init__(self, conn: wire.FramedConnection, peer: str):
        self.conn = conn
        self.peer = peer
        self.write_lock = threading.Lock()

    def send(self, msg: wire.ControlMessage) -> None:
        with self.write_lock:
            self.conn.send_message(msg)

    def reply(
        self,
        request_id: int,
        status: int = 1,
        fields: Optional[dict[str, Any]] = None,
        msg_type: wire.MsgType = wire.MsgType.REPLY,
    ) -> None:
        payload = dict(fields or {})
        if msg_type == wire.MsgType.REPLY:
            payload["status"] = status
        self.send(wire.ControlMessage(msg_type, request_id, payload))

    def reply_error(self, request_id: int, err: Exception) -> None:
        if isinstance(err, CdiError):
            code, detail = err.code, str(err)
        else:
            code, detail = "internal-error", repr(err)
        self.send(
            wire.ControlMessage(
                wire.MsgType.REPLY,
                request_id,
                {"status": ERROR_STATUS, "error": code, "error_detail": detail},
            )
        )


class MessageServer:
    """Threaded TCP server speaking the framed control protocol.

    Subclasses implement handle(ctx, msg); it runs on a per-request thread
    and must send exactly one reply via ctx. Returning normally without
    replying is a bug surfaced as a hung client, so handlers reply in all
    paths. A subclass may claim a message for inline handling on the
    connection thread (bulk streams) by overriding handle_inline.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(64)
        self.addr = wire.format_addr(self._listener.getsockname()[:2])
        self._accept_thread: Optional[threading.Thread] = None
        self._conns: set[socket.socket] = set()
        self._conns_lock = threading.Lock()
        self._stopping = threading.Event()

    def start(self) -> "MessageServer":
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="%s-accept" % type(self).__name__, daemon=True
        )
        self._accept_thread.start()
        return self

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                sock, peer = self._listener.accept()
            except OSError:
                break
            with self._conns_lock:
                self._conns.add(sock)
            threading.Thread(
                target=self._conn_loop,
                args=(sock, "%s:%d" % peer[:2]),
                daemon=True,
            ).start()

    def _conn_loop(self, sock: socket.socket, peer: str) -> None:
        ctx = ConnContext(wire.FramedConnection(sock), peer)
        try:
            while not self._stopping.is_set():
                try:
                    msg = ctx.conn.recv_message()
                except wire.ConnectionClosed:
                    break
                except (wire.WireError, OSError) as exc:
                    # Corrupt framing poisons the connection; drop it.
                    logger.warning("closing connection %s: %s", peer, exc)
                    break
                if self.handle_inline(ctx, msg):
                    continue
                threading.Thread(
                    target=self._run_handler, args=(ctx, msg), daemon=True
                ).start()
        finally:
            with self._conns_lock:
                self._conns.discard(sock)
            try:
                sock.close()
            except OSError:
                pass

    def _run_handler(self, ctx: ConnContext, msg: wire.ControlMessage) -> None:
        try:
            self.handle(ctx, msg)
        except Exception as exc:  # handler bug or remote failure: report, keep serving
            if not isinstance(exc, CdiError):
                logger.exception("handler failure for %s", msg.msg_type.name)
            try:
                ctx.reply_error(msg.request_id, exc)
            except OSError:
                pass

    def handle_inline(self, ctx: ConnContext, msg: wire.ControlMessage) -> bool:
        return False

    def handle(self, ctx: ConnContext, msg: wire.ControlMessage) -> None:
        raise NotImplementedError

    def stop(self) -> None:
        self._stopping.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._conns_lock:
            conns = list(self._conns)
        for sock in conns:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                sock.close()
            except OSError:
                pass
