"""Coordination service: the container registry, the authoritative object
directory, and the engine that drives minion directives for create, copy,
transfer, and destroy.

The directory is the single source of truth for ownership; minion-side
owner metadata is cached enforcement state. All mutations for one key are
serialized on that key's lock while minion round trips happen outside any
lock, so operations on distinct keys proceed in parallel and a parked
access wait costs nothing.
"""

from __future__ import annotations

import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Optional

from . import rpc, wire
from .model import (
    KEY_CONFLICT,
    NO_RESOURCES,
    OK,
    BudgetExceededError,
    CdiError,
    CdiObjectState,
    DestroyedWhileWaiting,
    MalformedEndpointError,
    NotInGroupError,
    NotOwnerError,
    NotRegisteredError,
    TransferAborted,
    TransferDecision,
    TransferEvent,
    TransferInFlightError,
    TransferRecord,
    UnknownKeyError,
    UnknownTargetError,
    WaitTimeout,
    advance_transfer,
    validate_container_id,
    validate_key,
    validate_transfer,
)

logger = logging.getLogger(__name__)

DEFAULT_STEP_TIMEOUT = 5.0

# Directive step names as they appear in transfer traces.
STEP_REVOKE_SRC = "RevokeSrc"
STEP_COPY_PUSH = "CopyPush"
STEP_SET_OWNER_SRC = "SetOwnerSrc"
STEP_SET_OWNER_DST = "SetOwnerDst"
STEP_GRANT_DST = "GrantDst"

CROSS_HOST_STEPS = (STEP_REVOKE_SRC, STEP_COPY_PUSH, STEP_SET_OWNER_SRC, STEP_SET_OWNER_DST, STEP_GRANT_DST)
SAME_HOST_STEPS = (STEP_REVOKE_SRC, STEP_SET_OWNER_SRC, STEP_GRANT_DST)


@dataclass(frozen=True)
class Registration:
    container_id: int
    container_addr: str
    host_addr: str


@dataclass
class TransferTrace:
    key: str
    from_container: int
    to_container: int
    same_host: bool
    steps: list[str] = field(default_factory=list)
    aborted: bool = False
    reason: str = ""


class _Waiter:
    __slots__ = ("event", "grant", "error")

    def __init__(self):
        self.event = threading.Event()
        self.grant: Optional[dict[str, Any]] = None
        self.error: Optional[CdiError] = None


class _Entry:
    def __init__(self, creating: bool = True):
        self.lock = threading.Lock()
        self.state: Optional[CdiObjectState] = None
        self.grant_info: Optional[dict[str, Any]] = None
        self.waiters: dict[int, list[_Waiter]] = {}
        self.creating = creating
        self.destroyed = False


class Controller:
    """In-process coordination engine; ControllerServer puts it on the wire."""

    def __init__(
        self,
        audit_log: Optional[str] = None,
        step_timeout: float = DEFAULT_STEP_TIMEOUT,
    ):
        self._registrations: dict[int, Registration] = {}
        self._entries: dict[str, _Entry] = {}
        self._dir_lock = threading.Lock()
        self._channels: dict[str, rpc.RpcChannel] = {}
        self._channels_lock = threading.Lock()
        self._traces: deque[TransferTrace] = deque(maxlen=200_000)
        self._traces_lock = threading.Lock()
        self.step_timeout = step_timeout
        self._audit_file = open(audit_log, "a", encoding="utf-8") if audit_log else None
        self._audit_lock = threading.Lock()

    # -- plumbing ----------------------------------------------------------

    def _registration(self, container: int) -> Registration:
        with self._dir_lock:
            reg = self._registrations.get(container)
        if reg is None:
            raise NotRegisteredError("container %d is not registered" % container)
        return reg

    def _channel(self, host_addr: str) -> rpc.RpcChannel:
        with self._channels_lock:
            ch = self._channels.get(host_addr)
            if ch is None:
                ch = rpc.RpcChannel.connect(host_addr, timeout=self.step_timeout)
                self._channels[host_addr] = ch
            return ch

    def _directive(
        self, host_addr: str, msg_type: wire.MsgType, fields: dict[str, Any]
    ) -> wire.ControlMessage:
        ch = self._channel(host_addr)
        try:
            return ch.request(msg_type, fields, timeout=self.step_timeout)
        except (rpc.ChannelClosed, WaitTimeout):
            with self._channels_lock:
                if self._channels.get(host_addr) is ch:
                    del self._channels[host_addr]
                    ch.close()
            raise

    def _lookup(self, key: str, include_creating: bool = False) -> Optional[_Entry]:
        with self._dir_lock:
            entry = self._entries.get(key)
        if entry is None or (entry.creating and not include_creating):
            return None
        return entry

    def _audit_line(self, key: str, owner_from: int, owner_to: int, phase: str) -> None:
        if self._audit_file is None:
            return
        stamp = datetime.now(timezone.utc).isoformat()
        with self._audit_lock:
            self._audit_file.write("%s %s %d %d %s\n" % (stamp, key, owner_from, owner_to, phase))
            self._audit_file.flush()

    def _grant_fields(
        self, key: str, host: str, capacity: int, container: int, token: bytes, segment: str
    ) -> dict[str, Any]:
        reg = self._registration(container)
        same = reg.host_addr == host
        fields: dict[str, Any] = {
            "key": key,
            "capacity": capacity,
            "token": token,
            "mode": "shm" if same else "remote",
            "minion_addr": host,
        }
        if same:
            fields["segment"] = segment
        return fields

    # -- operations --------------------------------------------------------

    def register(self, container: int, container_addr: str, host_addr: str) -> None:
        """Record (or replace) a container's endpoints.

        Re-registration replaces the previous endpoints so a restarted
        process can resume under its configured id.
        """
        validate_container_id(container)
        for label, addr in (("container", container_addr), ("host", host_addr)):
            try:
                wire.parse_addr(addr)
            except (ValueError, TypeError):
                raise MalformedEndpointError("%s endpoint %r is not host:port" % (label, addr))
        with self._dir_lock:
            self._registrations[container] = Registration(container, container_addr, host_addr)

    def create(self, caller: int, key: str, size: int) -> tuple[int, Optional[dict[str, Any]]]:
        """Create a data item owned by the caller, on the caller's host.

        Returns (1, grant) on success, (0, None) if the key exists, and
        (-1, None) when the item cannot be created, with no partial state
        left behind.
        """
        try:
            validate_key(key)
            reg = self._registration(caller)
        except (ValueError, NotRegisteredError):
            return NO_RESOURCES, None
        if size <= 0:
            return NO_RESOURCES, None
        entry = _Entry(creating=True)
        with self._dir_lock:
            if key in self._entries:
                return KEY_CONFLICT, None
            self._entries[key] = entry
        try:
            self._directive(reg.host_addr, wire.MsgType.MINION_ALLOCATE, {"key": key, "size": size})
        except CdiError as exc:
            with self._dir_lock:
                del self._entries[key]
            if not isinstance(exc, BudgetExceededError):
                logger.warning("allocate %r on %s failed: %s", key, reg.host_addr, exc)
            return NO_RESOURCES, None
        try:
            reply = self._directive(
                reg.host_addr, wire.MsgType.MINION_GRANT, {"key": key, "container": caller}
            )
        except CdiError as exc:
            logger.warning("grant after create of %r failed: %s", key, exc)
            self._try_directive(reg.host_addr, wire.MsgType.MINION_DEALLOCATE, {"key": key})
            with self._dir_lock:
                del self._entries[key]
            return NO_RESOURCES, None
        with entry.lock:
            entry.state = CdiObjectState(
                key=key,
                capacity=size,
                owner=caller,
                container_group={caller},
                host=reg.host_addr,
                granted=caller,
            )
            entry.grant_info = self._grant_fields(
                key, reg.host_addr, size, caller, reply["token"], reply["segment"]
            )
            entry.creating = False
            grant = dict(entry.grant_info)
        self._audit_line(key, -1, caller, "create")
        return OK, grant

    def use(self, caller: int, key: str) -> int:
        """Join the caller to the key's container group; 0 if no such key."""
        self._registration(caller)
        entry = self._lookup(key)
        if entry is None:
            return KEY_CONFLICT
        with entry.lock:
            if entry.destroyed or entry.state is None:
                return KEY_CONFLICT
            entry.state.container_group.add(caller)
        return OK

    def copy(self, caller: int, src_key: str, new_key: str) -> tuple[int, Optional[dict[str, Any]]]:
        """Duplicate an owned item under a new key on the caller's host."""
        reg = self._registration(caller)
        src = self._lookup(src_key)
        if src is None:
            raise UnknownKeyError("no data item %r" % src_key)
        try:
            validate_key(new_key)
        except ValueError:
            return NO_RESOURCES, None
        with src.lock:
            if src.destroyed or src.state is None:
                raise UnknownKeyError("no data item %r" % src_key)
            if src.state.owner != caller:
                raise NotOwnerError("container %d does not own %r" % (caller, src_key))
            if src.state.transfer is not None:
                raise TransferInFlightError("transfer in flight for %r" % src_key)
            capacity = src.state.capacity
            host = src.state.host
        entry = _Entry(creating=True)
        with self._dir_lock:
            if new_key in self._entries:
                return KEY_CONFLICT, None
            self._entries[new_key] = entry
        try:
            self._directive(
                host,
                wire.MsgType.MINION_ALLOCATE,
                {"key": new_key, "size": capacity, "clone_from": src_key},
            )
            reply = self._directive(
                host, wire.MsgType.MINION_GRANT, {"key": new_key, "container": caller}
            )
        except CdiError as exc:
            self._try_directive(host, wire.MsgType.MINION_DEALLOCATE, {"key": new_key})
            with self._dir_lock:
                del self._entries[new_key]
            if not isinstance(exc, BudgetExceededError):
                logger.warning("copy %r -> %r failed: %s", src_key, new_key, exc)
            return NO_RESOURCES, None
        with entry.lock:
            entry.state = CdiObjectState(
                key=new_key,
                capacity=capacity,
                owner=caller,
                container_group={caller},
                host=host,
                granted=caller,
            )
            entry.grant_info = self._grant_fields(
                new_key, host, capacity, caller, reply["token"], reply["segment"]
            )
            entry.creating = False
            grant = dict(entry.grant_info)
        self._audit_line(new_key, -1, caller, "create")
        return OK, grant

    def transfer(self, caller: int, key: str, target: int) -> Optional[dict[str, Any]]:
        """Hand ownership of `key` from caller to target.

        Returns the caller's (unchanged) grant for the self-transfer no-op,
        None otherwise. On any step failure the transfer aborts back to the
        source: ownership and access stay with the caller.
        """
        self._registration(caller)
        entry = self._lookup(key)
        if entry is None:
            raise UnknownKeyError("no data item %r" % key)
        with self._dir_lock:
            target_reg = self._registrations.get(target)
        with entry.lock:
            if entry.destroyed or entry.state is None:
                raise UnknownKeyError("no data item %r" % key)
            state = entry.state
            if state.transfer is not None:
                raise TransferInFlightError("transfer in flight for %r" % key)
            decision = validate_transfer(state.owner, caller, target, target_reg is not None)
            if decision is TransferDecision.DENY_NOT_OWNER:
                raise NotOwnerError("container %d does not own %r" % (caller, key))
            if decision is TransferDecision.DENY_UNREGISTERED_TARGET:
                raise UnknownTargetError("target container %d is unknown" % target)
            if decision is TransferDecision.ALLOW_NOOP_SELF:
                return dict(entry.grant_info) if entry.grant_info else None
            src_host = state.host
            dest_host = target_reg.host_addr
            same_host = dest_host == src_host
            rec = TransferRecord(key, caller, target, same_host)
            state.transfer = rec
            state.container_group.add(target)
        trace = TransferTrace(key, caller, target, same_host)
        try:
            grant_reply = self._run_transfer_steps(entry, rec, trace, src_host, dest_host)
        except CdiError as exc:
            restored = self._abort_transfer(entry, rec, trace, src_host, exc)
            with self._traces_lock:
                self._traces.append(trace)
            aborted = TransferAborted("transfer of %r aborted: %s" % (key, exc))
            aborted.grant_fields = restored
            raise aborted
        with entry.lock:
            state = entry.state
            state.owner = target
            state.granted = target
            state.host = dest_host
            state.transfer = None
            entry.grant_info = self._grant_fields(
                key, dest_host, state.capacity, target, grant_reply["token"], grant_reply["segment"]
            )
            grant = dict(entry.grant_info)
            released = entry.waiters.pop(target, [])
        for waiter in released:
            waiter.grant = dict(grant)
            waiter.event.set()
        with self._traces_lock:
            self._traces.append(trace)
        self._audit_line(key, caller, target, "transfer-same-host" if same_host else "transfer-cross-host")
        if not same_host:
            # Source copy is retained through the hand-off so an abort can
            # roll back; once the destination grant landed it is garbage.
            self._try_directive(src_host, wire.MsgType.MINION_DEALLOCATE, {"key": key})
        return None

    def _run_transfer_steps(
        self,
        entry: _Entry,
        rec: TransferRecord,
        trace: TransferTrace,
        src_host: str,
        dest_host: str,
    ) -> wire.ControlMessage:
        key, target = rec.key, rec.to_container

        def step(name: str, event: TransferEvent, host: str, msg_type: wire.MsgType, fields: dict) -> wire.ControlMessage:
            reply = self._directive(host, msg_type, fields)
            trace.steps.append(name)
            with entry.lock:
                entry.state.transfer = advance_transfer(entry.state.transfer, event)
                if event is TransferEvent.REVOKE_COMPLETE:
                    entry.state.granted = None
                    entry.grant_info = None
            return reply

        step(STEP_REVOKE_SRC, TransferEvent.REVOKE_COMPLETE, src_host, wire.MsgType.MINION_REVOKE, {"key": key})
        if not rec.same_host:
            step(
                STEP_COPY_PUSH,
                TransferEvent.COPY_COMPLETE,
                src_host,
                wire.MsgType.MINION_COPY_PUSH,
                {"key": key, "dest_addr": dest_host},
            )
        step(
            STEP_SET_OWNER_SRC,
            TransferEvent.OWNER_SET_SOURCE,
            src_host,
            wire.MsgType.MINION_SET_OWNER,
            {"key": key, "container": target},
        )
        if not rec.same_host:
            step(
                STEP_SET_OWNER_DST,
                TransferEvent.OWNER_SET_DEST,
                dest_host,
                wire.MsgType.MINION_SET_OWNER,
                {"key": key, "container": target},
            )
        return step(
            STEP_GRANT_DST,
            TransferEvent.GRANT_COMPLETE,
            dest_host if not rec.same_host else src_host,
            wire.MsgType.MINION_GRANT,
            {"key": key, "container": target},
        )

    def _abort_transfer(
        self,
        entry: _Entry,
        rec: TransferRecord,
        trace: TransferTrace,
        src_host: str,
        cause: CdiError,
    ) -> Optional[dict[str, Any]]:
        """Roll a failed transfer back to the source: the source keeps
        ownership and is re-granted access; any staged destination copy is
        discarded. Returns the restored grant fields (None if re-grant
        failed too)."""
        key = rec.key
        trace.aborted = True
        trace.reason = str(cause)
        with entry.lock:
            revoked = entry.state.granted is None
        if not rec.same_host and STEP_REVOKE_SRC in trace.steps:
            # A staged copy may exist even when the copy step failed midway.
            dest_host = self._registration_host_or_none(rec.to_container)
            if dest_host and dest_host != src_host:
                self._try_directive(dest_host, wire.MsgType.MINION_DEALLOCATE, {"key": key})
        restored = None
        if revoked:
            try:
                self._try_directive(src_host, wire.MsgType.MINION_SET_OWNER, {"key": key, "container": rec.from_container})
                reply = self._directive(
                    src_host, wire.MsgType.MINION_GRANT, {"key": key, "container": rec.from_container}
                )
                restored = self._grant_fields(
                    key,
                    src_host,
                    entry.state.capacity,
                    rec.from_container,
                    reply["token"],
                    reply["segment"],
                )
            except CdiError as exc:
                logger.error("abort of %r could not re-grant source: %s", key, exc)
        with entry.lock:
            entry.state.transfer = None
            if restored is not None:
                entry.state.granted = rec.from_container
                entry.grant_info = dict(restored)
        return restored

    def _registration_host_or_none(self, container: int) -> Optional[str]:
        with self._dir_lock:
            reg = self._registrations.get(container)
        return reg.host_addr if reg else None

    def _try_directive(self, host: str, msg_type: wire.MsgType, fields: dict[str, Any]) -> None:
        try:
            self._directive(host, msg_type, fields)
        except CdiError as exc:
            logger.debug("best-effort %s on %s failed: %s", msg_type.name, host, exc)

    def access_wait(
        self, caller: int, key: str, timeout: Optional[float] = None
    ) -> dict[str, Any]:
        """Block until the caller owns `key` with access granted.

        Returns the grant fields. Callers must have joined the container
        group first. A destroy while parked raises DestroyedWhileWaiting;
        an optional client-side timeout raises WaitTimeout.
        """
        self._registration(caller)
        entry = self._lookup(key)
        if entry is None:
            raise UnknownKeyError("no data item %r" % key)
        with entry.lock:
            if entry.destroyed or entry.state is None:
                raise UnknownKeyError("no data item %r" % key)
            state = entry.state
            if caller not in state.container_group:
                raise NotInGroupError("container %d has not joined %r" % (caller, key))
            if state.owner == caller and state.granted == caller and entry.grant_info:
                return dict(entry.grant_info)
            waiter = _Waiter()
            entry.waiters.setdefault(caller, []).append(waiter)
        if not waiter.event.wait(timeout):
            with entry.lock:
                pending = entry.waiters.get(caller, [])
                if waiter in pending:
                    pending.remove(waiter)
                    if not pending:
                        entry.waiters.pop(caller, None)
                    raise WaitTimeout("no ownership of %r within %.1fs" % (key, timeout or 0.0))
            # Lost the race with a fulfiller; fall through to the result.
            waiter.event.wait()
        if waiter.error is not None:
            raise waiter.error
        assert waiter.grant is not None
        return waiter.grant

    def destroy(self, caller: int, key: str) -> None:
        """Tear down an owned item: segment freed, directory entry removed,
        parked waiters errored out. The key becomes creatable again."""
        self._registration(caller)
        entry = self._lookup(key)
        if entry is None:
            raise UnknownKeyError("no data item %r" % key)
        with entry.lock:
            if entry.destroyed or entry.state is None:
                raise UnknownKeyError("no data item %r" % key)
            if entry.state.owner != caller:
                raise NotOwnerError("container %d does not own %r" % (caller, key))
            if entry.state.transfer is not None:
                raise TransferInFlightError("transfer in flight for %r" % key)
            entry.destroyed = True
            host = entry.state.host
            owner = entry.state.owner
            waiter_lists = list(entry.waiters.values())
            entry.waiters.clear()
        with self._dir_lock:
            if self._entries.get(key) is entry:
                del self._entries[key]
        self._try_directive(host, wire.MsgType.MINION_DEALLOCATE, {"key": key})
        err = DestroyedWhileWaiting("data item %r was destroyed" % key)
        for waiters in waiter_lists:
            for waiter in waiters:
                waiter.error = err
                waiter.event.set()
        self._audit_line(key, owner, -1, "destroy")

    # -- diagnostics ---------------------------------------------------------

    def audit(self) -> list[dict[str, Any]]:
        """Consistent per-entry snapshot of the directory."""
        with self._dir_lock:
            entries = list(self._entries.items())
        snapshot = []
        for key, entry in entries:
            with entry.lock:
                state = entry.state
                if entry.creating or entry.destroyed or state is None:
                    continue
                snapshot.append(
                    {
                        "key": key,
                        "capacity": state.capacity,
                        "owner": state.owner,
                        "group": frozenset(state.container_group),
                        "host": state.host,
                        "granted": state.granted,
                        "phase": state.transfer.phase.name if state.transfer else None,
                    }
                )
        return snapshot

    def transfer_traces(self) -> list[TransferTrace]:
        with self._traces_lock:
            return list(self._traces)

    def waiter_count(self, key: str) -> int:
        entry = self._lookup(key)
        if entry is None:
            return 0
        with entry.lock:
            return sum(len(v) for v in entry.waiters.values())

    def registrations(self) -> dict[int, Registration]:
        with self._dir_lock:
            return dict(self._registrations)

    def stop(self) -> None:
        with self._channels_lock:
            channels = list(self._channels.values())
            self._channels.clear()
        for ch in channels:
            ch.close()
        if self._audit_file is not None:
            with self._audit_lock:
                self._audit_file.close()
                self._audit_file = None


class ControllerServer(rpc.MessageServer):
    """Network face of a Controller."""

    def __init__(self, controller: Controller, host: str = "127.0.0.1", port: int = 0):
        super().__init__(host, port)
        self.controller = controller

    def handle(self, ctx: rpc.ConnContext, msg: wire.ControlMessage) -> None:
        c = self.controller
        t = msg.msg_type
        if t == wire.MsgType.REGISTER:
            c.register(msg["container"], msg["container_addr"], msg["host_addr"])
            ctx.reply(msg.request_id, status=OK)
        elif t == wire.MsgType.CREATE:
            code, grant = c.create(msg["container"], msg["key"], msg["size"])
            ctx.reply(msg.request_id, status=code, fields=grant or {})
        elif t == wire.MsgType.USE:
            ctx.reply(msg.request_id, status=c.use(msg["container"], msg["key"]))
        elif t == wire.MsgType.COPY:
            code, grant = c.copy(msg["container"], msg["key"], msg["new_key"])
            ctx.reply(msg.request_id, status=code, fields=grant or {})
        elif t == wire.MsgType.TRANSFER:
            try:
                grant = c.transfer(msg["container"], msg["key"], msg["target"])
            except TransferAborted as exc:
                fields = {"status": rpc.ERROR_STATUS, "error": exc.code, "error_detail": str(exc)}
                if getattr(exc, "grant_fields", None):
                    fields.update(exc.grant_fields)
                ctx.send(wire.ControlMessage(wire.MsgType.REPLY, msg.request_id, fields))
                return
            ctx.reply(msg.request_id, status=OK, fields=grant or {})
        elif t == wire.MsgType.ACCESS_WAIT:
            timeout_ms = msg.get("timeout_ms")
            grant = c.access_wait(
                msg["container"], msg["key"], timeout_ms / 1000.0 if timeout_ms else None
            )
            ctx.reply(msg.request_id, fields=grant, msg_type=wire.MsgType.ACCESS_GRANT_NOTIFY)
        elif t == wire.MsgType.DESTROY:
            c.destroy(msg["container"], msg["key"])
            ctx.reply(msg.request_id, status=OK)
        else:
            raise CdiError("controller cannot handle %s" % t.name)
