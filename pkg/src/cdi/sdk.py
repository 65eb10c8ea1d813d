"""Application-facing API: sessions, handles, and the operation surface
mirroring the data-item contract (create/use/copy/access/transfer/destroy
plus read/write).

A handle hides the transport: with a same-host grant it maps the backing
segment and touches memory directly; with a remote grant it sends
read/write messages to the minion holding the segment. Application code is
identical either way.
"""

from __future__ import annotations

import mmap
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from . import rpc, wire
from .model import (
    KEY_CONFLICT,
    NO_RESOURCES,
    OK,
    CdiError,
    NotOwnerError,
    OutOfBoundsError,
    TransferAborted,
)

CONFIG_ENV = "CDI_APP_CONFIG"


@dataclass(frozen=True)
class AppConfig:
    """Per-process configuration fixed at startup."""

    self_id: int
    controller: str
    minion: str

    def __post_init__(self):
        if self.self_id < 0:
            raise ValueError("self_id must be non-negative")
        wire.parse_addr(self.controller)
        wire.parse_addr(self.minion)


def load_config(path: Optional[str] = None) -> AppConfig:
    """Read a line-based config file (self_id=, controller=, minion=).

    Without an explicit path, the CDI_APP_CONFIG environment variable names
    the file.
    """
    if path is None:
        path = os.environ.get(CONFIG_ENV)
        if not path:
            raise ValueError("no config path given and %s is not set" % CONFIG_ENV)
    values: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, sep, value = line.partition("=")
        if not sep:
            raise ValueError("bad config line: %r" % line)
        values[name.strip()] = value.strip()
    try:
        return AppConfig(
            self_id=int(values["self_id"]),
            controller=values["controller"],
            minion=values["minion"],
        )
    except KeyError as exc:
        raise ValueError("config missing %s" % exc)


def write_config(path: str | Path, cfg: AppConfig) -> Path:
    path = Path(path)
    path.write_text(
        "self_id=%d\ncontroller=%s\nminion=%s\n" % (cfg.self_id, cfg.controller, cfg.minion),
        encoding="utf-8",
    )
    return path


class _Grant:
    """Cached access to one segment: either a local mapping or a remote
    minion session, gated by the current access token."""

    __slots__ = ("mode", "token", "capacity", "segment", "minion_addr", "_mm", "_file")

    def __init__(self, fields: dict[str, Any]):
        self.mode = fields["mode"]
        self.token = fields["token"]
        self.capacity = fields["capacity"]
        self.segment = fields.get("segment")
        self.minion_addr = fields.get("minion_addr")
        self._mm: Optional[mmap.mmap] = None
        self._file = None

    def mapping(self) -> mmap.mmap:
        if self._mm is None:
            self._file = open(self.segment, "r+b")
            self._mm = mmap.mmap(self._file.fileno(), self.capacity)
        return self._mm

    def drop(self) -> None:
        if self._mm is not None:
            self._mm.close()
            self._mm = None
        if self._file is not None:
            self._file.close()
            self._file = None


class CdiSession:
    """One registered container's connection to the coordination service.

    Safe to share across threads for independent handles; a single handle
    is not thread safe.
    """

    def __init__(self, config: AppConfig, timeout: Optional[float] = 30.0):
        self.config = config
        self.self_id = config.self_id
        self.timeout = timeout
        try:
            self._controller = rpc.RpcChannel.connect(config.controller, timeout=10.0)
        except OSError as exc:
            raise ConnectionRefusedError("controller %s unreachable: %s" % (config.controller, exc))
        self._minions: dict[str, rpc.RpcChannel] = {}
        self._minions_lock = threading.Lock()
        self._controller.request(
            wire.MsgType.REGISTER,
            {
                "container": self.self_id,
                "container_addr": self._controller.local_addr,
                "host_addr": config.minion,
            },
            timeout=self.timeout,
        )

    def _minion(self, addr: str) -> rpc.RpcChannel:
        with self._minions_lock:
            ch = self._minions.get(addr)
            if ch is None:
                ch = rpc.RpcChannel.connect(addr, timeout=10.0)
                self._minions[addr] = ch
            return ch

    # -- operations ------------------------------------------------------

    def cdi_create(self, key: str, size: int) -> tuple[int, Optional["CdiHandle"]]:
        """Create a data item; on 1 the returned handle owns it with access
        already granted. 0 means the key exists, -1 resource failure."""
        reply = self._controller.request(
            wire.MsgType.CREATE,
            {"container": self.self_id, "key": key, "size": size},
            timeout=self.timeout,
        )
        code = reply["status"]
        if code != OK:
            return code, None
        handle = CdiHandle(self, key)
        handle._grant = _Grant(reply.fields)
        return OK, handle

    def cdi_use(self, key: str) -> tuple[int, Optional["CdiHandle"]]:
        """Bind to an existing data item; the handle starts without access.
        Returns 0 (and no handle) when the key does not exist."""
        reply = self._controller.request(
            wire.MsgType.USE, {"container": self.self_id, "key": key}, timeout=self.timeout
        )
        code = reply["status"]
        if code != OK:
            return code, None
        return OK, CdiHandle(self, key)

    def close(self) -> None:
        self._controller.close()
        with self._minions_lock:
            minions = list(self._minions.values())
            self._minions.clear()
        for ch in minions:
            ch.close()

    def __enter__(self) -> "CdiSession":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class CdiHandle:
    """A bound data item. Holds the cached grant while this container has
    access; read/write fast-fail locally when it does not."""

    def __init__(self, session: CdiSession, key: str):
        self.session = session
        self.key = key
        self._grant: Optional[_Grant] = None

    @property
    def has_access(self) -> bool:
        return self._grant is not None

    @property
    def capacity(self) -> Optional[int]:
        return self._grant.capacity if self._grant else None

    def _require_grant(self) -> _Grant:
        if self._grant is None:
            raise NotOwnerError("container %d holds no access to %r" % (self.session.self_id, self.key))
        return self._grant

    def cdi_access(self, timeout: Optional[float] = None) -> None:
        """Block until this container owns the item with access granted.

        Immediate when access is already held. The optional timeout is a
        client-side extension; the default matches the blocking contract.
        """
        if self._grant is not None:
            return
        fields: dict[str, Any] = {"container": self.session.self_id, "key": self.key}
        if timeout is not None:
            fields["timeout_ms"] = max(1, int(timeout * 1000))
            rpc_timeout: Optional[float] = timeout + 30.0
        else:
            rpc_timeout = None
        reply = self.session._controller.request(wire.MsgType.ACCESS_WAIT, fields, timeout=rpc_timeout)
        self._grant = _Grant(reply.fields)

    def cdi_transfer(self, target: int) -> None:
        """Hand ownership to `target`. Local access drops immediately; if
        the hand-off aborts, access is restored and the error re-raised."""
        grant = self._grant
        self._grant = None
        if grant is not None:
            grant.drop()
        try:
            reply = self.session._controller.request(
                wire.MsgType.TRANSFER,
                {"container": self.session.self_id, "key": self.key, "target": target},
                timeout=self.session.timeout,
            )
        except TransferAborted as exc:
            fields = getattr(exc, "reply_fields", None)
            if fields and "token" in fields:
                self._grant = _Grant(fields)
            raise
        if "token" in reply.fields:  # self-transfer no-op keeps access
            self._grant = _Grant(reply.fields)

    def cdi_copy(self, new_key: str) -> tuple[int, Optional["CdiHandle"]]:
        """Duplicate this (owned) item under a new key; the copy is owned by
        this container and fully independent afterwards."""
        reply = self.session._controller.request(
            wire.MsgType.COPY,
            {"container": self.session.self_id, "key": self.key, "new_key": new_key},
            timeout=self.session.timeout,
        )
        code = reply["status"]
        if code != OK:
            return code, None
        handle = CdiHandle(self.session, new_key)
        handle._grant = _Grant(reply.fields)
        return OK, handle

    def cdi_destroy(self) -> None:
        self.session._controller.request(
            wire.MsgType.DESTROY,
            {"container": self.session.self_id, "key": self.key},
            timeout=self.session.timeout,
        )
        if self._grant is not None:
            self._grant.drop()
            self._grant = None

    def cdi_read(self, offset: int, length: int) -> bytes:
        grant = self._require_grant()
        if offset < 0 or length < 0 or offset + length > grant.capacity:
            raise OutOfBoundsError(
                "read [%d, %d) outside capacity %d" % (offset, offset + length, grant.capacity)
            )
        if grant.mode == "shm":
            mm = grant.mapping()
            return bytes(mm[offset : offset + length])
        reply = self.session._minion(grant.minion_addr).request(
            wire.MsgType.READ,
            {"key": self.key, "token": grant.token, "offset": offset, "length": length},
            timeout=self.session.timeout,
        )
        return reply["payload"]

    def cdi_write(self, offset: int, payload: bytes) -> None:
        grant = self._require_grant()
        end = offset + len(payload)
        if offset < 0 or end > grant.capacity:
            raise OutOfBoundsError("write [%d, %d) outside capacity %d" % (offset, end, grant.capacity))
        if grant.mode == "shm":
            mm = grant.mapping()
            mm[offset:end] = payload
            return
        self.session._minion(grant.minion_addr).request(
            wire.MsgType.WRITE,
            {"key": self.key, "token": grant.token, "offset": offset, "payload": payload},
            timeout=self.session.timeout,
        )


def cdi_register(config: AppConfig) -> CdiSession:
    """Open a session: connect to the controller and register this
    container's endpoints."""
    return CdiSession(config)
