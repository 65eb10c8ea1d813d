"""Core domain model: data-item identity, ownership rules, and the
transfer phase machine shared by the controller and the minions.

Everything here is pure state; no I/O, no locking. The controller is the
only component that mutates these records, always under its per-key
serialization.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional

MAX_KEY_BYTES = 255

# Operation return codes surfaced to applications. The meaning is
# per-operation: 1 success, 0 key-existence conflict, -1 resource failure.
OK = 1
KEY_CONFLICT = 0
NO_RESOURCES = -1


class CdiError(Exception):
    """Base class for protocol-level failures (distinct from the int codes)."""

    code = "error"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


class NotOwnerError(CdiError):
    code = "not-owner"


class UnknownKeyError(CdiError):
    code = "unknown-key"


class UnknownTargetError(CdiError):
    code = "unknown-target"


class TransferInFlightError(CdiError):
    code = "transfer-in-flight"


class NotInGroupError(CdiError):
    code = "not-in-group"


class DestroyedWhileWaiting(CdiError):
    code = "destroyed-while-waiting"


class AccessDeniedError(CdiError):
    code = "access-denied"


class OutOfBoundsError(CdiError):
    code = "out-of-bounds"


class MalformedEndpointError(CdiError):
    code = "malformed-endpoint"


class NotRegisteredError(CdiError):
    code = "not-registered"


class TransferAborted(CdiError):
    code = "transfer-aborted"


class BudgetExceededError(CdiError):
    code = "budget-exceeded"


class SegmentExistsError(CdiError):
    code = "segment-exists"


class CopyFailedError(CdiError):
    code = "copy-failed"


class ProtocolViolation(CdiError):
    """An event arrived that the ownership state machine cannot accept.

    Signals a bug or a lost message; the enclosing transfer is aborted
    back to the source.
    """

    code = "protocol-violation"


class WaitTimeout(CdiError):
    code = "wait-timeout"


ERROR_CLASSES = {
    cls.code: cls
    for cls in (
        CdiError,
        NotOwnerError,
        UnknownKeyError,
        UnknownTargetError,
        TransferInFlightError,
        NotInGroupError,
        DestroyedWhileWaiting,
        AccessDeniedError,
        OutOfBoundsError,
        MalformedEndpointError,
        NotRegisteredError,
        TransferAborted,
        BudgetExceededError,
        SegmentExistsError,
        CopyFailedError,
        ProtocolViolation,
        WaitTimeout,
    )
}


def error_from_code(code: str, message: str = "") -> CdiError:
    cls = ERROR_CLASSES.get(code, CdiError)
    err = cls(message)
    err.code = code
    return err


def validate_key(key: str) -> str:
    """Check key constraints and return the key unchanged.

    Keys are non-empty strings of at most 255 encoded bytes; uniqueness is
    enforced by the controller directory, not here.
    """
    if not isinstance(key, str) or not key:
        raise ValueError("key must be a non-empty string")
    if len(key.encode("utf-8")) > MAX_KEY_BYTES:
        raise ValueError("key exceeds %d bytes" % MAX_KEY_BYTES)
    return key


def validate_container_id(container: int) -> int:
    if not isinstance(container, int) or isinstance(container, bool) or container < 0:
        raise ValueError("container id must be a non-negative integer")
    return container


class TransferPhase(enum.IntEnum):
    """Phases of one in-flight ownership transfer, in advance order."""

    IDLE = 0
    REVOKED_SOURCE = 1
    COPIED = 2
    OWNER_SET_SOURCE = 3
    OWNER_SET_DEST = 4
    GRANTED_DEST = 5


class TransferEvent(enum.Enum):
    REVOKE_COMPLETE = "revoke-complete"
    COPY_COMPLETE = "copy-complete"
    OWNER_SET_SOURCE = "owner-set-source"
    OWNER_SET_DEST = "owner-set-dest"
    GRANT_COMPLETE = "grant-complete"


# Expected (phase -> event -> next phase) edges. Same-host transfers skip
# the data copy and the destination-side owner update: the segment never
# moves, so the hand-off collapses to revoke, owner flip, grant.
_CROSS_HOST_EDGES = {
    TransferPhase.IDLE: (TransferEvent.REVOKE_COMPLETE, TransferPhase.REVOKED_SOURCE),
    TransferPhase.REVOKED_SOURCE: (TransferEvent.COPY_COMPLETE, TransferPhase.COPIED),
    TransferPhase.COPIED: (TransferEvent.OWNER_SET_SOURCE, TransferPhase.OWNER_SET_SOURCE),
    TransferPhase.OWNER_SET_SOURCE: (TransferEvent.OWNER_SET_DEST, TransferPhase.OWNER_SET_DEST),
    TransferPhase.OWNER_SET_DEST: (TransferEvent.GRANT_COMPLETE, TransferPhase.GRANTED_DEST),
}

_SAME_HOST_EDGES = {
    TransferPhase.IDLE: (TransferEvent.REVOKE_COMPLETE, TransferPhase.REVOKED_SOURCE),
    TransferPhase.REVOKED_SOURCE: (TransferEvent.OWNER_SET_SOURCE, TransferPhase.OWNER_SET_SOURCE),
    TransferPhase.OWNER_SET_SOURCE: (TransferEvent.GRANT_COMPLETE, TransferPhase.GRANTED_DEST),
}


@dataclass(frozen=True)
class TransferRecord:
    """The in-flight state of one ownership transfer for one key."""

    key: str
    from_container: int
    to_container: int
    same_host: bool
    phase: TransferPhase = TransferPhase.IDLE

    def expected_event(self) -> Optional[TransferEvent]:
        edges = _SAME_HOST_EDGES if self.same_host else _CROSS_HOST_EDGES
        edge = edges.get(self.phase)
        return edge[0] if edge else None

    def is_complete(self) -> bool:
        return self.phase == TransferPhase.GRANTED_DEST


def advance_transfer(rec: TransferRecord, event: TransferEvent) -> TransferRecord:
    """Advance a transfer by one step.

    Only the single expected event for the current phase is accepted;
    anything else is a protocol violation and the caller must abort the
    transfer back to the source.
    """
    edges = _SAME_HOST_EDGES if rec.same_host else _CROSS_HOST_EDGES
    edge = edges.get(rec.phase)
    if edge is None or edge[0] is not event:
        raise ProtocolViolation(
            "transfer %s: got %s in phase %s" % (rec.key, event.value, rec.phase.name)
        )
    return replace(rec, phase=edge[1])


class TransferDecision(enum.Enum):
    ALLOW = "allow"
    ALLOW_NOOP_SELF = "allow-noop-self"
    DENY_NOT_OWNER = "deny-not-owner"
    DENY_UNREGISTERED_TARGET = "deny-unregistered-target"


def validate_transfer(owner: int, caller: int, target: int, target_registered: bool) -> TransferDecision:
    """Decide whether `caller` may hand ownership to `target`.

    Only the current owner may transfer. Transfer to self is a permitted
    no-op: the single-owner invariant holds trivially and applications
    should not have to special-case it.
    """
    if caller != owner:
        return TransferDecision.DENY_NOT_OWNER
    if not target_registered:
        return TransferDecision.DENY_UNREGISTERED_TARGET
    if target == caller:
        return TransferDecision.ALLOW_NOOP_SELF
    return TransferDecision.ALLOW


@dataclass
class CdiObjectState:
    """Directory-side view of one data item.

    `granted` mirrors which container currently holds a minion grant; it is
    the value audited for the single-owner invariant. During a transfer
    there may be an interval with no grant holder, never two.
    """

    key: str
    capacity: int
    owner: int
    container_group: set[int] = field(default_factory=set)
    host: str = ""
    granted: Optional[int] = None
    transfer: Optional[TransferRecord] = None

    def check_invariants(self) -> None:
        if self.capacity <= 0:
            raise AssertionError("capacity must be positive: %s" % self.key)
        if self.owner not in self.container_group:
            raise AssertionError("owner %d not in group of %s" % (self.owner, self.key))
