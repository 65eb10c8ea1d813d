"""Single-owner shared data items for cooperating processes.

A controller coordinates ownership, per-host minions hold the storage
segments and enforce access, and applications use the SDK's handle API.
Co-located processes exchange items by flipping access rights over shared
memory; processes on different hosts get a checksummed stream copy, behind
the same API.
"""

from .model import (
    KEY_CONFLICT,
    NO_RESOURCES,
    OK,
    AccessDeniedError,
    CdiError,
    DestroyedWhileWaiting,
    NotOwnerError,
    OutOfBoundsError,
    TransferAborted,
    UnknownKeyError,
    WaitTimeout,
)
from .sdk import AppConfig, CdiHandle, CdiSession, cdi_register, load_config, write_config

__version__ = "0.1.0"

__all__ = [
    "OK",
    "KEY_CONFLICT",
    "NO_RESOURCES",
    "AppConfig",
    "CdiError",
    "CdiHandle",
    "CdiSession",
    "AccessDeniedError",
    "DestroyedWhileWaiting",
    "NotOwnerError",
    "OutOfBoundsError",
    "TransferAborted",
    "UnknownKeyError",
    "WaitTimeout",
    "cdi_register",
    "load_config",
    "write_config",
    "__version__",
]
