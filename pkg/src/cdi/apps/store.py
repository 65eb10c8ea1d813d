"""Directory-backed object store with injected per-operation latency,
standing in for a remote blob service in the orchestrator demos."""

from __future__ import annotations

import time
from pathlib import Path


class StoreMissError(KeyError):
    pass


class LocalObjectStore:
    """put/get blobs under a directory; every operation sleeps latency_ms
    to model the round trip to a remote store."""

    def __init__(self, root: str | Path, latency_ms: float = 5.0):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.latency_ms = latency_ms

    def _delay(self) -> None:
        if self.latency_ms > 0:
            time.sleep(self.latency_ms / 1000.0)

    def _path(self, ref: str) -> Path:
        if not ref or "/" in ref or ref.startswith("."):
            raise ValueError("bad object ref %r" % ref)
        return self.root / ref

    def put(self, ref: str, data: bytes) -> None:
        self._delay()
        self._path(ref).write_bytes(data)

    def get(self, ref: str) -> bytes:
        self._delay()
        path = self._path(ref)
        if not path.exists():
            raise StoreMissError(ref)
        return path.read_bytes()

    def exists(self, ref: str) -> bool:
        return self._path(ref).exists()

    def delete(self, ref: str) -> None:
        self._delay()
        self._path(ref).unlink(missing_ok=True)
