"""Deterministic byte transforms used by the demo applications.

The pipeline's per-frame "detection" and the orchestrator's image tasks
are stand-ins for real inference: fixed byte maps plus, for frames, an
appended 16-byte label block. Being pure functions of their input, every
distributed run can be checked against a single-process oracle.
"""

from __future__ import annotations

import random
import struct
import zlib

FRAME_HEADER = struct.Struct(">III")  # frame index, body length, crc32 of body
LABEL = struct.Struct(">4sII4s")
LABEL_BYTES = LABEL.size  # 16
LABEL_MAGIC = b"LBL0"
LABEL_TAIL = b"\x00end"

# "Detection" byte map: a fixed affine permutation of byte values.
_DETECT_TABLE = bytes((b * 167 + 89) % 256 for b in range(256))

# Orchestrator task set. Each task is a byte map over the whole payload.
TASK_TABLES = {
    "deblur": bytes(b ^ 0xA5 for b in range(256)),
    "denoise": bytes((b + 13) % 256 for b in range(256)),
    "classify": bytes((b * 31 + 7) % 256 for b in range(256)),
}
TASK_NAMES = tuple(TASK_TABLES)
DEFAULT_TASK_SEQUENCE = ("deblur", "denoise", "classify")


def frame_payload(index: int, size: int, seed: int = 0) -> bytes:
    """Deterministic pseudo-frame content for a given stream position."""
    return random.Random((seed << 32) | index).randbytes(size)


def frame_capacity(payload_size: int) -> int:
    return FRAME_HEADER.size + payload_size + LABEL_BYTES


def pack_frame(index: int, payload: bytes) -> bytes:
    return FRAME_HEADER.pack(index, len(payload), zlib.crc32(payload)) + payload


def unpack_frame(buf: bytes) -> tuple[int, bytes]:
    """Parse and verify a frame; raises ValueError on a corrupt body."""
    if len(buf) < FRAME_HEADER.size:
        raise ValueError("frame shorter than header")
    index, length, crc = FRAME_HEADER.unpack_from(buf, 0)
    body = buf[FRAME_HEADER.size : FRAME_HEADER.size + length]
    if len(body) != length:
        raise ValueError("frame body truncated: %d of %d bytes" % (len(body), length))
    if zlib.crc32(body) != crc:
        raise ValueError("frame %d checksum mismatch" % index)
    return index, body


def detect_frame(frame: bytes) -> bytes:
    """The pipeline's per-frame transform: map the payload bytes and append
    a 16-byte label block, re-headering the frame."""
    index, payload = unpack_frame(frame)
    mapped = payload.translate(_DETECT_TABLE)
    label = LABEL.pack(LABEL_MAGIC, index, zlib.crc32(mapped), LABEL_TAIL)
    body = mapped + label
    return FRAME_HEADER.pack(index, len(body), zlib.crc32(body)) + body


def frame_bytes_length(buf: bytes) -> int:
    """Total frame length (header + body) given a buffer starting with a header."""
    _, length, _ = FRAME_HEADER.unpack_from(buf, 0)
    return FRAME_HEADER.size + length


def apply_task(name: str, data: bytes) -> bytes:
    try:
        table = TASK_TABLES[name]
    except KeyError:
        raise ValueError("unknown task %r" % name)
    return data.translate(table)


def apply_task_sequence(task_names, data: bytes) -> bytes:
    for name in task_names:
        data = apply_task(name, data)
    return data
