"""Frame pipeline demo: an extractor process feeds frames through a pool
of detector processes into a combinator, all sharing a fixed set of data
items whose ownership rotates extractor -> detector -> combinator ->
extractor. The objects are reused for the whole stream, so a K-worker run
touches exactly K items no matter how many frames flow.

The per-frame work is a deterministic transform, so the combinator's
output digests can be checked against a single-process oracle, and runs
with all processes co-located are byte-identical to runs split across
hosts: the same role code executes, only the configuration differs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys
import time
from pathlib import Path
from typing import Optional

from .. import cluster as cluster_mod
from ..model import UnknownTargetError
from ..sdk import CdiSession, load_config
from . import transforms

EXTRACTOR_ID = 1
COMBINATOR_ID = 100


def detector_id(i: int) -> int:
    return 2 + i


def transfer_when_registered(handle, target: int, deadline: float = 30.0) -> None:
    """Transfer, waiting out the startup window in which the target process
    has not yet registered."""
    end = time.monotonic() + deadline
    while True:
        try:
            handle.cdi_transfer(target)
            return
        except UnknownTargetError:
            if time.monotonic() >= end:
                raise
            time.sleep(0.02)


def use_when_created(session: CdiSession, key: str, deadline: float = 30.0):
    """Bind to a key, waiting out the window before its creator has made it."""
    end = time.monotonic() + deadline
    while True:
        code, handle = session.cdi_use(key)
        if code == 1:
            return handle
        if time.monotonic() >= end:
            raise RuntimeError("use of %r returned %d" % (key, code))
        time.sleep(0.02)


def frame_keys(workers: int) -> list[str]:
    return ["frame-slot-%d" % i for i in range(workers)]


def oracle_digests(frames: int, size: int, seed: int = 0) -> list[str]:
    """What the combinator must emit: transform every frame in order, no
    distribution involved."""
    out = []
    for i in range(frames):
        frame = transforms.pack_frame(i, transforms.frame_payload(i, size, seed))
        out.append(_digest(transforms.detect_frame(frame)))
    return out


def _digest(frame: bytes) -> str:
    return hashlib.sha256(frame).hexdigest()


# -- roles (run one per process) -------------------------------------------


def run_extractor(session: CdiSession, keys: list[str], frames: int, size: int, seed: int) -> None:
    capacity = transforms.frame_capacity(size)
    handles = []
    for i, key in enumerate(keys):
        code, handle = session.cdi_create(key, capacity)
        if code != 1:
            raise RuntimeError("create of %r returned %d" % (key, code))
        handles.append(handle)
    used = [0] * len(keys)
    for i in range(frames):
        slot = i % len(keys)
        handle = handles[slot]
        if used[slot]:
            handle.cdi_access()  # combinator hands the slot back for reuse
        used[slot] += 1
        frame = transforms.pack_frame(i, transforms.frame_payload(i, size, seed))
        handle.cdi_write(0, frame)
        transfer_when_registered(handle, detector_id(slot))
    for slot, handle in enumerate(handles):
        if used[slot]:
            handle.cdi_access()
        handle.cdi_destroy()


def run_detector(session: CdiSession, key: str, rounds: int, to_container: int) -> None:
    handle = use_when_created(session, key)
    for _ in range(rounds):
        handle.cdi_access()
        head = handle.cdi_read(0, transforms.FRAME_HEADER.size)
        frame = handle.cdi_read(0, transforms.frame_bytes_length(head))
        handle.cdi_write(0, transforms.detect_frame(frame))
        transfer_when_registered(handle, to_container)


def run_combinator(session: CdiSession, keys: list[str], frames: int, out_path: str) -> None:
    handles = {key: use_when_created(session, key) for key in keys}
    with open(out_path, "w", encoding="utf-8") as out:
        for i in range(frames):
            handle = handles[keys[i % len(keys)]]
            handle.cdi_access()
            head = handle.cdi_read(0, transforms.FRAME_HEADER.size)
            frame = handle.cdi_read(0, transforms.frame_bytes_length(head))
            index, _ = transforms.unpack_frame(frame)
            if index != i:
                raise RuntimeError("expected frame %d, combinator got %d" % (i, index))
            out.write("%d %s\n" % (i, _digest(frame)))
            transfer_when_registered(handle, EXTRACTOR_ID)


# -- orchestration -----------------------------------------------------------


def _spawn_role(role: str, config_path: Path, extra: list[str]) -> subprocess.Popen:
    env = dict(os.environ)
    env["CDI_APP_CONFIG"] = str(config_path)
    return subprocess.Popen(
        [sys.executable, "-m", "cdi.apps.pipeline", "--role", role] + extra,
        env=env,
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        text=True,
    )


def run_pipeline(
    frames: int,
    workers: int = 5,
    size: int = 64 * 1024,
    topology: str = "single",
    seed: int = 0,
    scratch: Optional[Path] = None,
) -> tuple[list[str], dict]:
    """Run the whole pipeline (infrastructure plus one process per role);
    returns (digest lines, stats)."""
    if topology not in ("single", "multi"):
        raise ValueError("topology must be single or multi")
    if workers < 1:
        raise ValueError("workers must be >= 1")
    hosts = ("hostA",) if topology == "single" else ("hostA", "hostB")
    scratch = scratch or cluster_mod.scratch_dir("cdi-pipeline-")
    keys = frame_keys(workers)
    started = time.perf_counter()
    with cluster_mod.LocalCluster(hosts=hosts) as cluster:

        def host_for(role: str, i: int = 0) -> int:
            if topology == "single":
                return 0
            if role == "extractor":
                return 0
            if role == "combinator":
                return 1
            return i % 2  # detectors alternate hosts

        procs = []
        out_path = scratch / "combinator.out"
        cfg = cluster.write_config(scratch, COMBINATOR_ID, host_for("combinator"))
        procs.append(
            _spawn_role(
                "combinator",
                cfg,
                ["--keys", ",".join(keys), "--frames", str(frames), "--out", str(out_path)],
            )
        )
        for i in range(workers):
            rounds = len(range(i, frames, workers))
            cfg = cluster.write_config(scratch, detector_id(i), host_for("detector", i))
            procs.append(
                _spawn_role(
                    "detector",
                    cfg,
                    ["--key", keys[i], "--rounds", str(rounds), "--to", str(COMBINATOR_ID)],
                )
            )
        cfg = cluster.write_config(scratch, EXTRACTOR_ID, host_for("extractor"))
        procs.append(
            _spawn_role(
                "extractor",
                cfg,
                [
                    "--keys", ",".join(keys),
                    "--frames", str(frames),
                    "--size", str(size),
                    "--seed", str(seed),
                ],
            )
        )
        failures = []
        for proc in procs:
            stdout, stderr = proc.communicate(timeout=600)
            if proc.returncode != 0:
                failures.append((proc.args, proc.returncode, stderr))
        if failures:
            detail = "; ".join("%s rc=%d: %s" % (a, rc, (err or "").strip()[-500:]) for a, rc, err in failures)
            raise RuntimeError("pipeline process failed: %s" % detail)
        digests = out_path.read_text(encoding="utf-8").splitlines() if out_path.exists() else []
        elapsed = time.perf_counter() - started
        stats = {
            "frames": frames,
            "workers": workers,
            "size": size,
            "topology": topology,
            "elapsedSec": round(elapsed, 3),
            "framesPerSec": round(frames / elapsed, 2) if elapsed > 0 else None,
        }
    return digests, stats


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="cdi-pipeline", description=__doc__)
    parser.add_argument("--frames", type=int, default=25)
    parser.add_argument("--workers", type=int, default=5)
    parser.add_argument("--size", type=int, default=64 * 1024, help="frame payload bytes")
    parser.add_argument("--topology", choices=("single", "multi"), default="single")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--stats", action="store_true", help="print run stats to stderr")
    # role mode: internal flags used when this module re-executes itself
    parser.add_argument("--role", choices=("extractor", "detector", "combinator"))
    parser.add_argument("--keys")
    parser.add_argument("--key")
    parser.add_argument("--rounds", type=int)
    parser.add_argument("--to", type=int)
    parser.add_argument("--out")
    args = parser.parse_args(argv)

    if args.role:
        session = CdiSession(load_config())
        try:
            if args.role == "extractor":
                run_extractor(session, args.keys.split(","), args.frames, args.size, args.seed)
            elif args.role == "detector":
                run_detector(session, args.key, args.rounds, args.to)
            else:
                run_combinator(session, args.keys.split(","), args.frames, args.out)
        finally:
            session.close()
        return 0

    digests, stats = run_pipeline(args.frames, args.workers, args.size, args.topology, args.seed)
    for line in digests:
        print(line)
    if args.stats:
        print(json.dumps(stats), file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
