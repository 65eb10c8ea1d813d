"""Decentralized workflow orchestrator demo.

A scheduler process tracks workflows and per-worker task queues; worker
processes poll their queues and execute image-style tasks in sequence.
The payload rides a single shared data item whose ownership follows the
work: the scheduler loads the input from the object store once, hands the
item to a worker, and only touches the store again to upload the final
result. A store-roundtrip data plane (download and upload around every
task, the pattern conventional orchestrators use) is available for
comparison; both planes produce byte-identical outputs.

Two scheduling strategies:
  affinity  - all tasks of a workflow stay on one worker, which keeps
              ownership between tasks; exactly two hand-offs per workflow
              (scheduler in, scheduler out).
  metrics   - every task goes to the currently least-loaded worker
              (fewest queued, then fewest running, ties to the lowest
              worker id) with ownership handed worker to worker.
"""

from __future__ import annotations

import argparse
import base64
import hashlib
import itertools
import json
import logging
import os
import socket
import subprocess
import sys
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

from .. import cluster as cluster_mod
from ..sdk import AppConfig, CdiHandle, CdiSession, load_config
from . import transforms
from .store import LocalObjectStore, StoreMissError

logger = logging.getLogger(__name__)

SCHEDULER_ID = 0
DATA_PLANES = ("cdi", "store-roundtrip")


def worker_container_id(i: int) -> int:
    return 10 + i


@dataclass
class WorkerState:
    worker_id: int
    queue: deque = field(default_factory=deque)
    running: int = 0

    def metrics(self) -> tuple[int, int, int]:
        return (len(self.queue), self.running, self.worker_id)


@dataclass
class WorkflowRecord:
    workflow_id: str
    task_names: list[str]
    input_ref: str
    output_ref: str
    data_plane: str
    payload_size: int = 0
    status: str = "Pending"
    step: int = 0
    pinned_worker: Optional[int] = None
    workers_used: list[int] = field(default_factory=list)
    transfers: int = 0
    key: str = ""
    handle: Optional[CdiHandle] = None
    fail_at: Optional[str] = None
    error: Optional[str] = None
    submitted_at: float = field(default_factory=time.perf_counter)
    finished_at: Optional[float] = None
    done: threading.Event = field(default_factory=threading.Event)

    def latency_ms(self) -> Optional[float]:
        if self.finished_at is None:
            return None
        return round((self.finished_at - self.submitted_at) * 1000.0, 3)

    def completion_json(self) -> dict[str, Any]:
        out = {
            "workflowId": self.workflow_id,
            "status": self.status,
            "latencyMs": self.latency_ms(),
            "transfers": self.transfers,
        }
        if self.error:
            out["error"] = self.error
        return out


class Scheduler:
    """Workflow table, worker queues, and the decision loop.

    All scheduling decisions happen under one lock; blocking data-item
    operations (regaining ownership at completion) run on private threads.
    """

    def __init__(
        self,
        config: AppConfig,
        store: LocalObjectStore,
        strategy: str = "affinity",
        data_plane: str = "cdi",
        on_complete: Optional[Callable[[WorkflowRecord], None]] = None,
    ):
        if strategy not in ("affinity", "metrics"):
            raise ValueError("strategy must be affinity or metrics")
        if data_plane not in DATA_PLANES:
            raise ValueError("data plane must be one of %s" % (DATA_PLANES,))
        self.store = store
        self.strategy = strategy
        self.data_plane = data_plane
        self.on_complete = on_complete
        self.session = CdiSession(config)
        self.self_id = config.self_id
        self.workers: dict[int, WorkerState] = {}
        self.workflows: dict[str, WorkflowRecord] = {}
        self._parked: deque[str] = deque()
        self._lock = threading.Lock()
        self._ids = itertools.count(1)
        self._stopping = False

    # -- worker side ------------------------------------------------------

    def register_worker(self, worker_id: int) -> None:
        with self._lock:
            self.workers.setdefault(worker_id, WorkerState(worker_id))
            parked = list(self._parked)
            self._parked.clear()
        for wid in parked:
            self._dispatch_first(self.workflows[wid])

    def poll(self, worker_id: int) -> Optional[dict[str, Any]]:
        with self._lock:
            state = self.workers.get(worker_id)
            if state is None or self._stopping:
                return None
            if not state.queue:
                return None
            task = state.queue.popleft()
            state.running += 1
            return task

    def task_done(self, worker_id: int, workflow_id: str, step: int, ok: bool) -> Optional[int]:
        """Record a completion report; returns the container the reporting
        worker must hand the data item to (None: keep it)."""
        with self._lock:
            state = self.workers.get(worker_id)
            record = self.workflows[workflow_id]
            if record.done.is_set() or record.status == "Finishing":
                # Late report for a workflow already torn down (e.g. a failed
                # entry hand-off unparked the worker with an error).
                if state is not None and state.running > 0:
                    state.running -= 1
                return None
            if not ok:
                if state is not None and state.running > 0:
                    state.running -= 1
                record.error = record.error or ("task %s failed" % record.task_names[step])
                return self._finish_locked(record, failed=True)
            if step + 1 >= len(record.task_names):
                if state is not None and state.running > 0:
                    state.running -= 1
                return self._finish_locked(record, failed=False)
            record.step = step + 1
            if self.strategy == "affinity":
                next_worker = worker_id
            else:
                # The reporter still counts as loaded while the choice is
                # made, so the hand-off spreads to the least-loaded peer.
                next_worker = self._least_loaded_locked()
            if state is not None and state.running > 0:
                state.running -= 1
            self._push_task_locked(record, next_worker)
            if next_worker == worker_id:
                return None
            record.transfers += 1
            return next_worker

    def _finish_locked(self, record: WorkflowRecord, failed: bool) -> Optional[int]:
        record.status = "Finishing"
        if record.data_plane == "cdi":
            record.transfers += 1
            threading.Thread(
                target=self._finalize, args=(record, failed), daemon=True
            ).start()
            return self.self_id
        threading.Thread(target=self._finalize, args=(record, failed), daemon=True).start()
        return None

    def _finalize(self, record: WorkflowRecord, failed: bool) -> None:
        try:
            if record.data_plane == "cdi" and record.handle is not None:
                record.handle.cdi_access()
                if not failed:
                    data = record.handle.cdi_read(0, record.payload_size)
                    self.store.put(record.output_ref, data)
                # A failed workflow's partial result is discarded, never
                # uploaded; either way the item is torn down here.
                record.handle.cdi_destroy()
        except Exception as exc:
            failed = True
            record.error = record.error or str(exc)
            logger.exception("finalize of %s failed", record.workflow_id)
        self._complete(record, "Failed" if failed else "Completed")

    def _complete(self, record: WorkflowRecord, status: str) -> None:
        record.status = status
        record.finished_at = time.perf_counter()
        record.done.set()
        if self.on_complete:
            self.on_complete(record)

    # -- submission side ---------------------------------------------------

    def submit(
        self,
        task_names: Optional[list[str]] = None,
        input_ref: str = "",
        fail_at: Optional[str] = None,
    ) -> str:
        """Start one workflow over the payload at input_ref; returns the
        workflow id. Unknown tasks and store misses are rejected up front."""
        task_names = list(task_names or transforms.DEFAULT_TASK_SEQUENCE)
        if not task_names:
            raise ValueError("workflow needs at least one task")
        for name in task_names:
            if name not in transforms.TASK_TABLES:
                raise ValueError("unknown task %r" % name)
        payload = self.store.get(input_ref)  # raises StoreMissError
        wid = "wf-%d" % next(self._ids)
        record = WorkflowRecord(
            workflow_id=wid,
            task_names=task_names,
            input_ref=input_ref,
            output_ref="%s-out" % wid,
            data_plane=self.data_plane,
            payload_size=len(payload),
            fail_at=fail_at,
            key="item-%s" % wid,
        )
        self.workflows[wid] = record
        if self.data_plane == "cdi":
            code, handle = self.session.cdi_create(record.key, len(payload))
            if code != 1:
                record.error = "create returned %d" % code
                self._complete(record, "Failed")
                return wid
            handle.cdi_write(0, payload)
            record.handle = handle
        with self._lock:
            have_workers = bool(self.workers)
            if not have_workers:
                self._parked.append(wid)
        if have_workers:
            self._dispatch_first(record)
        return wid

    def _least_loaded_locked(self) -> int:
        return min(self.workers.values(), key=WorkerState.metrics).worker_id

    def _push_task_locked(self, record: WorkflowRecord, worker_id: int) -> None:
        step = record.step
        task = {
            "workflow": record.workflow_id,
            "task": record.task_names[step],
            "step": step,
            "key": record.key,
            "data_plane": record.data_plane,
            "in_ref": self._step_ref(record, step),
            "out_ref": self._step_ref(record, step + 1),
            "fail": record.fail_at == record.task_names[step],
        }
        record.workers_used.append(worker_id)
        self.workers[worker_id].queue.append(task)

    def _step_ref(self, record: WorkflowRecord, step: int) -> str:
        if step <= 0:
            return record.input_ref
        if step >= len(record.task_names):
            return record.output_ref
        return "%s-step%d" % (record.workflow_id, step)

    def _dispatch_first(self, record: WorkflowRecord) -> None:
        # Queue the instruction at choice time so concurrent submissions see
        # each other's load; the worker parks in access until the hand-off
        # lands, so instruction-before-transfer ordering is safe.
        with self._lock:
            worker_id = self._least_loaded_locked()
            record.pinned_worker = worker_id
            record.status = "Running"
            self._push_task_locked(record, worker_id)
        if record.data_plane == "cdi":
            try:
                record.handle.cdi_transfer(worker_id)
                record.transfers += 1
            except Exception as exc:
                record.error = "entry hand-off failed: %s" % exc
                try:
                    record.handle.cdi_destroy()  # unparks the worker with an error
                except Exception:
                    logger.exception("could not tear down %s", record.key)
                self._complete(record, "Failed")

    # -- queries -----------------------------------------------------------

    def wait(self, workflow_id: str, timeout: Optional[float] = None) -> WorkflowRecord:
        record = self.workflows[workflow_id]
        if not record.done.wait(timeout):
            raise TimeoutError("workflow %s still %s" % (workflow_id, record.status))
        return record

    def worker_metrics(self) -> list[dict[str, int]]:
        with self._lock:
            return [
                {"workerId": w.worker_id, "queueDepth": len(w.queue), "running": w.running}
                for w in sorted(self.workers.values(), key=lambda s: s.worker_id)
            ]

    def stop(self) -> None:
        with self._lock:
            self._stopping = True
        self.session.close()

    @property
    def stopping(self) -> bool:
        return self._stopping


class SchedulerServer:
    """JSON-lines TCP front of a Scheduler (worker polls and submissions)."""

    def __init__(self, scheduler: Scheduler, host: str = "127.0.0.1", port: int = 0):
        self.scheduler = scheduler
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(32)
        self.addr = "%s:%d" % self._listener.getsockname()[:2]
        self._stopping = threading.Event()

    def start(self) -> "SchedulerServer":
        threading.Thread(target=self._accept_loop, daemon=True).start()
        return self

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                sock, _ = self._listener.accept()
            except OSError:
                break
            threading.Thread(target=self._serve, args=(sock,), daemon=True).start()

    def _serve(self, sock: socket.socket) -> None:
        try:
            with sock, sock.makefile("rwb") as stream:
                for line in stream:
                    try:
                        req = json.loads(line)
                        resp = self._handle(req)
                    except Exception as exc:
                        resp = {"error": str(exc)}
                    stream.write(json.dumps(resp).encode("utf-8") + b"\n")
                    stream.flush()
        except OSError:
            pass

    def _handle(self, req: dict[str, Any]) -> dict[str, Any]:
        sched = self.scheduler
        op = req.get("op")
        if op == "hello":
            sched.register_worker(int(req["worker"]))
            return {"ok": True}
        if op == "poll":
            if sched.stopping:
                return {"stop": True}
            return {"task": sched.poll(int(req["worker"]))}
        if op == "done":
            next_owner = sched.task_done(
                int(req["worker"]), req["workflow"], int(req["step"]), bool(req["ok"])
            )
            return {"next_owner": next_owner}
        if op == "put":
            data = base64.b64decode(req["data"])
            sched.store.put(req["ref"], data)
            return {"ok": True, "size": len(data)}
        if op == "submit":
            try:
                wid = sched.submit(req.get("tasks"), req["input"], req.get("fail_at"))
            except (ValueError, StoreMissError) as exc:
                return {"error": str(exc)}
            return {"workflow": wid}
        if op == "wait":
            record = sched.wait(req["workflow"], req.get("timeout"))
            return record.completion_json()
        if op == "metrics":
            return {"workers": sched.worker_metrics()}
        return {"error": "unknown op %r" % op}

    def stop(self) -> None:
        self._stopping.set()
        try:
            self._listener.close()
        except OSError:
            pass


class SchedulerClient:
    """Line-oriented client used by workers and the submit CLI."""

    def __init__(self, addr: str):
        host, _, port = addr.rpartition(":")
        self._sock = socket.create_connection((host, int(port)), timeout=60)
        self._stream = self._sock.makefile("rwb")
        self._lock = threading.Lock()

    def call(self, **req: Any) -> dict[str, Any]:
        with self._lock:
            self._stream.write(json.dumps(req).encode("utf-8") + b"\n")
            self._stream.flush()
            line = self._stream.readline()
        if not line:
            raise ConnectionError("scheduler connection closed")
        resp = json.loads(line)
        if "error" in resp:
            raise RuntimeError(resp["error"])
        return resp

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


# -- worker role --------------------------------------------------------------


def run_worker(
    worker_id: int,
    scheduler_addr: str,
    store_dir: Optional[str] = None,
    store_latency_ms: float = 5.0,
    poll_interval: float = 0.01,
) -> None:
    """Poll the scheduler queue and execute tasks until told to stop."""
    session = CdiSession(load_config())
    store = LocalObjectStore(store_dir, store_latency_ms) if store_dir else None
    sched = SchedulerClient(scheduler_addr)
    handles: dict[str, CdiHandle] = {}
    sched.call(op="hello", worker=worker_id)
    try:
        while True:
            resp = sched.call(op="poll", worker=worker_id)
            if resp.get("stop"):
                break
            task = resp.get("task")
            if not task:
                time.sleep(poll_interval)
                continue
            ok = True
            try:
                if task["data_plane"] == "cdi":
                    handle = handles.get(task["key"])
                    if handle is None:
                        code, handle = session.cdi_use(task["key"])
                        if code != 1:
                            raise RuntimeError("use of %r returned %d" % (task["key"], code))
                        handles[task["key"]] = handle
                    handle.cdi_access()
                    if task["fail"]:
                        ok = False
                    else:
                        data = handle.cdi_read(0, handle.capacity)
                        handle.cdi_write(0, transforms.apply_task(task["task"], data))
                else:
                    if task["fail"]:
                        ok = False
                    else:
                        data = store.get(task["in_ref"])
                        store.put(task["out_ref"], transforms.apply_task(task["task"], data))
            except Exception:
                logger.exception("task %s failed on worker %d", task, worker_id)
                ok = False
            reply = sched.call(
                op="done", worker=worker_id, workflow=task["workflow"], step=task["step"], ok=ok
            )
            next_owner = reply.get("next_owner")
            if task["data_plane"] == "cdi" and next_owner is not None:
                handle = handles.pop(task["key"], None)
                if handle is not None:
                    handle.cdi_transfer(int(next_owner))
    finally:
        sched.close()
        session.close()


# -- full stack management -----------------------------------------------------


class OrchestratorStack:
    """Cluster, scheduler, and worker processes for one run."""

    def __init__(
        self,
        workers: int = 2,
        strategy: str = "affinity",
        data_plane: str = "cdi",
        store_dir: Optional[str] = None,
        store_latency_ms: float = 5.0,
        hosts: int = 2,
        budget: Optional[int] = None,
        on_complete: Optional[Callable[[WorkflowRecord], None]] = None,
        audit_log: Optional[str] = None,
    ):
        self.scratch = cluster_mod.scratch_dir("cdi-orch-")
        self.store_dir = Path(store_dir) if store_dir else self.scratch / "store"
        self.store = LocalObjectStore(self.store_dir, store_latency_ms)
        kwargs = {"hosts": tuple("host%d" % i for i in range(hosts)), "audit_log": audit_log}
        if budget is not None:
            kwargs["budget"] = budget
        self.cluster = cluster_mod.LocalCluster(**kwargs)
        self.scheduler = Scheduler(
            self.cluster.config_for(SCHEDULER_ID, 0),
            self.store,
            strategy=strategy,
            data_plane=data_plane,
            on_complete=on_complete,
        )
        self.server = SchedulerServer(self.scheduler).start()
        self.workers: list[subprocess.Popen] = []
        for i in range(workers):
            cid = worker_container_id(i)
            cfg_path = self.cluster.write_config(self.scratch, cid, i % hosts)
            env = dict(os.environ)
            env["CDI_APP_CONFIG"] = str(cfg_path)
            self.workers.append(
                subprocess.Popen(
                    [
                        sys.executable, "-m", "cdi.apps.orchestrator",
                        "--role", "worker",
                        "--worker-id", str(cid),
                        "--scheduler", self.server.addr,
                        "--store-dir", str(self.store_dir),
                        "--store-latency-ms", str(store_latency_ms),
                    ],
                    env=env,
                    stdout=subprocess.PIPE,
                    stderr=subprocess.PIPE,
                    text=True,
                )
            )

    def wait_workers_ready(self, count: Optional[int] = None, timeout: float = 30.0) -> None:
        want = count if count is not None else len(self.workers)
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if len(self.scheduler.worker_metrics()) >= want:
                return
            time.sleep(0.02)
        raise TimeoutError("only %d workers registered" % len(self.scheduler.worker_metrics()))

    def stop(self) -> None:
        self.scheduler.stop()  # poll now answers stop
        for proc in self.workers:
            try:
                proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                proc.kill()
        self.server.stop()
        self.cluster.stop()

    def __enter__(self) -> "OrchestratorStack":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def baseline_run(
    data_plane: str,
    payload_size: int,
    workflows: int = 10,
    workers: int = 2,
    strategy: str = "affinity",
    store_latency_ms: float = 5.0,
    task_names: Optional[list[str]] = None,
    seed: int = 0,
    hosts: int = 1,
) -> dict[str, Any]:
    """Run a batch of concurrent workflows on one data plane and measure it.

    Returns latency stats, throughput (workflows/s), and the output digest
    per input index so planes can be compared for identical results. The
    default topology is a single host (the edge-box case where hand-offs
    are pure permission flips); the store-roundtrip plane is host-agnostic
    either way.
    """
    import random

    with OrchestratorStack(
        workers=workers,
        strategy=strategy,
        data_plane=data_plane,
        store_latency_ms=store_latency_ms,
        hosts=hosts,
    ) as stack:
        seeded = LocalObjectStore(stack.store_dir, latency_ms=0)
        inputs = []
        for i in range(workflows):
            ref = "input-%d" % i
            seeded.put(ref, random.Random((seed << 20) | i).randbytes(payload_size))
            inputs.append(ref)
        stack.wait_workers_ready()
        started = time.perf_counter()
        wids: list[Optional[str]] = [None] * len(inputs)

        def submit_one(i: int, ref: str) -> None:
            wids[i] = stack.scheduler.submit(task_names, ref)

        submitters = [
            threading.Thread(target=submit_one, args=(i, ref))
            for i, ref in enumerate(inputs)
        ]
        for t in submitters:
            t.start()
        for t in submitters:
            t.join()
        records = [stack.scheduler.wait(wid, timeout=300) for wid in wids]
        elapsed = time.perf_counter() - started
        failed = [r.workflow_id for r in records if r.status != "Completed"]
        if failed:
            raise RuntimeError("workflows failed: %s" % failed)
        digests = {
            i: hashlib.sha256(seeded.get(r.output_ref)).hexdigest()
            for i, r in enumerate(records)
        }
        return {
            "dataPlane": data_plane,
            "payloadSize": payload_size,
            "workflows": workflows,
            "elapsedSec": elapsed,
            "throughputPerSec": workflows / elapsed if elapsed > 0 else None,
            "latenciesMs": [r.latency_ms() for r in records],
            "transfers": [r.transfers for r in records],
            "digests": digests,
        }


# -- CLI ------------------------------------------------------------------------


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="cdi-orchestrator", description=__doc__)
    parser.add_argument("--role", choices=("worker",), help=argparse.SUPPRESS)
    parser.add_argument("--worker-id", type=int, help=argparse.SUPPRESS)
    parser.add_argument("--scheduler", help="scheduler address (worker role / submit)")
    parser.add_argument("--store-dir", help=argparse.SUPPRESS)
    parser.add_argument("--store-latency-ms", type=float, default=5.0)
    sub = parser.add_subparsers(dest="command")

    serve = sub.add_parser("serve", help="run scheduler, cluster, and workers")
    serve.add_argument("--workers", type=int, default=2)
    serve.add_argument("--strategy", choices=("affinity", "metrics"), default="affinity")
    serve.add_argument("--store-dir", required=True)
    serve.add_argument("--store-latency-ms", type=float, default=5.0)
    serve.add_argument("--data-plane", choices=DATA_PLANES, default="cdi")
    serve.add_argument("--listen-port", type=int, default=0)
    serve.add_argument("--audit-log")

    submit = sub.add_parser("submit", help="submit one workflow and wait")
    submit.add_argument("--tasks", default=",".join(transforms.DEFAULT_TASK_SEQUENCE))
    submit.add_argument("--input", required=True, help="local file with the payload")
    submit.add_argument("--scheduler", required=True, help="scheduler address host:port")

    args = parser.parse_args(argv)

    if args.role == "worker":
        run_worker(
            args.worker_id,
            args.scheduler,
            store_dir=args.store_dir,
            store_latency_ms=args.store_latency_ms,
        )
        return 0

    if args.command == "serve":
        def print_completion(record: WorkflowRecord) -> None:
            print(json.dumps(record.completion_json()), flush=True)

        stack = OrchestratorStack(
            workers=args.workers,
            strategy=args.strategy,
            data_plane=args.data_plane,
            store_dir=args.store_dir,
            store_latency_ms=args.store_latency_ms,
            on_complete=print_completion,
            audit_log=args.audit_log,
        )
        print("LISTENING %s" % stack.server.addr, flush=True)
        try:
            while True:
                time.sleep(1)
        except KeyboardInterrupt:
            pass
        finally:
            stack.stop()
        return 0

    if args.command == "submit":
        payload = Path(args.input).read_bytes()
        client = SchedulerClient(args.scheduler)
        ref = "submit-%s" % hashlib.sha256(payload).hexdigest()[:12]
        client.call(op="put", ref=ref, data=base64.b64encode(payload).decode("ascii"))
        wid = client.call(op="submit", tasks=args.tasks.split(","), input=ref)["workflow"]
        result = client.call(op="wait", workflow=wid)
        print(json.dumps(result))
        client.close()
        return 0 if result.get("status") == "Completed" else 1

    parser.print_help()
    return 2


if __name__ == "__main__":
    sys.exit(main())
