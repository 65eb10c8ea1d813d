"""Service entry points: the coordination controller and the per-host
minion agent. Both print one `LISTENING <host:port>` line once ready so
wrappers can pick up ephemeral ports, then serve until interrupted."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from typing import Optional

from .controller import Controller, ControllerServer
from .minion import DEFAULT_BUDGET, Minion, MinionServer
from .wire import parse_addr

CONTROLLER_ADDR_ENV = "CDI_CONTROLLER_ADDR"


def parse_bytes(text: str) -> int:
    text = text.strip().lower()
    for suffix, factor in (("g", 1024**3), ("m", 1024**2), ("k", 1024)):
        if text.endswith(suffix):
            return int(float(text[:-1]) * factor)
    return int(text)


def _split_listen(value: str) -> tuple[str, int]:
    host, port = parse_addr(value)
    return host, port


def _serve_forever() -> None:
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass


def controller_main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="cdi-controller")
    parser.add_argument(
        "--listen",
        default=os.environ.get(CONTROLLER_ADDR_ENV, "127.0.0.1:0"),
        help="HOST:PORT to listen on (env %s)" % CONTROLLER_ADDR_ENV,
    )
    parser.add_argument("--audit-log", help="append one line per ownership change")
    parser.add_argument("--step-timeout", type=float, default=5.0, help="per-directive timeout (s)")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    host, port = _split_listen(args.listen)
    controller = Controller(audit_log=args.audit_log, step_timeout=args.step_timeout)
    server = ControllerServer(controller, host, port).start()
    print("LISTENING %s" % server.addr, flush=True)
    _serve_forever()
    controller.stop()
    server.stop()
    return 0


def minion_main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="cdi-minion")
    parser.add_argument("--listen", default="127.0.0.1:0", help="HOST:PORT to listen on")
    parser.add_argument("--controller", help="controller HOST:PORT (connectivity check)")
    parser.add_argument("--host-id", default="host", help="name of the host this agent manages")
    parser.add_argument("--budget", type=parse_bytes, default=DEFAULT_BUDGET, help="segment budget in bytes (suffixes k/m/g)")
    parser.add_argument("--shm-dir", help="shared-memory directory for segments")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    host, port = _split_listen(args.listen)
    minion = Minion(host_id=args.host_id, budget=args.budget, shm_dir=args.shm_dir)
    server = MinionServer(minion, host, port).start()
    if args.controller:
        import socket

        try:
            socket.create_connection(parse_addr(args.controller), timeout=5).close()
        except OSError as exc:
            print("controller %s unreachable: %s" % (args.controller, exc), file=sys.stderr)
            server.stop()
            return 1
    print("LISTENING %s" % server.addr, flush=True)
    _serve_forever()
    server.stop()
    minion.close()
    return 0
