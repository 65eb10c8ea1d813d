"""Desk-scale topology harnesses.

LocalCluster runs the controller and minions as threads in the calling
process (tests sample their state directly); ProcessCluster runs each as
its own OS process, which is the faithful deployment shape and keeps
application byte work from contending with the coordination plane.
"""

from __future__ import annotations

import os
import subprocess
import sys
import tempfile
from pathlib import Path
from typing import Optional

from .controller import Controller, ControllerServer
from .minion import DEFAULT_BUDGET, Minion, MinionServer
from .sdk import AppConfig, write_config


class LocalCluster:
    """Controller and minions for one run; each minion is one host."""

    def __init__(
        self,
        hosts: tuple[str, ...] = ("host0",),
        budget: int = DEFAULT_BUDGET,
        audit_log: Optional[str] = None,
        shm_dir: Optional[str] = None,
        step_timeout: float = 5.0,
    ):
        self.controller = Controller(audit_log=audit_log, step_timeout=step_timeout)
        self.controller_server = ControllerServer(self.controller).start()
        self.minions: list[Minion] = []
        self.minion_servers: list[MinionServer] = []
        for host_id in hosts:
            minion = Minion(host_id=host_id, budget=budget, shm_dir=shm_dir)
            self.minions.append(minion)
            self.minion_servers.append(MinionServer(minion).start())

    @property
    def controller_addr(self) -> str:
        return self.controller_server.addr

    @property
    def minion_addrs(self) -> list[str]:
        return [srv.addr for srv in self.minion_servers]

    def config_for(self, container_id: int, host_index: int = 0) -> AppConfig:
        return AppConfig(
            self_id=container_id,
            controller=self.controller_addr,
            minion=self.minion_servers[host_index].addr,
        )

    def write_config(self, directory: str | Path, container_id: int, host_index: int = 0) -> Path:
        path = Path(directory) / ("container-%d.cfg" % container_id)
        return write_config(path, self.config_for(container_id, host_index))

    def stop(self) -> None:
        self.controller.stop()
        self.controller_server.stop()
        for srv in self.minion_servers:
            srv.stop()
        for minion in self.minions:
            minion.close()

    def __enter__(self) -> "LocalCluster":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def scratch_dir(prefix: str = "cdi-") -> Path:
    return Path(tempfile.mkdtemp(prefix=prefix))
