"""Start and stop a component set, one process per role."""

from __future__ import annotations

import logging
import os
import signal
import subprocess
import sys
import time
from pathlib import Path

from .topology import LOCAL_HOSTS, LaunchCommand, PlanOptions, Topology, launch_plan

log = logging.getLogger("hybridsim.drive")


class DriveError(RuntimeError):
    pass


def local_commands(topo: Topology, opts: PlanOptions) -> list[LaunchCommand]:
    if any(h not in LOCAL_HOSTS for h in topo.hosts):
        raise DriveError("topology names remote hosts; print the plan with --plan and "
                         "start each host's commands there")
    if len(topo.replicas) > 1:
        raise DriveError("a local run drives a single replica")
    opts.python = sys.executable
    return launch_plan(topo, opts, bind_any=False)


def drive(topo: Topology, opts: PlanOptions, log_dir: str | Path | None = None,
          poll_s: float = 0.1) -> int:
    """Run the plan locally until the server finishes or a signal arrives.

    Returns 0 when every component exits cleanly, 2 otherwise.
    """
    cmds = local_commands(topo, opts)
    logs = Path(log_dir) if log_dir else None
    if logs:
        logs.mkdir(parents=True, exist_ok=True)
    procs: list[tuple[LaunchCommand, subprocess.Popen]] = []
    stop = {"sig": None}

    def on_signal(signum, _frame):
        stop["sig"] = signum

    old = {s: signal.signal(s, on_signal) for s in (signal.SIGINT, signal.SIGTERM)}
    env = dict(os.environ, PYTHONUNBUFFERED="1")
    try:
        for c in cmds:
            out = open(logs / f"{c.role}.log", "w") if logs else subprocess.DEVNULL
            procs.append((c, subprocess.Popen(c.argv, stdout=out, stderr=subprocess.STDOUT,
                                              env=env)))
            log.info("started %s (pid %d)", c.role, procs[-1][1].pid)
        server = next(p for c, p in procs if c.role == "server")
        while stop["sig"] is None and server.poll() is None:
            if any(p.poll() not in (None, 0) for _, p in procs):
                break
            time.sleep(poll_s)
        if stop["sig"] is None and server.poll() == 0:
            # normal end: clients and detector leave after the server's Bye
            deadline = time.monotonic() + 20
            for c, p in procs:
                if c.role in ("clients", "detector"):
                    try:
                        p.wait(timeout=max(0.1, deadline - time.monotonic()))
                    except subprocess.TimeoutExpired:
                        pass
    finally:
        for _, p in procs:
            if p.poll() is None:
                p.send_signal(signal.SIGTERM)
        for _, p in procs:
            try:
                p.wait(timeout=5)
            except subprocess.TimeoutExpired:
                p.kill()
                p.wait()
        for s, h in old.items():
            signal.signal(s, h)
    codes = {c.role: p.returncode for c, p in procs}
    log.info("exit codes: %s", codes)
    if stop["sig"] is not None:
        return 0
    return 0 if all(v == 0 for k, v in codes.items() if k != "inference") else 2
