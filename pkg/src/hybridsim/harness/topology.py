"""Deployment layouts and per-host launch plans.

A runs every role on every host (independent replicas). B keeps server,
clients and detector on the first host and puts inference on the second;
C swaps the two hosts.
"""

from __future__ import annotations

import shlex
from dataclasses import dataclass, field
from typing import Mapping, Sequence

ROLES = ("server", "inference", "detector", "clients")

LOCAL_HOSTS = ("127.0.0.1", "localhost", "::1")

PORTS = {"clients": 7400, "ground_truth": 7401, "inference": 7402, "estimates": 7403}


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Topology:
    name: str
    # one role -> host map per replica; A has one replica per host
    replicas: tuple[Mapping[str, str], ...]

    def __post_init__(self):
        for i, rep in enumerate(self.replicas):
            missing = [r for r in ROLES if r not in rep]
            if missing:
                raise TopologyError(f"replica {i}: roles without a host: {missing}")
            extra = [r for r in rep if r not in ROLES]
            if extra:
                raise TopologyError(f"replica {i}: unknown roles {extra}")

    @property
    def hosts(self) -> list[str]:
        seen: list[str] = []
        for rep in self.replicas:
            for r in ROLES:
                if rep[r] not in seen:
                    seen.append(rep[r])
        return seen

    def roles_on(self, host: str) -> list[tuple[int, str]]:
        return [(i, r) for i, rep in enumerate(self.replicas) for r in ROLES if rep[r] == host]


def parse_assignment(pairs: Sequence[str]) -> dict[str, str]:
    """``role=host`` items; a role named twice is an error."""
    out: dict[str, str] = {}
    for item in pairs:
        role, sep, host = item.partition("=")
        role, host = role.strip(), host.strip()
        if not sep or not role or not host:
            raise TopologyError(f"expected role=host, got {item!r}")
        if role not in ROLES:
            raise TopologyError(f"unknown role {role!r}; roles are {', '.join(ROLES)}")
        if role in out:
            raise TopologyError(f"role {role!r} assigned more than once")
        out[role] = host
    return out


def make_topology(kind: str, hosts: Sequence[str] = ("127.0.0.1",),
                  assignment: Mapping[str, str] | Sequence[str] | None = None) -> Topology:
    kind = kind.upper()
    hosts = list(hosts)
    if len(set(hosts)) != len(hosts):
        raise TopologyError("hosts must be distinct")
    if kind == "A":
        if not hosts:
            raise TopologyError("topology A needs at least one host")
        return Topology("A", tuple({r: h for r in ROLES} for h in hosts))
    if kind in ("B", "C"):
        if len(hosts) == 1:
            hosts = hosts * 2  # both halves on one machine
        elif len(hosts) != 2:
            raise TopologyError(f"topology {kind} needs two hosts")
        main, infer = (hosts[0], hosts[1]) if kind == "B" else (hosts[1], hosts[0])
        return Topology(kind, ({"server": main, "clients": main, "detector": main,
                                "inference": infer},))
    if kind == "CUSTOM":
        if assignment is None:
            raise TopologyError("custom topology needs a role assignment")
        if not isinstance(assignment, Mapping):
            assignment = parse_assignment(assignment)
        return Topology("custom", (dict(assignment),))
    raise TopologyError(f"unknown topology {kind!r}")


@dataclass
class LaunchCommand:
    host: str
    replica: int
    role: str
    argv: list[str]

    def shell(self) -> str:
        return shlex.join(self.argv)


@dataclass
class PlanOptions:
    scenario: str = "ped-crossing"
    n_clients: int = 1
    duration_s: float | None = None
    fps: float = 20.0
    render_cost_ms: float = 0.0
    models: str | None = None
    out_dir: str = "mismatches"
    ports: dict = field(default_factory=lambda: dict(PORTS))
    python: str = "python3"


def launch_plan(topo: Topology, opts: PlanOptions, bind_any: bool = True) -> list[LaunchCommand]:
    listen = "0.0.0.0" if bind_any else None
    p = opts.ports
    cmds = []
    for i, rep in enumerate(topo.replicas):
        def bind(role_host, port):
            return f"{listen or role_host}:{port}"

        mod = [opts.python, "-m"]
        server = mod + ["hybridsim.server", "--scenario", opts.scenario,
                        "--listen-clients", bind(rep["server"], p["clients"]),
                        "--listen-detector", bind(rep["server"], p["ground_truth"]),
                        "--fps", str(opts.fps), "--wait-clients", str(opts.n_clients),
                        "--render-cost-ms", str(opts.render_cost_ms)]
        if opts.duration_s:
            server += ["--duration", str(opts.duration_s)]
        inference = mod + ["hybridsim.inference", "--scenario", opts.scenario,
                           "--listen", bind(rep["inference"], p["inference"])]
        if opts.models:
            inference += ["--models", opts.models]
        detector = mod + ["hybridsim.detector", "--scenario", opts.scenario,
                          "--connect-gt", f"{rep['server']}:{p['ground_truth']}",
                          "--listen-est", bind(rep["detector"], p["estimates"]),
                          "--out", opts.out_dir if len(topo.replicas) == 1 else f"{opts.out_dir}/{i}"]
        if rep["detector"] != rep["clients"]:
            # report timestamps come from the clients' host clock
            detector.append("--foreign-clock")
        clients = mod + ["hybridsim.client", "--scenario", opts.scenario,
                         "--server", f"{rep['server']}:{p['clients']}",
                         "--inference", f"{rep['inference']}:{p['inference']}",
                         "--detector", f"{rep['detector']}:{p['estimates']}",
                         "--count", str(opts.n_clients)]
        # start order: listeners first, clients last
        for role, argv in (("server", server), ("inference", inference),
                           ("detector", detector), ("clients", clients)):
            cmds.append(LaunchCommand(rep[role], i, role, argv))
    return cmds


def format_plan(topo: Topology, cmds: Sequence[LaunchCommand]) -> str:
    lines = [f"# topology {topo.name}: {len(topo.hosts)} host(s)"]
    for host in topo.hosts:
        roles = ", ".join(r for _, r in topo.roles_on(host))
        lines.append(f"\n[host {host}] roles: {roles}")
        for c in cmds:
            if c.host == host:
                lines.append(f"  {c.shell()}")
    return "\n".join(lines) + "\n"
