"""Deterministic closed loop in virtual time.

The same server, inference, client and detector cores as the networked
stack, wired through an event queue instead of sockets. Inference latency is
drawn from the keyed per-request streams and queued per model with the
configured parallelism, so a (scenario, seed) pair always yields the same
run.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Sequence

from ..client import AIClient, DrivingParams
from ..detector import CornerCaseDetector, MatchCriteria
from ..inference import InferenceService, ModelHandle, ModelSpec
from ..mismatch_log import MismatchLog, MismatchRecord
from ..proto import (
    ControlCmdMsg, EstimateReportMsg, InferRequestMsg, InferResponseMsg, InferStatus, encode_message,
)
from ..scenario import Scenario
from ..server import ServerConfig, SimServer
from ..world import (
    CollisionEvent, ControlCmd, GroundTruthHazard, World, classify_hazard, detect_collisions,
)


class _VirtualQueue:
    """FIFO with ``parallelism`` servers, in virtual microseconds."""

    def __init__(self, handle: ModelHandle):
        self.handle = handle
        self.free_at = [0] * handle.spec.parallelism
        self.starts: list[int] = []  # start times of admitted requests

    def admit(self, arrival: int, service: int) -> tuple[int, int] | None:
        """(start, finish), or None when the waiting line is full."""
        self.starts = [s for s in self.starts if s > arrival]
        earliest = min(self.free_at)
        if earliest > arrival and len(self.starts) >= self.handle.spec.queue_capacity:
            return None
        start = max(arrival, earliest)
        finish = start + service
        self.free_at[self.free_at.index(earliest)] = finish
        if start > arrival:
            self.starts.append(start)
        return start, finish


@dataclass
class LockstepConfig:
    models: Sequence[ModelSpec] | None = None
    params: DrivingParams = field(default_factory=DrivingParams)
    criteria: MatchCriteria = field(default_factory=MatchCriteria)
    window_s: float = 10.0
    debounce_s: float = 2.0
    hop_us: int = 200  # one-way transport delay
    out_dir: str | None = None
    duration_s: float | None = None


@dataclass
class LockstepResult:
    scenario: Scenario
    gt_trace: bytes
    controls: list[tuple[int, int, ControlCmd]]
    detector: CornerCaseDetector
    clients: dict[int, AIClient]
    hazards: dict[int, list[int]]  # entity -> hazard class per tick
    collisions: list[CollisionEvent]
    latencies: dict[str, list[int]]  # model -> request round trips (us)

    @property
    def records(self) -> list[MismatchRecord]:
        return self.detector.records

    def records_for(self, criterion: str) -> list[MismatchRecord]:
        return [r for r in self.detector.records if r.criterion == criterion]


class LockstepRun:
    def __init__(self, scenario: Scenario, config: LockstepConfig | None = None):
        self.config = cfg = config or LockstepConfig()
        self.scenario = scenario
        self.now = 0
        self.server = SimServer(scenario, ServerConfig(fps=scenario.sensor_fps),
                                clock=lambda: self.now)
        self.service = InferenceService.for_scenario(scenario, cfg.models)
        self.queues = {name: _VirtualQueue(h) for name, h in self.service.models.items()}
        sink = MismatchLog(cfg.out_dir) if cfg.out_dir else None
        self.detector = CornerCaseDetector(scenario, cfg.criteria, cfg.window_s, cfg.debounce_s,
                                           sink, clock=lambda: self.now)
        self.clients: dict[int, AIClient] = {}
        self.sessions = {}
        for i, eid in enumerate(scenario.client_entities()):
            cid = i + 1
            core = AIClient(cid, scenario.camera, cfg.params)
            core.entity_id = eid
            self.clients[cid] = core
            self.sessions[cid] = self.server.open_session(cid, eid)
        self._busy: dict[int, bool] = {c: False for c in self.clients}
        self._latest: dict[int, object] = {c: None for c in self.clients}
        self._events: list = []
        self._seq = itertools.count()
        self.latencies: dict[str, list[int]] = {}

    def _at(self, t: int, kind: str, *payload) -> None:
        heapq.heappush(self._events, (t, next(self._seq), kind, payload))

    def _request(self, model: str, cid: int, frame) -> tuple[InferResponseMsg, int]:
        req = InferRequestMsg(model, cid, frame.frame_id, frame.sim_time_us, self.now,
                              frame.camera_pose, frame.annotations)
        arrival = self.now + self.config.hop_us
        handle = self.service.models.get(model)
        if handle is None:
            return InferResponseMsg(InferStatus.UNKNOWN_MODEL, model, frame.frame_id, cid), \
                arrival + self.config.hop_us
        service = round(self.service.sample_latency_ms(handle, req) * 1000)
        slot = self.queues[model].admit(arrival, service)
        if slot is None:
            return InferResponseMsg(InferStatus.OVERLOADED, model, frame.frame_id, cid,
                                    handle.version, kind=handle.spec.kind), \
                arrival + self.config.hop_us
        start, finish = slot
        r = self.service.evaluate(handle, req)
        resp = InferResponseMsg(r.status, r.model, r.frame_id, r.client_id, r.model_version,
                                start - arrival, finish - start, r.kind, r.detections, r.steering)
        done = finish + self.config.hop_us
        self.latencies.setdefault(model, []).append(done - self.now)
        return resp, done

    def _start(self, cid: int, frame) -> None:
        core = self.clients[cid]
        core.on_frame(frame)
        self._busy[cid] = True
        det, t_det = self._request("detector", cid, frame)
        steer, t_steer = self._request("steering", cid, frame)
        self._at(max(t_det, t_steer), "done", cid, frame, det, steer)

    def _handle(self, kind: str, payload) -> None:
        if kind == "frame":
            cid, frame = payload
            if self._busy[cid]:
                self._latest[cid] = frame  # latest wins
            else:
                self._start(cid, frame)
        elif kind == "done":
            cid, frame, det, steer = payload
            core = self.clients[cid]
            cmd, report = core.complete(frame, det, steer, max(self.now, frame.t_render_us + 1),
                                        frame.t_render_us + self.config.hop_us)
            # commands and reports travel as binary32 on the wire
            cmd = ControlCmdMsg.decode(cmd.encode())
            report = EstimateReportMsg.decode(report.encode())
            self._at(self.now + self.config.hop_us, "control", cid, cmd)
            self._at(self.now + self.config.hop_us, "report", report)
            self._busy[cid] = False
            nxt, self._latest[cid] = self._latest[cid], None
            if nxt is not None:
                self._start(cid, nxt)
        elif kind == "control":
            cid, cmd = payload
            self.server.ingest_control(self.sessions[cid], cmd)
        elif kind == "report":
            (report,) = payload
            self.detector.ingest_estimate(report, self.now)

    def _drain(self, until: int) -> None:
        while self._events and self._events[0][0] < until:
            t, _, kind, payload = heapq.heappop(self._events)
            self.now = t
            self._handle(kind, payload)
        self.now = until

    def _publish(self, snap, trace: list[bytes]) -> None:
        batch = self.server.publish_ground_truth(snap)
        self.server.gt_queue.pop_all()
        if batch is not None:
            trace.append(encode_message(batch))
            self.detector.ingest_ground_truth(batch)
        for session, fid in self.server.due_sessions(snap.sim_time_us):
            frame = self.server.render_sensor_frame(snap, session, fid, self.now)
            self.server.note_emitted(session, frame)
            self._at(self.now + self.config.hop_us, "frame", session.client_id, frame)

    def run(self) -> LockstepResult:
        sc = self.scenario
        duration = self.config.duration_s or sc.duration_s
        n_ticks = int(round(duration * sc.tick_rate_hz))
        trace: list[bytes] = []
        ego = [s.entity_id for s in self.sessions.values()]
        hazards: dict[int, list[int]] = {e: [] for e in ego}
        collisions: list[CollisionEvent] = []

        def observe(snap):
            cols = detect_collisions(snap)
            collisions.extend(cols)
            for e in ego:
                hazards[e].append(int(classify_hazard(snap, e, sc.hazard, cols)))

        snap = self.server.world.snapshot()
        observe(snap)
        self._publish(snap, trace)
        for k in range(1, n_ticks + 1):
            self._drain(k * sc.tick_us)
            snap = self.server.tick()
            observe(snap)
            self._publish(snap, trace)
        self._drain(n_ticks * sc.tick_us + 1)
        self.detector.finish()
        return LockstepResult(sc, b"".join(trace), list(self.server.applied_controls),
                              self.detector, self.clients, hazards, collisions, self.latencies)


def run_lockstep(scenario: Scenario, config: LockstepConfig | None = None) -> LockstepResult:
    return LockstepRun(scenario, config).run()


def replay_controls(scenario: Scenario, controls: Sequence[tuple[int, int, ControlCmd]],
                    n_ticks: int | None = None) -> bytes:
    """Ground-truth trace of the world driven open-loop by a recorded control stream."""
    server = SimServer(scenario, ServerConfig(fps=scenario.sensor_fps), clock=lambda: 0)
    by_tick: dict[int, dict[int, ControlCmd]] = {}
    for tick, eid, cmd in controls:
        by_tick.setdefault(tick, {})[eid] = cmd
    n = scenario.n_ticks if n_ticks is None else n_ticks
    out = []
    batch = server.publish_ground_truth(server.world.snapshot())
    if batch is not None:
        out.append(encode_message(batch))
    world: World = server.world
    for k in range(1, n + 1):
        snap = world.step(by_tick.get(k, {}))
        batch = server.publish_ground_truth(snap)
        if batch is not None:
            out.append(encode_message(batch))
    return b"".join(out)


def hazard_name(v: int) -> str:
    return GroundTruthHazard(v).name
