"""Authoritative simulation service.

``SimServer`` is the transport-free core: it owns the world, the client
sessions and the ground-truth delta stream. ``ServerApp`` runs it over TCP
with a wall-clock tick loop that never waits for clients.
"""

from __future__ import annotations

import argparse
import asyncio
import collections
import json
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import proto
from .net import Connection, now_us, parse_addr
from .proto import (
    AckMsg, ByeMsg, ControlCmdMsg, HelloMsg, ProtocolError, Role,
    SensorFrameMsg, StateUpdateBatch, encode_annotations,
)
from .scenario import Scenario, ScenarioError, load_scenario
from .sensor import CameraModel, render_annotations
from .world import ControlCmd, EntityState, World, WorldSnapshot

log = logging.getLogger("hybridsim.server")


@dataclass
class ServerConfig:
    client_addr: str = "127.0.0.1:7400"
    detector_addr: str = "127.0.0.1:7401"
    tick_rate_hz: int | None = None  # None: take the scenario's
    fps: float = 20.0
    padding: bool = False
    render_cost_ms: float = 0.0
    render_mode: str = "sleep"  # or "burn"
    gt_queue_limit: int = 4096
    client_write_limit: int = 1 << 20
    wait_clients: int = 0
    wait_timeout_s: float = 10.0
    duration_s: float | None = None
    metrics_path: str | None = None
    # the event loop wakes up to 1 ms late (epoll rounds timeouts up),
    # so the last stretch before each tick deadline is a blocking timed sleep
    tick_spin_ms: float = 1.0

    def validate(self, tick_rate_hz: int) -> None:
        if self.fps < 1:
            raise ValueError("fps must be >= 1")
        if tick_rate_hz < 2 * self.fps:
            raise ValueError(f"tick rate {tick_rate_hz} Hz must be >= 2 x fps ({self.fps})")
        if self.render_mode not in ("sleep", "burn"):
            raise ValueError("render_mode must be 'sleep' or 'burn'")


@dataclass
class ClientSession:
    client_id: int
    entity_id: int
    fps: float
    last_frame_id: int = 0
    last_cmd: ControlCmdMsg | None = None
    last_cmd_tick: int | None = None
    next_due_us: int = 0
    render_pending: bool = False
    frames_emitted: int = 0
    frames_shed: int = 0
    conn: Connection | None = None
    emitted: list = field(default_factory=list)  # (frame_id, t_render_us)
    render_times: dict = field(default_factory=dict)

    @property
    def period_us(self) -> float:
        return 1e6 / self.fps


class GroundTruthQueue:
    """Bounded FIFO of encoded state batches; drops the oldest when full."""

    def __init__(self, limit: int):
        self.items: collections.deque[StateUpdateBatch] = collections.deque()
        self.limit = limit
        self.dropped = 0
        self.published = 0

    def push(self, batch: StateUpdateBatch) -> None:
        if len(self.items) >= self.limit:
            self.items.popleft()
            self.dropped += 1
        self.items.append(batch)
        self.published += 1

    def pop_all(self) -> list[StateUpdateBatch]:
        out = list(self.items)
        self.items.clear()
        return out


class SimServer:
    def __init__(self, scenario: Scenario, config: ServerConfig | None = None, clock=now_us):
        self.config = config or ServerConfig()
        if self.config.tick_rate_hz and self.config.tick_rate_hz != scenario.tick_rate_hz:
            scenario = replace(scenario, tick_rate_hz=self.config.tick_rate_hz, source="")
        self.config.validate(scenario.tick_rate_hz)
        self.scenario = scenario
        self.camera: CameraModel = scenario.camera
        self.world = World(scenario)
        self.clock = clock
        self.sessions: dict[int, ClientSession] = {}
        self.session_log: dict[int, ClientSession] = {}  # every session ever opened
        self.pending_controls: dict[int, ControlCmd] = {}
        self.gt_queue = GroundTruthQueue(self.config.gt_queue_limit)
        self._published: dict[int, EntityState] = {}
        self.rejected_controls = 0
        self.frames_emitted = 0
        self.frames_shed = 0
        self.applied_controls: list[tuple[int, int, ControlCmd]] = []  # (tick, entity, cmd)

    # ------------------------------------------------------------ sessions
    def open_session(self, client_id: int, entity_id: int | None = None,
                     fps: float | None = None) -> ClientSession:
        taken = {s.entity_id for s in self.sessions.values()}
        free = [e for e in self.world.client_entities() if e not in taken]
        if client_id in self.sessions:
            raise ValueError(f"client {client_id} already connected")
        if entity_id is None:
            if not free:
                raise ValueError("no client-controlled entity available")
            entity_id = free[0]
        elif entity_id not in free:
            raise ValueError(f"entity {entity_id} is not an available client vehicle")
        fps = fps or self.config.fps
        if self.scenario.tick_rate_hz < 2 * fps:
            raise ValueError(f"fps {fps} too high for tick rate {self.scenario.tick_rate_hz}")
        s = ClientSession(client_id, entity_id, fps, next_due_us=self.world.sim_time_us)
        self.sessions[client_id] = s
        self.session_log[client_id] = s
        return s

    def close_session(self, client_id: int) -> None:
        self.sessions.pop(client_id, None)

    # ------------------------------------------------------------ controls
    def ingest_control(self, session: ClientSession, cmd: ControlCmdMsg) -> AckMsg:
        reason = cmd.validate()
        if reason is not None:
            self.rejected_controls += 1
            return AckMsg(AckMsg.REJECTED, cmd.frame_id_ref, reason)
        session.last_cmd = cmd
        session.last_cmd_tick = self.world.tick
        # latest wins until the next tick consumes it
        self.pending_controls[session.entity_id] = ControlCmd(cmd.steering, cmd.throttle, cmd.brake)
        return AckMsg(AckMsg.OK, cmd.frame_id_ref)

    # ------------------------------------------------------------ ticking
    def tick(self) -> WorldSnapshot:
        controls, self.pending_controls = self.pending_controls, {}
        tick = self.world.tick + 1
        for eid in sorted(controls):
            self.applied_controls.append((tick, eid, controls[eid]))
        return self.world.step(controls)

    def publish_ground_truth(self, snapshot: WorldSnapshot) -> StateUpdateBatch | None:
        """Queue every entity whose kinematics changed since the last publication."""
        changed = []
        for eid, st in snapshot.states.items():
            prev = self._published.get(eid)
            if prev is None or not prev.same_kinematics(st):
                changed.append(st)
                self._published[eid] = st
        if not changed:
            return None
        batch = StateUpdateBatch(tuple(changed))
        self.gt_queue.push(batch)
        return batch

    def due_sessions(self, sim_time_us: int) -> list[tuple[ClientSession, int]]:
        """Sessions owing a frame at this instant, with the frame id allotted.

        A session whose previous frame is still in the renderer sheds this one;
        the id is consumed so ids stay monotone with a visible gap.
        """
        out = []
        for s in self.sessions.values():
            if sim_time_us < s.next_due_us:
                continue
            while s.next_due_us <= sim_time_us:
                s.next_due_us += s.period_us
            s.last_frame_id += 1
            if s.render_pending:
                s.frames_shed += 1
                self.frames_shed += 1
                continue
            out.append((s, s.last_frame_id))
        return out

    def render_sensor_frame(self, snapshot: WorldSnapshot, session: ClientSession,
                            frame_id: int | None = None,
                            t_render_us: int | None = None) -> SensorFrameMsg:
        if frame_id is None:
            session.last_frame_id += 1
            frame_id = session.last_frame_id
        me = snapshot.states[session.entity_id]
        pose = self.camera.pose_for(me)
        boxes = render_annotations(
            self.camera, pose,
            ((snapshot.kinds[eid], st) for eid, st in snapshot.states.items()),
            exclude=(session.entity_id,),
        )
        t = self.clock() if t_render_us is None else t_render_us
        return SensorFrameMsg(
            frame_id, snapshot.sim_time_us, t, session.client_id, pose,
            encode_annotations(boxes), proto.PADDING_BYTES if self.config.padding else 0,
        )

    def note_emitted(self, session: ClientSession, frame: SensorFrameMsg) -> None:
        session.frames_emitted += 1
        self.frames_emitted += 1
        session.emitted.append((frame.frame_id, frame.t_render_us))
        session.render_times[frame.frame_id] = frame.t_render_us
        if len(session.render_times) > 512:
            session.render_times.pop(next(iter(session.render_times)))


def _burn_until(deadline: float) -> None:
    while time.perf_counter() < deadline:
        pass


class ServerApp:
    """TCP front-end: client port pushes frames and takes controls; detector
    port streams ground-truth batches."""

    def __init__(self, scenario: Scenario, config: ServerConfig | None = None):
        self.core = SimServer(scenario, config)
        self.config = self.core.config
        self.scenario = self.core.scenario
        self._render_q: asyncio.Queue = asyncio.Queue()
        self._gt_event = asyncio.Event()
        self._detectors: list[Connection] = []
        self._servers: list[asyncio.base_events.Server] = []
        self._conn_tasks: set[asyncio.Task] = set()
        self._clients_ready = asyncio.Event()
        self._render_free_at = 0.0
        self.tick_times_us: list[int] = []
        self.control_ages: list[tuple[int, int, int]] = []
        self.start_us = 0
        self.end_us = 0
        self.running = False

    @property
    def client_port(self) -> int:
        return self._servers[0].sockets[0].getsockname()[1]

    @property
    def detector_port(self) -> int:
        return self._servers[1].sockets[0].getsockname()[1]

    async def start(self) -> None:
        ch, cp = parse_addr(self.config.client_addr)
        dh, dp = parse_addr(self.config.detector_addr)
        self._servers.append(await asyncio.start_server(self._on_client, ch, cp))
        self._servers.append(await asyncio.start_server(self._on_detector, dh, dp))
        log.info("server listening clients=%s:%d detector=%s:%d", ch, self.client_port,
                 dh, self.detector_port)

    def _spawn(self, coro) -> asyncio.Task:
        task = asyncio.ensure_future(coro)
        self._conn_tasks.add(task)
        task.add_done_callback(self._conn_tasks.discard)
        return task

    async def _on_client(self, reader, writer) -> None:
        conn = Connection(reader, writer)
        session = None
        try:
            hello = await conn.recv()
            if not isinstance(hello, HelloMsg) or hello.role != Role.CLIENT:
                conn.send(AckMsg(AckMsg.REJECTED, 0, "expected client Hello"))
                return
            try:
                session = self.core.open_session(
                    hello.client_id,
                    None if hello.entity_id == 0xFFFFFFFF else hello.entity_id,
                    hello.fps or None,
                )
            except ValueError as exc:
                conn.send(AckMsg(AckMsg.REJECTED, 0, str(exc)))
                return
            session.conn = conn
            conn.send(AckMsg(AckMsg.OK, session.entity_id, "session open"))
            if len(self.core.sessions) >= self.config.wait_clients:
                self._clients_ready.set()
            while True:
                msg = await conn.recv()
                if msg is None or isinstance(msg, ByeMsg):
                    break
                if isinstance(msg, ControlCmdMsg):
                    t = now_us()
                    ack = self.core.ingest_control(session, msg)
                    rendered = session.render_times.get(msg.frame_id_ref)
                    if rendered is not None and ack.status == AckMsg.OK:
                        self.control_ages.append((session.client_id, t, t - rendered))
                    conn.send(ack)
                else:
                    log.debug("ignoring %s from client %d", type(msg).__name__, session.client_id)
        except (ProtocolError, ConnectionError) as exc:
            log.warning("dropping client session: %s", exc)
        finally:
            if session is not None:
                self.core.close_session(session.client_id)
            await conn.close()

    async def _on_detector(self, reader, writer) -> None:
        conn = Connection(reader, writer)
        try:
            hello = await conn.recv()
            if not isinstance(hello, HelloMsg) or hello.role != Role.DETECTOR:
                return
            conn.send(AckMsg(AckMsg.OK, 0, "detector stream"))
            self._detectors.append(conn)
            self._gt_event.set()
            while await conn.recv_frame() is not None:
                pass
        except (ProtocolError, ConnectionError) as exc:
            log.warning("detector stream error: %s", exc)
        finally:
            if conn in self._detectors:
                self._detectors.remove(conn)
            await conn.close()

    async def _gt_writer(self) -> None:
        while True:
            await self._gt_event.wait()
            self._gt_event.clear()
            if not self._detectors:
                continue
            for batch in self.core.gt_queue.pop_all():
                for d in list(self._detectors):
                    d.send(batch)
            for d in list(self._detectors):
                try:
                    await d.drain()
                except ConnectionError:
                    pass

    async def _render_worker(self) -> None:
        cost = self.config.render_cost_ms / 1000.0
        loop = asyncio.get_running_loop()
        while True:
            session, frame_id, snapshot, arrival = await self._render_q.get()
            if cost > 0:
                # serialized renderer: a job starts when both it and the renderer are ready
                done_at = max(arrival, self._render_free_at) + cost
                self._render_free_at = done_at
                if self.config.render_mode == "burn":
                    _burn_until(time.perf_counter() + max(0.0, done_at - loop.time()))
                else:
                    delay = done_at - loop.time()
                    if delay > 0:
                        await asyncio.sleep(delay)
            session.render_pending = False
            if session.client_id not in self.core.sessions or session.conn is None:
                continue
            frame = self.core.render_sensor_frame(snapshot, session, frame_id)
            if session.conn.write_buffer_size > self.config.client_write_limit:
                session.frames_shed += 1
                self.core.frames_shed += 1
                continue
            session.conn.send(frame)
            self.core.note_emitted(session, frame)

    def _schedule_frames(self, snapshot: WorldSnapshot, when: float) -> None:
        for session, frame_id in self.core.due_sessions(snapshot.sim_time_us):
            session.render_pending = True
            self._render_q.put_nowait((session, frame_id, snapshot, when))

    async def run(self) -> int:
        loop = asyncio.get_running_loop()
        if not self._servers:
            await self.start()
        helpers = [self._spawn(self._gt_writer()), self._spawn(self._render_worker())]
        if self.config.wait_clients > 0:
            try:
                await asyncio.wait_for(self._clients_ready.wait(), self.config.wait_timeout_s)
            except asyncio.TimeoutError:
                log.warning("starting with %d/%d clients", len(self.core.sessions),
                            self.config.wait_clients)
        duration = self.config.duration_s or self.scenario.duration_s
        n_ticks = int(round(duration * self.scenario.tick_rate_hz))
        dt = self.core.world.dt
        spin = self.config.tick_spin_ms / 1000.0
        self.running = True
        t0 = loop.time()
        self.start_us = now_us()
        snap = self.core.world.snapshot()
        self.core.publish_ground_truth(snap)
        self._gt_event.set()
        self._schedule_frames(snap, t0)
        self.tick_times_us.append(self.start_us)
        for k in range(1, n_ticks + 1):
            deadline = t0 + k * dt
            delay = deadline - loop.time()
            if delay > spin:
                await asyncio.sleep(delay - spin)
            rest = deadline - loop.time()
            if rest > 0:
                # high-resolution sleep; a busy-wait here gets the process
                # preempted for whole timeslices on a shared core
                time.sleep(rest)
            # stamped at the start of the tick, so its own work is not period error
            self.tick_times_us.append(now_us())
            snap = self.core.tick()
            if self.core.publish_ground_truth(snap) is not None:
                self._gt_event.set()
            self._schedule_frames(snap, deadline)
        self.end_us = now_us()
        self.running = False
        await self._shutdown(helpers)
        return 0

    async def _shutdown(self, helpers) -> None:
        # let the renderer and the detector stream drain what is already queued
        for _ in range(200):
            if self._render_q.empty() and not self.core.gt_queue.items:
                break
            self._gt_event.set()
            await asyncio.sleep(0.005)
        for d in list(self._detectors):
            try:
                await d.drain()
            except ConnectionError:
                pass
        for s in list(self.core.sessions.values()):
            if s.conn is not None:
                s.conn.send(ByeMsg("simulation complete"))
        for d in list(self._detectors):
            d.send(ByeMsg("simulation complete"))
        for c in [s.conn for s in self.core.sessions.values() if s.conn] + list(self._detectors):
            try:
                await asyncio.wait_for(c.drain(), 2.0)
            except (ConnectionError, asyncio.TimeoutError):
                pass
        for srv in self._servers:
            srv.close()
        for t in helpers:
            t.cancel()
        await asyncio.sleep(0.05)
        for t in list(self._conn_tasks):
            t.cancel()
        if self.config.metrics_path:
            self.write_metrics(self.config.metrics_path)

    def metrics(self) -> dict:
        sessions = {}
        for s in self.core.session_log.values():
            sessions[str(s.client_id)] = {
                "entity_id": s.entity_id, "fps": s.fps,
                "emitted": s.emitted, "shed": s.frames_shed,
            }
        return {
            "start_us": self.start_us, "end_us": self.end_us,
            "tick_rate_hz": self.scenario.tick_rate_hz,
            "tick_times_us": self.tick_times_us,
            "frames_emitted": self.core.frames_emitted,
            "frames_shed": self.core.frames_shed,
            "gt_published": self.core.gt_queue.published,
            "gt_dropped": self.core.gt_queue.dropped,
            "rejected_controls": self.core.rejected_controls,
            "control_ages": self.control_ages,
            "sessions": sessions,
        }

    def write_metrics(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.metrics()))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridsim-server", description=__doc__)
    p.add_argument("--scenario", required=True, help="scenario file or bundled name")
    p.add_argument("--tick-rate", type=int, default=None)
    p.add_argument("--fps", type=float, default=20.0)
    p.add_argument("--padding", choices=("on", "off"), default=None)
    p.add_argument("--listen-clients", default="127.0.0.1:7400")
    p.add_argument("--listen-detector", default="127.0.0.1:7401")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--render-cost-ms", type=float, default=0.0)
    p.add_argument("--render-mode", choices=("sleep", "burn"), default="sleep")
    p.add_argument("--wait-clients", type=int, default=0)
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--metrics", default=None, help="write run metrics JSON here")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        scenario = load_scenario(args.scenario)
        if args.seed is not None:
            scenario = scenario.with_seed(args.seed)
        padding = proto.padding_from_env() if args.padding is None else args.padding == "on"
        config = ServerConfig(
            client_addr=args.listen_clients, detector_addr=args.listen_detector,
            tick_rate_hz=args.tick_rate, fps=args.fps, padding=padding,
            render_cost_ms=args.render_cost_ms, render_mode=args.render_mode,
            wait_clients=args.wait_clients, duration_s=args.duration,
            metrics_path=args.metrics,
        )

        async def go():
            app = ServerApp(scenario, config)
            return await app.run()

        return asyncio.run(go())
    except (ScenarioError, ValueError) as exc:
        log.error("%s", exc)
        return 1
    except OSError as exc:
        log.error("bind failure: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
