"""Example vehicle AI.

Per sensor frame: ask the inference service for detections and a steering
angle, turn detections into object position estimates, pick a driving mode,
send a control command to the server and a state report to the detector.
"""

from __future__ import annotations

import argparse
import asyncio
import collections
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import tomli

from .net import Connection, now_us
from .proto import (
    AckMsg, ByeMsg, ControlCmdMsg, DerivedState, EstimateEntry, EstimateReportMsg, HelloMsg,
    InferRequestMsg, InferResponseMsg, InferStatus, ProtocolError, Role, SensorFrameMsg,
)
from .sensor import CameraModel, Detection, UnresolvableBox, estimate_relative_position
from .world import EntityKind, KindTag, Vec3

log = logging.getLogger("hybridsim.client")

BORDER_EPS_PX = 1e-3


@dataclass(frozen=True)
class DrivingParams:
    cruise_speed: float = 8.0
    d_slow: float = 15.0
    d_stop: float = 5.0
    corridor_halfwidth: float = 2.0
    lookahead_m: float = 10.0
    min_confidence: float = 0.3
    stale_budget: int = 3
    k_throttle: float = 0.1  # per m/s of speed deficit
    k_brake: float = 0.2  # per m/s of speed excess

    def __post_init__(self):
        for f in ("cruise_speed", "d_slow", "d_stop", "corridor_halfwidth", "lookahead_m"):
            if not getattr(self, f) > 0:
                raise ValueError(f"{f} must be positive")
        if not self.d_stop < self.d_slow:
            raise ValueError("d_stop must be < d_slow")
        if not 0 <= self.min_confidence <= 1:
            raise ValueError("min_confidence must be in [0, 1]")
        if self.stale_budget < 0:
            raise ValueError("stale_budget must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "DrivingParams":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown driving parameters: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "DrivingParams":
        return cls.from_dict(tomli.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ObjectEstimate:
    tag: KindTag
    distance: float
    bearing: float
    world_position: Vec3
    confidence: float
    frame_id: int

    @property
    def lateral(self) -> float:
        return self.distance * math.tan(self.bearing)

    def to_entry(self) -> EstimateEntry:
        return EstimateEntry(self.tag, self.distance, self.bearing, self.world_position,
                             self.confidence)


def default_heights() -> dict[KindTag, float]:
    return {t: EntityKind.default(t).real_height for t in KindTag}


def touches_border(det: Detection, camera: CameraModel) -> bool:
    """Clipped boxes cannot be ranged from their height."""
    W, H = camera.image_width_px, camera.image_height_px
    return (det.u_min <= BORDER_EPS_PX or det.v_min <= BORDER_EPS_PX
            or det.u_min + det.b >= W - BORDER_EPS_PX or det.v_min + det.h >= H - BORDER_EPS_PX)


def perceive(frame: SensorFrameMsg, detections: Sequence[Detection], camera: CameraModel,
             params: DrivingParams = DrivingParams(),
             heights: dict[KindTag, float] | None = None) -> tuple[list[ObjectEstimate], int]:
    """Estimates for confident detections, and the count of boxes skipped as
    unresolvable."""
    heights = heights or default_heights()
    pose = frame.camera_pose
    ground_z = pose.position.z - camera.mount_offset.z
    out, skipped = [], 0
    for det in detections:
        if det.confidence < params.min_confidence:
            continue
        if touches_border(det, camera):
            skipped += 1
            continue
        try:
            rel = estimate_relative_position(camera, det, heights[det.tag])
        except UnresolvableBox:
            skipped += 1
            continue
        out.append(ObjectEstimate(det.tag, rel.distance, rel.bearing,
                                  rel.world_position(pose, ground_z), det.confidence,
                                  frame.frame_id))
    return out, skipped


def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


def speed_control(target: float, speed: float | None, params: DrivingParams) -> tuple[float, float]:
    """(throttle, brake) driving ``speed`` toward ``target``."""
    if speed is None:
        return 0.0, 0.0
    err = target - speed
    if err >= 0:
        return _clamp01(params.k_throttle * err), 0.0
    return 0.0, _clamp01(-params.k_brake * err)


def nearest_in_corridor(estimates: Sequence[ObjectEstimate], halfwidth: float):
    best = None
    for e in estimates:
        if e.distance > 0 and abs(e.lateral) < halfwidth:
            if best is None or e.distance < best.distance:
                best = e
    return best


def slow_scale(distance: float, params: DrivingParams) -> float:
    return min(1.0, max(0.0, (distance - params.d_stop) / (params.d_slow - params.d_stop)))


def decide(estimates: Sequence[ObjectEstimate], steering_angle: float | None,
           params: DrivingParams = DrivingParams(), speed: float | None = 0.0,
           held_steering: float = 0.0, frame_id: int = 0) -> tuple[DerivedState, ControlCmdMsg]:
    """Driving mode and command for one frame.

    SlowDown scales the speed target by the distance fraction between d_stop
    and d_slow, so from standstill the throttle scales by the same factor.
    """
    steer = held_steering if steering_angle is None else steering_angle
    obj = nearest_in_corridor(estimates, params.corridor_halfwidth)
    if obj is not None and obj.distance < params.d_stop:
        return DerivedState.STOP, ControlCmdMsg(frame_id, held_steering, 0.0, 1.0)
    if obj is not None and obj.distance < params.d_slow:
        target = params.cruise_speed * slow_scale(obj.distance, params)
        throttle, brake = speed_control(target, speed, params)
        return DerivedState.SLOW_DOWN, ControlCmdMsg(frame_id, steer, throttle, brake)
    throttle, brake = speed_control(params.cruise_speed, speed, params)
    return DerivedState.SAFE_TO_DRIVE, ControlCmdMsg(frame_id, steer, throttle, brake)


@dataclass
class FrameRecord:
    frame_id: int
    sim_time_us: int
    t_render_us: int
    t_received_us: int
    t_estimate_us: int
    state: int
    n_estimates: int
    detect_ok: bool
    steer_ok: bool


class AIClient:
    """Decision pipeline without transport; the caller supplies the model
    responses for each frame."""

    def __init__(self, client_id: int, camera: CameraModel | None = None,
                 params: DrivingParams | None = None, heights: dict | None = None):
        self.client_id = client_id
        self.entity_id = 0
        self.camera = camera or CameraModel()
        self.params = params or DrivingParams()
        self.heights = heights or default_heights()
        self.last_estimates: list[ObjectEstimate] | None = None
        self.stale_frames = 0
        self.steering = 0.0
        self.speed: float | None = None
        self._prev_pose = None
        self.state = DerivedState.SAFE_TO_DRIVE
        self.transitions: list[tuple[int, int, int]] = []  # (sim_time_us, from, to)
        self.received: collections.deque[int] = collections.deque(maxlen=4096)
        self.skipped_boxes = 0
        self.records: list[FrameRecord] = []

    def on_frame(self, frame: SensorFrameMsg) -> None:
        """Note a received frame and update the ego speed from pose motion."""
        self.received.append(frame.frame_id)
        pose = frame.camera_pose
        if self._prev_pose is not None:
            prev, t_prev = self._prev_pose
            dt = (frame.sim_time_us - t_prev) / 1e6
            if dt > 0:
                self.speed = (pose.position - prev.position).planar_norm() / dt
        self._prev_pose = (pose, frame.sim_time_us)

    def complete(self, frame: SensorFrameMsg, detect: InferResponseMsg | None,
                 steer: InferResponseMsg | None, t_estimate_us: int,
                 t_received_us: int = 0) -> tuple[ControlCmdMsg, EstimateReportMsg]:
        detect_ok = detect is not None and detect.status == InferStatus.OK
        steer_ok = steer is not None and steer.status == InferStatus.OK
        if steer_ok:
            steering = steer.steering
        else:
            steering = None
        if detect_ok:
            estimates, skipped = perceive(frame, detect.detections, self.camera, self.params,
                                          self.heights)
            self.skipped_boxes += skipped
            self.last_estimates = estimates
            self.stale_frames = 0
        else:
            self.stale_frames += 1
            estimates = self.last_estimates
        if estimates is None or self.stale_frames > self.params.stale_budget:
            # perception starved: fail safe
            state = DerivedState.STOP
            cmd = ControlCmdMsg(frame.frame_id, self.steering, 0.0, 1.0)
            estimates = estimates or []
        else:
            state, cmd = decide(estimates, steering, self.params, self.speed, self.steering,
                                frame.frame_id)
        self.steering = cmd.steering
        if state != self.state:
            self.transitions.append((frame.sim_time_us, int(self.state), int(state)))
            self.state = state
        report = EstimateReportMsg(
            self.client_id, self.entity_id, frame.frame_id, state, frame.sim_time_us,
            frame.t_render_us, t_estimate_us, tuple(e.to_entry() for e in estimates),
        )
        self.records.append(FrameRecord(frame.frame_id, frame.sim_time_us, frame.t_render_us,
                                        t_received_us, t_estimate_us, int(state), len(estimates),
                                        detect_ok, steer_ok))
        return cmd, report


# ---------------------------------------------------------------- runtime

@dataclass
class ClientConfig:
    server: str = "127.0.0.1:7400"
    inference: str | None = "127.0.0.1:7402"
    detector: str | None = "127.0.0.1:7403"
    client_id: int = 1
    entity_id: int | None = None
    fps: float = 0.0  # 0: server default
    params: DrivingParams = field(default_factory=DrivingParams)
    camera: CameraModel = field(default_factory=CameraModel)
    detect_model: str = "detector"
    steer_model: str = "steering"
    infer_timeout_s: float = 1.0
    report_buffer: int = 256
    connect_retries: int = 100
    inference_retries: int = 20
    metrics_path: str | None = None


class ClientRunner:
    def __init__(self, config: ClientConfig, clock=now_us):
        self.config = config
        self.clock = clock
        self.core = AIClient(config.client_id, config.camera, config.params)
        self.server: Connection | None = None
        self.infer_conn: Connection | None = None
        self.detector: Connection | None = None
        self._pending: dict[tuple[str, int], asyncio.Future] = {}
        self._latest: tuple[SensorFrameMsg, int] | None = None
        self._frame_event = asyncio.Event()
        self._done = False
        self.frames_received = 0
        self.frames_coalesced = 0
        self.rejected_acks = 0
        self.reports_sent = 0
        self.reports_dropped = 0
        self._report_q: collections.deque[EstimateReportMsg] = collections.deque()
        self.latency: dict[str, list[tuple[int, int, int]]] = {}  # model -> (t_send, rtt, status)
        self._last_reconnect = 0

    async def _server_reader(self) -> None:
        try:
            while True:
                msg = await self.server.recv()
                if msg is None or isinstance(msg, ByeMsg):
                    break
                if isinstance(msg, SensorFrameMsg):
                    self.frames_received += 1
                    if self._latest is not None:
                        self.frames_coalesced += 1
                    self._latest = (msg, self.clock())
                    self._frame_event.set()
                elif isinstance(msg, AckMsg) and msg.status != AckMsg.OK:
                    self.rejected_acks += 1
                    log.warning("client %d: control rejected: %s", self.config.client_id,
                                msg.reason)
        except (ProtocolError, ConnectionError) as exc:
            log.warning("client %d: server stream error: %s", self.config.client_id, exc)
        finally:
            self._done = True
            self._frame_event.set()

    async def _infer_reader(self, conn: Connection) -> None:
        try:
            while True:
                msg = await conn.recv()
                if msg is None:
                    break
                if isinstance(msg, InferResponseMsg):
                    fut = self._pending.pop((msg.model, msg.frame_id), None)
                    if fut is not None and not fut.done():
                        fut.set_result(msg)
        except (ProtocolError, ConnectionError) as exc:
            log.warning("client %d: inference stream error: %s", self.config.client_id, exc)
        finally:
            if self.infer_conn is conn:
                self.infer_conn = None
            for fut in self._pending.values():
                if not fut.done():
                    fut.set_result(None)
            self._pending.clear()

    async def _connect_inference(self, retries: int = 0) -> None:
        if self.config.inference is None:
            return
        try:
            conn = await Connection.open(self.config.inference, retries=retries, delay=0.1)
        except OSError:
            return
        self.infer_conn = conn
        asyncio.ensure_future(self._infer_reader(conn))

    async def _connect_detector(self) -> None:
        if self.config.detector is None:
            return
        try:
            conn = await Connection.open(self.config.detector)
        except OSError:
            return
        conn.send(HelloMsg(Role.ESTIMATE_SOURCE, self.config.client_id, self.core.entity_id))
        self.detector = conn
        while self._report_q:
            conn.send(self._report_q.popleft())
            self.reports_sent += 1

    async def _maybe_reconnect(self) -> None:
        now = self.clock()
        if now - self._last_reconnect < 1_000_000:
            return
        self._last_reconnect = now
        if self.infer_conn is None:
            await self._connect_inference()
        if self.detector is None or self.detector.closed:
            self.detector = None
            await self._connect_detector()

    async def _infer(self, model: str, frame: SensorFrameMsg) -> InferResponseMsg | None:
        conn = self.infer_conn
        if conn is None:
            return None
        fut = asyncio.get_running_loop().create_future()
        self._pending[(model, frame.frame_id)] = fut
        t_send = self.clock()
        conn.send(InferRequestMsg(model, self.config.client_id, frame.frame_id, frame.sim_time_us,
                                  t_send, frame.camera_pose, frame.annotations))
        try:
            resp = await asyncio.wait_for(fut, self.config.infer_timeout_s)
        except asyncio.TimeoutError:
            self._pending.pop((model, frame.frame_id), None)
            resp = None
        status = int(InferStatus.UNAVAILABLE) if resp is None else int(resp.status)
        self.latency.setdefault(model, []).append((t_send, self.clock() - t_send, status))
        return resp

    def _report(self, report: EstimateReportMsg) -> None:
        if self.detector is not None and not self.detector.closed:
            try:
                self.detector.send(report)
                self.reports_sent += 1
                return
            except (ConnectionError, RuntimeError):
                self.detector = None
        if len(self._report_q) >= self.config.report_buffer:
            self._report_q.popleft()
            self.reports_dropped += 1
        self._report_q.append(report)

    async def _open_session(self) -> None:
        cfg = self.config
        self.server = await Connection.open(cfg.server, retries=cfg.connect_retries, delay=0.1)
        self.server.send(HelloMsg(Role.CLIENT, cfg.client_id,
                                  0xFFFFFFFF if cfg.entity_id is None else cfg.entity_id, cfg.fps))
        ack = await self.server.recv()
        if not isinstance(ack, AckMsg) or ack.status != AckMsg.OK:
            reason = getattr(ack, "reason", "connection closed")
            raise ConnectionError(f"session refused: {reason}")
        self.core.entity_id = ack.ref

    async def run(self) -> int:
        await self._open_session()
        await self._connect_inference(self.config.inference_retries)
        await self._connect_detector()
        reader = asyncio.ensure_future(self._server_reader())
        try:
            while True:
                await self._frame_event.wait()
                self._frame_event.clear()
                if self._latest is None:
                    if self._done:
                        break
                    continue
                frame, t_recv = self._latest
                self._latest = None
                self.core.on_frame(frame)
                if self.infer_conn is None or self.detector is None:
                    await self._maybe_reconnect()
                det, steer = await asyncio.gather(
                    self._infer(self.config.detect_model, frame),
                    self._infer(self.config.steer_model, frame),
                )
                if self._done and self.server.closed:
                    break
                t_est = max(self.clock(), frame.t_render_us + 1)
                cmd, report = self.core.complete(frame, det, steer, t_est, t_recv)
                self.server.send(cmd)
                self._report(report)
                if self._done and self._latest is None:
                    break
        finally:
            reader.cancel()
            for c in (self.server, self.infer_conn, self.detector):
                if c is not None:
                    if c is self.detector and not c.closed:
                        try:
                            await asyncio.wait_for(c.drain(), 2.0)
                        except (ConnectionError, asyncio.TimeoutError):
                            pass
                    await c.close()
            if self.config.metrics_path:
                Path(self.config.metrics_path).write_text(json.dumps(self.metrics()))
        return 0

    def metrics(self) -> dict:
        return {
            "client_id": self.config.client_id, "entity_id": self.core.entity_id,
            "frames_received": self.frames_received, "frames_coalesced": self.frames_coalesced,
            "reports_sent": self.reports_sent, "reports_dropped": self.reports_dropped,
            "rejected_acks": self.rejected_acks, "skipped_boxes": self.core.skipped_boxes,
            "transitions": self.core.transitions,
            "records": [asdict(r) for r in self.core.records],
            "latency": self.latency,
        }


async def run_clients(configs: Sequence[ClientConfig]) -> list[ClientRunner]:
    runners = [ClientRunner(c) for c in configs]
    results = await asyncio.gather(*(r.run() for r in runners), return_exceptions=True)
    for r, res in zip(runners, results):
        if isinstance(res, BaseException):
            log.error("client %d failed: %s", r.config.client_id, res)
            raise res
    return runners


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridsim-client", description=__doc__)
    p.add_argument("--server", default="127.0.0.1:7400")
    p.add_argument("--inference", default="127.0.0.1:7402")
    p.add_argument("--detector", default="127.0.0.1:7403", help="'none' disables reports")
    p.add_argument("--params", default=None, help="driving parameters TOML")
    p.add_argument("--scenario", default=None, help="take the camera model from this scenario")
    p.add_argument("--id", type=int, default=1, dest="client_id")
    p.add_argument("--count", type=int, default=1, help="run N clients in this process")
    p.add_argument("--fps", type=float, default=0.0)
    p.add_argument("--metrics", default=None, help="metrics JSON path; {id} is substituted")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        params = DrivingParams.load(args.params) if args.params else DrivingParams()
        camera = CameraModel()
        if args.scenario:
            from .scenario import load_scenario
            camera = load_scenario(args.scenario).camera
        if args.count < 1:
            raise ValueError("--count must be >= 1")
    except (ValueError, OSError, tomli.TOMLDecodeError) as exc:
        log.error("%s", exc)
        return 1
    configs = []
    for i in range(args.count):
        cid = args.client_id + i
        metrics = args.metrics
        if metrics and args.count > 1 and "{id}" not in metrics:
            metrics = f"{metrics}.{cid}"
        configs.append(ClientConfig(
            server=args.server, inference=args.inference,
            detector=None if args.detector == "none" else args.detector,
            client_id=cid, fps=args.fps, params=params, camera=camera,
            metrics_path=metrics.format(id=cid) if metrics else None,
        ))
    try:
        asyncio.run(run_clients(configs))
    except (ConnectionError, OSError) as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
