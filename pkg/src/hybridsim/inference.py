"""Emulated model serving.

Models answer with geometric-oracle results degraded by a noise model. Each
response is held back by a sampled service latency, with at most
``parallelism`` requests in service per model and a bounded FIFO behind them.
"""

from __future__ import annotations

import argparse
import asyncio
import collections
import concurrent.futures
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import tomli

from .net import Connection, now_us, parse_addr
from .proto import (
    ByeMsg, InferRequestMsg, InferResponseMsg, InferStatus, ModelKind, ProtocolError,
    decode_annotations,
)
from .rng import substream
from .scenario import ScenarioError, load_scenario
from .sensor import CameraModel, NoiseModel, apply_noise, steering_oracle
from .world import Vec3

log = logging.getLogger("hybridsim.inference")


class ModelSpecError(ValueError):
    pass


@dataclass(frozen=True)
class LatencySpec:
    """Service-time distribution in milliseconds.

    ``constant``: c_ms. ``uniform``: a_ms..b_ms. ``lognormal``: shift_ms +
    exp(N(mu, sigma)) with mu and sigma on the log-millisecond scale.
    """

    kind: str = "constant"
    c_ms: float = 0.0
    a_ms: float = 0.0
    b_ms: float = 0.0
    mu: float = 0.0
    sigma: float = 0.0
    shift_ms: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "uniform", "lognormal"):
            raise ModelSpecError(f"unknown latency kind {self.kind!r}")
        if self.kind == "constant" and self.c_ms < 0:
            raise ModelSpecError("constant latency must be >= 0")
        if self.kind == "uniform" and not 0 <= self.a_ms <= self.b_ms:
            raise ModelSpecError("uniform latency needs 0 <= a_ms <= b_ms")
        if self.kind == "lognormal" and (self.sigma < 0 or self.shift_ms < 0):
            raise ModelSpecError("lognormal latency needs sigma >= 0 and shift_ms >= 0")

    @classmethod
    def constant(cls, c_ms: float) -> "LatencySpec":
        return cls("constant", c_ms=c_ms)

    @classmethod
    def uniform(cls, a_ms: float, b_ms: float) -> "LatencySpec":
        return cls("uniform", a_ms=a_ms, b_ms=b_ms)

    @classmethod
    def lognormal(cls, mu: float, sigma: float, shift_ms: float = 0.0) -> "LatencySpec":
        return cls("lognormal", mu=mu, sigma=sigma, shift_ms=shift_ms)

    @classmethod
    def lognormal_with_mean(cls, mean_ms: float, sigma: float, shift_ms: float = 0.0):
        if mean_ms <= shift_ms:
            raise ModelSpecError("lognormal mean must exceed shift")
        return cls.lognormal(math.log(mean_ms - shift_ms) - sigma**2 / 2, sigma, shift_ms)

    @property
    def mean_ms(self) -> float:
        if self.kind == "constant":
            return self.c_ms
        if self.kind == "uniform":
            return (self.a_ms + self.b_ms) / 2
        return self.shift_ms + math.exp(self.mu + self.sigma**2 / 2)

    def sample(self, rng) -> float:
        if self.kind == "constant":
            return self.c_ms
        if self.kind == "uniform":
            return float(rng.uniform(self.a_ms, self.b_ms))
        return self.shift_ms + float(rng.lognormal(self.mu, self.sigma))

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "c_ms": self.c_ms}
        if self.kind == "uniform":
            return {"kind": "uniform", "a_ms": self.a_ms, "b_ms": self.b_ms}
        return {"kind": "lognormal", "mu": self.mu, "sigma": self.sigma, "shift_ms": self.shift_ms}

    @classmethod
    def from_dict(cls, d: dict) -> "LatencySpec":
        d = dict(d)
        kind = d.pop("kind", "constant")
        if kind == "lognormal" and "mean_ms" in d:
            return cls.lognormal_with_mean(float(d["mean_ms"]), float(d.get("sigma", 0.25)),
                                           float(d.get("shift_ms", 0.0)))
        try:
            return cls(kind, **{k: float(v) for k, v in d.items()})
        except TypeError as exc:
            raise ModelSpecError(str(exc)) from None


@dataclass(frozen=True)
class ModelSpec:
    name: str
    kind: ModelKind
    latency: LatencySpec = field(default_factory=LatencySpec)
    noise: NoiseModel | None = None  # None: use the service's default noise
    steering_noise_std: float = 0.0
    lookahead_m: float = 10.0
    parallelism: int = 4
    queue_capacity: int = 64

    def __post_init__(self):
        if not isinstance(self.kind, ModelKind):
            try:
                object.__setattr__(self, "kind", _parse_kind(self.kind))
            except (KeyError, ValueError, AttributeError):
                raise ModelSpecError(f"unknown model kind {self.kind!r}") from None
        if not self.name:
            raise ModelSpecError("model name must be non-empty")
        if self.parallelism < 1:
            raise ModelSpecError("parallelism must be >= 1")
        if self.queue_capacity < 0:
            raise ModelSpecError("queue_capacity must be >= 0")
        if self.steering_noise_std < 0:
            raise ModelSpecError("steering_noise_std must be >= 0")


def _parse_kind(value) -> ModelKind:
    if isinstance(value, int):
        return ModelKind(value)
    key = str(value).strip().lower().replace("-", "_")
    return {"object_detector": ModelKind.OBJECT_DETECTOR, "objectdetector": ModelKind.OBJECT_DETECTOR,
            "detector": ModelKind.OBJECT_DETECTOR,
            "steering_predictor": ModelKind.STEERING_PREDICTOR,
            "steeringpredictor": ModelKind.STEERING_PREDICTOR,
            "steering": ModelKind.STEERING_PREDICTOR}[key]


DETECTOR = "detector"
STEERING = "steering"


def default_models() -> list[ModelSpec]:
    """Heavier detector paired with a lighter steering model."""
    return [
        ModelSpec(DETECTOR, ModelKind.OBJECT_DETECTOR,
                  LatencySpec.lognormal_with_mean(40.0, 0.25), parallelism=4, queue_capacity=64),
        ModelSpec(STEERING, ModelKind.STEERING_PREDICTOR,
                  LatencySpec.lognormal_with_mean(10.0, 0.25), parallelism=4, queue_capacity=64),
    ]


def parse_models(text: str) -> list[ModelSpec]:
    doc = tomli.loads(text)
    specs = []
    for i, m in enumerate(doc.get("models", [])):
        m = dict(m)
        try:
            latency = LatencySpec.from_dict(m.pop("latency", {}))
            noise = NoiseModel.from_dict(m.pop("noise")) if "noise" in m else None
            specs.append(ModelSpec(latency=latency, noise=noise, **m))
        except (TypeError, ValueError) as exc:
            raise ModelSpecError(f"models[{i}]: {exc}") from None
    return specs


def dump_models(specs: Sequence[ModelSpec]) -> dict:
    out = []
    for s in specs:
        d = {"name": s.name, "kind": s.kind.name.lower(), "latency": s.latency.to_dict(),
             "steering_noise_std": s.steering_noise_std, "lookahead_m": s.lookahead_m,
             "parallelism": s.parallelism, "queue_capacity": s.queue_capacity}
        if s.noise is not None:
            d["noise"] = s.noise.to_dict()
        out.append(d)
    return {"models": out}


@dataclass
class ModelHandle:
    spec: ModelSpec
    version: int
    active: int = 0
    waiters: collections.deque = field(default_factory=collections.deque)
    served: int = 0
    rejected: int = 0

    @property
    def name(self) -> str:
        return self.spec.name


class Overloaded(Exception):
    pass


class InferenceService:
    def __init__(self, road: Sequence[Vec3], camera: CameraModel | None = None, seed: int = 0,
                 default_noise: NoiseModel | None = None, cpu_burn: bool = False):
        self.road = tuple(road)
        self.camera = camera or CameraModel()
        self.seed = seed
        self.default_noise = default_noise or NoiseModel()
        self.cpu_burn = cpu_burn
        self.models: dict[str, ModelHandle] = {}
        self._pool: concurrent.futures.ThreadPoolExecutor | None = None

    @classmethod
    def for_scenario(cls, scenario, specs: Sequence[ModelSpec] | None = None, **kw):
        svc = cls(scenario.road, scenario.camera, scenario.seed, scenario.noise, **kw)
        for spec in specs if specs is not None else default_models():
            svc.register_model(spec)
        return svc

    def register_model(self, spec: ModelSpec) -> ModelHandle:
        if not isinstance(spec, ModelSpec):
            raise ModelSpecError("expected a ModelSpec")
        old = self.models.get(spec.name)
        handle = ModelHandle(spec, 1 if old is None else old.version + 1)
        # requests already admitted keep their handle; new ones see this one
        self.models[spec.name] = handle
        return handle

    # ------------------------------------------------------------ pure parts
    def sample_latency_ms(self, handle: ModelHandle, req: InferRequestMsg) -> float:
        rng = substream(self.seed, f"latency/{handle.name}/{req.client_id}", req.frame_id)
        return max(0.0, handle.spec.latency.sample(rng))

    def evaluate(self, handle: ModelHandle, req: InferRequestMsg) -> InferResponseMsg:
        spec = handle.spec
        if spec.kind == ModelKind.OBJECT_DETECTOR:
            truth = decode_annotations(req.annotations)
            rng = substream(self.seed, f"detect/{req.client_id}", req.frame_id)
            noise = spec.noise if spec.noise is not None else self.default_noise
            dets = apply_noise(rng, truth, noise, req.sim_time_us / 1e6, self.camera)
            return InferResponseMsg(InferStatus.OK, spec.name, req.frame_id, req.client_id,
                                    handle.version, kind=spec.kind, detections=tuple(dets))
        angle = steering_oracle(req.camera_pose, self.road, spec.lookahead_m)
        if spec.steering_noise_std > 0:
            rng = substream(self.seed, f"steer/{req.client_id}", req.frame_id)
            angle += float(rng.normal(0.0, spec.steering_noise_std))
        return InferResponseMsg(InferStatus.OK, spec.name, req.frame_id, req.client_id,
                                handle.version, kind=spec.kind, steering=angle)

    # ------------------------------------------------------------ admission
    async def _acquire(self, handle: ModelHandle) -> None:
        if handle.active < handle.spec.parallelism:
            handle.active += 1
            return
        if len(handle.waiters) >= handle.spec.queue_capacity:
            raise Overloaded(handle.name)
        fut = asyncio.get_running_loop().create_future()
        handle.waiters.append(fut)
        try:
            await fut  # slot handed over by _release, active count unchanged
        except asyncio.CancelledError:
            if fut in handle.waiters:
                handle.waiters.remove(fut)
            elif fut.done() and not fut.cancelled():
                self._release(handle)
            raise

    def _release(self, handle: ModelHandle) -> None:
        while handle.waiters:
            fut = handle.waiters.popleft()
            if not fut.done():
                fut.set_result(None)
                return
        handle.active -= 1

    async def _hold_until(self, deadline: float) -> None:
        loop = asyncio.get_running_loop()
        if self.cpu_burn:
            if self._pool is None:
                self._pool = concurrent.futures.ThreadPoolExecutor(max_workers=16)
            mono_deadline = time.perf_counter() + max(0.0, deadline - loop.time())

            def burn():
                while time.perf_counter() < mono_deadline:
                    pass

            await loop.run_in_executor(self._pool, burn)
        while (remaining := deadline - loop.time()) > 0:
            await asyncio.sleep(remaining)

    async def infer(self, req: InferRequestMsg, expect: ModelKind | None = None) -> InferResponseMsg:
        t_arrive = now_us()
        handle = self.models.get(req.model)
        if handle is None:
            return InferResponseMsg(InferStatus.UNKNOWN_MODEL, req.model, req.frame_id, req.client_id)
        if expect is not None and handle.spec.kind != expect:
            return InferResponseMsg(InferStatus.WRONG_KIND, req.model, req.frame_id, req.client_id,
                                    handle.version, kind=handle.spec.kind)
        try:
            await self._acquire(handle)
        except Overloaded:
            handle.rejected += 1
            return InferResponseMsg(InferStatus.OVERLOADED, req.model, req.frame_id, req.client_id,
                                    handle.version, kind=handle.spec.kind)
        loop = asyncio.get_running_loop()
        try:
            t_start = now_us()
            start = loop.time()
            latency_s = self.sample_latency_ms(handle, req) / 1000.0
            resp = self.evaluate(handle, req)
            await self._hold_until(start + latency_s)
            t_end = now_us()
        finally:
            self._release(handle)
        handle.served += 1
        return InferResponseMsg(resp.status, resp.model, resp.frame_id, resp.client_id,
                                resp.model_version, t_start - t_arrive, t_end - t_start,
                                resp.kind, resp.detections, resp.steering)

    async def infer_detect(self, req: InferRequestMsg) -> InferResponseMsg:
        return await self.infer(req, ModelKind.OBJECT_DETECTOR)

    async def infer_steer(self, req: InferRequestMsg) -> InferResponseMsg:
        return await self.infer(req, ModelKind.STEERING_PREDICTOR)


class InferenceApp:
    def __init__(self, service: InferenceService, listen: str = "127.0.0.1:7402",
                 metrics_path: str | None = None):
        self.service = service
        self.listen = listen
        self.metrics_path = metrics_path
        self._server = None
        self._tasks: set[asyncio.Task] = set()
        self.records: list[tuple] = []  # (model, client_id, frame_id, t_queue_us, t_service_us)

    @property
    def port(self) -> int:
        return self._server.sockets[0].getsockname()[1]

    async def start(self) -> None:
        host, port = parse_addr(self.listen)
        self._server = await asyncio.start_server(self._on_conn, host, port)
        log.info("inference listening on %s:%d", host, self.port)

    async def _answer(self, conn: Connection, req: InferRequestMsg) -> None:
        resp = await self.service.infer(req)
        if resp.status == InferStatus.OK:
            self.records.append((resp.model, resp.client_id, resp.frame_id,
                                 resp.t_queue_us, resp.t_service_us))
        conn.send(resp)

    async def _on_conn(self, reader, writer) -> None:
        conn = Connection(reader, writer)
        try:
            while True:
                msg = await conn.recv()
                if msg is None or isinstance(msg, ByeMsg):
                    break
                if isinstance(msg, InferRequestMsg):
                    task = asyncio.ensure_future(self._answer(conn, msg))
                    self._tasks.add(task)
                    task.add_done_callback(self._tasks.discard)
        except (ProtocolError, ConnectionError) as exc:
            log.warning("dropping inference connection: %s", exc)
        finally:
            await conn.close()

    async def serve_forever(self) -> None:
        if self._server is None:
            await self.start()
        try:
            await self._server.serve_forever()
        finally:
            self.close()

    def close(self) -> None:
        if self._server is not None:
            self._server.close()
        for t in list(self._tasks):
            t.cancel()
        if self.metrics_path:
            Path(self.metrics_path).write_text(json.dumps({"records": self.records}))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridsim-inference", description=__doc__)
    p.add_argument("--listen", default="127.0.0.1:7402")
    p.add_argument("--models", default=None, help="model spec TOML file")
    p.add_argument("--scenario", required=True, help="scenario providing road, camera and noise")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--cpu-burn", choices=("on", "off"), default="off")
    p.add_argument("--metrics", default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    import signal

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        scenario = load_scenario(args.scenario)
        if args.seed is not None:
            scenario = scenario.with_seed(args.seed)
        specs = parse_models(Path(args.models).read_text()) if args.models else None
    except (ScenarioError, ModelSpecError, OSError, tomli.TOMLDecodeError) as exc:
        log.error("%s", exc)
        return 1
    service = InferenceService.for_scenario(scenario, specs, cpu_burn=args.cpu_burn == "on")
    app = InferenceApp(service, args.listen, args.metrics)

    async def go():
        loop = asyncio.get_running_loop()
        await app.start()
        task = asyncio.ensure_future(app.serve_forever())
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, task.cancel)
        try:
            await task
        except asyncio.CancelledError:
            pass

    try:
        asyncio.run(go())
    except OSError as exc:
        log.error("bind failure: %s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
