"""Throughput and latency experiments over the networked stack.

``run_experiment`` launches one process per role on this host;
``run_in_process`` runs the same components inside one event loop, which
lets a test reach into the live inference service. Both reduce the
component metrics to a :class:`MetricsReport` over [warm-up, end].

Jitter is the sample standard deviation of per-request inference round-trip
latency as observed by the clients over the measurement window.
"""

from __future__ import annotations

import asyncio
import csv
import json
import logging
import math
import os
import socket
import subprocess
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import tomli_w

from ..client import ClientConfig, ClientRunner, DrivingParams
from ..detector import CornerCaseDetector, DetectorApp, MatchCriteria
from ..inference import DETECTOR, STEERING, InferenceApp, InferenceService, ModelSpec, dump_models
from ..mismatch_log import MismatchLog
from ..proto import InferStatus
from ..scenario import Scenario, dump_scenario, load_scenario
from ..server import ServerApp, ServerConfig

log = logging.getLogger("hybridsim.harness")


@dataclass
class ExperimentConfig:
    scenario: str = "ped-crossing"
    n_clients: int = 1
    duration_s: float = 15.0
    warmup_s: float = 5.0
    fps: float = 20.0
    render_cost_ms: float = 0.0
    padding: bool = False
    models: Sequence[ModelSpec] | None = None
    params: DrivingParams = field(default_factory=DrivingParams)
    criteria: MatchCriteria = field(default_factory=MatchCriteria)
    seed: int | None = None
    topology: str = "A"
    with_detector: bool = True
    workdir: str | None = None
    startup_timeout_s: float = 30.0

    def validate(self) -> None:
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if not 0 <= self.warmup_s < self.duration_s:
            raise ValueError("need 0 <= warmup_s < duration_s")

    def build_scenario(self) -> Scenario:
        sc = load_scenario(self.scenario)
        if self.seed is not None:
            sc = sc.with_seed(self.seed)
        sc = sc.with_clients(self.n_clients)
        # the run lasts as long as asked, whatever the scenario says
        return replace(sc, duration_s=max(sc.duration_s, self.duration_s), source="")


@dataclass
class MetricsReport:
    """One row of the sweep table. Rates in fps, latencies in ms."""

    n_clients: int
    status: str = "ok"
    error: str = ""
    window_s: float = 0.0
    total_fps: float = 0.0
    client_fps_mean: float = 0.0
    client_fps_min: float = 0.0
    det_latency_mean_ms: float = math.nan
    det_latency_std_ms: float = math.nan
    det_latency_p99_ms: float = math.nan
    det_latency_se_ms: float = math.nan
    det_samples: int = 0
    steer_latency_mean_ms: float = math.nan
    steer_latency_std_ms: float = math.nan
    steer_latency_p99_ms: float = math.nan
    steer_samples: int = 0
    control_rtt_mean_ms: float = math.nan
    pipeline_age_mean_ms: float = math.nan
    frames_emitted: int = 0
    frames_received: int = 0
    frames_shed: int = 0
    gt_dropped: int = 0
    reports_dropped: int = 0
    infer_failures: int = 0
    staleness_findings: int = 0

    def row(self) -> dict:
        return asdict(self)


CSV_COLUMNS = [f.name for f in fields(MetricsReport)]


def batch_means_se(values: Sequence[float], n_batches: int = 10) -> float:
    """Standard error of the sample standard deviation via batch means."""
    v = np.asarray(values, dtype=float)
    if len(v) < 2 * n_batches:
        return math.nan
    batches = np.array_split(v, n_batches)
    sds = np.array([b.std(ddof=1) for b in batches])
    return float(sds.std(ddof=1) / math.sqrt(n_batches))


def _latency_stats(samples: Sequence[float]) -> tuple[float, float, float, float]:
    if len(samples) == 0:
        return math.nan, math.nan, math.nan, math.nan
    a = np.asarray(samples, dtype=float)
    std = float(a.std(ddof=1)) if len(a) > 1 else 0.0
    return float(a.mean()), std, float(np.percentile(a, 99)), batch_means_se(a)


def reduce_metrics(n_clients: int, server: dict, clients: Sequence[dict],
                   detector: dict | None, warmup_s: float,
                   detect_model: str = DETECTOR, steer_model: str = STEERING) -> MetricsReport:
    t0 = server["start_us"] + int(warmup_s * 1e6)
    t1 = server["end_us"]
    window = max(1e-9, (t1 - t0) / 1e6)
    per_client = []
    for s in server["sessions"].values():
        per_client.append(sum(1 for _, t in s["emitted"] if t0 <= t <= t1) / window)
    total = sum(per_client)
    while len(per_client) < n_clients:
        per_client.append(0.0)

    lat: dict[str, list[float]] = {}
    failures = 0
    frames_received = 0
    reports_dropped = 0
    for c in clients:
        frames_received += c.get("frames_received", 0)
        reports_dropped += c.get("reports_dropped", 0)
        for model, recs in c.get("latency", {}).items():
            for t_send, rtt, status in recs:
                if not t0 <= t_send <= t1:
                    continue
                if status == int(InferStatus.OK):
                    lat.setdefault(model, []).append(rtt / 1000.0)
                else:
                    failures += 1
    dm, ds, dp, dse = _latency_stats(lat.get(detect_model, []))
    sm, ss, sp, _ = _latency_stats(lat.get(steer_model, []))
    ages = [a / 1000.0 for _, t, a in server.get("control_ages", []) if t0 <= t <= t1]
    rep = MetricsReport(
        n_clients=n_clients, window_s=window, total_fps=total,
        client_fps_mean=float(np.mean(per_client)), client_fps_min=float(np.min(per_client)),
        det_latency_mean_ms=dm, det_latency_std_ms=ds, det_latency_p99_ms=dp,
        det_latency_se_ms=dse, det_samples=len(lat.get(detect_model, [])),
        steer_latency_mean_ms=sm, steer_latency_std_ms=ss, steer_latency_p99_ms=sp,
        steer_samples=len(lat.get(steer_model, [])),
        control_rtt_mean_ms=float(np.mean(ages)) if ages else math.nan,
        frames_emitted=server["frames_emitted"], frames_received=frames_received,
        frames_shed=server["frames_shed"], gt_dropped=server["gt_dropped"],
        reports_dropped=reports_dropped, infer_failures=failures,
    )
    if detector is not None:
        pipe = [age / 1000.0 for _, _, _, age, t in detector["reports"] if t0 <= t <= t1]
        rep.pipeline_age_mean_ms = float(np.mean(pipe)) if pipe else math.nan
        rep.staleness_findings = sum(1 for f in detector["findings"] if f[0] == "staleness")
    return rep


# ---------------------------------------------------------------- processes

def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@dataclass
class StackResult:
    report: MetricsReport
    server: dict | None = None
    clients: list = field(default_factory=list)
    detector: dict | None = None
    workdir: str = ""


def _spawn(module: str, args: list[str], log_path: Path) -> subprocess.Popen:
    env = dict(os.environ, PYTHONUNBUFFERED="1")
    fh = open(log_path, "w")
    return subprocess.Popen([sys.executable, "-m", f"hybridsim.{module}", *args],
                            stdout=fh, stderr=subprocess.STDOUT, env=env)


def _load(path: Path) -> dict | None:
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError):
        return None


def run_experiment(cfg: ExperimentConfig) -> StackResult:
    """Run server, inference, detector and N clients as local processes."""
    cfg.validate()
    work = Path(cfg.workdir or tempfile.mkdtemp(prefix="hybridsim-"))
    work.mkdir(parents=True, exist_ok=True)
    sc = cfg.build_scenario()
    scen_path = work / "scenario.toml"
    scen_path.write_text(dump_scenario(sc))
    models_path = work / "models.toml"
    from ..inference import default_models
    models_path.write_text(tomli_w.dumps(dump_models(cfg.models or default_models())))
    p_cli, p_gt, p_inf, p_est = free_port(), free_port(), free_port(), free_port()
    procs: dict[str, subprocess.Popen] = {}
    procs["inference"] = _spawn("inference", [
        "--listen", f"127.0.0.1:{p_inf}", "--models", str(models_path),
        "--scenario", str(scen_path)], work / "inference.log")
    server_args = [
        "--scenario", str(scen_path), "--fps", str(cfg.fps),
        "--render-cost-ms", str(cfg.render_cost_ms), "--padding", "on" if cfg.padding else "off",
        "--listen-clients", f"127.0.0.1:{p_cli}", "--listen-detector", f"127.0.0.1:{p_gt}",
        "--wait-clients", str(cfg.n_clients), "--duration", str(cfg.duration_s),
        "--metrics", str(work / "server.json")]
    procs["server"] = _spawn("server", server_args, work / "server.log")
    if cfg.with_detector:
        crit_path = work / "criteria.toml"
        crit_path.write_text(tomli_w.dumps(cfg.criteria.to_dict()))
        procs["detector"] = _spawn("detector", [
            "--scenario", str(scen_path), "--criteria", str(crit_path), "--connect-gt", f"127.0.0.1:{p_gt}",
            "--listen-est", f"127.0.0.1:{p_est}", "--out", str(work / "mismatches"),
            "--metrics", str(work / "detector.json")], work / "detector.log")
    params_path = work / "params.toml"
    params_path.write_text(tomli_w.dumps(asdict(cfg.params)))
    procs["clients"] = _spawn("client", [
        "--server", f"127.0.0.1:{p_cli}", "--inference", f"127.0.0.1:{p_inf}",
        "--detector", f"127.0.0.1:{p_est}" if cfg.with_detector else "none",
        "--params", str(params_path), "--scenario", str(scen_path),
        "--count", str(cfg.n_clients), "--metrics", str(work / "client-{id}.json")],
        work / "clients.log")

    error = ""
    try:
        rc = procs["server"].wait(timeout=cfg.duration_s + cfg.startup_timeout_s)
        if rc != 0:
            error = f"server exited with {rc}"
        for role in ("clients", "detector"):
            if role in procs:
                rc = procs[role].wait(timeout=20)
                if rc != 0 and not error:
                    error = f"{role} exited with {rc}"
    except subprocess.TimeoutExpired as exc:
        error = f"timeout waiting for {exc.cmd[2] if len(exc.cmd) > 2 else 'component'}"
    finally:
        for p in procs.values():
            if p.poll() is None:
                p.terminate()
        for p in procs.values():
            try:
                p.wait(timeout=5)
            except subprocess.TimeoutExpired:
                p.kill()
    server = _load(work / "server.json")
    clients = [m for m in (_load(work / f"client-{i}.json")
                           for i in range(1, cfg.n_clients + 1)) if m is not None]
    detector = _load(work / "detector.json") if cfg.with_detector else None
    if server is None:
        rep = MetricsReport(cfg.n_clients, status="failed", error=error or "no server metrics")
    else:
        rep = reduce_metrics(cfg.n_clients, server, clients, detector, cfg.warmup_s)
        if error:
            rep.status, rep.error = "failed", error
    return StackResult(rep, server, clients, detector, str(work))


# ---------------------------------------------------------------- in-process

@dataclass
class LiveStack:
    """Handles on the running components, passed to hooks."""

    server: ServerApp
    inference: InferenceApp
    detector: CornerCaseDetector
    clients: list


Hook = tuple[float, Callable[[LiveStack], None]]


async def _run_in_process(cfg: ExperimentConfig, hooks: Sequence[Hook]) -> StackResult:
    sc = cfg.build_scenario()
    server = ServerApp(sc, ServerConfig(
        client_addr="127.0.0.1:0", detector_addr="127.0.0.1:0", fps=cfg.fps,
        padding=cfg.padding, render_cost_ms=cfg.render_cost_ms, wait_clients=cfg.n_clients,
        duration_s=cfg.duration_s))
    await server.start()
    service = InferenceService.for_scenario(sc, cfg.models)
    inference = InferenceApp(service, "127.0.0.1:0")
    await inference.start()
    sink = MismatchLog(Path(cfg.workdir) / "mismatches") if cfg.workdir else None
    core = CornerCaseDetector(sc, cfg.criteria, sink=sink)
    det_app = DetectorApp(core, "127.0.0.1:0", f"127.0.0.1:{server.detector_port}",
                          grace_s=0.5)
    await det_app.start()
    runners = [ClientRunner(ClientConfig(
        server=f"127.0.0.1:{server.client_port}", inference=f"127.0.0.1:{inference.port}",
        detector=f"127.0.0.1:{det_app.est_port}" if cfg.with_detector else None,
        client_id=i + 1, params=cfg.params, camera=sc.camera, fps=cfg.fps))
        for i in range(cfg.n_clients)]
    live = LiveStack(server, inference, core, runners)
    det_task = asyncio.ensure_future(det_app.run()) if cfg.with_detector else None
    server_task = asyncio.ensure_future(server.run())
    client_tasks = [asyncio.ensure_future(r.run()) for r in runners]

    async def fire(delay: float, fn):
        while not server.running and not server_task.done():
            await asyncio.sleep(0.005)
        await asyncio.sleep(delay)
        fn(live)

    hook_tasks = [asyncio.ensure_future(fire(t, fn)) for t, fn in hooks]
    error = ""
    try:
        await asyncio.wait_for(server_task, cfg.duration_s + cfg.startup_timeout_s)
        await asyncio.wait_for(asyncio.gather(*client_tasks), 20)
        if det_task is not None:
            await asyncio.wait_for(det_task, 20)
    except Exception as exc:  # component failure: keep partial metrics
        error = f"{type(exc).__name__}: {exc}"
    finally:
        for t in hook_tasks + client_tasks + ([det_task] if det_task else []):
            t.cancel()
        inference.close()
    server_m = server.metrics()
    clients_m = [r.metrics() for r in runners]
    detector_m = core.metrics() if cfg.with_detector else None
    rep = reduce_metrics(cfg.n_clients, server_m, clients_m, detector_m, cfg.warmup_s)
    if error:
        rep.status, rep.error = "failed", error
    res = StackResult(rep, server_m, clients_m, detector_m, cfg.workdir or "")
    res.live = live  # type: ignore[attr-defined]
    return res


def run_in_process(cfg: ExperimentConfig, hooks: Sequence[Hook] = ()) -> StackResult:
    cfg.validate()
    return asyncio.run(_run_in_process(cfg, hooks))


# ---------------------------------------------------------------- sweeps

def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return str(v)


def write_csv(reports: Sequence[MetricsReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in reports:
            w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


PLOT_SERIES = {
    "throughput_total_fps.dat": "total_fps",
    "throughput_client_fps.dat": "client_fps_mean",
    "latency_detector_mean_ms.dat": "det_latency_mean_ms",
    "latency_detector_jitter_ms.dat": "det_latency_std_ms",
    "latency_steering_mean_ms.dat": "steer_latency_mean_ms",
    "latency_steering_jitter_ms.dat": "steer_latency_std_ms",
}


def write_plot_data(reports: Sequence[MetricsReport], out_dir: str | Path) -> list[Path]:
    """Two-column ``N value`` series files, one per curve."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for fname, col in PLOT_SERIES.items():
        p = out / fname
        with open(p, "w") as fh:
            fh.write(f"# n_clients {col}\n")
            for r in reports:
                if r.status == "ok":
                    fh.write(f"{r.n_clients} {_fmt(getattr(r, col))}\n")
        paths.append(p)
    return paths


def sweep_clients(cfg: ExperimentConfig, n_range: Sequence[int], out_dir: str | Path,
                  runner: Callable[[ExperimentConfig], StackResult] = run_experiment,
                  progress: Callable[[MetricsReport], None] | None = None) -> list[MetricsReport]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for n in n_range:
        point_cfg = replace(cfg, n_clients=n, workdir=str(out / f"n{n:03d}"))
        t = time.monotonic()
        try:
            rep = runner(point_cfg).report
        except Exception as exc:  # recorded, the sweep goes on
            rep = MetricsReport(n, status="failed", error=f"{type(exc).__name__}: {exc}")
        log.info("N=%d %s total=%.1f fps client=%.2f fps det=%.1f+-%.2f ms (%.1fs)", n,
                 rep.status, rep.total_fps, rep.client_fps_mean, rep.det_latency_mean_ms,
                 rep.det_latency_std_ms, time.monotonic() - t)
        reports.append(rep)
        if progress:
            progress(rep)
        write_csv(reports, out / "sweep.csv")
    write_csv(reports, out / "sweep.csv")
    write_plot_data(reports, out)
    return reports
