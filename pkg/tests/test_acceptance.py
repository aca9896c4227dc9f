"""Acceptance criteria, at their stated tolerances.

Each test records a one-line verdict that is printed in the terminal summary.
The saturation sweep runs the full multi-process stack; its per-point length
can be shortened with HYBRIDSIM_SWEEP_POINT_S and HYBRIDSIM_SWEEP_WARMUP_S.
"""

import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE
from hybridsim.detector import DERIVED_STATE, POSITION, STALENESS
from hybridsim.harness.experiment import (
    ExperimentConfig, MetricsReport, run_experiment, run_in_process, sweep_clients,
)
from hybridsim.harness.lockstep import LockstepConfig, replay_controls, run_lockstep
from hybridsim.harness.replay import replay
from hybridsim.inference import DETECTOR, LatencySpec, ModelSpec, default_models
from hybridsim.mismatch_log import LOG_NAME, read_log
from hybridsim.proto import (
    PADDING_BYTES, STATE_RECORD_SIZE, ModelKind, SensorFrameMsg, decode_state_update,
    encode_state_update,
)
from hybridsim.scenario import BUNDLED, bundled
from hybridsim.sensor import (
    CameraModel, CameraPose, FaultWindow, NoiseModel, estimate_relative_position, project,
)
from hybridsim.server import ServerConfig, SimServer
from hybridsim.world import EntityKind, EntityState, KindTag, Vec3


def verdict(n, ok, line):
    ACCEPTANCE[n] = (bool(ok), line)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {line}")
    return ok


def blinded(seed):
    # the pedestrian is on the road from about 6.7 s to 10 s
    sc = bundled("ped-crossing").with_seed(seed)
    return sc.with_noise(NoiseModel(fault_windows=(FaultWindow(5.0, 14.0, KindTag.PEDESTRIAN),)))


def test_1_wire_format_exactness():
    t0 = time.monotonic()
    rng = np.random.default_rng(2024)
    ids = rng.integers(0, 2**32, 100_000, dtype=np.uint64)
    ts = rng.integers(0, 2**63, 100_000, dtype=np.uint64)
    fs = rng.uniform(-1e4, 1e4, (100_000, 9)).astype(np.float32)
    sizes, bad = set(), 0
    for i in range(100_000):
        f = fs[i].tolist()
        s = EntityState(int(ids[i]), int(ts[i]), Vec3(*f[0:3]), Vec3(*f[3:6]), Vec3(*f[6:9]))
        raw = encode_state_update(s)
        sizes.add(len(raw))
        back = decode_state_update(raw)
        if back != s or encode_state_update(back) != raw:
            bad += 1

    sc = bundled("ped-crossing")
    frames = {}
    for padding in (True, False):
        server = SimServer(sc, ServerConfig(padding=padding), clock=lambda: 0)
        session = server.open_session(1, 1)
        frames[padding] = server.render_sensor_frame(server.world.snapshot(), session, 1)
    padded = SensorFrameMsg.decode(frames[True].encode())
    extra = len(frames[True].encode()) - len(frames[False].encode())
    elapsed = time.monotonic() - t0
    ok = (sizes == {48} and STATE_RECORD_SIZE * 8 == 384 and bad == 0
          and padded.padding_len == PADDING_BYTES == 230_400 and extra == 230_400
          and elapsed < 10)
    verdict(1, ok, f"record sizes {sorted(sizes)} B, {bad} round-trip failures in 10^5, "
                   f"padding {padded.padding_len} B, {elapsed:.1f} s")
    assert ok


def test_2_projection_estimation_fidelity():
    t0 = time.monotonic()
    cam = CameraModel()
    pose = CameraPose(Vec3(0.0, 0.0, 1.4), 0.0)
    worst_d = worst_b = 0.0
    poses = skipped = 0
    for tag in (KindTag.VEHICLE, KindTag.PEDESTRIAN, KindTag.STATIC_OBSTACLE):
        kind = EntityKind.default(tag)
        for d in np.linspace(5.0, 50.0, 19):
            for frac in np.linspace(-0.9, 0.9, 19):
                bearing = frac * cam.hfov_rad / 2
                target = EntityState(1, 0, Vec3(d * math.cos(bearing), -d * math.sin(bearing), 0.0),
                                     Vec3(0, 0, 0), Vec3(1, 0, 0))
                box = project(cam, pose, kind, target)
                assert box is not None, (tag, d, frac)
                if box.truncated:
                    # cut by the image edge: the box no longer spans the object
                    skipped += 1
                    continue
                est = estimate_relative_position(cam, box, kind.real_height)
                rng_m = math.hypot(est.distance, est.lateral)
                worst_d = max(worst_d, abs(rng_m - d) / d)
                worst_b = max(worst_b, abs(est.bearing - bearing))
                poses += 1
    elapsed = time.monotonic() - t0
    ok = poses >= 500 and worst_d <= 0.01 and worst_b <= math.radians(0.5) and elapsed < 5
    verdict(2, ok, f"{poses} poses ({skipped} edge-truncated skipped), "
                   f"worst distance error {worst_d * 100:.3f}%, "
                   f"worst bearing error {math.degrees(worst_b):.4f} deg, {elapsed:.1f} s")
    assert ok


def test_3_no_false_positives():
    t0 = time.monotonic()
    counts = {}
    for name in BUNDLED:
        sc = bundled(name).with_noise(NoiseModel())
        sc = replace(sc, duration_s=max(20.0, sc.duration_s))
        res = run_lockstep(sc)
        counts[name] = (len(res.records_for(DERIVED_STATE)), len(res.records_for(POSITION)))
    elapsed = time.monotonic() - t0
    ok = len(counts) >= 2 and all(c == (0, 0) for c in counts.values()) and elapsed < 120
    verdict(3, ok, "derived/position records " +
            ", ".join(f"{k}={a}/{b}" for k, (a, b) in counts.items()) + f", {elapsed:.1f} s")
    assert ok


def test_4_injected_fault_is_detected(tmp_path):
    t0 = time.monotonic()
    caught, short_windows = 0, 0
    for seed in range(20):
        out = tmp_path / f"seed{seed}"
        run_lockstep(blinded(seed), LockstepConfig(out_dir=str(out)))
        records, _ = read_log(out / LOG_NAME) if (out / LOG_NAME).exists() else ([], None)
        derived = [r for r in records if r.criterion == DERIVED_STATE
                   and r.details["derived_state"] == "SAFE_TO_DRIVE"
                   and r.details["hazard"] in ("COLLISION_POSSIBLE", "COLLISION")]
        caught += bool(derived)
        # one tick of slack: the window ends on the tick before the report
        short_windows += sum(1 for r in derived
                             if r.gt_span_us() < min(r.window_s * 1e6, r.sim_time_us) - 10_000)
    elapsed = time.monotonic() - t0
    ok = caught == 20 and short_windows == 0 and elapsed < 300
    verdict(4, ok, f"persisted SafeToDrive vs CollisionPossible in {caught}/20 seeds, "
                   f"{short_windows} short windows, {elapsed:.1f} s")
    assert ok


def test_5_timing_anomaly_measurement():
    t0 = time.monotonic()
    swap = {}

    def slow_down(live):
        live.inference.service.register_model(
            ModelSpec(DETECTOR, ModelKind.OBJECT_DETECTOR, LatencySpec.constant(150.0)))
        swap["sim_us"] = live.server.core.world.sim_time_us

    models = [ModelSpec(DETECTOR, ModelKind.OBJECT_DETECTOR, LatencySpec.constant(50.0)),
              default_models()[1]]
    cfg = ExperimentConfig(duration_s=12.0, warmup_s=2.0, fps=10.0, models=models)
    res = run_in_process(cfg, [(8.0, slow_down)])
    assert res.report.status == "ok", res.report.error
    t_swap = swap["sim_us"]
    # (client, frame, sim_time_us, pipeline_age_us, host time)
    before = [r[3] / 1000 for r in res.detector["reports"] if 2_000_000 <= r[2] < t_swap]
    early = [f for f in res.detector["findings"] if f[0] == STALENESS and f[2] < t_swap]
    late = [f[2] for f in res.detector["findings"] if f[0] == STALENESS and f[2] >= t_swap]
    mean_age = float(np.mean(before))
    delay_s = (min(late) - t_swap) / 1e6 if late else math.inf
    elapsed = time.monotonic() - t0
    ok = (abs(mean_age - 50.0) <= 10.0 and not early and delay_s <= 2.0 and elapsed < 60)
    verdict(5, ok, f"mean pipeline age {mean_age:.2f} ms over {len(before)} reports at 50 ms, "
                   f"{len(early)} early staleness findings, first finding {delay_s:.2f} s "
                   f"after the 150 ms swap, {elapsed:.1f} s")
    assert ok


def between_run_sigma(values):
    """Robust per-point scatter from successive differences (MAD, normal scale).

    Each point is a separate run, so this picks up run-to-run variation that
    the within-run batch-means error cannot see.
    """
    d = np.diff(np.asarray(values, dtype=float))
    if len(d) < 2:
        return 0.0
    return float(1.4826 * np.median(np.abs(d - np.median(d))) / math.sqrt(2))


def knee_and_jitter(reports):
    """Index of the saturation knee, pairs that break non-decreasing jitter,
    the fitted slope beyond the knee and the between-run scatter used."""
    totals = [r.total_fps for r in reports]
    knee = next(i for i, t in enumerate(totals) if t >= 0.9 * max(totals))
    tail = reports[knee:]
    sig = between_run_sigma([r.det_latency_std_ms for r in tail])
    breaks = []
    for i, a in enumerate(tail):
        for b in tail[i + 1:]:
            tol = 3 * math.sqrt(2 * sig ** 2 + a.det_latency_se_ms ** 2 + b.det_latency_se_ms ** 2)
            if b.det_latency_std_ms < a.det_latency_std_ms - tol:
                breaks.append((a.n_clients, b.n_clients))
    n = np.array([r.n_clients for r in tail], dtype=float)
    s = np.array([r.det_latency_std_ms for r in tail])
    slope = float(np.polyfit(n, s, 1)[0]) if len(tail) > 1 else math.nan
    return knee, breaks, slope, sig


def _sweep(stds, se=0.3):
    return [MetricsReport(n, total_fps=min(20.0 * n, 200.0), det_latency_std_ms=v,
                          det_latency_se_ms=se) for n, v in enumerate(stds, start=1)]


def test_jitter_check_tolerates_scatter_on_a_rising_curve():
    # run-to-run scatter of 0.5 ms is what this host shows past the knee
    alarms, sigs = 0, []
    for seed in range(200):
        rng = np.random.default_rng(seed)
        stds = [10.0] * 9 + list(12.0 + 0.1 * np.arange(21) + rng.normal(0, 0.5, 21))
        knee, breaks, slope, sig = knee_and_jitter(_sweep(stds))
        assert knee == 8
        alarms += bool(breaks)
        sigs.append(sig)
    assert alarms / 200 < 0.05
    assert float(np.median(sigs)) == pytest.approx(0.5, abs=0.1)


def test_jitter_check_flags_a_real_drop():
    # a peak that collapses by 3 ms and stays down, as queues do at critical load
    stds = [10.0] * 9 + [12.0, 12.2, 12.3, 12.5, 12.4, 12.6, 15.9] + [12.6] * 14
    _, breaks, _, _ = knee_and_jitter(_sweep(stds))
    assert (16, 17) in breaks


def test_6_saturation_methodology(tmp_path):
    t0 = time.monotonic()
    point_s = float(os.environ.get("HYBRIDSIM_SWEEP_POINT_S", "10"))
    warmup_s = float(os.environ.get("HYBRIDSIM_SWEEP_WARMUP_S", "3"))
    # 6 / 40 ms = 150 requests/s, below the 200 fps renderer: the detector queue
    # is already saturated at the render knee instead of sitting at critical load
    detector = ModelSpec(DETECTOR, ModelKind.OBJECT_DETECTOR,
                         LatencySpec.lognormal_with_mean(40.0, 0.25), parallelism=6,
                         queue_capacity=256)
    cfg = ExperimentConfig(duration_s=point_s, warmup_s=warmup_s, fps=20.0, render_cost_ms=5.0,
                           models=[detector, default_models()[1]])
    reports = sweep_clients(cfg, range(1, 31), tmp_path, runner=run_experiment)
    failed = [r.n_clients for r in reports if r.status != "ok"]
    assert not failed, [(r.n_clients, r.error) for r in reports if r.status != "ok"]
    plateau = float(np.mean([r.total_fps for r in reports[-5:]]))
    crossing = next((r.n_clients for r in reports if r.client_fps_mean < 10.0), None)
    knee, breaks, slope, sig = knee_and_jitter(reports)
    elapsed = time.monotonic() - t0
    ok = (180.0 <= plateau <= 220.0 and crossing is not None and abs(crossing - 20) <= 1
          and not breaks and slope > 0 and elapsed < 600 * point_s / 10)
    verdict(6, ok, f"plateau {plateau:.1f} fps, per-client below 10 fps at N={crossing}, "
                   f"knee N={reports[knee].n_clients}, jitter "
                   f"{reports[knee].det_latency_std_ms:.2f}->{reports[-1].det_latency_std_ms:.2f} ms "
                   f"(slope {slope:+.3f} ms/client, {len(breaks)} decreases beyond run scatter "
                       f"{sig:.2f} ms), {elapsed:.0f} s")
    assert ok


def test_7_determinism_and_replay(tmp_path):
    t0 = time.monotonic()
    noisy = NoiseModel(p_miss=0.1, p_false=0.2, box_jitter_px=1.0, confidence_noise=0.05)
    identical = 0
    for name in BUNDLED:
        sc = bundled(name).with_noise(noisy).with_seed(17)
        a, b = run_lockstep(sc), run_lockstep(sc)
        identical += (a.gt_trace == b.gt_trace == replay_controls(sc, a.controls))
    replayed = reproduced = 0
    for seed in range(5):
        out = tmp_path / f"seed{seed}"
        live = run_lockstep(blinded(seed), LockstepConfig(out_dir=str(out)))
        for rep, rec in zip(replay(out), live.records):
            replayed += 1
            reproduced += rep.reproduces(rec) and rep.record_id == rec.record_id
    elapsed = time.monotonic() - t0
    ok = identical == len(BUNDLED) and replayed > 0 and reproduced == replayed and elapsed < 60
    verdict(7, ok, f"{identical}/{len(BUNDLED)} scenarios byte-identical on rerun and control "
                   f"replay, {reproduced}/{replayed} records reproduced, {elapsed:.1f} s")
    assert ok
