"""Corner-case detector.

Buffers the ground-truth delta stream and the clients' estimate reports,
aligns each report with the ground truth at its frame's simulation time, and
records mismatches with the surrounding history.
"""

from __future__ import annotations

import argparse
import asyncio
import bisect
import collections
import itertools
import json
import logging
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import tomli

from .mismatch_log import MismatchLog, MismatchRecord, TimingTrace
from .net import Connection, now_us, parse_addr
from .proto import (
    AckMsg, ByeMsg, DerivedState, EstimateReportMsg, HelloMsg, ProtocolError, Role,
    StateUpdateBatch, decode_state_batch, encode_state_update,
)
from .scenario import Scenario, ScenarioError, load_scenario, scenario_text
from .sensor import CONFIDENCE_K_PX, CameraModel, render_annotations
from .world import (
    EntityKind, EntityState, GroundTruthHazard, HazardParams, Vec3, WorldSnapshot, classify_hazard,
)

log = logging.getLogger("hybridsim.detector")

DERIVED_STATE = "derived_state"
POSITION = "position"
STALENESS = "staleness"
CRITERIA = (DERIVED_STATE, POSITION, STALENESS)

_DS_NAMES = {"safetodrive": DerivedState.SAFE_TO_DRIVE, "slowdown": DerivedState.SLOW_DOWN,
             "stop": DerivedState.STOP}
_HZ_NAMES = {"safe": GroundTruthHazard.SAFE,
             "collisionpossible": GroundTruthHazard.COLLISION_POSSIBLE,
             "collision": GroundTruthHazard.COLLISION}


def _norm(name: str) -> str:
    return name.replace("_", "").replace("-", "").replace(" ", "").lower()


def default_state_table() -> dict[tuple[DerivedState, GroundTruthHazard], bool]:
    table = {(d, h): False for d in DerivedState for h in GroundTruthHazard}
    table[(DerivedState.SAFE_TO_DRIVE, GroundTruthHazard.COLLISION_POSSIBLE)] = True
    table[(DerivedState.SAFE_TO_DRIVE, GroundTruthHazard.COLLISION)] = True
    table[(DerivedState.SLOW_DOWN, GroundTruthHazard.COLLISION)] = True
    return table


@dataclass
class MatchCriteria:
    state_table: dict = field(default_factory=default_state_table)  # True marks a mismatch
    position_tolerance_m: float = 2.0
    class_must_match: bool = True
    staleness_threshold_ms: float = 100.0
    enabled: frozenset = frozenset(CRITERIA)
    # objects the client is expected to see: in its corridor and this close
    corridor_halfwidth: float = 2.0
    missed_range_m: float = 15.0
    min_confidence: float = 0.3

    def __post_init__(self):
        self.enabled = frozenset(self.enabled)
        unknown = self.enabled - set(CRITERIA)
        if unknown:
            raise ValueError(f"unknown criteria {sorted(unknown)}")
        missing = [(d, h) for d in DerivedState for h in GroundTruthHazard
                   if (d, h) not in self.state_table]
        if missing:
            raise ValueError(f"state_table is missing {missing}")
        for name in ("position_tolerance_m", "staleness_threshold_ms", "corridor_halfwidth",
                     "missed_range_m"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    @property
    def min_box_px(self) -> float:
        # the height below which a zero-noise detection falls under min_confidence
        return CONFIDENCE_K_PX / max(1e-9, 1.0 - self.min_confidence)

    @classmethod
    def from_dict(cls, d: dict) -> "MatchCriteria":
        d = dict(d)
        table = default_state_table()
        for key, verdict in d.pop("state_table", {}).items():
            ds_name, _, hz_name = key.partition("/")
            try:
                cell = (_DS_NAMES[_norm(ds_name)], _HZ_NAMES[_norm(hz_name)])
            except KeyError:
                raise ValueError(f"bad state_table key {key!r}") from None
            if verdict not in ("ok", "mismatch"):
                raise ValueError(f"state_table[{key!r}] must be 'ok' or 'mismatch'")
            table[cell] = verdict == "mismatch"
        if "enabled" in d:
            d["enabled"] = frozenset(d["enabled"])
        return cls(state_table=table, **d)

    @classmethod
    def load(cls, path: str | Path) -> "MatchCriteria":
        return cls.from_dict(tomli.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "state_table": {f"{d.name}/{h.name}": "mismatch" if v else "ok"
                            for (d, h), v in sorted(self.state_table.items())},
            "position_tolerance_m": self.position_tolerance_m,
            "class_must_match": self.class_must_match,
            "staleness_threshold_ms": self.staleness_threshold_ms,
            "enabled": sorted(self.enabled),
            "corridor_halfwidth": self.corridor_halfwidth,
            "missed_range_m": self.missed_range_m,
            "min_confidence": self.min_confidence,
        }

    @classmethod
    def from_record_dict(cls, d: dict) -> "MatchCriteria":
        d = dict(d)
        table = {}
        for key, verdict in d.pop("state_table").items():
            ds, _, hz = key.partition("/")
            table[(DerivedState[ds], GroundTruthHazard[hz])] = verdict == "mismatch"
        return cls(state_table=table, **d)


class StateBuffer:
    """Per-entity time-ordered history of ground-truth samples.

    The stream carries only changed entities, so a sample stays valid until
    the next one for that entity; ``tick_us`` lets alignment use that.
    """

    def __init__(self, window_s: float = 10.0, tick_us: int = 10_000, retain_factor: float = 2.0):
        if window_s <= 0:
            raise ValueError("window_s must be > 0")
        self.window_s = window_s
        self.tick_us = tick_us
        self.retain_us = int(window_s * retain_factor * 1e6)
        self.entities: dict[int, collections.deque[EntityState]] = {}
        self._times: dict[int, collections.deque[int]] = {}
        self.latest_us: int | None = None
        self.earliest_us: int | None = None
        self.rejected = 0
        # every sample in arrival order with its wire encoding, so windows
        # are slices instead of per-record sorts and re-encodes
        self._log: list[tuple[int, int, EntityState, bytes]] = []
        self._log_head = 0
        self._log_ordered = True
        self._log_dropped_us: int | None = None  # newest sim time trimmed off the log
        self._log_last = (-1, -1)

    def __len__(self) -> int:
        return sum(len(b) for b in self.entities.values())

    def ingest(self, states: Iterable[EntityState]) -> int:
        accepted, fresh = 0, []
        for st in states:
            buf = self.entities.get(st.entity_id)
            if buf is None:
                buf = self.entities[st.entity_id] = collections.deque()
                self._times[st.entity_id] = collections.deque()
            elif buf[-1].sim_time_us >= st.sim_time_us:
                self.rejected += 1
                continue
            buf.append(st)
            self._times[st.entity_id].append(st.sim_time_us)
            fresh.append((st.sim_time_us, st.entity_id, st, encode_state_update(st)))
            accepted += 1
            if self.latest_us is None or st.sim_time_us > self.latest_us:
                self.latest_us = st.sim_time_us
            if self.earliest_us is None or st.sim_time_us < self.earliest_us:
                self.earliest_us = st.sim_time_us
        if fresh:
            fresh.sort(key=lambda e: e[:2])
            if fresh[0][:2] <= self._log_last:
                self._log_ordered = False
            self._log_last = fresh[-1][:2]
            self._log.extend(fresh)
        self.evict()
        return accepted

    def evict(self) -> None:
        if self.latest_us is None:
            return
        horizon = self.latest_us - self.retain_us
        for eid, buf in self.entities.items():
            times = self._times[eid]
            # keep the newest sample at or before the horizon: it is still valid there
            while len(buf) > 1 and times[1] <= horizon:
                buf.popleft()
                times.popleft()
        log_, head = self._log, self._log_head
        while head < len(log_) and log_[head][0] <= horizon:
            self._log_dropped_us = log_[head][0]
            head += 1
        if head > 4096 and head * 2 > len(log_):
            del log_[:head]
            head = 0
        self._log_head = head

    def covers(self, t_us: int) -> bool:
        return self.latest_us is not None and self.latest_us >= t_us

    def state_at(self, eid: int, t_us: int) -> tuple[EntityState, bool]:
        """Interpolated state and an extrapolation flag."""
        buf, times = self.entities[eid], self._times[eid]
        i = bisect.bisect_right(times, t_us)
        if i == 0:
            return buf[0], True
        a = buf[i - 1]
        if a.sim_time_us == t_us or i == len(buf):
            return a, t_us > (self.latest_us or 0)
        b = buf[i]
        # unchanged until the tick before b's
        t_a = max(a.sim_time_us, b.sim_time_us - self.tick_us)
        if t_us <= t_a:
            return a, False
        w = (t_us - t_a) / (b.sim_time_us - t_a)
        pos = a.position + (b.position - a.position).scale(w)
        return EntityState(eid, t_us, pos, a.velocity, a.direction), False

    def align(self, t_us: int, kinds: dict[int, EntityKind]) -> tuple[WorldSnapshot | None, bool]:
        if not self.entities:
            return None, False
        states, extrapolated = [], False
        for eid in self.entities:
            st, ex = self.state_at(eid, t_us)
            states.append(st)
            extrapolated |= ex
        return WorldSnapshot.build(-1, t_us, states, kinds), extrapolated

    def window(self, t_end_us: int, window_s: float | None = None) -> list[EntityState]:
        """Samples covering [t_end - window, latest], including for each entity
        the last sample at or before the window start."""
        return self.window_encoded(t_end_us, window_s)[0]

    def window_encoded(self, t_end_us: int,
                       window_s: float | None = None) -> tuple[list[EntityState], bytes]:
        """``window`` plus the concatenated wire encoding of its samples."""
        start = t_end_us - int((window_s or self.window_s) * 1e6)
        log_, head = self._log, self._log_head
        dropped = self._log_dropped_us
        if not self._log_ordered or (dropped is not None and start < dropped):
            return self._window_slow(start)
        # the suffix after the window start comes straight from the log
        j = bisect.bisect_right(log_, start, lo=head, key=lambda e: e[0])
        prefix = []
        for eid, buf in self.entities.items():
            i = bisect.bisect_right(self._times[eid], start) - 1
            if i >= 0:
                st = buf[i]
                prefix.append((st.sim_time_us, eid, st))
        prefix.sort(key=lambda e: e[:2])
        states = [e[2] for e in prefix] + [e[2] for e in log_[j:]]
        raw = b"".join([encode_state_update(e[2]) for e in prefix] + [e[3] for e in log_[j:]])
        return states, raw

    def _window_slow(self, start: int) -> tuple[list[EntityState], bytes]:
        out = []
        for eid in sorted(self.entities):
            buf, times = self.entities[eid], self._times[eid]
            i = max(0, bisect.bisect_right(times, start) - 1)
            out.extend(itertools.islice(buf, i, None))
        out.sort(key=lambda s: (s.sim_time_us, s.entity_id))
        return out, b"".join(encode_state_update(s) for s in out)


@dataclass
class Finding:
    criterion: str
    client_id: int
    entity_id: int
    sim_time_us: int
    frame_id: int
    timing: TimingTrace
    details: dict


def _planar_dist(a: Vec3, b: Vec3) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def match_estimates(estimates, truth: Sequence[EntityState], kinds: dict[int, EntityKind],
                    class_must_match: bool = True) -> list[tuple[int, int, float]]:
    """Greedy nearest-neighbour pairs (estimate index, entity id, planar error)."""
    pairs = []
    for i, e in enumerate(estimates):
        for st in truth:
            if class_must_match and kinds[st.entity_id].tag != e.tag:
                continue
            pairs.append((_planar_dist(e.world_position, st.position), i, st.entity_id))
    pairs.sort()
    used_e, used_t, out = set(), set(), []
    for d, i, eid in pairs:
        if i in used_e or eid in used_t:
            continue
        used_e.add(i)
        used_t.add(eid)
        out.append((i, eid, d))
    return sorted(out)


def expected_visible(world: WorldSnapshot, ego_id: int, camera: CameraModel,
                     criteria: MatchCriteria) -> list[int]:
    """Entities a working client should have reported at this instant."""
    ego = world.states[ego_id]
    pose = camera.pose_for(ego)
    boxes = render_annotations(camera, pose,
                               ((world.kinds[e], s) for e, s in world.states.items()),
                               exclude=(ego_id,))
    out = []
    for box in boxes:
        if box.truncated or box.h < criteria.min_box_px:
            continue
        depth, lat, _ = pose.to_camera(world.states[box.entity_id].position)
        if depth < criteria.missed_range_m and abs(lat) < criteria.corridor_halfwidth:
            out.append(box.entity_id)
    return out


def evaluate(report: EstimateReportMsg, world: WorldSnapshot | None, extrapolated: bool,
             criteria: MatchCriteria, camera: CameraModel, hazard: HazardParams,
             t_ingest_us: int = 0, same_clock: bool = True) -> list[Finding]:
    timing = TimingTrace(report.t_render_us, report.t_estimate_us, t_ingest_us)
    found = []

    def add(criterion, details):
        found.append(Finding(criterion, report.client_id, report.entity_id, report.sim_time_us,
                             report.frame_id_ref, timing, details))

    if STALENESS in criteria.enabled and same_clock:
        age_ms = timing.pipeline_age_us / 1000.0
        if age_ms > criteria.staleness_threshold_ms:
            add(STALENESS, {"pipeline_age_ms": age_ms,
                            "threshold_ms": criteria.staleness_threshold_ms,
                            "extrapolated": extrapolated})
    if world is None or extrapolated or report.entity_id not in world.states:
        return found

    if DERIVED_STATE in criteria.enabled:
        hz = classify_hazard(world, report.entity_id, hazard)
        if criteria.state_table[(DerivedState(report.derived_state), hz)]:
            add(DERIVED_STATE, {"derived_state": DerivedState(report.derived_state).name,
                                "hazard": hz.name})

    if POSITION in criteria.enabled:
        others = [s for e, s in sorted(world.states.items()) if e != report.entity_id]
        pairs = match_estimates(report.estimates, others, dict(world.kinds),
                                criteria.class_must_match)
        errors = [[i, eid, d] for i, eid, d in pairs if d > criteria.position_tolerance_m]
        matched = {eid for _, eid, _ in pairs}
        missed = []
        if camera is not None:
            missed = [e for e in expected_visible(world, report.entity_id, camera, criteria)
                      if e not in matched]
        if errors or missed:
            add(POSITION, {"errors": errors, "missed": missed,
                           "tolerance_m": criteria.position_tolerance_m})
    return found


class CornerCaseDetector:
    """Single-owner evaluation core; transports feed it in order."""

    def __init__(self, scenario: Scenario, criteria: MatchCriteria | None = None,
                 window_s: float = 10.0, debounce_s: float = 2.0,
                 sink: MismatchLog | None = None, clock=now_us, same_clock: bool = True):
        self.scenario = scenario
        self.criteria = criteria or MatchCriteria()
        self.kinds = scenario.kinds()
        self.camera = scenario.camera
        self.hazard = scenario.hazard
        self.window_s = window_s
        self.debounce_us = int(debounce_s * 1e6)
        self.buffer = StateBuffer(window_s, scenario.tick_us)
        self.sink = sink
        self.clock = clock
        self.same_clock = same_clock
        self._scenario_text = scenario_text(scenario)
        self._pending: collections.deque[tuple[EstimateReportMsg, int]] = collections.deque()
        self._reports: dict[int, collections.deque[EstimateReportMsg]] = {}
        self._last_record: dict[tuple[str, int], int] = {}
        self.findings: list[Finding] = []
        self.records: list[MismatchRecord] = []
        self.reports_seen: list[tuple[int, int, int, int, int]] = []  # client, frame, sim_t, age, ingest
        self.gt_decode_errors = 0
        self.alignment_unavailable = 0
        self.extrapolated = 0
        self.debounced = 0
        self.write_failures = 0
        self.evaluated = 0

    # ------------------------------------------------------------ ingest
    def ingest_ground_truth(self, batch: StateUpdateBatch | bytes) -> int:
        if isinstance(batch, (bytes, bytearray, memoryview)):
            try:
                states = decode_state_batch(bytes(batch))
            except (ProtocolError, ValueError):
                self.gt_decode_errors += 1
                return 0
        else:
            states = batch.states
        n = self.buffer.ingest(states)
        self.process()
        return n

    def ingest_estimate(self, report: EstimateReportMsg, t_ingest_us: int | None = None) -> None:
        t = self.clock() if t_ingest_us is None else t_ingest_us
        self.reports_seen.append((report.client_id, report.frame_id_ref, report.sim_time_us,
                                  report.t_estimate_us - report.t_render_us, t))
        hist = self._reports.setdefault(report.client_id, collections.deque())
        hist.append(report)
        horizon = report.sim_time_us - int(self.window_s * 1e6)
        while hist and hist[0].sim_time_us < horizon:
            hist.popleft()
        self._pending.append((report, t))
        self.process()

    @property
    def rejected_out_of_order(self) -> int:
        return self.buffer.rejected

    # ------------------------------------------------------------ evaluation
    def process(self, force: bool = False) -> list[MismatchRecord]:
        """Evaluate reports whose frame time the ground truth already covers."""
        new = []
        while self._pending:
            report, t_ingest = self._pending[0]
            if not force and not self.buffer.covers(report.sim_time_us):
                break
            self._pending.popleft()
            new.extend(self._evaluate_one(report, t_ingest))
        return new

    def finish(self) -> list[MismatchRecord]:
        return self.process(force=True)

    def _evaluate_one(self, report: EstimateReportMsg, t_ingest: int) -> list[MismatchRecord]:
        world, extrapolated = self.buffer.align(report.sim_time_us, self.kinds)
        if world is None:
            self.alignment_unavailable += 1
        elif extrapolated:
            self.extrapolated += 1
        self.evaluated += 1
        out = []
        for f in evaluate(report, world, extrapolated, self.criteria, self.camera, self.hazard,
                          t_ingest, self.same_clock):
            self.findings.append(f)
            rec = self.persist(f)
            if rec is not None:
                out.append(rec)
        return out

    def persist(self, finding: Finding) -> MismatchRecord | None:
        key = (finding.criterion, finding.client_id)
        last = self._last_record.get(key)
        if last is not None and finding.sim_time_us - last < self.debounce_us:
            self.debounced += 1
            return None
        horizon = finding.sim_time_us - int(self.window_s * 1e6)
        ests = tuple(r for r in self._reports.get(finding.client_id, ())
                     if horizon <= r.sim_time_us <= finding.sim_time_us)
        gt, raw = self.buffer.window_encoded(finding.sim_time_us)
        rec = MismatchRecord(
            record_id=len(self.records) + 1, criterion=finding.criterion,
            client_id=finding.client_id, entity_id=finding.entity_id,
            sim_time_us=finding.sim_time_us, frame_id=finding.frame_id, timing=finding.timing,
            seed=self.scenario.seed, window_s=self.window_s, scenario_text=self._scenario_text,
            criteria=self.criteria.to_dict(), details=finding.details,
            gt_window=tuple(gt), est_window=ests, gt_raw=raw,
        )
        self._last_record[key] = finding.sim_time_us
        if self.sink is not None:
            try:
                self.sink.append(rec)
            except OSError as exc:
                self.write_failures += 1
                log.error("mismatch log write failed: %s", exc)
        # the encoded window is only needed for writing
        rec = replace(rec, gt_raw=b"")
        self.records.append(rec)
        return rec

    def metrics(self) -> dict:
        return {
            "evaluated": self.evaluated,
            "findings": [[f.criterion, f.client_id, f.sim_time_us, f.frame_id] for f in self.findings],
            "records": [r.summary() for r in self.records],
            "reports": self.reports_seen,
            "gt_samples": len(self.buffer),
            "gt_decode_errors": self.gt_decode_errors,
            "gt_out_of_order": self.buffer.rejected,
            "alignment_unavailable": self.alignment_unavailable,
            "extrapolated": self.extrapolated,
            "debounced": self.debounced,
            "write_failures": self.write_failures,
        }


# ---------------------------------------------------------------- transport

class DetectorApp:
    def __init__(self, core: CornerCaseDetector, listen_est: str = "127.0.0.1:7403",
                 connect_gt: str | None = "127.0.0.1:7401", listen_gt: str | None = None,
                 grace_s: float = 1.0, metrics_path: str | None = None):
        self.core = core
        self.listen_est = listen_est
        self.connect_gt = connect_gt
        self.listen_gt = listen_gt
        self.grace_s = grace_s
        self.metrics_path = metrics_path
        self._servers: list = []
        self._gt_done = asyncio.Event()

    @property
    def est_port(self) -> int:
        return self._servers[0].sockets[0].getsockname()[1]

    async def start(self) -> None:
        host, port = parse_addr(self.listen_est)
        self._servers.append(await asyncio.start_server(self._on_estimates, host, port))
        if self.listen_gt:
            host, port = parse_addr(self.listen_gt)
            self._servers.append(await asyncio.start_server(self._on_gt_push, host, port))
        log.info("detector listening for estimates on %s:%d", host, self.est_port)

    async def _consume_gt(self, conn: Connection) -> None:
        try:
            while True:
                frame = await conn.recv_frame()
                if frame is None:
                    break
                if frame.msg_type == StateUpdateBatch.msg_type:
                    self.core.ingest_ground_truth(frame.payload)
                elif frame.msg_type == ByeMsg.msg_type:
                    break
        except (ProtocolError, ConnectionError) as exc:
            log.warning("ground-truth stream error: %s", exc)
            self.core.gt_decode_errors += 1
        finally:
            await conn.close()
            self._gt_done.set()

    async def _on_gt_push(self, reader, writer) -> None:
        await self._consume_gt(Connection(reader, writer))

    async def _on_estimates(self, reader, writer) -> None:
        conn = Connection(reader, writer)
        try:
            while True:
                msg = await conn.recv()
                if msg is None or isinstance(msg, ByeMsg):
                    break
                if isinstance(msg, EstimateReportMsg):
                    self.core.ingest_estimate(msg)
        except (ProtocolError, ConnectionError) as exc:
            log.warning("estimate stream error: %s", exc)
        finally:
            await conn.close()

    async def run(self) -> int:
        if not self._servers:
            await self.start()
        if self.connect_gt:
            conn = await Connection.open(self.connect_gt, retries=100, delay=0.1)
            conn.send(HelloMsg(Role.DETECTOR))
            ack = await conn.recv()
            if not isinstance(ack, AckMsg) or ack.status != AckMsg.OK:
                raise ConnectionError("ground-truth stream refused")
            asyncio.ensure_future(self._consume_gt(conn))
        await self._gt_done.wait()
        await asyncio.sleep(self.grace_s)  # late reports from clients
        self.core.finish()
        for srv in self._servers:
            srv.close()
        if self.metrics_path:
            Path(self.metrics_path).write_text(json.dumps(self.core.metrics()))
        return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridsim-detector", description=__doc__)
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--connect-gt", default="127.0.0.1:7401",
                   help="server ground-truth port to subscribe to ('none' to disable)")
    p.add_argument("--listen-gt", default=None, help="also accept pushed ground-truth streams")
    p.add_argument("--listen-est", default="127.0.0.1:7403")
    p.add_argument("--criteria", default=None, help="criteria TOML")
    p.add_argument("--window", type=float, default=10.0, help="history window in seconds")
    p.add_argument("--debounce", type=float, default=2.0)
    p.add_argument("--out", default="mismatches", help="mismatch log directory")
    p.add_argument("--grace", type=float, default=1.0)
    p.add_argument("--metrics", default=None)
    p.add_argument("--foreign-clock", action="store_true",
                   help="clients stamp reports with another host's clock; skip staleness")
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
        criteria = MatchCriteria.load(args.criteria) if args.criteria else MatchCriteria()
        if args.window <= 0 or args.debounce < 0:
            raise ValueError("--window must be > 0 and --debounce >= 0")
    except (ScenarioError, ValueError, OSError, tomli.TOMLDecodeError) as exc:
        log.error("%s", exc)
        return 1
    core = CornerCaseDetector(scenario, criteria, args.window, args.debounce, MismatchLog(args.out),
                              same_clock=not args.foreign_clock)
    app = DetectorApp(core, args.listen_est,
                      None if args.connect_gt == "none" else args.connect_gt,
                      args.listen_gt, args.grace, args.metrics)
    try:
        return asyncio.run(app.run())
    except OSError as exc:
        log.error("%s", exc)
        return 1
    except ConnectionError as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
