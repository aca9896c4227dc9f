"""Rebuild the situation around a persisted mismatch.

The ground-truth window is re-aligned tick by tick next to the client's
estimate stream, and the triggering report is evaluated again with the
criteria stored in the record.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from ..detector import Finding, MatchCriteria, StateBuffer, evaluate
from ..mismatch_log import MismatchRecord, PartialRecord, read_log
from ..proto import DerivedState
from ..scenario import Scenario, parse_scenario
from ..world import GroundTruthHazard, classify_hazard

log = logging.getLogger("hybridsim.replay")

TIMELINE_COLUMNS = ["sim_time_s", "ego_x", "ego_y", "ego_speed", "hazard", "derived_state",
                    "frame_id", "pipeline_age_ms", "others"]


@dataclass
class TimelineRow:
    sim_time_us: int
    ego_x: float
    ego_y: float
    ego_speed: float
    hazard: str
    derived_state: str
    frame_id: int | None
    pipeline_age_ms: float | None
    others: list = field(default_factory=list)  # (entity_id, x, y)

    def cells(self) -> list[str]:
        return [f"{self.sim_time_us / 1e6:.3f}", f"{self.ego_x:.3f}", f"{self.ego_y:.3f}",
                f"{self.ego_speed:.3f}", self.hazard, self.derived_state,
                "" if self.frame_id is None else str(self.frame_id),
                "" if self.pipeline_age_ms is None else f"{self.pipeline_age_ms:.3f}",
                ";".join(f"{e}:{x:.3f}:{y:.3f}" for e, x, y in self.others)]


@dataclass
class Replay:
    record_id: int
    criterion: str
    rows: list[TimelineRow]
    findings: list[Finding]
    warning: str = ""

    def reproduces(self, record: MismatchRecord) -> bool:
        return any(f.criterion == record.criterion and f.details == record.details
                   and f.frame_id == record.frame_id for f in self.findings)


def _buffer(sc: Scenario, states, window_s: float) -> StateBuffer:
    buf = StateBuffer(window_s, sc.tick_us)
    buf.ingest(sorted(states, key=lambda s: (s.sim_time_us, s.entity_id)))
    return buf


def _timeline(sc: Scenario, buf: StateBuffer, ego: int, reports: Sequence) -> list[TimelineRow]:
    if buf.latest_us is None or ego not in buf.entities:
        return []
    kinds = sc.kinds()
    tick = sc.tick_us
    start = -(-buf.earliest_us // tick) * tick
    reports = sorted(reports, key=lambda r: r.sim_time_us)
    rows, j, current = [], 0, None
    for t in range(start, buf.latest_us + 1, tick):
        world, _ = buf.align(t, kinds)
        while j < len(reports) and reports[j].sim_time_us <= t:
            current = reports[j]
            j += 1
        me = world.states[ego]
        rows.append(TimelineRow(
            t, me.position.x, me.position.y, me.velocity.planar_norm(),
            classify_hazard(world, ego, sc.hazard).name,
            "" if current is None else DerivedState(current.derived_state).name,
            None if current is None else current.frame_id_ref,
            None if current is None else (current.t_estimate_us - current.t_render_us) / 1000,
            [(e, s.position.x, s.position.y) for e, s in sorted(world.states.items()) if e != ego],
        ))
    return rows


def replay_record(rec: MismatchRecord) -> Replay:
    sc = parse_scenario(rec.scenario_text)
    criteria = MatchCriteria.from_record_dict(rec.criteria)
    buf = _buffer(sc, rec.gt_window, rec.window_s)
    findings: list[Finding] = []
    trigger = rec.trigger()
    warning = ""
    if trigger is None:
        warning = "triggering report missing from the estimate window"
    else:
        world, extrapolated = buf.align(trigger.sim_time_us, sc.kinds())
        findings = evaluate(trigger, world, extrapolated, criteria, sc.camera, sc.hazard,
                            rec.timing.t_ingest_us)
    rows = _timeline(sc, buf, rec.entity_id, rec.est_window)
    return Replay(rec.record_id, rec.criterion, rows, findings, warning)


def replay_partial(part: PartialRecord) -> Replay:
    f = part.fields
    rows: list[TimelineRow] = []
    if "scenario_text" in f and part.gt_window:
        sc = parse_scenario(f["scenario_text"])
        buf = _buffer(sc, part.gt_window, f.get("window_s", 10.0))
        rows = _timeline(sc, buf, f["entity_id"], [])
    return Replay(f.get("record_id", 0), f.get("criterion", ""), rows, [],
                  f"partial record: {part.warning}")


def replay(path: str | Path, record_id: int | None = None) -> list[Replay]:
    """Replays for every record in a mismatch log (or one of them)."""
    p = Path(path)
    if p.is_dir():
        p = p / "mismatches.bin"
    if not p.is_file():
        raise FileNotFoundError(f"no mismatch log at {path}")
    records, partial = read_log(p)
    out = [replay_record(r) for r in records if record_id in (None, r.record_id)]
    if partial is not None:
        log.warning("mismatch log is damaged: %s", partial.warning)
        if record_id in (None, partial.fields.get("record_id")):
            out.append(replay_partial(partial))
    if record_id is not None and not out:
        raise KeyError(f"record {record_id} not found")
    return out


def timeline_csv(rep: Replay) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(TIMELINE_COLUMNS)
    for row in rep.rows:
        w.writerow(row.cells())
    return buf.getvalue()


def hazard_escalates_while_safe(rep: Replay) -> bool:
    """True when the timeline shows CollisionPossible or worse while the
    client still reports SafeToDrive."""
    bad = {GroundTruthHazard.COLLISION_POSSIBLE.name, GroundTruthHazard.COLLISION.name}
    return any(r.hazard in bad and r.derived_state == DerivedState.SAFE_TO_DRIVE.name
               for r in rep.rows)
