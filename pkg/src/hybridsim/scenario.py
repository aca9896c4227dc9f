"""Scenario files: TOML documents describing road, entities, camera and noise.

See docs/scenario-format.md for the grammar. Distances are metres, times
seconds, angles radians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .sensor import CameraModel, NoiseModel
from .world import (
    STATIC, EntityKind, EntityState, HazardParams, KindTag, Script, StaticScript,
    Vec3, VehicleParams, WaypointScript, heading_vector,
)

BUNDLED = ("ped-crossing", "lead-vehicle", "curve-roadside")


class ScenarioError(ValueError):
    """Parse or validation failure; ``where`` names the line or field."""

    def __init__(self, message: str, where: str | None = None):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


@dataclass(frozen=True)
class EntitySpec:
    kind: EntityKind
    initial: EntityState
    script: Script  # None means client-controlled


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    tick_rate_hz: int
    road: tuple[Vec3, ...]
    entities: tuple[EntitySpec, ...]
    duration_s: float
    sensor_fps: float = 20.0
    camera: CameraModel = field(default_factory=CameraModel)
    noise: NoiseModel = field(default_factory=NoiseModel)
    hazard: HazardParams = field(default_factory=HazardParams)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    source: str = ""

    def __post_init__(self):
        validate(self)

    @property
    def tick_us(self) -> int:
        return round(1e6 / self.tick_rate_hz)

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration_s * self.tick_rate_hz))

    def kinds(self) -> dict[int, EntityKind]:
        return {e.initial.entity_id: e.kind for e in self.entities}

    def client_entities(self) -> list[int]:
        return sorted(e.initial.entity_id for e in self.entities if e.script is None)

    def with_noise(self, noise: NoiseModel) -> "Scenario":
        return replace(self, noise=noise, source="")

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=seed, source="")

    def with_clients(self, n: int, spacing_m: float = 30.0) -> "Scenario":
        """Copy with ``n`` client vehicles: the first one plus a convoy queued
        behind it at ``spacing_m``."""
        clients = [e for e in self.entities if e.script is None]
        if not clients:
            raise ScenarioError("scenario has no client vehicle to replicate")
        if n <= len(clients):
            keep = {e.initial.entity_id for e in clients[:n]}
            ents = tuple(e for e in self.entities if e.script is not None
                         or e.initial.entity_id in keep)
            return replace(self, entities=ents, source="")
        lead = clients[0]
        next_id = max(e.initial.entity_id for e in self.entities) + 1
        extra = []
        for k in range(1, n - len(clients) + 1):
            st = lead.initial
            pos = st.position - st.direction.scale(spacing_m * k)
            extra.append(EntitySpec(lead.kind, EntityState(
                next_id, 0, pos, st.velocity, st.direction).quantized(), None))
            next_id += 1
        return replace(self, entities=self.entities + tuple(extra), source="")


def validate(sc: Scenario) -> None:
    if sc.tick_rate_hz <= 0 or int(sc.tick_rate_hz) != sc.tick_rate_hz:
        raise ScenarioError("tick_rate_hz must be a positive integer", "tick_rate_hz")
    if sc.sensor_fps <= 0:
        raise ScenarioError("sensor_fps must be positive", "sensor_fps")
    if sc.tick_rate_hz < 2 * sc.sensor_fps:
        raise ScenarioError(
            f"tick_rate_hz ({sc.tick_rate_hz}) must be >= 2 x sensor_fps ({sc.sensor_fps})",
            "tick_rate_hz")
    if len(sc.road) < 2:
        raise ScenarioError("road needs at least 2 waypoints", "road.waypoints")
    if not sc.duration_s > 0:
        raise ScenarioError("duration_s must be positive", "duration_s")
    if not 0 <= sc.seed < 2**64:
        raise ScenarioError("seed must be a 64-bit unsigned integer", "seed")
    seen = set()
    for i, e in enumerate(sc.entities):
        eid = e.initial.entity_id
        if eid in seen:
            raise ScenarioError(f"duplicate entity id {eid}", f"entities[{i}].id")
        seen.add(eid)
        if not e.initial.is_finite():
            raise ScenarioError("non-finite initial state", f"entities[{i}]")
        if isinstance(e.script, WaypointScript):
            if e.script.speed < 0:
                raise ScenarioError("script speed must be >= 0", f"entities[{i}].script.speed")
            if not e.script.waypoints:
                raise ScenarioError("script needs at least one waypoint",
                                    f"entities[{i}].script.waypoints")


def _vec(value: Any, where: str) -> Vec3:
    if not isinstance(value, (list, tuple)) or len(value) not in (2, 3):
        raise ScenarioError("expected [x, y] or [x, y, z]", where)
    try:
        comps = [float(c) for c in value] + ([0.0] if len(value) == 2 else [])
    except (TypeError, ValueError):
        raise ScenarioError("vector components must be numbers", where) from None
    v = Vec3(*comps)
    if not v.is_finite():
        raise ScenarioError("vector components must be finite", where)
    return v


def _get(table: dict, key: str, kind, where: str, default=...):
    if key not in table:
        if default is ...:
            raise ScenarioError("missing required field", f"{where}{key}")
        return default
    value = table[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ScenarioError(f"expected {kind.__name__}", f"{where}{key}")
    return value


def _parse_script(raw: Any, where: str) -> Script:
    if isinstance(raw, str):
        if raw in ("client", "client-controlled"):
            return None
        if raw == "static":
            return STATIC
        raise ScenarioError(f"unknown script {raw!r}", where)
    if not isinstance(raw, dict):
        raise ScenarioError("script must be 'client', 'static' or a table", where)
    pts = _get(raw, "waypoints", list, where + ".")
    return WaypointScript(
        waypoints=tuple(_vec(p, f"{where}.waypoints[{j}]") for j, p in enumerate(pts)),
        speed=_get(raw, "speed", float, where + "."),
        start_s=_get(raw, "start_s", float, where + ".", 0.0),
        loop=_get(raw, "loop", bool, where + ".", False),
    )


def _parse_entity(raw: dict, i: int) -> EntitySpec:
    where = f"entities[{i}]."
    if not isinstance(raw, dict):
        raise ScenarioError("entity must be a table", f"entities[{i}]")
    eid = _get(raw, "id", int, where)
    if not 0 <= eid < 2**32:
        raise ScenarioError("id must be a 32-bit unsigned integer", where + "id")
    try:
        tag = KindTag.parse(_get(raw, "kind", str, where))
    except ValueError as exc:
        raise ScenarioError(str(exc), where + "kind") from None
    kind = EntityKind.default(tag)
    try:
        kind = EntityKind(
            tag,
            _vec(raw["extent"], where + "extent") if "extent" in raw else kind.extent,
            _get(raw, "real_height", float, where, kind.real_height),
        )
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(str(exc), where + "extent") from None
    if "script" not in raw:
        raise ScenarioError("every entity needs exactly one script entry", where + "script")
    script = _parse_script(raw["script"], where + "script")
    pos = _vec(_get(raw, "position", list, where), where + "position")
    yaw = _get(raw, "heading_rad", float, where, 0.0)
    speed = _get(raw, "speed", float, where, 0.0)
    direction = heading_vector(yaw)
    velocity = direction.scale(speed) if script is None else Vec3(0.0, 0.0, 0.0)
    state = EntityState(eid, 0, pos, velocity, direction).quantized()
    return EntitySpec(kind, state, script)


def parse_scenario(source: str) -> Scenario:
    try:
        doc = tomli.loads(source)
    except tomli.TOMLDecodeError as exc:
        raise ScenarioError(str(exc), "toml") from None
    road_t = doc.get("road")
    if not isinstance(road_t, dict):
        raise ScenarioError("missing [road] table", "road")
    road = tuple(_vec(p, f"road.waypoints[{j}]")
                 for j, p in enumerate(_get(road_t, "waypoints", list, "road.")))
    entities = tuple(_parse_entity(e, i) for i, e in enumerate(doc.get("entities", [])))
    try:
        camera = CameraModel.from_dict(doc.get("camera", {}))
    except (TypeError, ValueError) as exc:
        raise ScenarioError(str(exc), "camera") from None
    try:
        noise = NoiseModel.from_dict(doc.get("noise", {}))
    except (TypeError, ValueError, KeyError) as exc:
        raise ScenarioError(str(exc), "noise") from None
    try:
        hazard = HazardParams(**{k: float(v) for k, v in doc.get("hazard", {}).items()})
        vehicle = VehicleParams(**{k: float(v) for k, v in doc.get("vehicle", {}).items()})
    except TypeError as exc:
        raise ScenarioError(str(exc), "hazard/vehicle") from None
    return Scenario(
        name=_get(doc, "name", str, ""),
        seed=_get(doc, "seed", int, "", 0),
        tick_rate_hz=_get(doc, "tick_rate_hz", int, "", 100),
        road=road,
        entities=entities,
        duration_s=_get(doc, "duration_s", float, ""),
        sensor_fps=_get(doc, "sensor_fps", float, "", 20.0),
        camera=camera,
        noise=noise,
        hazard=hazard,
        vehicle=vehicle,
        source=source,
    )


def load_scenario(source: str | Path) -> Scenario:
    """Load from scenario text, a file path, or a bundled scenario name."""
    if isinstance(source, Path):
        return parse_scenario(source.read_text())
    if source in BUNDLED:
        return bundled(source)
    if "\n" not in source and Path(source).is_file():
        return parse_scenario(Path(source).read_text())
    return parse_scenario(source)


def bundled(name: str) -> Scenario:
    fname = name.replace("-", "_") + ".toml"
    text = resources.files("hybridsim.scenarios").joinpath(fname).read_text()
    return parse_scenario(text)


def _script_to_toml(script: Script):
    if script is None:
        return "client"
    if isinstance(script, StaticScript):
        return "static"
    return {"waypoints": [list(p) for p in script.waypoints], "speed": script.speed,
            "start_s": script.start_s, "loop": script.loop}


def dump_scenario(sc: Scenario) -> str:
    """Serialize to the scenario text format; ``parse_scenario`` inverts it."""
    doc: dict[str, Any] = {
        "name": sc.name, "seed": sc.seed, "tick_rate_hz": sc.tick_rate_hz,
        "duration_s": sc.duration_s, "sensor_fps": sc.sensor_fps,
        "road": {"waypoints": [list(p) for p in sc.road]},
        "camera": sc.camera.to_dict(),
        "noise": sc.noise.to_dict(),
        "hazard": vars(sc.hazard).copy(),
        "vehicle": vars(sc.vehicle).copy(),
        "entities": [],
    }
    for e in sc.entities:
        st = e.initial
        ent = {
            "id": st.entity_id, "kind": e.kind.tag.label,
            "position": list(st.position),
            "heading_rad": math.atan2(st.direction.y, st.direction.x),
            "speed": st.velocity.planar_norm(),
            "extent": list(e.kind.extent), "real_height": e.kind.real_height,
            "script": _script_to_toml(e.script),
        }
        doc["entities"].append(ent)
    return tomli_w.dumps(doc)


def scenario_text(sc: Scenario) -> str:
    return sc.source or dump_scenario(sc)
