"""Deterministic world model: entity kinematics, scripted actors, collisions, hazards.

All externally visible state (``EntityState``) is quantized to binary32 so that
what the server publishes on the wire is exactly what the world holds.
Internal integration runs in binary64.
"""

from __future__ import annotations

import enum
import logging
import math
import struct
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, NamedTuple, Sequence

log = logging.getLogger(__name__)

_F32x3 = struct.Struct("<3f")


class Vec3(NamedTuple):
    x: float
    y: float
    z: float

    def __add__(self, other):  # type: ignore[override]
        return Vec3(self.x + other.x, self.y + other.y, self.z + other.z)

    def __sub__(self, other):
        return Vec3(self.x - other.x, self.y - other.y, self.z - other.z)

    def scale(self, k: float) -> "Vec3":
        return Vec3(self.x * k, self.y * k, self.z * k)

    def dot(self, other) -> float:
        return self.x * other.x + self.y * other.y + self.z * other.z

    def norm(self) -> float:
        return math.sqrt(self.dot(self))

    def planar_norm(self) -> float:
        return math.hypot(self.x, self.y)

    def is_finite(self) -> bool:
        return all(math.isfinite(c) for c in self)

    def f32(self) -> "Vec3":
        """Round every component to the nearest binary32 value."""
        return Vec3(*_F32x3.unpack(_F32x3.pack(*self)))


ZERO = Vec3(0.0, 0.0, 0.0)
UNIT_X = Vec3(1.0, 0.0, 0.0)


def heading_vector(yaw: float) -> Vec3:
    return Vec3(math.cos(yaw), math.sin(yaw), 0.0)


def yaw_of(direction: Vec3) -> float:
    return math.atan2(direction.y, direction.x)


@dataclass(frozen=True, slots=True)
class EntityState:
    """Ground-truth kinematic record of one entity at one instant.

    ``direction`` is a unit heading vector; yaw is measured counter-clockwise
    from +x with +y to the left of a vehicle facing +x.
    """

    entity_id: int
    sim_time_us: int
    position: Vec3
    velocity: Vec3
    direction: Vec3

    def __post_init__(self):
        for name in ("position", "velocity", "direction"):
            v = getattr(self, name)
            if not isinstance(v, Vec3):
                object.__setattr__(self, name, Vec3(*v))
        if not (0 <= self.entity_id < 2**32):
            raise ValueError(f"entity_id out of range: {self.entity_id}")
        if not (0 <= self.sim_time_us < 2**64):
            raise ValueError(f"sim_time_us out of range: {self.sim_time_us}")

    def is_finite(self) -> bool:
        return self.position.is_finite() and self.velocity.is_finite() and self.direction.is_finite()

    def quantized(self) -> "EntityState":
        return EntityState(
            self.entity_id, self.sim_time_us,
            self.position.f32(), self.velocity.f32(), self.direction.f32(),
        )

    def same_kinematics(self, other: "EntityState") -> bool:
        return (self.position == other.position and self.velocity == other.velocity
                and self.direction == other.direction)


class KindTag(enum.IntEnum):
    VEHICLE = 0
    PEDESTRIAN = 1
    STATIC_OBSTACLE = 2

    @classmethod
    def parse(cls, text: str) -> "KindTag":
        key = text.strip().lower().replace("-", "_").replace(" ", "_")
        aliases = {"vehicle": cls.VEHICLE, "pedestrian": cls.PEDESTRIAN,
                   "static_obstacle": cls.STATIC_OBSTACLE, "static": cls.STATIC_OBSTACLE,
                   "staticobstacle": cls.STATIC_OBSTACLE}
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown entity kind {text!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


# half-extents (m) and real heights (m) used when a scenario does not override them
DEFAULT_EXTENTS = {
    KindTag.VEHICLE: Vec3(2.25, 0.9, 0.75),
    KindTag.PEDESTRIAN: Vec3(0.3, 0.3, 0.85),
    KindTag.STATIC_OBSTACLE: Vec3(0.5, 0.5, 0.5),
}
DEFAULT_HEIGHTS = {
    KindTag.VEHICLE: 1.5,
    KindTag.PEDESTRIAN: 1.7,
    KindTag.STATIC_OBSTACLE: 1.0,
}


@dataclass(frozen=True, slots=True)
class EntityKind:
    tag: KindTag
    extent: Vec3
    real_height: float

    def __post_init__(self):
        if not all(c > 0 for c in self.extent):
            raise ValueError("extent components must be > 0")
        if not self.real_height > 0:
            raise ValueError("real_height must be > 0")

    @classmethod
    def default(cls, tag: KindTag) -> "EntityKind":
        return cls(tag, DEFAULT_EXTENTS[tag], DEFAULT_HEIGHTS[tag])


class GroundTruthHazard(enum.IntEnum):
    SAFE = 0
    COLLISION_POSSIBLE = 1
    COLLISION = 2


@dataclass(frozen=True, slots=True)
class CollisionEvent:
    tick: int
    entity_a: int
    entity_b: int
    penetration_depth: float


@dataclass(frozen=True)
class HazardParams:
    corridor_halfwidth: float = 2.0
    margin: float = 2.0
    a_brake: float = 6.0

    def envelope_length(self, speed: float) -> float:
        return speed * speed / (2.0 * self.a_brake) + self.margin


@dataclass(frozen=True)
class VehicleParams:
    a_max: float = 3.0
    a_brake: float = 6.0
    wheelbase: float = 2.5
    max_steer: float = 0.6


@dataclass(frozen=True, slots=True)
class ControlCmd:
    steering: float = 0.0
    throttle: float = 0.0
    brake: float = 0.0


@dataclass(frozen=True)
class StaticScript:
    pass


STATIC = StaticScript()


@dataclass(frozen=True)
class WaypointScript:
    """Constant-speed waypoint schedule with instantaneous turns.

    The path starts at the entity's initial position. The actor waits there
    until ``start_s`` and then walks the polyline, stopping at the last point.
    """

    waypoints: tuple[Vec3, ...]
    speed: float
    start_s: float = 0.0
    loop: bool = False

    def path(self, origin: Vec3) -> list[Vec3]:
        return [origin, *self.waypoints]

    def sample(self, origin: Vec3, t: float, initial_direction: Vec3) -> tuple[Vec3, Vec3, Vec3]:
        """Return (position, velocity, direction) at time ``t`` seconds."""
        pts = self.path(origin)
        seg_lengths = [(b - a).norm() for a, b in zip(pts, pts[1:])]
        total = sum(seg_lengths)
        dirs = []
        for (a, b), L in zip(zip(pts, pts[1:]), seg_lengths):
            dirs.append((b - a).scale(1.0 / L) if L > 0 else None)
        first_dir = next((d for d in dirs if d is not None), initial_direction)

        if t <= self.start_s or total == 0 or self.speed == 0:
            return origin, ZERO, first_dir
        s = self.speed * (t - self.start_s)
        if self.loop:
            s = math.fmod(s, total)
        elif s >= total:
            last_dir = next((d for d in reversed(dirs) if d is not None), first_dir)
            return pts[-1], ZERO, last_dir
        for a, d, L in zip(pts, dirs, seg_lengths):
            if d is None:
                continue
            if s < L:
                return a + d.scale(s), d.scale(self.speed), d
            s -= L
        last_dir = next((d for d in reversed(dirs) if d is not None), first_dir)
        return pts[-1], ZERO, last_dir


Script = StaticScript | WaypointScript | None  # None means client-controlled


@dataclass(frozen=True)
class WorldSnapshot:
    """Immutable view of the world at one instant; safe to share across threads."""

    tick: int
    sim_time_us: int
    states: Mapping[int, EntityState]
    kinds: Mapping[int, EntityKind]

    @classmethod
    def build(cls, tick: int, sim_time_us: int, states: Iterable[EntityState],
              kinds: Mapping[int, EntityKind]) -> "WorldSnapshot":
        ordered = {s.entity_id: s for s in sorted(states, key=lambda s: s.entity_id)}
        return cls(tick, sim_time_us, MappingProxyType(ordered), MappingProxyType(dict(kinds)))


@dataclass
class _Body:
    entity_id: int
    kind: EntityKind
    script: Script
    origin: Vec3
    initial_direction: Vec3
    position: Vec3
    yaw: float
    speed: float


class World:
    """Single-owner mutable simulation model advanced by :meth:`step`."""

    def __init__(self, scenario, tick: int = 0):
        self.scenario = scenario
        self.tick_us = round(1e6 / scenario.tick_rate_hz)
        self.dt = self.tick_us / 1e6
        self.vehicle = scenario.vehicle
        self.tick = tick
        self.controls: dict[int, ControlCmd] = {}
        self.last_rejected: list[int] = []
        self._bodies: dict[int, _Body] = {}
        for spec in scenario.entities:
            st = spec.initial
            speed = st.velocity.planar_norm()
            self._bodies[st.entity_id] = _Body(
                st.entity_id, spec.kind, spec.script, st.position, st.direction,
                st.position, yaw_of(st.direction), speed,
            )
        self.kinds = MappingProxyType({eid: b.kind for eid, b in sorted(self._bodies.items())})
        self._states = {eid: self._state_of(b) for eid, b in self._bodies.items()}

    @property
    def sim_time_us(self) -> int:
        return self.tick * self.tick_us

    def client_entities(self) -> list[int]:
        return [eid for eid, b in sorted(self._bodies.items()) if b.script is None]

    def snapshot(self) -> WorldSnapshot:
        return WorldSnapshot.build(self.tick, self.sim_time_us, self._states.values(), self.kinds)

    def _state_of(self, b: _Body) -> EntityState:
        t_us = self.sim_time_us
        if isinstance(b.script, WaypointScript):
            pos, vel, d = b.script.sample(b.origin, t_us / 1e6, b.initial_direction)
        elif isinstance(b.script, StaticScript):
            pos, vel, d = b.position, ZERO, b.initial_direction
        else:
            d = heading_vector(b.yaw)
            pos, vel = b.position, d.scale(b.speed)
        return EntityState(b.entity_id, t_us, pos, vel, d).quantized()

    def step(self, controls: Mapping[int, ControlCmd] | None = None) -> WorldSnapshot:
        """Advance one tick. Commands persist until overwritten."""
        self.last_rejected = []
        for eid, cmd in (controls or {}).items():
            body = self._bodies.get(eid)
            if body is None or body.script is not None:
                log.warning("rejecting control for non-controllable entity %s", eid)
                self.last_rejected.append(eid)
                continue
            self.controls[eid] = cmd

        vp, dt = self.vehicle, self.dt
        for eid, b in self._bodies.items():
            if b.script is not None:
                continue
            cmd = self.controls.get(eid, ControlCmd())
            steer = max(-vp.max_steer, min(vp.max_steer, cmd.steering))
            accel = cmd.throttle * vp.a_max - cmd.brake * vp.a_brake
            heading = heading_vector(b.yaw)
            b.position = b.position + heading.scale(b.speed * dt)
            # positive steering turns right (clockwise)
            b.yaw -= b.speed * steer / vp.wheelbase * dt
            b.speed = max(0.0, b.speed + accel * dt)

        self.tick += 1
        self._states = {eid: self._state_of(b) for eid, b in self._bodies.items()}
        return self.snapshot()


def step(world: World, controls: Mapping[int, ControlCmd] | None = None) -> World:
    world.step(controls)
    return world


def _footprint_overlap(a: EntityState, ka: EntityKind, b: EntityState, kb: EntityKind) -> float:
    ox = ka.extent.x + kb.extent.x - abs(a.position.x - b.position.x)
    oy = ka.extent.y + kb.extent.y - abs(a.position.y - b.position.y)
    if ox <= 0 or oy <= 0:
        return 0.0
    return min(ox, oy)


def detect_collisions(world: WorldSnapshot) -> list[CollisionEvent]:
    ids = sorted(world.states)
    events = []
    for i, ea in enumerate(ids):
        sa, ka = world.states[ea], world.kinds[ea]
        for eb in ids[i + 1:]:
            depth = _footprint_overlap(sa, ka, world.states[eb], world.kinds[eb])
            if depth > 0:
                events.append(CollisionEvent(world.tick, ea, eb, depth))
    return events


def classify_hazard(world: WorldSnapshot, vehicle_id: int, params: HazardParams = HazardParams(),
                    collisions: Sequence[CollisionEvent] | None = None) -> GroundTruthHazard:
    try:
        me = world.states[vehicle_id]
    except KeyError:
        raise KeyError(f"unknown vehicle_id {vehicle_id}") from None
    if collisions is None:
        collisions = detect_collisions(world)
    if any(vehicle_id in (c.entity_a, c.entity_b) for c in collisions):
        return GroundTruthHazard.COLLISION

    speed = me.velocity.planar_norm()
    fwd = Vec3(me.direction.x, me.direction.y, 0.0)
    n = fwd.planar_norm()
    if n == 0:
        return GroundTruthHazard.SAFE
    fwd = fwd.scale(1.0 / n)
    left = Vec3(-fwd.y, fwd.x, 0.0)
    length = params.envelope_length(speed)
    for eid, other in world.states.items():
        if eid == vehicle_id:
            continue
        rel = other.position - me.position
        s = rel.x * fwd.x + rel.y * fwd.y
        lat = rel.x * left.x + rel.y * left.y
        if 0 < s <= length and abs(lat) < params.corridor_halfwidth:
            return GroundTruthHazard.COLLISION_POSSIBLE
    return GroundTruthHazard.SAFE
