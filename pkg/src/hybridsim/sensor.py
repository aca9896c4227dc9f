"""Pinhole camera geometry, bounding-box ranging, steering oracle and perception noise.

Conventions: image origin at the top-left, ``u`` grows right and ``v`` grows
down. A camera looks along its yaw; bearings are positive to the right.
Everything here is a pure function of its arguments.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .world import EntityKind, EntityState, KindTag, Vec3, heading_vector

CONFIDENCE_K_PX = 2.0
OCCLUSION_CONTAINMENT = 0.9


class UnresolvableBox(ValueError):
    """Raised when a box is too small to range."""


@dataclass(frozen=True)
class CameraModel:
    image_width_px: int = 320
    image_height_px: int = 240
    hfov_rad: float = math.pi / 2
    # mount pose relative to the vehicle: (forward, left, up) offset and yaw offset
    mount_offset: Vec3 = Vec3(1.0, 0.0, 1.4)
    heading_offset_rad: float = 0.0
    near_clip_m: float = 0.1

    def __post_init__(self):
        if not isinstance(self.mount_offset, Vec3):
            object.__setattr__(self, "mount_offset", Vec3(*self.mount_offset))
        if not (0 < self.hfov_rad < math.pi):
            raise ValueError("hfov_rad must lie in (0, pi)")
        if self.image_width_px <= 0 or self.image_height_px <= 0:
            raise ValueError("image dimensions must be positive")

    @property
    def focal_px(self) -> float:
        return (self.image_width_px / 2) / math.tan(self.hfov_rad / 2)

    @property
    def cx(self) -> float:
        return self.image_width_px / 2

    @property
    def cy(self) -> float:
        return self.image_height_px / 2

    def pose_for(self, vehicle: EntityState) -> "CameraPose":
        yaw = math.atan2(vehicle.direction.y, vehicle.direction.x)
        fwd, left = heading_vector(yaw), heading_vector(yaw + math.pi / 2)
        m = self.mount_offset
        pos = vehicle.position + fwd.scale(m.x) + left.scale(m.y) + Vec3(0.0, 0.0, m.z)
        return CameraPose(pos, yaw + self.heading_offset_rad)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mount_offset"] = list(self.mount_offset)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        d = dict(d)
        if "mount_offset" in d:
            d["mount_offset"] = Vec3(*(float(c) for c in d["mount_offset"]))
        return cls(**d)


@dataclass(frozen=True)
class CameraPose:
    position: Vec3
    yaw: float

    @property
    def forward(self) -> Vec3:
        return heading_vector(self.yaw)

    @property
    def right(self) -> Vec3:
        return Vec3(math.sin(self.yaw), -math.cos(self.yaw), 0.0)

    def to_camera(self, p: Vec3) -> tuple[float, float, float]:
        """World point -> (depth, right offset, height above camera)."""
        rel = p - self.position
        f, r = self.forward, self.right
        return rel.x * f.x + rel.y * f.y, rel.x * r.x + rel.y * r.y, rel.z


@dataclass(frozen=True, slots=True)
class ProjectedBox:
    entity_id: int
    tag: KindTag
    u_min: float
    v_min: float
    b: float
    h: float
    truncated: bool = False

    @property
    def u_center(self) -> float:
        return self.u_min + self.b / 2

    @property
    def area(self) -> float:
        return self.b * self.h


@dataclass(frozen=True, slots=True)
class Detection:
    tag: KindTag
    confidence: float
    u_min: float
    v_min: float
    b: float
    h: float

    @property
    def u_center(self) -> float:
        return self.u_min + self.b / 2


@dataclass(frozen=True, slots=True)
class RelativeEstimate:
    """Range estimate of one detection.

    ``distance`` is the forward (along the optical axis) distance implied by the
    box height; ``lateral`` is the matching offset to the right.
    """

    tag: KindTag
    distance: float
    bearing: float
    confidence: float

    @property
    def lateral(self) -> float:
        return self.distance * math.tan(self.bearing)

    def world_position(self, pose: CameraPose, ground_z: float) -> Vec3:
        p = pose.position + pose.forward.scale(self.distance) + pose.right.scale(self.lateral)
        return Vec3(p.x, p.y, ground_z)


def _project_depth(camera: CameraModel, pose: CameraPose, kind: EntityKind,
                   state: EntityState) -> tuple[float, ProjectedBox] | None:
    depth, lat, dz = pose.to_camera(state.position)
    if depth <= camera.near_clip_m:
        return None
    f, r = camera.focal_px, pose.right
    # silhouette half-width of the axis-aligned footprint seen across the optical axis
    hw = kind.extent.x * abs(r.x) + kind.extent.y * abs(r.y)
    u0 = camera.cx + f * (lat - hw) / depth
    u1 = camera.cx + f * (lat + hw) / depth
    v0 = camera.cy - f * (dz + kind.real_height) / depth
    v1 = camera.cy - f * dz / depth
    W, H = camera.image_width_px, camera.image_height_px
    cu0, cu1 = max(u0, 0.0), min(u1, float(W))
    cv0, cv1 = max(v0, 0.0), min(v1, float(H))
    if cu1 <= cu0 or cv1 <= cv0 or cu0 >= W:
        return None
    truncated = (cu0, cu1, cv0, cv1) != (u0, u1, v0, v1)
    return depth, ProjectedBox(state.entity_id, kind.tag, cu0, cv0, cu1 - cu0, cv1 - cv0, truncated)


def project(camera: CameraModel, camera_pose: CameraPose, kind: EntityKind,
            state: EntityState) -> ProjectedBox | None:
    """Project the upright bounding volume of one entity; None when invisible."""
    hit = _project_depth(camera, camera_pose, kind, state)
    return None if hit is None else hit[1]


def _contained_fraction(inner: ProjectedBox, outer: ProjectedBox) -> float:
    w = min(inner.u_min + inner.b, outer.u_min + outer.b) - max(inner.u_min, outer.u_min)
    h = min(inner.v_min + inner.h, outer.v_min + outer.h) - max(inner.v_min, outer.v_min)
    if w <= 0 or h <= 0:
        return 0.0
    return (w * h) / inner.area


def render_annotations(camera: CameraModel, camera_pose: CameraPose,
                       entities: Iterable[tuple[EntityKind, EntityState]],
                       exclude: Iterable[int] = ()) -> list[ProjectedBox]:
    """Visible boxes nearest-first, with painter's-order occlusion applied."""
    skip = set(exclude)
    hits = []
    for kind, state in entities:
        if state.entity_id in skip:
            continue
        hit = _project_depth(camera, camera_pose, kind, state)
        if hit is not None:
            hits.append(hit)
    hits.sort(key=lambda h: (h[0], h[1].entity_id))
    visible: list[ProjectedBox] = []
    nearer: list[ProjectedBox] = []
    for _, box in hits:
        if not any(_contained_fraction(box, n) >= OCCLUSION_CONTAINMENT for n in nearer):
            visible.append(box)
        nearer.append(box)
    return visible


def estimate_relative_position(camera: CameraModel, det: Detection | ProjectedBox,
                               real_height: float, min_box_px: float = 2.0,
                               confidence: float | None = None) -> RelativeEstimate:
    if real_height <= 0:
        raise ValueError("real_height must be > 0")
    W, H = camera.image_width_px, camera.image_height_px
    u0 = min(max(det.u_min, 0.0), float(W))
    u1 = min(max(det.u_min + det.b, 0.0), float(W))
    v0 = min(max(det.v_min, 0.0), float(H))
    v1 = min(max(det.v_min + det.h, 0.0), float(H))
    h = v1 - v0
    if h <= min_box_px:
        raise UnresolvableBox(f"box height {h:.2f}px <= {min_box_px}px")
    f = camera.focal_px
    distance = f * real_height / h
    bearing = math.atan(((u0 + u1) / 2 - camera.cx) / f)
    if confidence is None:
        confidence = getattr(det, "confidence", 1.0)
    return RelativeEstimate(det.tag, distance, bearing, confidence)


@dataclass(frozen=True)
class _RoadPoint:
    point: Vec3
    s: float
    distance: float


def _closest_on_polyline(road: Sequence[Vec3], p: Vec3) -> _RoadPoint:
    best = None
    s_acc = 0.0
    for a, b in zip(road, road[1:]):
        ab = Vec3(b.x - a.x, b.y - a.y, 0.0)
        L2 = ab.x * ab.x + ab.y * ab.y
        L = math.sqrt(L2)
        if L2 == 0:
            continue
        t = ((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / L2
        t = min(max(t, 0.0), 1.0)
        q = Vec3(a.x + ab.x * t, a.y + ab.y * t, a.z)
        d = math.hypot(p.x - q.x, p.y - q.y)
        if best is None or d < best.distance:
            best = _RoadPoint(q, s_acc + t * L, d)
        s_acc += L
    if best is None:
        raise ValueError("road must contain at least one non-degenerate segment")
    return best


def point_at_arclength(road: Sequence[Vec3], s: float) -> Vec3:
    """Point ``s`` metres along the polyline, extrapolating past the last vertex."""
    last = None
    for a, b in zip(road, road[1:]):
        L = math.hypot(b.x - a.x, b.y - a.y)
        if L == 0:
            continue
        last = (a, b, L)
        if s <= L:
            k = s / L
            return Vec3(a.x + (b.x - a.x) * k, a.y + (b.y - a.y) * k, a.z)
        s -= L
    if last is None:
        raise ValueError("road must contain at least one non-degenerate segment")
    a, b, L = last
    k = (L + s) / L
    return Vec3(a.x + (b.x - a.x) * k, a.y + (b.y - a.y) * k, a.z)


def steering_oracle(pose: CameraPose, road: Sequence[Vec3], lookahead_m: float = 10.0,
                    wheelbase: float = 2.5, max_steer: float = 0.6,
                    recovery_distance: float = 5.0) -> float:
    """Pure-pursuit steering angle (positive = right) toward the road centreline."""
    closest = _closest_on_polyline(road, pose.position)
    fwd, right = pose.forward, pose.right

    def local(q: Vec3) -> tuple[float, float]:
        dx, dy = q.x - pose.position.x, q.y - pose.position.y
        return dx * fwd.x + dy * fwd.y, dx * right.x + dy * right.y

    if closest.distance > recovery_distance:
        _, r = local(closest.point)
        return max_steer if r > 0 else -max_steer

    target = point_at_arclength(road, closest.s + lookahead_m)
    x, r = local(target)
    ld2 = x * x + r * r
    if ld2 == 0:
        return 0.0
    angle = math.atan(wheelbase * 2.0 * r / ld2)
    return max(-max_steer, min(max_steer, angle))


@dataclass(frozen=True)
class FaultWindow:
    t_start_s: float
    t_end_s: float
    tag: KindTag

    def blinds(self, tag: KindTag, t: float) -> bool:
        return tag == self.tag and self.t_start_s <= t < self.t_end_s


@dataclass(frozen=True)
class NoiseModel:
    p_miss: float = 0.0
    p_false: float = 0.0
    box_jitter_px: float = 0.0
    confidence_noise: float = 0.0
    fault_windows: tuple[FaultWindow, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not 0.0 <= self.p_miss <= 1.0:
            raise ValueError("p_miss must be in [0, 1]")
        for name in ("p_false", "box_jitter_px", "confidence_noise"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        object.__setattr__(self, "fault_windows", tuple(self.fault_windows))

    def to_dict(self) -> dict:
        return {
            "p_miss": self.p_miss, "p_false": self.p_false,
            "box_jitter_px": self.box_jitter_px, "confidence_noise": self.confidence_noise,
            "fault_windows": [
                {"t_start_s": w.t_start_s, "t_end_s": w.t_end_s, "class": w.tag.label}
                for w in self.fault_windows
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseModel":
        d = dict(d)
        windows = tuple(
            FaultWindow(float(w["t_start_s"]), float(w["t_end_s"]), KindTag.parse(w["class"]))
            for w in d.pop("fault_windows", ())
        )
        return cls(fault_windows=windows, **{k: float(v) for k, v in d.items()})


def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


def apply_noise(rng: np.random.Generator, truth: Sequence[ProjectedBox], model: NoiseModel,
                sim_time_s: float, camera: CameraModel = CameraModel(),
                k_px: float = CONFIDENCE_K_PX) -> list[Detection]:
    W, H = camera.image_width_px, camera.image_height_px
    out = []
    for box in truth:
        if any(w.blinds(box.tag, sim_time_s) for w in model.fault_windows):
            continue
        if model.p_miss > 0 and rng.random() < model.p_miss:
            continue
        u0, v0, b, h = box.u_min, box.v_min, box.b, box.h
        if model.box_jitter_px > 0:
            e = rng.normal(0.0, model.box_jitter_px, 4)
            lo_u, hi_u = max(0.0, u0 + e[0]), min(float(W), u0 + b + e[1])
            lo_v, hi_v = max(0.0, v0 + e[2]), min(float(H), v0 + h + e[3])
            if hi_u <= lo_u or hi_v <= lo_v or lo_u >= W:
                continue
            u0, v0, b, h = float(lo_u), float(lo_v), float(hi_u - lo_u), float(hi_v - lo_v)
        noise = rng.normal(0.0, model.confidence_noise) if model.confidence_noise > 0 else 0.0
        out.append(Detection(box.tag, _clamp01(1.0 - k_px / h + noise), u0, v0, b, h))

    n_false = int(rng.poisson(model.p_false)) if model.p_false > 0 else 0
    tags = list(KindTag)
    for _ in range(n_false):
        tag = tags[int(rng.integers(len(tags)))]
        h = float(rng.uniform(4.0, min(80.0, H)))
        b = float(min(h * rng.uniform(0.3, 2.0), W - 1.0))
        u0 = float(rng.uniform(0.0, W - b))
        v0 = float(rng.uniform(0.0, H - h))
        noise = rng.normal(0.0, model.confidence_noise) if model.confidence_noise > 0 else 0.0
        out.append(Detection(tag, _clamp01(1.0 - k_px / h + noise), u0, v0, b, h))
    return out
