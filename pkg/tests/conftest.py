import math

import pytest
from hypothesis import HealthCheck, settings

from hybridsim.scenario import EntitySpec, Scenario
from hybridsim.world import (
    STATIC, EntityKind, EntityState, KindTag, Vec3, WaypointScript, heading_vector,
)

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def entity(eid, tag, pos, script=None, yaw=0.0, speed=0.0, extent=None, height=None):
    kind = EntityKind.default(tag)
    if extent is not None or height is not None:
        kind = EntityKind(tag, Vec3(*extent) if extent else kind.extent, height or kind.real_height)
    d = heading_vector(yaw)
    vel = d.scale(speed) if script is None else Vec3(0.0, 0.0, 0.0)
    return EntitySpec(kind, EntityState(eid, 0, Vec3(*pos), vel, d).quantized(), script)


def scenario(*entities, tick_rate_hz=100, sensor_fps=20.0, duration_s=10.0, seed=0,
             road=((0.0, 0.0, 0.0), (400.0, 0.0, 0.0)), **kw):
    return Scenario("test", seed, tick_rate_hz, tuple(Vec3(*p) for p in road), tuple(entities),
                    duration_s, sensor_fps, **kw)


# criterion number -> (passed, one-line summary), filled by the acceptance suite
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {line}")


@pytest.fixture
def straight_road_car():
    return scenario(entity(1, KindTag.VEHICLE, (0, 0, 0), speed=8.0))


__all__ = ["ACCEPTANCE", "entity", "scenario", "STATIC", "WaypointScript", "math"]
