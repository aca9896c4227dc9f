"""Scenario file parsing, validation and serialization."""

import pytest
from hypothesis import given, strategies as st

from hybridsim.scenario import (
    BUNDLED, ScenarioError, bundled, dump_scenario, load_scenario, parse_scenario,
)
from hybridsim.world import KindTag, Vec3, WaypointScript

MINIMAL = """
name = "minimal"
seed = 0
tick_rate_hz = 100
duration_s = 5.0

[road]
waypoints = [[0, 0, 0], [100, 0, 0]]

[[entities]]
id = 1
kind = "vehicle"
position = [0, 0, 0]
script = "client"
"""


def test_minimal_scenario():
    sc = parse_scenario(MINIMAL)
    assert len(sc.entities) == 1
    assert sc.client_entities() == [1]
    assert sc.seed == 0 and sc.tick_us == 10_000 and sc.n_ticks == 500


def test_tick_rate_must_cover_twice_the_sensor_rate():
    bad = MINIMAL.replace("duration_s = 5.0", "duration_s = 5.0\nsensor_fps = 60")
    with pytest.raises(ScenarioError, match="tick_rate_hz"):
        parse_scenario(bad)


def test_bundled_ped_crossing():
    sc = bundled("ped-crossing")
    assert len(sc.entities) == 2
    assert sc.duration_s == 20.0
    ped = [e for e in sc.entities if e.kind.tag == KindTag.PEDESTRIAN][0]
    assert isinstance(ped.script, WaypointScript) and ped.script.start_s == 5.0


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_scenarios_round_trip(name):
    sc = bundled(name)
    again = parse_scenario(dump_scenario(sc))
    assert again.entities == sc.entities
    assert again.road == sc.road
    assert again.camera == sc.camera and again.noise == sc.noise
    assert again.duration_s == sc.duration_s >= 20.0


def test_parse_error_carries_location():
    with pytest.raises(ScenarioError) as exc:
        parse_scenario(MINIMAL.replace('kind = "vehicle"', 'kind = "bicycle"'))
    assert exc.value.where == "entities[0].kind"
    with pytest.raises(ScenarioError) as exc:
        parse_scenario(MINIMAL.replace("[road]", "[road\n"))
    assert "line" in str(exc.value)


def test_missing_fields_are_named():
    with pytest.raises(ScenarioError, match="duration_s"):
        parse_scenario(MINIMAL.replace("duration_s = 5.0", ""))
    with pytest.raises(ScenarioError, match="script"):
        parse_scenario(MINIMAL.replace('script = "client"', ""))


def test_road_needs_two_waypoints():
    with pytest.raises(ScenarioError, match="2 waypoints"):
        parse_scenario(MINIMAL.replace("[[0, 0, 0], [100, 0, 0]]", "[[0, 0, 0]]"))


def test_duplicate_ids_rejected():
    dup = MINIMAL + '\n[[entities]]\nid = 1\nkind = "pedestrian"\nposition = [5, 5]\nscript = "static"\n'
    with pytest.raises(ScenarioError, match="duplicate"):
        parse_scenario(dup)


def test_load_scenario_accepts_path_text_and_name(tmp_path):
    p = tmp_path / "s.toml"
    p.write_text(MINIMAL)
    assert load_scenario(str(p)).name == "minimal"
    assert load_scenario(p).name == "minimal"
    assert load_scenario(MINIMAL).name == "minimal"
    assert load_scenario("lead-vehicle").name == "lead-vehicle"


def test_with_clients_builds_a_convoy():
    sc = bundled("ped-crossing").with_clients(3, spacing_m=30.0)
    cl = sc.client_entities()
    assert len(cl) == 3
    xs = sorted(e.initial.position.x for e in sc.entities if e.script is None)
    assert xs == [-60.0, -30.0, 0.0]
    assert parse_scenario(dump_scenario(sc)).client_entities() == cl
    assert bundled("ped-crossing").with_clients(1).client_entities() == [1]


coord = st.floats(-500, 500, allow_nan=False, width=32)


@given(st.lists(st.tuples(coord, coord), min_size=2, max_size=5),
       st.integers(0, 2**64 - 1), st.sampled_from([20, 50, 100, 200]),
       st.floats(0.5, 3.0), st.floats(0.125, 10.0, width=32))
def test_dump_parse_round_trip(road, seed, rate, speed, height):
    text = MINIMAL.replace("seed = 0", f"seed = {seed}").replace(
        "tick_rate_hz = 100", f"tick_rate_hz = {rate}\nsensor_fps = 10").replace(
        "[[0, 0, 0], [100, 0, 0]]", repr([[x, y, 0.0] for x, y in road]))
    text += ('\n[[entities]]\nid = 9\nkind = "pedestrian"\nposition = [1, 2, 0]\n'
             f'real_height = {height!r}\n'
             f'script = {{ speed = {speed!r}, waypoints = [[1, 9, 0]], start_s = 1.0 }}\n')
    sc = parse_scenario(text)
    again = parse_scenario(dump_scenario(sc))
    assert again.seed == seed and again.tick_rate_hz == rate
    assert again.road == tuple(Vec3(x, y, 0.0) for x, y in road)
    assert again.entities == sc.entities
