"""The hybridsim command: parsing helpers, exit codes and subcommands."""

import socket
import subprocess
import sys

import pytest

from hybridsim.harness import cli
from hybridsim.harness.cli import ConfigError, main, parse_blind, parse_range
from hybridsim.harness.experiment import MetricsReport, StackResult, read_csv
from hybridsim.sensor import FaultWindow, KindTag

BLIND = ["--blind", "pedestrian:5:14"]


@pytest.mark.parametrize("text,want", [
    ("1-5", [1, 2, 3, 4, 5]), ("3", [3]), ("1,2,5", [1, 2, 5]), ("1-10:3", [1, 4, 7, 10]),
    ("1-2, 8", [1, 2, 8]), ("", []),
])
def test_parse_range(text, want):
    assert parse_range(text) == want


@pytest.mark.parametrize("text", ["0-3", "5-2", "a", "1-4:0", "1-"])
def test_parse_range_rejects(text):
    with pytest.raises(ConfigError):
        parse_range(text)


def test_parse_blind():
    assert parse_blind("pedestrian:5:12.5") == FaultWindow(5.0, 12.5, KindTag.PEDESTRIAN)
    for bad in ("pedestrian:5", "tree:1:2", "pedestrian:a:2"):
        with pytest.raises(ConfigError):
            parse_blind(bad)


def test_config_errors_exit_1(tmp_path, capsys):
    assert main(["run", "--scenario", "no-such-scenario", "--lockstep"]) == 1
    assert main(["run", "--bogus-flag"]) == 1
    bad = tmp_path / "models.toml"
    bad.write_text("[[models]]\nname = 1\n")
    assert main(["run", "--lockstep", "--models", str(bad)]) == 1
    assert main(["run", "--blind", "pedestrian:1:2"]) == 1  # needs lockstep or in-process
    assert main(["run", "--lockstep", "--duration", "2", "--warmup", "3"]) == 1
    assert "error:" in capsys.readouterr().err


def test_help_exits_0(capsys):
    assert main(["--help"]) == 0
    assert "run,sweep,replay,drive" in capsys.readouterr().out


def test_lockstep_clean_run_passes(capsys):
    assert main(["run", "--lockstep", "--max-mismatches", "0"]) == 0
    out = capsys.readouterr().out
    assert "derived_state=0, position=0" in out


def test_lockstep_fault_violates_and_replays(tmp_path, capsys):
    out = tmp_path / "m"
    assert main(["run", "--lockstep", *BLIND, "--max-mismatches", "0", "--out", str(out)]) == 3
    assert "derived_state" in capsys.readouterr().out
    timeline = tmp_path / "t.csv"
    assert main(["replay", str(out), "--csv", str(timeline)]) == 0
    printed = capsys.readouterr().out
    assert "hazard rises while SafeToDrive: True" in printed
    assert timeline.read_text().startswith("sim_time_s,ego_x")
    assert main(["replay", str(out), "--record", "1"]) == 0
    assert main(["replay", str(out), "--record", "999"]) == 1
    assert main(["replay", str(tmp_path / "nothing")]) == 1


def test_component_failure_exits_2(monkeypatch):
    monkeypatch.setattr(cli, "run_experiment",
                        lambda cfg: StackResult(MetricsReport(1, status="failed", error="boom")))
    assert main(["run", "--duration", "2", "--warmup", "1"]) == 2


def test_threshold_on_a_live_run(tmp_path):
    csv_path = tmp_path / "r.csv"
    args = ["run", "--in-process", "--duration", "2", "--warmup", "0.5", "--fps", "10",
            "--csv", str(csv_path)]
    assert main(args + ["--min-client-fps", "1000"]) == 3
    assert main(args + ["--min-client-fps", "5"]) == 0
    (row,) = read_csv(csv_path)
    assert row["status"] == "ok"


def test_sweep_empty_range_and_tiny_sweep(tmp_path, capsys):
    assert main(["sweep", "--clients", "", "--out", str(tmp_path / "e")]) == 0
    assert read_csv(tmp_path / "e" / "sweep.csv") == []
    assert main(["sweep", "--in-process", "--clients", "1,2", "--duration", "2", "--warmup",
                 "0.5", "--fps", "10", "--out", str(tmp_path / "s")]) == 0
    rows = read_csv(tmp_path / "s" / "sweep.csv")
    assert [r["n_clients"] for r in rows] == ["1", "2"]
    assert (tmp_path / "s" / "throughput_total_fps.dat").exists()
    assert capsys.readouterr().out.startswith("n_clients,status")


def test_drive_plan_for_two_hosts(capsys):
    assert main(["drive", "--topology", "B", "--hosts", "sim,gpu", "--plan"]) == 0
    out = capsys.readouterr().out
    assert "[host gpu] roles: inference" in out
    assert main(["drive", "--topology", "B", "--hosts", "sim,gpu"]) == 1
    assert main(["drive", "--topology", "custom", "--assign", "server=a", "--plan"]) == 1
    # the bundled scenario has one client vehicle; a remote plan cannot invent more
    assert main(["drive", "--topology", "B", "--hosts", "sim,gpu", "--plan", "--clients", "3"]) == 1


def _free_block(n=4):
    for _ in range(50):
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            base = s.getsockname()[1]
        if base + n > 65535:
            continue
        try:
            socks = []
            for k in range(n):
                t = socket.socket()
                socks.append(t)
                t.bind(("127.0.0.1", base + k))
            return base
        except OSError:
            continue
        finally:
            for t in socks:
                t.close()
    pytest.skip("no free port block")


def test_drive_runs_and_stops_four_processes(tmp_path):
    logs = tmp_path / "logs"
    proc = subprocess.run(
        [sys.executable, "-m", "hybridsim", "drive", "--duration", "3", "--fps", "10", "--clients", "2",
         "--base-port", str(_free_block()), "--logs", str(logs), "--out", str(tmp_path / "m")],
        capture_output=True, text=True, timeout=90)
    assert proc.returncode == 0, proc.stderr
    assert sorted(p.name for p in logs.iterdir()) == \
        ["clients.log", "detector.log", "inference.log", "scenario.toml", "server.log"]
    # both clients got a vehicle of the generated convoy
    assert "refused" not in (logs / "clients.log").read_text()
