"""``hybridsim`` command: run, sweep, replay, drive.

Exit codes: 0 success, 1 config error, 2 component failure,
3 threshold violation.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import tomli

from ..client import DrivingParams
from ..detector import DERIVED_STATE, POSITION, STALENESS, MatchCriteria
from ..inference import ModelSpecError, parse_models
from ..scenario import ScenarioError, load_scenario
from ..sensor import FaultWindow, KindTag, NoiseModel
from .experiment import (
    CSV_COLUMNS, ExperimentConfig, MetricsReport, run_experiment, run_in_process, sweep_clients,
    write_csv,
)
from .topology import PORTS, PlanOptions, TopologyError, format_plan, launch_plan, make_topology

log = logging.getLogger("hybridsim")

OK, CONFIG_ERROR, COMPONENT_FAILURE, THRESHOLD = 0, 1, 2, 3


class ConfigError(Exception):
    pass


def parse_range(text: str) -> list[int]:
    """``"1-30"``, ``"1,2,5"``, ``"1-10:3"`` or a mix; empty text gives []."""
    out: list[int] = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        span, _, step = part.partition(":")
        lo, dash, hi = span.partition("-")
        try:
            a = int(lo)
            b = int(hi) if dash else a
            s = int(step) if step else 1
        except ValueError:
            raise ConfigError(f"bad client range {part!r}") from None
        if a < 1 or b < a or s < 1:
            raise ConfigError(f"bad client range {part!r}")
        out.extend(range(a, b + 1, s))
    return out


def parse_blind(text: str) -> FaultWindow:
    """``class:start:end`` in seconds, e.g. ``pedestrian:5:12``."""
    try:
        tag, start, end = text.split(":")
        return FaultWindow(float(start), float(end), KindTag.parse(tag))
    except (ValueError, KeyError):
        raise ConfigError(f"expected class:start_s:end_s, got {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", default="ped-crossing", help="scenario file or bundled name")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--duration", type=float, default=None,
                   help="seconds (default 15; the scenario's own length with --lockstep)")
    p.add_argument("--warmup", type=float, default=5.0)
    p.add_argument("--fps", type=float, default=20.0)
    p.add_argument("--render-cost-ms", type=float, default=0.0)
    p.add_argument("--padding", action="store_true")
    p.add_argument("--models", default=None, help="model spec TOML")
    p.add_argument("--params", default=None, help="driving parameters TOML")
    p.add_argument("--criteria", default=None, help="match criteria TOML")
    p.add_argument("--topology", default="A", choices=("A", "B", "C"))
    p.add_argument("--no-detector", action="store_true")
    p.add_argument("--in-process", action="store_true",
                   help="run every component in this process instead of one process per role")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridsim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="one experiment at a fixed client count")
    _common(r)
    r.add_argument("--clients", type=int, default=1)
    r.add_argument("--out", default=None, help="work directory (logs, metrics, mismatches)")
    r.add_argument("--csv", default=None, help="append-free single-row CSV output")
    r.add_argument("--lockstep", action="store_true",
                   help="deterministic virtual-time loop; reports mismatch records")
    r.add_argument("--blind", action="append", default=[], metavar="CLASS:START:END",
                   help="blind the detector model to a class (lockstep and in-process)")
    r.add_argument("--min-total-fps", type=float, default=None)
    r.add_argument("--min-client-fps", type=float, default=None)
    r.add_argument("--max-jitter-ms", type=float, default=None)
    r.add_argument("--max-pipeline-age-ms", type=float, default=None)
    r.add_argument("--max-mismatches", type=int, default=None,
                   help="derived-state plus position records allowed")

    s = sub.add_parser("sweep", help="run a range of client counts")
    _common(s)
    s.add_argument("--clients", default="1-30", help="e.g. 1-30, 1,2,4,8 or 1-30:5")
    s.add_argument("--out", default="sweep", help="CSV and plot data directory")

    rp = sub.add_parser("replay", help="rebuild the timeline around persisted mismatches")
    rp.add_argument("path", help="mismatch log file or directory holding mismatches.bin")
    rp.add_argument("--record", type=int, default=None)
    rp.add_argument("--csv", default=None, help="write the timeline CSV here ('-' for stdout)")

    d = sub.add_parser("drive", help="start a component set, or print a multi-host plan")
    d.add_argument("--topology", default="A", help="A, B, C or custom")
    d.add_argument("--hosts", default="127.0.0.1", help="comma separated")
    d.add_argument("--assign", action="append", default=[], metavar="ROLE=HOST",
                   help="role placement for --topology custom")
    d.add_argument("--plan", action="store_true", help="print the per-host launch plan only")
    d.add_argument("--scenario", default="ped-crossing")
    d.add_argument("--clients", type=int, default=1)
    d.add_argument("--duration", type=float, default=None)
    d.add_argument("--fps", type=float, default=20.0)
    d.add_argument("--render-cost-ms", type=float, default=0.0)
    d.add_argument("--models", default=None)
    d.add_argument("--out", default="mismatches")
    d.add_argument("--logs", default=None, help="per-role log directory")
    d.add_argument("--base-port", type=int, default=None,
                   help="use four consecutive ports from here instead of 7400-7403")
    return p


def _load(fn, path):
    try:
        return fn(path)
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None
    except (tomli.TOMLDecodeError, ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def experiment_config(args, n_clients: int) -> ExperimentConfig:
    models = _load(lambda p: parse_models(Path(p).read_text()), args.models) if args.models else None
    params = _load(DrivingParams.load, args.params) if args.params else DrivingParams()
    criteria = _load(MatchCriteria.load, args.criteria) if args.criteria else MatchCriteria()
    load_scenario(args.scenario)  # fail early on a bad scenario
    cfg = ExperimentConfig(
        scenario=args.scenario, n_clients=max(n_clients, 1),
        duration_s=15.0 if args.duration is None else args.duration,
        warmup_s=args.warmup, fps=args.fps, render_cost_ms=args.render_cost_ms,
        padding=args.padding, models=models, params=params, criteria=criteria, seed=args.seed,
        topology=args.topology, with_detector=not args.no_detector)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _print_report(rep: MetricsReport) -> None:
    for k, v in rep.row().items():
        if isinstance(v, float):
            v = "nan" if math.isnan(v) else f"{v:.3f}"
        print(f"{k:24s} {v}")


def _violations(args, rep: MetricsReport) -> list[str]:
    out = []

    def below(name, value, bound):
        if bound is not None and not value >= bound:
            out.append(f"{name} {value:.3f} < {bound}")

    def above(name, value, bound):
        if bound is not None and not value <= bound:
            out.append(f"{name} {value:.3f} > {bound}")

    below("total_fps", rep.total_fps, args.min_total_fps)
    below("client_fps_min", rep.client_fps_min, args.min_client_fps)
    above("det_latency_std_ms", rep.det_latency_std_ms, args.max_jitter_ms)
    above("pipeline_age_mean_ms", rep.pipeline_age_mean_ms, args.max_pipeline_age_ms)
    return out


def cmd_run_lockstep(args) -> int:
    from .lockstep import LockstepConfig, hazard_name, run_lockstep

    cfg = experiment_config(args, args.clients)
    sc = load_scenario(args.scenario)
    if args.seed is not None:
        sc = sc.with_seed(args.seed)
    sc = sc.with_clients(args.clients)
    if args.duration is not None:
        sc = replace(sc, duration_s=args.duration)
    if args.blind:
        windows = tuple(parse_blind(b) for b in args.blind)
        sc = sc.with_noise(replace(sc.noise, fault_windows=sc.noise.fault_windows + windows))
    res = run_lockstep(sc, LockstepConfig(models=cfg.models, params=cfg.params,
                                          criteria=cfg.criteria, out_dir=args.out))
    counts = {c: len(res.records_for(c)) for c in (DERIVED_STATE, POSITION, STALENESS)}
    print(f"scenario {sc.name}: {sc.n_ticks} ticks, {len(res.clients)} client(s), "
          f"{len(res.collisions)} collision event(s)")
    for rec in res.records:
        print(f"  record {rec.record_id}: {rec.criterion} client {rec.client_id} "
              f"t={rec.sim_time_us / 1e6:.2f}s frame {rec.frame_id} {rec.details}")
    for eid, hz in res.hazards.items():
        worst = max(hz) if hz else 0
        print(f"  entity {eid}: worst hazard {hazard_name(worst)}")
    print("records: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    if args.max_mismatches is not None and counts[DERIVED_STATE] + counts[POSITION] > args.max_mismatches:
        print("threshold violated: mismatch records", file=sys.stderr)
        return THRESHOLD
    return OK


def cmd_run(args) -> int:
    if args.lockstep:
        return cmd_run_lockstep(args)
    cfg = experiment_config(args, args.clients)
    if args.out:
        cfg.workdir = args.out
    if args.blind:
        if not args.in_process:
            raise ConfigError("--blind needs --in-process or --lockstep")
    if args.in_process:
        if args.blind:
            base = cfg.build_scenario()
            windows = tuple(parse_blind(b) for b in args.blind)
            noise = replace(base.noise, fault_windows=base.noise.fault_windows + windows)
            cfg = _with_noise(cfg, noise)
        res = run_in_process(cfg)
    else:
        res = run_experiment(cfg)
    rep = res.report
    _print_report(rep)
    if args.csv:
        write_csv([rep], args.csv)
    if rep.status != "ok":
        print(f"component failure: {rep.error}", file=sys.stderr)
        return COMPONENT_FAILURE
    bad = _violations(args, rep)
    if args.max_mismatches is not None and res.detector is not None:
        n = sum(1 for f in res.detector.get("findings", ()) if f[0] in (DERIVED_STATE, POSITION))
        if n > args.max_mismatches:
            bad.append(f"mismatch findings {n} > {args.max_mismatches}")
    for b in bad:
        print(f"threshold violated: {b}", file=sys.stderr)
    return THRESHOLD if bad else OK


def _with_noise(cfg: ExperimentConfig, noise: NoiseModel) -> ExperimentConfig:
    """Experiment config whose scenario carries ``noise``; written next to the run."""
    import tempfile

    from ..scenario import dump_scenario

    sc = load_scenario(cfg.scenario).with_noise(noise)
    path = Path(cfg.workdir or tempfile.mkdtemp(prefix="hybridsim-")) / "blinded.toml"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_scenario(sc))
    return replace(cfg, scenario=str(path))


def cmd_sweep(args) -> int:
    n_range = parse_range(args.clients)
    cfg = experiment_config(args, 1)
    runner = run_in_process if args.in_process else run_experiment
    print(",".join(CSV_COLUMNS[:6] + ["det_latency_mean_ms", "det_latency_std_ms"]))

    def progress(rep):
        print(f"{rep.n_clients},{rep.status},{rep.error},{rep.window_s:.2f},{rep.total_fps:.2f},"
              f"{rep.client_fps_mean:.2f},{rep.det_latency_mean_ms:.2f},"
              f"{rep.det_latency_std_ms:.2f}", flush=True)

    if not n_range:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_csv([], out / "sweep.csv")
        return OK
    reports = sweep_clients(cfg, n_range, args.out, runner=runner, progress=progress)
    return COMPONENT_FAILURE if any(r.status != "ok" for r in reports) else OK


def cmd_replay(args) -> int:
    from .replay import hazard_escalates_while_safe, replay, timeline_csv

    try:
        reps = replay(args.path, args.record)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from None
    for rep in reps:
        print(f"record {rep.record_id} ({rep.criterion}): {len(rep.rows)} ticks, "
              f"re-evaluation findings: {[f.criterion for f in rep.findings]}")
        if rep.warning:
            print(f"  warning: {rep.warning}")
        if rep.rows:
            print(f"  window {rep.rows[0].sim_time_us / 1e6:.2f}s .. "
                  f"{rep.rows[-1].sim_time_us / 1e6:.2f}s; hazard rises while SafeToDrive: "
                  f"{hazard_escalates_while_safe(rep)}")
    if args.csv:
        text = "".join(timeline_csv(r) for r in reps)
        if args.csv == "-":
            sys.stdout.write(text)
        else:
            Path(args.csv).write_text(text)
    return OK


def cmd_drive(args) -> int:
    from .drive import DriveError, drive

    hosts = [h.strip() for h in args.hosts.split(",") if h.strip()]
    topo = make_topology(args.topology, hosts, args.assign if args.topology.lower() == "custom" else None)
    ports = dict(PORTS)
    if args.base_port:
        ports = {k: args.base_port + i for i, k in enumerate(PORTS)}
    opts = PlanOptions(scenario=args.scenario, n_clients=args.clients, duration_s=args.duration,
                       fps=args.fps, render_cost_ms=args.render_cost_ms, models=args.models,
                       out_dir=args.out, ports=ports)
    sc = load_scenario(args.scenario)
    have = len(sc.client_entities())
    if args.plan:
        if args.clients > have:
            raise ConfigError(f"scenario has {have} client vehicle(s) for {args.clients} clients; "
                              "add client entities before copying it to the hosts")
        sys.stdout.write(format_plan(topo, launch_plan(topo, opts)))
        return OK
    if args.clients > have:
        # same convoy the run and sweep commands build
        import tempfile

        from ..scenario import dump_scenario

        where = Path(args.logs or tempfile.mkdtemp(prefix="hybridsim-"))
        where.mkdir(parents=True, exist_ok=True)
        path = where / "scenario.toml"
        path.write_text(dump_scenario(replace(sc.with_clients(args.clients), source="")))
        opts.scenario = str(path)
    try:
        return drive(topo, opts, args.logs)
    except DriveError as exc:
        raise ConfigError(str(exc)) from None


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "replay": cmd_replay, "drive": cmd_drive}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # usage errors are config errors; exit code 2 means a component failed
        return CONFIG_ERROR if exc.code else OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except (ConfigError, ScenarioError, TopologyError, ModelSpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CONFIG_ERROR
    except KeyboardInterrupt:
        return OK


if __name__ == "__main__":
    sys.exit(main())
