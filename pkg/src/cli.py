"""Command-line front end: analyze, fluid, simulate and statediagram subcommands.

Usage:
    python -m src.cli analyze --preset lu-kumar-lq
    python -m src.cli fluid --scenario my.json --out results
    python -m src.cli simulate --preset priority-unstable --jobs 3
    python -m src.cli statediagram --preset lu-kumar-lq
"""
import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, List, Optional

from src.config import (
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_OUTPUT,
    EXIT_PROPERTY,
    EXIT_VALIDATION,
    LOG_LEVEL,
    PRESET_NAMES,
    TOOL_NAME,
    TOOL_VERSION,
)
from src.dessim import (
    InsufficientData,
    detect_instability,
    fluid_scaling_check,
    replicate,
    run_metadata,
)
from src.errors import LabError, NumericError, OutputError, PropertyViolation, ValidationError
from src.export import ExportManager
from src.fluid import FLUID_POLICIES, FluidTrajectory, integrate
from src.network import derive, is_acyclic, utilization_check, virtual_group_load
from src.report import AnalysisReport, FluidReport, SimulationReport, StateDiagramReport, virtual_label
from src.scenario import Scenario, ScenarioError, load, preset
from src.statespace import (
    NotApplicable,
    enumerate_states,
    four_cycle_certificate,
    successors,
    verify_no_loop,
)

logger = logging.getLogger(__name__)

MAX_DIAGRAM_QUEUES = 16


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=TOOL_NAME, description="Lu-Kumar network stability lab")
    parser.add_argument("--version", action="version", version=f"{TOOL_NAME} {TOOL_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("analyze", "nominal traffic, utilization and topology"),
        ("fluid", "integrate the fluid model"),
        ("simulate", "discrete-event simulation and instability test"),
        ("statediagram", "maxima state diagram and no-loop check"),
    ):
        cmd = sub.add_parser(name, help=text)
        source = cmd.add_mutually_exclusive_group(required=True)
        source.add_argument("--scenario", help="path to a scenario JSON document")
        source.add_argument("--preset", choices=PRESET_NAMES, help="built-in scenario")
        cmd.add_argument("--out", help="output directory (overrides the scenario)")
        cmd.add_argument("--seed", type=int, help="random seed (overrides the scenario)")
        cmd.add_argument("--jobs", type=int, default=1, help="parallel simulation runs")
        cmd.add_argument("--dump-scenario", action="store_true",
                         help="print the resolved scenario document and exit")
        if name == "statediagram":
            cmd.add_argument("--samples", type=int, default=500, help="trajectories for the no-loop check")
    return parser


def _export(writer: Callable[..., bool], path: Path, *args: Any) -> None:
    if not writer(str(path), *args):
        raise OutputError(f"could not write {path}")


def _emit(scenario: Scenario, text: str) -> None:
    print(text)
    if scenario.write_csv:
        _export(ExportManager.export_report_txt, Path(scenario.out_dir) / "report.txt", text)


def resolve_scenario(args: argparse.Namespace) -> Scenario:
    """Scenario from --scenario or --preset with command-line overrides applied."""
    scenario = load(args.scenario) if args.scenario else preset(args.preset)
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        raise ScenarioError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
    if args.jobs < 1:
        raise ScenarioError(f"--jobs must be at least 1, got {args.jobs}")
    return scenario.with_overrides(seed=args.seed, out_dir=args.out)


def cmd_analyze(scenario: Scenario) -> AnalysisReport:
    """Utilization, slack, acyclicity and virtual-group loads of the scenario's network."""
    net = scenario.net
    dq = derive(net)
    loads = {virtual_label(group): virtual_group_load(net, dq, group) for group in scenario.virtual_groups}
    report = AnalysisReport(net, dq, utilization_check(dq, net), is_acyclic(net),
                            scenario.policy.kind, loads)
    print(report.render())
    logger.info(f"analyze: {report.get_summary()}")
    return report


def cmd_fluid(scenario: Scenario) -> FluidTrajectory:
    """Integrate the fluid model and write trajectory.csv, segments.csv and states.txt."""
    net = scenario.net
    traj = integrate(net, scenario.fluid_x0, scenario.policy, horizon=scenario.fluid_horizon,
                     tolerances=scenario.tolerances)
    if scenario.write_csv:
        out = Path(scenario.out_dir)
        _export(ExportManager.export_trajectory_csv, out / "trajectory.csv", traj, net)
        _export(ExportManager.export_segments_csv, out / "segments.csv", traj, net)
        _export(ExportManager.export_states_txt, out / "states.txt", traj)
    report = FluidReport(traj)
    _emit(scenario, report.render())
    return traj


def cmd_simulate(scenario: Scenario, jobs: int = 1) -> SimulationReport:
    """Replicate the simulation over the scenario's seeds and test each run for growth."""
    net, policy, sim = scenario.net, scenario.policy, scenario.sim
    seeds = scenario.run_seeds
    results = replicate(net, policy, sim, scenario.sim_x0, seeds, jobs)

    verdicts = []
    for result in results:
        try:
            verdicts.append(detect_instability(result))
        except InsufficientData as exc:
            logger.warning(f"seed {result.seed}: {exc}")
            verdicts.append(None)

    scaling = None
    if scenario.r_list and policy.kind in FLUID_POLICIES:
        traj = integrate(net, scenario.fluid_x0, policy, horizon=scenario.fluid_horizon,
                         tolerances=scenario.tolerances)
        scaling = fluid_scaling_check(net, policy, scenario.fluid_x0, scenario.r_list, sim, traj,
                                      seeds=seeds, jobs=jobs)

    if scenario.write_csv:
        out = Path(scenario.out_dir)
        for result, verdict in zip(results, verdicts):
            target = out if len(results) == 1 else out / f"seed-{result.seed}"
            _export(ExportManager.export_snapshots_csv, target / "snapshots.csv", result, net)
            record = run_metadata(net, policy, replace(sim, seed=result.seed), scenario.sim_x0)
            record["result"] = result.to_dict()
            record["verdict"] = None if verdict is None else verdict.to_dict()
            _export(ExportManager.export_metadata_json, target / "metadata.json", record)

    report = SimulationReport(results, verdicts, scaling)
    _emit(scenario, report.render())
    logger.info(f"simulate: {report.get_summary()}")
    return report


def cmd_statediagram(scenario: Scenario, samples: int = 500) -> StateDiagramReport:
    """Enumerate maxima states, their transitions and run the no-loop check where it applies."""
    net = scenario.net
    if net.K > MAX_DIAGRAM_QUEUES:
        raise NotApplicable(f"state diagram enumerates 2^K states; K = {net.K} exceeds {MAX_DIAGRAM_QUEUES}")
    dq = derive(net)
    nodes = enumerate_states(net, dq)
    edges = [edge for node in nodes for edge in successors(net, dq, node)]

    no_loop, certificate, skipped = None, None, None
    try:
        no_loop = verify_no_loop(net, dq, samples=samples, seed=int(scenario.sim.seed),
                                 horizon=scenario.fluid_horizon)
        certificate = four_cycle_certificate(net)
    except NotApplicable as exc:
        logger.warning(f"no-loop check skipped: {exc}")
        skipped = str(exc)

    if scenario.write_csv:
        out = Path(scenario.out_dir)
        _export(ExportManager.export_nodes_csv, out / "nodes.csv", nodes, net)
        _export(ExportManager.export_edges_csv, out / "edges.csv", edges)
    if scenario.write_dot:
        _export(ExportManager.export_dot, Path(scenario.out_dir) / "states.dot", nodes, edges)

    report = StateDiagramReport(nodes, edges, no_loop, certificate, skipped)
    _emit(scenario, report.render())
    logger.info(f"statediagram: {report.get_summary()}")
    return report


def exit_code(exc: LabError) -> int:
    """Exit code of an error category."""
    if isinstance(exc, OutputError):
        return EXIT_OUTPUT
    if isinstance(exc, PropertyViolation):
        return EXIT_PROPERTY
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, ValidationError):
        return EXIT_VALIDATION
    return EXIT_NUMERIC


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, dispatch the subcommand and map errors to exit codes."""
    logging.basicConfig(level=getattr(logging, LOG_LEVEL, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    logger.info(f"{args.command} started")
    try:
        scenario = resolve_scenario(args)
        if args.dump_scenario:
            print(scenario.to_json())
            return EXIT_OK
        if args.command == "analyze":
            cmd_analyze(scenario)
        elif args.command == "fluid":
            cmd_fluid(scenario)
        elif args.command == "simulate":
            cmd_simulate(scenario, jobs=args.jobs)
        else:
            cmd_statediagram(scenario, samples=args.samples)
    except LabError as exc:
        code = exit_code(exc)
        logger.error(f"{args.command} failed with exit code {code}")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    logger.info(f"{args.command} finished")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
