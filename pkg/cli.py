from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from engine import llm
from engine.bench import (
    PLANNER_STREAM,
    WORLD_STREAM,
    ReportInvariantError,
    emit_report,
    load_suite,
    run_suite,
    write_phase_csv,
    write_traces,
)
from engine.planner import (
    ParseFailure,
    PlannerTransportError,
    PlanningFailed,
    SearchBudgetExceeded,
    TaskSpec,
    build_planner,
    plan_with_verification,
    read_plan_file,
)
from engine.scenario import DEFAULT_PROFILE, ScenarioError, load_scenario
from engine.simulator import EpisodePolicy, FailureModel, episode_rng, parse_depth, run_episode
from engine.skill_graph import (
    MAX_STATES,
    AnnotatedRequiresFullGraph,
    GraphLoadError,
    export_dot,
    load_graph_file,
    prune_view,
    topo_view,
)
from engine.state import LiteralError, format_state, parse_state
from engine.verifier import conflict_feedback, verify

logger = logging.getLogger("skillstate")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FAILED = 3
EXIT_LOAD = 4
EXIT_TRANSPORT = 5

PLANNERS = ("oracle", "adversarial", "replay", "external")


def _error(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _emit(args: argparse.Namespace, text: str) -> None:
    if getattr(args, "out", None):
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _dump(data) -> str:
    return json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True) + "\n"


def _load_graph(path: str):
    try:
        return load_graph_file(path, max_states=MAX_STATES)
    except OSError as exc:
        raise ScenarioError(f"cannot read graph {path}: {exc}") from exc


def _report_diagnostics(exc: GraphLoadError) -> int:
    for diag in exc.diagnostics:
        print(str(diag), file=sys.stderr)
    return EXIT_LOAD


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _depth(value: str):
    try:
        return parse_depth(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _planner_options(args: argparse.Namespace) -> dict:
    options = {}
    if getattr(args, "p_valid", None) is not None:
        options["p_valid"] = args.p_valid
    if getattr(args, "invalid_attempts", None) is not None:
        options["invalid_attempts"] = args.invalid_attempts
    if getattr(args, "plan", None):
        options["plan_file"] = args.plan
    for key in ("endpoint", "model", "timeout"):
        if getattr(args, key, None) is not None:
            options[key] = getattr(args, key)
    return options


def _task_from_args(args: argparse.Namespace):
    """(graph, task, scenario-or-None) from --scenario/--task or --graph/--state/--goals."""
    if args.scenario:
        scenario = load_scenario(args.scenario)
        task = scenario.task(args.task) if args.task else scenario.tasks[0]
        if args.state:
            task = task.replace(parse_state(args.state))
        return scenario.graph, task, scenario
    if not (args.graph and args.state and args.goals):
        raise ValueError("give --scenario, or --graph with --state and --goals")
    graph = _load_graph(args.graph)
    task = TaskSpec(args.task or "cli", tuple(g.strip() for g in args.goals.split(",") if g.strip()), parse_state(args.state))
    task.validate(graph)
    return graph, task, None


# ----------------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------------

def _cmd_validate(args: argparse.Namespace) -> int:
    graph = _load_graph(args.graph)
    summary = {
        "locations": list(graph.locations),
        "objects": list(graph.objects),
        "skills": len(graph.skills),
        "actions": len(graph.actions),
        "edges": len(graph.edges),
        "edge_mode": graph.edge_mode,
    }
    if args.format == "human":
        _emit(args, f"ok: {summary['skills']} skills, {summary['actions']} actions, "
                    f"{summary['edges']} edges ({graph.edge_mode})\n")
    else:
        _emit(args, _dump(summary))
    return EXIT_OK


def _cmd_verify(args: argparse.Namespace) -> int:
    graph = _load_graph(args.graph)
    plan = read_plan_file(args.plan)
    report = verify(graph, parse_state(args.state), plan, check_adjacency=args.check_adjacency)
    if report.feasible:
        if args.format == "human":
            _emit(args, f"Feasible; final state {format_state(report.final_state)}\n")
        else:
            _emit(args, _dump(report.to_dict()))
        return EXIT_OK
    # failure path: nothing on stdout
    print(conflict_feedback(report, graph), file=sys.stderr)
    if args.out:
        _emit(args, _dump(report.to_dict()))
    else:
        print(_dump(report.to_dict()), end="", file=sys.stderr)
    return EXIT_FAILED


def _cmd_plan(args: argparse.Namespace) -> int:
    graph, task, _ = _task_from_args(args)
    planner = build_planner(
        args.planner, graph, rng=episode_rng(args.seed, PLANNER_STREAM), **_planner_options(args)
    )
    try:
        result = plan_with_verification(
            planner, graph, task, args.max_retries, args.prune_depth, args.check_adjacency
        )
    except PlanningFailed as exc:
        for attempt in exc.transcript:
            if attempt.report is not None and not attempt.accepted:
                print(f"attempt {attempt.number}: {conflict_feedback(attempt.report, graph)}", file=sys.stderr)
            elif attempt.error:
                print(f"attempt {attempt.number}: {attempt.error}", file=sys.stderr)
        return _error(str(exc), EXIT_TRANSPORT if exc.reason == "Transport" else EXIT_FAILED)
    if args.format == "human":
        _emit(args, "\n".join(result.plan) + "\n")
    else:
        _emit(args, _dump({
            "task": task.id,
            "plan": list(result.plan),
            "attempts": result.attempts,
            "prompt_bytes": result.prompt_bytes,
            "transcript": [a.to_dict() for a in result.transcript],
        }))
    return EXIT_OK


def _cmd_simulate(args: argparse.Namespace) -> int:
    graph, task, scenario = _task_from_args(args)
    if scenario is not None:
        model = scenario.profile(args.profile)
        base = scenario.policy.to_dict()
    else:
        model = FailureModel(p_ok=args.p_ok if args.p_ok is not None else 1.0)
        base = {}
    if args.closed_loop is not None:
        base["closed_loop"] = args.closed_loop
    if args.prune_depth is not None:
        base["prune_depth"] = args.prune_depth
    if args.max_retries is not None:
        base["max_retries"] = args.max_retries
    if args.step_limit is not None:
        base["step_limit"] = args.step_limit
    policy = EpisodePolicy.from_dict(base)
    planner = build_planner(
        args.planner, graph, rng=episode_rng(args.seed, PLANNER_STREAM), **_planner_options(args)
    )
    trace = run_episode(graph, task, planner, model, policy, rng=episode_rng(args.seed, WORLD_STREAM))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(json.dumps(trace.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
    if trace.planning_failure == "Transport":
        return _error("external planner unreachable", EXIT_TRANSPORT)
    if not trace.terminal.success:
        return _error(
            f"episode ended in {trace.terminal.mode.value} at step {trace.terminal.at_step}"
            + (f" ({trace.terminal.note})" if trace.terminal.note else ""),
            EXIT_FAILED,
        )
    if args.out:
        return EXIT_OK
    if args.format == "human":
        lines = [f"{e.step:>3}  {e.skill:<32} {'ok' if e.outcome.success else e.outcome.cause.value}"
                 + ("  replanned" if e.replan else "") for e in trace.events]
        sys.stdout.write("\n".join(lines + [f"Success after {len(trace.events)} steps"]) + "\n")
    else:
        sys.stdout.write(json.dumps(trace.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
    return EXIT_OK


def _cmd_bench(args: argparse.Namespace) -> int:
    overrides = {"seed": args.seed}
    if args.planner:
        overrides["planner"] = args.planner
    config = load_suite(args.suite, **overrides)
    policy = dict(config.policy)
    if args.max_retries is not None:
        policy["max_retries"] = args.max_retries
    if args.step_limit is not None:
        policy["step_limit"] = args.step_limit
    changes = {"policy": policy}
    if args.closed_loop is not None:
        changes["closed_loop"] = (args.closed_loop,)
    if args.prune_depth is not None:
        changes["prune_depth"] = (args.prune_depth,)
    config = replace(config, **changes)
    try:
        report = run_suite(config, jobs=args.jobs, keep_traces=bool(args.traces))
    except ReportInvariantError as exc:
        return _error(f"report invariant violated: {exc}", EXIT_FAILED)
    if args.csv:
        write_phase_csv(report, args.csv)
    if args.traces:
        write_traces(report, args.traces)
    if args.db:
        from engine.db import save_report

        run_id = save_report(report, label=args.label or os.path.basename(args.suite), db_path=args.db)
        logger.info("stored as run %d in %s", run_id, args.db)
    _emit(args, emit_report(report, args.format))
    return EXIT_OK


def _cmd_export_dot(args: argparse.Namespace) -> int:
    graph = _load_graph(args.graph)
    if args.state:
        target = prune_view(graph, parse_state(args.state), args.prune_depth or float("inf"))
    elif args.view:
        target = topo_view(graph)
    else:
        target = graph
    _emit(args, export_dot(target, annotated=args.annotated))
    return EXIT_OK


def _cmd_diagnostics(_: argparse.Namespace) -> int:
    diagnostics = {
        "endpoint_set": bool(llm.ENDPOINT),
        "model": llm.MODEL,
        "timeout": llm.TIMEOUT,
        "token_var": llm.TOKEN_VAR,
        "token_present": bool(os.environ.get(llm.TOKEN_VAR)),
        "max_inflight": llm.MAX_INFLIGHT,
        "max_states": MAX_STATES,
        "db": os.environ.get("SKILLSTATE_DB", ""),
        "log_level": os.environ.get("SKILLSTATE_LOG_LEVEL", "WARNING"),
    }
    print(json.dumps(diagnostics, ensure_ascii=False, indent=2))
    return EXIT_OK


# ----------------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------------

def _add_planner_flags(cmd: argparse.ArgumentParser) -> None:
    cmd.add_argument("--planner", choices=PLANNERS, default="oracle")
    cmd.add_argument("--plan", help="plan file for the replay planner")
    cmd.add_argument("--p-valid", type=float, help="adversarial: probability of a valid proposal")
    cmd.add_argument("--invalid-attempts", type=int, help="adversarial: invalid proposals before a valid one")
    cmd.add_argument("--endpoint", help="external: chat-completion base URL")
    cmd.add_argument("--model", help="external: model id")
    cmd.add_argument("--timeout", type=float, help="external: request timeout in seconds")


def _add_task_flags(cmd: argparse.ArgumentParser) -> None:
    cmd.add_argument("--scenario")
    cmd.add_argument("--task", help="task id in the scenario")
    cmd.add_argument("--graph")
    cmd.add_argument("--state", help="initial state, e.g. '(pantry,null,null)'")
    cmd.add_argument("--goals", help="comma-separated goal skills (with --graph)")
    cmd.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Skill-state graph planning and verification CLI")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    validate_cmd = sub.add_parser("validate", help="Load and validate a graph file")
    validate_cmd.add_argument("--graph", required=True)
    validate_cmd.add_argument("--format", choices=("machine", "human"), default="machine")
    validate_cmd.add_argument("--out")
    validate_cmd.set_defaults(func=_cmd_validate)

    verify_cmd = sub.add_parser("verify", help="Check a plan file against a graph")
    verify_cmd.add_argument("--graph", required=True)
    verify_cmd.add_argument("--state", required=True)
    verify_cmd.add_argument("--plan", required=True)
    verify_cmd.add_argument("--check-adjacency", action="store_true")
    verify_cmd.add_argument("--format", choices=("machine", "human"), default="machine")
    verify_cmd.add_argument("--out")
    verify_cmd.set_defaults(func=_cmd_verify)

    plan_cmd = sub.add_parser("plan", help="Plan with verification and retries")
    _add_task_flags(plan_cmd)
    _add_planner_flags(plan_cmd)
    plan_cmd.add_argument("--max-retries", type=int, default=2)
    plan_cmd.add_argument("--prune-depth", type=_depth)
    plan_cmd.add_argument("--check-adjacency", action="store_true")
    plan_cmd.add_argument("--format", choices=("machine", "human"), default="machine")
    plan_cmd.add_argument("--out")
    plan_cmd.set_defaults(func=_cmd_plan)

    sim_cmd = sub.add_parser("simulate", help="Run one seeded episode")
    _add_task_flags(sim_cmd)
    _add_planner_flags(sim_cmd)
    sim_cmd.add_argument("--profile", default=DEFAULT_PROFILE)
    sim_cmd.add_argument("--p-ok", type=float, help="success probability (with --graph)")
    sim_cmd.add_argument("--closed-loop", type=_on_off)
    sim_cmd.add_argument("--prune-depth", type=_depth)
    sim_cmd.add_argument("--max-retries", type=int)
    sim_cmd.add_argument("--step-limit", type=int)
    sim_cmd.add_argument("--format", choices=("machine", "human"), default="machine")
    sim_cmd.add_argument("--out", help="write the trace as a JSON line")
    sim_cmd.set_defaults(func=_cmd_simulate)

    bench_cmd = sub.add_parser("bench", help="Run a benchmark suite")
    bench_cmd.add_argument("--suite", required=True)
    bench_cmd.add_argument("--seed", type=int)
    bench_cmd.add_argument("--jobs", type=int, default=1)
    bench_cmd.add_argument("--planner", choices=PLANNERS)
    bench_cmd.add_argument("--closed-loop", type=_on_off)
    bench_cmd.add_argument("--prune-depth", type=_depth)
    bench_cmd.add_argument("--max-retries", type=int)
    bench_cmd.add_argument("--step-limit", type=int)
    bench_cmd.add_argument("--format", choices=("machine", "human"), default="machine")
    bench_cmd.add_argument("--out")
    bench_cmd.add_argument("--csv", help="write the phase table as CSV")
    bench_cmd.add_argument("--traces", help="write every episode trace as JSON lines")
    bench_cmd.add_argument("--db", help="store the report in a SQLite run history")
    bench_cmd.add_argument("--label")
    bench_cmd.set_defaults(func=_cmd_bench)

    dot_cmd = sub.add_parser("export-dot", help="Export the graph as Graphviz DOT")
    dot_cmd.add_argument("--graph", required=True)
    dot_cmd.add_argument("--annotated", action="store_true")
    dot_cmd.add_argument("--view", action="store_true", help="export the topological view")
    dot_cmd.add_argument("--state", help="export the view pruned from this state")
    dot_cmd.add_argument("--prune-depth", type=_depth)
    dot_cmd.add_argument("--out")
    dot_cmd.set_defaults(func=_cmd_export_dot)

    diag_cmd = sub.add_parser("diagnostics", help="Show runtime configuration")
    diag_cmd.set_defaults(func=_cmd_diagnostics)

    return parser


def _configure_logging(verbose: int) -> None:
    if verbose >= 2:
        level = logging.DEBUG
    elif verbose == 1:
        level = logging.INFO
    else:
        level = getattr(logging, os.environ.get("SKILLSTATE_LOG_LEVEL", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _configure_logging(args.verbose)
    try:
        return int(args.func(args))
    except GraphLoadError as exc:
        return _report_diagnostics(exc)
    except ScenarioError as exc:
        return _error(str(exc), EXIT_LOAD)
    except AnnotatedRequiresFullGraph as exc:
        return _error(str(exc), EXIT_USAGE)
    except PlannerTransportError as exc:
        return _error(str(exc), EXIT_TRANSPORT)
    except SearchBudgetExceeded as exc:
        return _error(str(exc), EXIT_FAILED)
    except (LiteralError, ParseFailure, ValueError) as exc:
        return _error(str(exc), EXIT_USAGE)
    except OSError as exc:
        return _error(str(exc), EXIT_LOAD)


if __name__ == "__main__":
    sys.exit(main())
