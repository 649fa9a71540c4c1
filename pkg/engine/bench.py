"""
Benchmark suites: many seeded episodes per policy cell, aggregated metrics and reports.

A cell is one (task, closed/open loop, prune depth, failure profile)
combination. Every episode draws from its own random stream derived from the
suite seed, the task index, the trial group and the episode index, so results
do not depend on the policy, on the order of execution or on ``jobs``.

Suite file (JSON):
    {
      "scenario": "mini_scenario.json",
      "planner": "oracle",
      "planner_options": {"p_valid": 0.5},
      "closed_loop": [true, false],
      "prune_depth": [null, 2],
      "profiles": ["default"],
      "tasks": ["serve_bowl"],
      "episodes": 100,
      "groups": 3,
      "seed": 7,
      "policy": {"max_retries": 2, "step_limit": null}
    }
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from jsonschema import validate

from .planner import TaskSpec, build_planner
from .scenario import DEFAULT_PROFILE, Scenario, ScenarioError, load_scenario
from .simulator import (
    EpisodePolicy,
    EpisodeTrace,
    FailureMode,
    classify,
    episode_rng,
    parse_depth,
    run_episode,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# stream ids below the (task, group, episode) key
WORLD_STREAM = 0
PLANNER_STREAM = 1


class MixedTasks(ValueError):
    pass


class ReportInvariantError(AssertionError):
    pass


@dataclass(frozen=True)
class SuiteConfig:
    scenario: Union[str, Path, Scenario]
    planner: str = "oracle"
    planner_options: Mapping[str, Any] = field(default_factory=dict)
    closed_loop: Tuple[bool, ...] = (True,)
    prune_depth: Tuple[Optional[Union[int, float]], ...] = (None,)
    profiles: Tuple[str, ...] = (DEFAULT_PROFILE,)
    tasks: Optional[Tuple[str, ...]] = None
    episodes: int = 100
    groups: int = 1
    seed: int = 0
    policy: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.groups < 1:
            raise ValueError("groups must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        """Everything that shapes the results, minus file locations."""
        return {
            "planner": self.planner,
            "planner_options": {k: v for k, v in sorted(self.planner_options.items()) if k != "plan_file"},
            "closed_loop": list(self.closed_loop),
            "prune_depth": [_depth_label(d) for d in self.prune_depth],
            "profiles": list(self.profiles),
            "tasks": None if self.tasks is None else list(self.tasks),
            "episodes": self.episodes,
            "groups": self.groups,
            "seed": self.seed,
            "policy": dict(sorted(self.policy.items())),
        }


def _depth_label(depth: Optional[Union[int, float]]) -> Optional[Union[int, str]]:
    if depth is None:
        return None
    return "inf" if depth == math.inf else int(depth)


def _as_tuple(value: Any) -> Tuple[Any, ...]:
    return tuple(value) if isinstance(value, list) else (value,)


def load_suite(path: Union[str, Path], **overrides: Any) -> SuiteConfig:
    """Read a suite file; ``overrides`` replace fields (e.g. ``seed`` from the command line)."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read suite {path}: {exc}") from exc
    if not isinstance(data, dict) or "scenario" not in data:
        raise ScenarioError("suite needs a 'scenario' path")
    options = dict(data.get("planner_options", {}))
    if options.get("plan_file"):
        options["plan_file"] = str(path.parent / options["plan_file"])
    try:
        config = SuiteConfig(
            scenario=path.parent / data["scenario"],
            planner=str(data.get("planner", "oracle")),
            planner_options=options,
            closed_loop=tuple(bool(v) for v in _as_tuple(data.get("closed_loop", True))),
            prune_depth=tuple(parse_depth(v) for v in _as_tuple(data.get("prune_depth", None))),
            profiles=tuple(_as_tuple(data.get("profiles", DEFAULT_PROFILE))),
            tasks=None if data.get("tasks") is None else tuple(data["tasks"]),
            episodes=int(data.get("episodes", 100)),
            groups=int(data.get("groups", 1)),
            seed=int(data.get("seed", 0)),
            policy=dict(data.get("policy", {})),
        )
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"invalid suite {path}: {exc}") from exc
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(config, **overrides) if overrides else config


# ============================================================================
# Metrics
# ============================================================================

def phase_table(traces: Sequence[EpisodeTrace], task: TaskSpec, total: Optional[int] = None) -> List[float]:
    """Entry k-1: fraction of episodes that completed the first k goal skills.

    ``total`` is the denominator (defaults to ``len(traces)``), so episodes
    without a trace count as failures.
    """
    for trace in traces:
        if trace.task.id != task.id:
            raise MixedTasks(f"trace of task {trace.task.id!r} in a table for {task.id!r}")
    n = len(traces) if total is None else total
    goals = list(task.goal_skills)
    if n == 0:
        return [0.0] * len(goals)
    table = []
    for k in range(1, len(goals) + 1):
        done = sum(1 for t in traces if list(t.goals_completed[:k]) == goals[:k])
        table.append(done / n)
    return table


@dataclass(frozen=True)
class EpisodeResult:
    group: int
    trace: Optional[EpisodeTrace] = None
    error: Optional[str] = None


@dataclass(frozen=True)
class Cell:
    task: TaskSpec
    task_index: int
    closed_loop: bool
    prune_depth: Optional[Union[int, float]]
    profile: str

    @property
    def key(self) -> str:
        loop = "closed" if self.closed_loop else "open"
        depth = "none" if self.prune_depth is None else _depth_label(self.prune_depth)
        return f"{self.task.id}/{loop}/prune={depth}/{self.profile}"


def _summarize(cell: Cell, results: Sequence[EpisodeResult], groups: int) -> Dict[str, Any]:
    traces = [r.trace for r in results if r.trace is not None]
    episodes = len(results)
    errors = episodes - len(traces)
    planned = [t for t in traces if t.planned]
    successes = sum(1 for t in traces if t.terminal.success)
    modes = {m.value: 0 for m in (FailureMode.FLE, FailureMode.TLE, FailureMode.PTF)}
    for t in planned:
        mode = classify(t)
        if mode is not FailureMode.NOT_A_FAILURE:
            modes[mode.value] += 1

    histogram: Dict[str, int] = {}
    for t in traces:
        key = str(t.planning_attempts) if t.planned else "failed"
        histogram[key] = histogram.get(key, 0) + 1

    per_group = []
    for g in range(groups):
        members = [r for r in results if r.group == g]
        ok = [r.trace for r in members if r.trace is not None]
        per_group.append({
            "group": g,
            "episodes": len(members),
            "planning_success_rate": _rate(sum(1 for t in ok if t.planned), len(members)),
            "task_success_rate": _rate(sum(1 for t in ok if t.terminal.success), len(members)),
        })
    task_rates = np.array([g["task_success_rate"] for g in per_group])
    plan_rates = np.array([g["planning_success_rate"] for g in per_group])

    return {
        "key": cell.key,
        "task": cell.task.id,
        "goal_skills": list(cell.task.goal_skills),
        "closed_loop": cell.closed_loop,
        "prune_depth": _depth_label(cell.prune_depth),
        "profile": cell.profile,
        "episodes": episodes,
        "planning_success_rate": _rate(len(planned), episodes),
        "task_success_rate": _rate(successes, episodes),
        "attempts_histogram": dict(sorted(histogram.items())),
        "phases": [round(v, 6) for v in phase_table(traces, cell.task, total=episodes)],
        "failure_modes": modes,
        "planning_failures": len(traces) - len(planned),
        "execution_successes": successes,
        "errors": errors,
        "mean_prompt_bytes": _mean([t.prompt_bytes for t in traces]),
        "mean_steps": _mean([len(t.events) for t in planned]),
        "mean_replans": _mean([t.replans for t in planned]),
        "transcript_attempts": sum(len(t.transcript) for t in traces),
        "transcript_accepted": sum(1 for t in traces for a in t.transcript if a.accepted),
        "groups": per_group,
        "group_mean": {
            "planning_success_rate": round(float(np.mean(plan_rates)), 6),
            "task_success_rate": round(float(np.mean(task_rates)), 6),
        },
        # population std over trial groups
        "group_std": {
            "planning_success_rate": round(float(np.std(plan_rates, ddof=0)), 6),
            "task_success_rate": round(float(np.std(task_rates, ddof=0)), 6),
        },
    }


def _rate(count: int, total: int) -> float:
    return round(count / total, 6) if total else 0.0


def _mean(values: Sequence[float]) -> float:
    return round(float(np.mean(values)), 6) if len(values) else 0.0


def check_cell(cell: Mapping[str, Any]) -> None:
    """Raise ReportInvariantError when a cell breaks attrition, regression or conservation rules."""
    phases = cell["phases"]
    if any(later > earlier for earlier, later in zip(phases, phases[1:])):
        raise ReportInvariantError(f"{cell['key']}: phase success increases: {phases}")
    modes = cell["failure_modes"]
    if modes["PTF"] != 0:
        raise ReportInvariantError(f"{cell['key']}: {modes['PTF']} regression(s) detected")
    accounted = (
        cell["planning_failures"] + cell["execution_successes"]
        + modes["FLE"] + modes["TLE"] + modes["PTF"] + cell["errors"]
    )
    if accounted != cell["episodes"]:
        raise ReportInvariantError(f"{cell['key']}: {accounted} outcomes for {cell['episodes']} episodes")


# ============================================================================
# Running
# ============================================================================

@dataclass(frozen=True)
class SuiteReport:
    config_digest: str
    cells: Tuple[Dict[str, Any], ...] = ()
    schema_version: int = SCHEMA_VERSION
    traces: Mapping[str, Tuple[EpisodeTrace, ...]] = field(default_factory=dict, compare=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "config_digest": self.config_digest,
            "cells": [dict(c) for c in self.cells],
        }


def _cells(config: SuiteConfig, scenario: Scenario) -> List[Cell]:
    names = config.tasks
    tasks = list(enumerate(scenario.tasks))
    if names is not None:
        tasks = [(i, t) for i, t in tasks if t.id in names]
        missing = set(names) - {t.id for _, t in tasks}
        if missing:
            raise ScenarioError(f"suite names unknown tasks: {', '.join(sorted(missing))}")
    for profile in config.profiles:
        scenario.profile(profile)
    return [
        Cell(task, index, closed, depth, profile)
        for index, task in tasks
        for closed in config.closed_loop
        for depth in config.prune_depth
        for profile in config.profiles
    ]


def _run_one(config: SuiteConfig, scenario: Scenario, cell: Cell, policy: EpisodePolicy, group: int, episode: int) -> EpisodeResult:
    keys = (cell.task_index, group, episode)
    try:
        planner = build_planner(
            config.planner, scenario.graph, rng=episode_rng(config.seed, *keys, PLANNER_STREAM), **config.planner_options
        )
        trace = run_episode(
            scenario.graph, cell.task, planner, scenario.profile(cell.profile), policy,
            rng=episode_rng(config.seed, *keys, WORLD_STREAM),
        )
        return EpisodeResult(group, trace)
    except Exception as exc:
        logger.error("%s group %d episode %d failed: %s", cell.key, group, episode, exc)
        return EpisodeResult(group, error=f"{type(exc).__name__}: {exc}")


def run_suite(config: SuiteConfig, jobs: int = 1, keep_traces: bool = False) -> SuiteReport:
    """Run every cell of ``config``; the report is identical for any ``jobs``."""
    scenario = config.scenario if isinstance(config.scenario, Scenario) else load_scenario(config.scenario)
    cells = _cells(config, scenario)
    digest_doc = {"config": config.to_dict(), "scenario": scenario.digest}
    digest = hashlib.sha256(json.dumps(digest_doc, sort_keys=True).encode("utf-8")).hexdigest()

    summaries: List[Dict[str, Any]] = []
    kept: Dict[str, Tuple[EpisodeTrace, ...]] = {}
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        for cell in cells:
            overrides = dict(scenario.policy.to_dict())
            overrides.update(config.policy)
            overrides.update(closed_loop=cell.closed_loop, prune_depth=cell.prune_depth)
            policy = EpisodePolicy.from_dict(overrides)
            work = [(g, e) for g in range(config.groups) for e in range(config.episodes)]
            results = list(pool.map(lambda ge: _run_one(config, scenario, cell, policy, *ge), work))
            summary = _summarize(cell, results, config.groups)
            check_cell(summary)
            summaries.append(summary)
            if keep_traces:
                kept[cell.key] = tuple(r.trace for r in results if r.trace is not None)
            logger.info(
                "%s: planning %.3f, task %.3f over %d episodes",
                cell.key, summary["planning_success_rate"], summary["task_success_rate"], summary["episodes"],
            )
    return SuiteReport(digest, tuple(summaries), SCHEMA_VERSION, kept)


# ============================================================================
# Reports
# ============================================================================

_RATE = {"type": "number", "minimum": 0, "maximum": 1}
_COUNT = {"type": "integer", "minimum": 0}

REPORT_SCHEMA: Dict[str, Any] = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["schema_version", "config_digest", "cells"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "config_digest": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "cells": {
            "type": "array",
            "items": {
                "type": "object",
                "required": [
                    "key", "task", "closed_loop", "prune_depth", "profile", "episodes",
                    "planning_success_rate", "task_success_rate", "attempts_histogram", "phases",
                    "failure_modes", "planning_failures", "execution_successes", "errors",
                    "mean_prompt_bytes", "transcript_attempts", "transcript_accepted",
                    "group_mean", "group_std",
                ],
                "properties": {
                    "key": {"type": "string"},
                    "task": {"type": "string"},
                    "goal_skills": {"type": "array", "items": {"type": "string"}},
                    "closed_loop": {"type": "boolean"},
                    "prune_depth": {"type": ["integer", "string", "null"]},
                    "profile": {"type": "string"},
                    "episodes": {"type": "integer", "minimum": 1},
                    "planning_success_rate": _RATE,
                    "task_success_rate": _RATE,
                    "attempts_histogram": {"type": "object", "additionalProperties": _COUNT},
                    "phases": {"type": "array", "items": _RATE},
                    "failure_modes": {
                        "type": "object",
                        "required": ["FLE", "TLE", "PTF"],
                        "properties": {"FLE": _COUNT, "TLE": _COUNT, "PTF": {"const": 0}},
                    },
                    "planning_failures": _COUNT,
                    "execution_successes": _COUNT,
                    "errors": _COUNT,
                    "mean_prompt_bytes": {"type": "number", "minimum": 0},
                    "mean_steps": {"type": "number", "minimum": 0},
                    "mean_replans": {"type": "number", "minimum": 0},
                    "transcript_attempts": _COUNT,
                    "transcript_accepted": _COUNT,
                    "groups": {"type": "array"},
                    "group_mean": {"type": "object"},
                    "group_std": {"type": "object"},
                },
            },
        },
    },
}


def validate_report(document: Union[str, Mapping[str, Any]]) -> Dict[str, Any]:
    """Parse (if needed) and schema-check a machine report; raises jsonschema.ValidationError."""
    data = json.loads(document) if isinstance(document, str) else dict(document)
    validate(instance=data, schema=REPORT_SCHEMA)
    return data


def phase_frame(report: SuiteReport) -> pd.DataFrame:
    """One row per phase, one column per cell."""
    columns = {cell["key"]: pd.Series(cell["phases"], dtype=float) for cell in report.cells}
    frame = pd.DataFrame(columns)
    frame.index = [f"phase {k + 1}" for k in range(len(frame))]
    frame.index.name = "phase"
    return frame


def summary_frame(report: SuiteReport) -> pd.DataFrame:
    rows = [
        {
            "cell": c["key"],
            "episodes": c["episodes"],
            "planning": c["planning_success_rate"],
            "task": c["task_success_rate"],
            "FLE": c["failure_modes"]["FLE"],
            "TLE": c["failure_modes"]["TLE"],
            "PTF": c["failure_modes"]["PTF"],
            "plan_fail": c["planning_failures"],
            "errors": c["errors"],
            "prompt_bytes": c["mean_prompt_bytes"],
            "replans": c["mean_replans"],
            "task_mean": c["group_mean"]["task_success_rate"],
            "task_std": c["group_std"]["task_success_rate"],
        }
        for c in report.cells
    ]
    return pd.DataFrame(rows, columns=[
        "cell", "episodes", "planning", "task", "FLE", "TLE", "PTF", "plan_fail",
        "errors", "prompt_bytes", "replans", "task_mean", "task_std",
    ])


def emit_report(report: SuiteReport, fmt: str = "machine") -> str:
    if fmt == "machine":
        return json.dumps(report.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"
    if fmt != "human":
        raise ValueError(f"unknown report format {fmt!r}")
    lines = [f"config {report.config_digest[:12]}  schema v{report.schema_version}", ""]
    if not report.cells:
        lines.append("(no cells)")
        return "\n".join(lines) + "\n"
    lines += ["Summary", summary_frame(report).to_string(index=False), ""]
    lines += ["Phase-wise cumulative success", phase_frame(report).to_string(na_rep="-"), ""]
    return "\n".join(lines)


def write_phase_csv(report: SuiteReport, path: Union[str, Path]) -> None:
    phase_frame(report).to_csv(path)


def write_traces(report: SuiteReport, path: Union[str, Path]) -> int:
    """JSON lines, one record per episode in (cell, group, episode) order; returns the record count."""
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for key in [c["key"] for c in report.cells]:
            for trace in report.traces.get(key, ()):
                record = {"cell": key, **trace.to_dict()}
                f.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
                count += 1
    return count
