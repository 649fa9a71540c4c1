"""
Scenario files: a graph, the tasks to run on it, a failure model and policy defaults.

    {
      "graph": "mini_household.json",
      "tasks": [{"id": "serve_bowl", "instruction": "...",
                 "goal_skills": ["place_bowl_table"],
                 "initial": "(pantry, null, null)",
                 "objects": {"bowl": "pantry"}}],
      "failure_model": {"p_ok": 0.9, "weights": {"DropInPlace": 1.0}},
      "profiles": {"object_specific": {"p_ok": 0.8}},
      "policy": {"closed_loop": true, "max_retries": 2}
    }

The graph path is relative to the scenario file; an inline graph object is
also accepted. The top-level failure model is the profile named "default".
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

from .planner import TaskSpec
from .simulator import EpisodePolicy, FailureModel
from .skill_graph import MAX_STATES, SkillStateGraph, load_graph
from .state import LiteralError, state_from_json

logger = logging.getLogger(__name__)

DEFAULT_PROFILE = "default"


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    graph: SkillStateGraph
    tasks: Tuple[TaskSpec, ...]
    profiles: Mapping[str, FailureModel]
    policy: EpisodePolicy = EpisodePolicy()
    digest: str = ""
    path: Optional[Path] = None
    graph_document: Mapping[str, Any] = field(default_factory=dict)

    @property
    def failure_model(self) -> FailureModel:
        return self.profiles[DEFAULT_PROFILE]

    def task(self, task_id: str) -> TaskSpec:
        for task in self.tasks:
            if task.id == task_id:
                return task
        raise ScenarioError(f"no task {task_id!r} in scenario")

    def profile(self, name: str) -> FailureModel:
        if name not in self.profiles:
            raise ScenarioError(f"no failure profile {name!r}; have {', '.join(sorted(self.profiles))}")
        return self.profiles[name]


def _read_json(path: Path, what: str) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except OSError as exc:
        raise ScenarioError(f"cannot read {what} {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{what} {path} is not valid JSON: {exc}") from exc


def _task(entry: Any, index: int, graph: SkillStateGraph) -> TaskSpec:
    where = f"tasks[{index}]"
    if not isinstance(entry, dict):
        raise ScenarioError(f"{where} must be an object")
    goals = entry.get("goal_skills")
    if not isinstance(goals, list) or not all(isinstance(g, str) for g in goals):
        raise ScenarioError(f"{where}.goal_skills must be a list of skill ids")
    try:
        initial = state_from_json(entry.get("initial"))
    except LiteralError as exc:
        raise ScenarioError(f"{where}.initial: {exc}") from exc
    if initial.location not in graph.locations:
        raise ScenarioError(f"{where}.initial: unknown location {initial.location!r}")
    for held in (initial.left, initial.right):
        if held is not None and held not in graph.objects:
            raise ScenarioError(f"{where}.initial: unknown object {held!r}")
    objects = entry.get("objects", {}) or {}
    for obj, loc in objects.items():
        if obj not in graph.objects or loc not in graph.locations:
            raise ScenarioError(f"{where}.objects: {obj!r} at {loc!r} is not in the graph vocabulary")
        if obj in (initial.left, initial.right):
            raise ScenarioError(f"{where}.objects: {obj!r} is held at the start")
    task = TaskSpec(
        str(entry.get("id", f"task{index}")),
        tuple(goals),
        initial,
        str(entry.get("instruction", "")),
        dict(objects),
    )
    try:
        task.validate(graph)
    except ValueError as exc:
        raise ScenarioError(f"{where}: {exc}") from exc
    return task


def parse_scenario(
    data: Mapping[str, Any],
    base_dir: Union[str, Path] = ".",
    max_states: int = MAX_STATES,
    path: Optional[Path] = None,
) -> Scenario:
    """Build a Scenario; GraphLoadError from the referenced graph propagates."""
    if not isinstance(data, dict):
        raise ScenarioError("scenario document must be an object")
    ref = data.get("graph")
    if isinstance(ref, str):
        graph_doc = _read_json(Path(base_dir) / ref, "graph file")
    elif isinstance(ref, dict):
        graph_doc = ref
    else:
        raise ScenarioError("scenario needs a 'graph' path or object")
    graph = load_graph(graph_doc, max_states=max_states)

    raw_tasks = data.get("tasks")
    if not isinstance(raw_tasks, list) or not raw_tasks:
        raise ScenarioError("scenario needs a non-empty 'tasks' list")
    tasks = tuple(_task(entry, k, graph) for k, entry in enumerate(raw_tasks))
    ids = [t.id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ScenarioError(f"duplicate task ids in {ids}")

    try:
        profiles: Dict[str, FailureModel] = {DEFAULT_PROFILE: FailureModel.from_dict(data.get("failure_model", {}))}
        for name, entry in (data.get("profiles") or {}).items():
            if name == DEFAULT_PROFILE:
                raise ScenarioError("profile name 'default' is reserved for failure_model")
            profiles[name] = FailureModel.from_dict(entry)
        policy = EpisodePolicy.from_dict(data.get("policy", {}))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(str(exc)) from exc

    canonical = json.dumps({"scenario": {k: v for k, v in data.items() if k != "graph"}, "graph": graph_doc},
                           sort_keys=True, ensure_ascii=False)
    digest = hashlib.sha256(canonical.encode("utf-8")).hexdigest()
    logger.info("loaded scenario with %d task(s), profiles: %s", len(tasks), ", ".join(sorted(profiles)))
    return Scenario(graph, tasks, profiles, policy, digest, path, graph_doc)


def load_scenario(path: Union[str, Path], max_states: int = MAX_STATES) -> Scenario:
    path = Path(path)
    return parse_scenario(_read_json(path, "scenario"), path.parent, max_states, path)
