"""
Planners and the propose -> verify -> feedback loop.

Implementations:
- OraclePlanner: breadth-first search over (state, next goal) pairs; always
  returns the shortest feasible plan, ties broken lexicographically.
- ReplayPlanner: returns scripted plans (plan files, tests).
- AdversarialPlanner: mutates the oracle plan so that it violates a
  precondition, modelling a planner without state grounding.
- ChatCompletionPlanner (engine.llm): external chat-completion endpoint.
"""
from __future__ import annotations

import logging
import os
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Protocol, Sequence, Set, Tuple, Union

import numpy as np

from .skill_graph import SkillCategory, SkillStateGraph, TopoView, prune_view, topo_view
from .state import EmbodimentState, format_state, matches, try_apply
from .verifier import (
    Conflict,
    ConflictKind,
    Plan,
    Verdict,
    VerificationReport,
    conflict_feedback,
    verify,
)

logger = logging.getLogger(__name__)

MAX_EXPANSIONS = int(os.environ.get("SKILLSTATE_MAX_EXPANSIONS", str(10**6)))

PLAN_START = "<<PLAN>>"
PLAN_END = "<<END>>"


@dataclass(frozen=True)
class TaskSpec:
    id: str
    goal_skills: Tuple[str, ...]
    initial: EmbodimentState
    instruction: str = ""
    # initial location of objects not held at the start
    objects: Mapping[str, str] = field(default_factory=dict)

    def validate(self, graph: SkillStateGraph) -> None:
        if not self.goal_skills:
            raise ValueError(f"task {self.id!r} has no goal skills")
        unknown = [g for g in self.goal_skills if g not in graph.skills]
        if unknown:
            raise ValueError(f"task {self.id!r} names unknown goal skills: {', '.join(unknown)}")

    def replace(self, initial: EmbodimentState, goal_skills: Optional[Sequence[str]] = None) -> "TaskSpec":
        goals = self.goal_skills if goal_skills is None else tuple(goal_skills)
        return TaskSpec(self.id, goals, initial, self.instruction, self.objects)


@dataclass(frozen=True)
class Refusal:
    reason: str


Proposal = Union[Plan, Refusal]


class Planner(Protocol):
    name: str

    def propose(self, task: TaskSpec, view: TopoView, state: EmbodimentState, feedback: Optional[str] = None) -> Proposal:
        ...


class SearchBudgetExceeded(RuntimeError):
    pass


class ParseFailureKind(str, Enum):
    MISSING_SENTINELS = "MissingSentinels"
    UNKNOWN_SKILL = "UnknownSkill"
    EMPTY_PLAN = "EmptyPlan"


class ParseFailure(ValueError):
    def __init__(self, kind: ParseFailureKind, detail: str):
        self.kind = kind
        self.detail = detail
        super().__init__(f"{kind.value}: {detail}")


class PlannerTimeout(TimeoutError):
    pass


class PlannerTransportError(ConnectionError):
    pass


# ============================================================================
# Search
# ============================================================================

def goals_progress(plan: Sequence[str], goals: Sequence[str]) -> int:
    """Number of goals completed, in order, by executing ``plan``."""
    k = 0
    for sid in plan:
        if k < len(goals) and sid == goals[k]:
            k += 1
    return k


def shortest_plan(
    graph: SkillStateGraph,
    initial: EmbodimentState,
    goals: Sequence[str],
    mask: Iterable[str] = (),
    allowed: Optional[Iterable[str]] = None,
    max_expansions: int = MAX_EXPANSIONS,
) -> Optional[Plan]:
    """Shortest plan executing ``goals`` in order; None when none exists.

    Breadth-first over (state, index of next goal). Successors are expanded in
    skill-id order and a node keeps its first discovered path, so the returned
    plan is the lexicographically smallest among the shortest ones.
    """
    goals = tuple(goals)
    if not goals:
        return ()
    masked = set(mask)
    allowed_set = None if allowed is None else set(allowed)
    candidates = [
        sid for sid in graph.skill_ids
        if sid not in masked and (allowed_set is None or sid in allowed_set)
    ]
    start = (initial, 0)
    parent: Dict[Tuple[EmbodimentState, int], Optional[Tuple[Tuple[EmbodimentState, int], str]]] = {start: None}
    queue = deque([start])
    expanded = 0
    while queue:
        node = queue.popleft()
        expanded += 1
        if expanded > max_expansions:
            raise SearchBudgetExceeded(f"search expanded more than {max_expansions} nodes")
        state, k = node
        for sid in candidates:
            skill = graph.skills[sid]
            if not matches(state, skill.pre):
                continue
            post = try_apply(state, skill.delta)
            if post is None:
                continue
            child = (post, k + 1 if sid == goals[k] else k)
            if child in parent:
                continue
            parent[child] = (node, sid)
            if child[1] == len(goals):
                logger.debug("search found a plan after %d expansions", expanded)
                return _unwind(parent, child)
            queue.append(child)
    logger.debug("search exhausted %d nodes without reaching the goals", expanded)
    return None


def _unwind(parent, node) -> Plan:
    steps: List[str] = []
    while parent[node] is not None:
        node, sid = parent[node]
        steps.append(sid)
    return tuple(reversed(steps))


def search_plan(
    graph: SkillStateGraph,
    task: TaskSpec,
    mask: Iterable[str] = (),
    max_expansions: int = MAX_EXPANSIONS,
) -> Optional[Plan]:
    return shortest_plan(graph, task.initial, task.goal_skills, mask=mask, max_expansions=max_expansions)


# ============================================================================
# Planners
# ============================================================================

class OraclePlanner:
    name = "oracle"

    def __init__(self, graph: SkillStateGraph, max_expansions: int = MAX_EXPANSIONS):
        self.graph = graph
        self.max_expansions = max_expansions

    def propose(self, task: TaskSpec, view: TopoView, state: EmbodimentState, feedback: Optional[str] = None) -> Proposal:
        plan = shortest_plan(
            self.graph, state, task.goal_skills, allowed=view.node_ids, max_expansions=self.max_expansions
        )
        if plan is None:
            return Refusal("no feasible plan over the offered skills")
        return plan


class ReplayPlanner:
    """Returns scripted plans in order; the last one repeats once the script runs out.

    ``script`` maps task ids to plan lists; the key ``"*"`` applies to any task.
    """

    name = "replay"

    def __init__(self, script: Mapping[str, Sequence[Sequence[str]]]):
        self.script = {k: [tuple(p) for p in plans] for k, plans in script.items()}
        self._cursor: Dict[str, int] = {}

    @classmethod
    def from_plans(cls, *plans: Sequence[str]) -> "ReplayPlanner":
        return cls({"*": list(plans)})

    def propose(self, task: TaskSpec, view: TopoView, state: EmbodimentState, feedback: Optional[str] = None) -> Proposal:
        key = task.id if task.id in self.script else "*"
        plans = self.script.get(key)
        if not plans:
            return Refusal(f"no scripted plan for task {task.id!r}")
        index = self._cursor.get(key, 0)
        self._cursor[key] = index + 1
        return plans[min(index, len(plans) - 1)]


MUTATIONS = ("swap_adjacent", "drop_navigation", "duplicate_pick")


class AdversarialPlanner:
    """Emits plausible but physically inconsistent plans.

    Each proposal is the oracle plan with probability ``p_valid`` (or, when
    ``invalid_attempts`` is given, after that many invalid proposals); otherwise
    one mutation of it that the verifier rejects: two adjacent steps swapped, a
    navigation step dropped, or a pick duplicated.
    """

    name = "adversarial"

    def __init__(
        self,
        graph: SkillStateGraph,
        p_valid: float = 0.0,
        invalid_attempts: Optional[int] = None,
        rng: Optional[np.random.Generator] = None,
        max_expansions: int = MAX_EXPANSIONS,
    ):
        if not 0.0 <= p_valid <= 1.0:
            raise ValueError("p_valid must lie in [0, 1]")
        self.graph = graph
        self.p_valid = p_valid
        self.invalid_attempts = invalid_attempts
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.max_expansions = max_expansions
        self.calls = 0
        self.last_mutation: Optional[str] = None

    def propose(self, task: TaskSpec, view: TopoView, state: EmbodimentState, feedback: Optional[str] = None) -> Proposal:
        plan = shortest_plan(
            self.graph, state, task.goal_skills, allowed=view.node_ids, max_expansions=self.max_expansions
        )
        if plan is None:
            return Refusal("no feasible plan over the offered skills")
        if self.invalid_attempts is not None:
            valid = self.calls >= self.invalid_attempts
        else:
            valid = bool(self.rng.random() < self.p_valid)
        self.calls += 1
        if valid:
            self.last_mutation = None
            return plan
        return self.corrupt(plan, state)

    def mutations(self, plan: Plan, kind: str) -> List[Plan]:
        categories = [self.graph.skills[s].category for s in plan]
        out: List[Plan] = []
        if kind == "swap_adjacent":
            for i in range(len(plan) - 1):
                if plan[i] != plan[i + 1]:
                    out.append(plan[:i] + (plan[i + 1], plan[i]) + plan[i + 2:])
        elif kind == "drop_navigation":
            for i, cat in enumerate(categories):
                if cat is SkillCategory.NAVIGATE:
                    out.append(plan[:i] + plan[i + 1:])
        elif kind == "duplicate_pick":
            for i, cat in enumerate(categories):
                if cat is SkillCategory.PICK:
                    out.append(plan[: i + 1] + (plan[i],) + plan[i + 1:])
        return out

    def corrupt(self, plan: Plan, state: EmbodimentState) -> Plan:
        for k in self.rng.permutation(len(MUTATIONS)):
            kind = MUTATIONS[int(k)]
            candidates = self.mutations(plan, kind)
            for j in self.rng.permutation(len(candidates)) if candidates else ():
                candidate = candidates[int(j)]
                if not verify(self.graph, state, candidate).feasible:
                    self.last_mutation = kind
                    return candidate
        # nothing infeasible to mutate into: hallucinate a skill id
        bogus = plan[-1] + "_again"
        while bogus in self.graph.skills:
            bogus += "_again"
        self.last_mutation = "hallucinated_skill"
        return plan + (bogus,)


def build_planner(name: str, graph: SkillStateGraph, rng: Optional[np.random.Generator] = None, **options: Any) -> Planner:
    """Planner by name; ``options`` are planner specific."""
    if name == "oracle":
        return OraclePlanner(graph)
    if name == "adversarial":
        return AdversarialPlanner(
            graph,
            p_valid=float(options.get("p_valid", 0.0)),
            invalid_attempts=options.get("invalid_attempts"),
            rng=rng,
        )
    if name == "replay":
        script = options.get("script")
        if script is None and options.get("plan_file"):
            script = {"*": [read_plan_file(options["plan_file"])]}
        return ReplayPlanner(script or {})
    if name == "external":
        from .llm import ChatCompletionPlanner

        return ChatCompletionPlanner(
            endpoint=options.get("endpoint"),
            model=options.get("model"),
            timeout=options.get("timeout"),
        )
    raise ValueError(f"unknown planner {name!r}")


# ============================================================================
# Prompt format
# ============================================================================

def serialize_prompt(task: TaskSpec, view: TopoView, state: EmbodimentState, feedback: Optional[str] = None) -> str:
    lines = [
        "You plan skill sequences for a dual-arm mobile manipulator.",
        f"Instruction: {task.instruction or task.id}",
        f"Milestones, in order: {', '.join(task.goal_skills)}",
        f"Current state (location, left gripper, right gripper): {format_state(state)}",
        "",
        "Skills:",
    ]
    lines += [f"- {n.id}: {n.label} [{n.category}]" for n in view.nodes]
    lines += ["", "Allowed transitions:"]
    for src in view.node_ids:
        successors = view.adjacency.get(src, ())
        if successors:
            lines.append(f"- {src} -> {', '.join(successors)}")
    if feedback:
        lines += ["", "Your previous plan was rejected:", feedback]
    lines += [
        "",
        f"Answer with one skill id per line between a line {PLAN_START} and a line {PLAN_END}.",
    ]
    return "\n".join(lines) + "\n"


def parse_plan(text: str, view: TopoView) -> Plan:
    lines = (text or "").splitlines()
    stripped = [ln.strip() for ln in lines]
    try:
        start = stripped.index(PLAN_START)
        end = stripped.index(PLAN_END, start + 1)
    except ValueError:
        raise ParseFailure(ParseFailureKind.MISSING_SENTINELS, f"expected {PLAN_START} ... {PLAN_END}")
    steps = tuple(s for s in stripped[start + 1:end] if s)
    if not steps:
        raise ParseFailure(ParseFailureKind.EMPTY_PLAN, "no skill ids between the markers")
    known = set(view.node_ids)
    unknown = [s for s in steps if s not in known]
    if unknown:
        raise ParseFailure(ParseFailureKind.UNKNOWN_SKILL, f"unknown skill id(s): {', '.join(unknown)}")
    return steps


def read_plan_file(path: Union[str, Path]) -> Plan:
    """One skill id per line; blank lines and ``#`` comments are ignored."""
    steps = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if line:
                steps.append(line)
    return tuple(steps)


# ============================================================================
# Verification loop
# ============================================================================

@dataclass(frozen=True)
class Attempt:
    number: int
    candidate: Optional[Plan]
    report: Optional[VerificationReport]
    error: Optional[str] = None

    @property
    def accepted(self) -> bool:
        return self.report is not None and self.report.feasible

    def to_dict(self) -> Dict[str, Any]:
        return {
            "number": self.number,
            "candidate": None if self.candidate is None else list(self.candidate),
            "report": None if self.report is None else self.report.to_dict(),
            "error": self.error,
        }


@dataclass(frozen=True)
class PlanningResult:
    plan: Plan
    attempts: int
    transcript: Tuple[Attempt, ...]
    prompt_bytes: int


class PlanningFailed(RuntimeError):
    def __init__(self, reason: str, transcript: Sequence[Attempt] = (), prompt_bytes: int = 0, detail: str = ""):
        self.reason = reason
        self.transcript = tuple(transcript)
        self.prompt_bytes = prompt_bytes
        super().__init__(f"planning failed ({reason}) after {len(self.transcript)} attempt(s)" + (f": {detail}" if detail else ""))


def check_goals(report: VerificationReport, goals: Sequence[str]) -> VerificationReport:
    """Reject a feasible report whose plan does not execute ``goals`` in order."""
    if not report.feasible:
        return report
    done = goals_progress(report.plan, goals)
    if done == len(goals):
        return report
    conflict = Conflict(
        len(report.plan),
        goals[done],
        ConflictKind.GOAL_NOT_REACHED,
        f"goal skill '{goals[done]}' is never executed",
    )
    return VerificationReport(Verdict.INFEASIBLE, report.state_chain, conflict, report.plan)


def plan_with_verification(
    planner: Planner,
    graph: SkillStateGraph,
    task: TaskSpec,
    max_retries: int = 2,
    prune_depth: Optional[Union[int, float]] = None,
    check_adjacency: bool = False,
    timeout: Optional[float] = None,
    state: Optional[EmbodimentState] = None,
) -> PlanningResult:
    """Propose, verify, and retry with feedback until a plan is accepted.

    ``prune_depth=None`` offers the full topological view; a number offers the
    view pruned to skills reachable from the current state within that depth.
    Raises PlanningFailed after ``1 + max_retries`` rejections.
    """
    if max_retries < 0:
        raise ValueError("max_retries must be non-negative")
    state = task.initial if state is None else state
    view = topo_view(graph) if prune_depth is None else prune_view(graph, state, prune_depth)
    prompt_bytes = len(serialize_prompt(task, view, state).encode("utf-8"))
    transcript: List[Attempt] = []
    feedback: Optional[str] = None

    for number in range(1, max_retries + 2):
        started = time.monotonic()
        try:
            candidate = planner.propose(task, view, state, feedback)
        except PlannerTimeout as exc:
            raise PlanningFailed("Timeout", transcript, prompt_bytes, str(exc)) from exc
        except PlannerTransportError as exc:
            raise PlanningFailed("Transport", transcript, prompt_bytes, str(exc)) from exc
        except ParseFailure as exc:
            transcript.append(Attempt(number, None, None, str(exc)))
            feedback = f"Your answer could not be parsed ({exc}). Use only these skill ids: {', '.join(view.node_ids)}."
            logger.warning("attempt %d for task %s: unparseable answer (%s)", number, task.id, exc.kind.value)
            continue
        if timeout is not None and time.monotonic() - started > timeout:
            raise PlanningFailed("Timeout", transcript, prompt_bytes, f"planner exceeded {timeout}s")
        if isinstance(candidate, Refusal):
            transcript.append(Attempt(number, None, None, f"refused: {candidate.reason}"))
            feedback = f"You did not return a plan ({candidate.reason})."
            logger.warning("attempt %d for task %s: planner refused (%s)", number, task.id, candidate.reason)
            continue

        report = check_goals(verify(graph, state, candidate, check_adjacency), task.goal_skills)
        transcript.append(Attempt(number, tuple(candidate), report))
        if report.feasible:
            logger.info("task %s: plan of %d steps accepted on attempt %d", task.id, len(candidate), number)
            return PlanningResult(tuple(candidate), number, tuple(transcript), prompt_bytes)
        logger.warning(
            "attempt %d for task %s rejected: %s at index %d",
            number, task.id, report.conflict.kind.value, report.conflict.index,
        )
        feedback = conflict_feedback(report, graph, view)

    raise PlanningFailed("RetriesExhausted", transcript, prompt_bytes)
