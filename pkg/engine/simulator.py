"""
Closed-loop execution over a stochastic world.

The world tracks the robot's embodiment state plus where every object is.
Each skill execution succeeds with a configurable probability; otherwise one
deviation cause is sampled. After every step a two-layer monitor compares the
world with the expected post-state (ego layer) and, optionally, checks that
the skill's object effect really happened (semantic layer). Deviations trigger
a graph search from the observed state (closed loop) or end the episode (open
loop).
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np

from .planner import (
    MAX_EXPANSIONS,
    Attempt,
    Planner,
    PlanningFailed,
    SearchBudgetExceeded,
    TaskSpec,
    plan_with_verification,
    shortest_plan,
)
from .skill_graph import SemanticSkill, SkillStateGraph
from .state import EmbodimentState, format_state, matches, state_to_json, try_apply
from .verifier import Plan, verify

logger = logging.getLogger(__name__)


def episode_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for (seed, keys); the same inputs always give the same stream."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys)))


# ============================================================================
# World
# ============================================================================

@dataclass(frozen=True)
class AtLocation:
    location: str

    def to_json(self) -> Any:
        return {"at": self.location}


@dataclass(frozen=True)
class InGripper:
    side: str

    def to_json(self) -> Any:
        return {"gripper": self.side}


@dataclass(frozen=True)
class _Lost:
    def to_json(self) -> Any:
        return "lost"


LOST = _Lost()

ObjectPlace = Union[AtLocation, InGripper, _Lost]


class PreconditionViolated(AssertionError):
    """A skill was executed from a state it does not admit; plans must be verified first."""


class WorldInvariantError(AssertionError):
    pass


@dataclass
class WorldState:
    ego: EmbodimentState
    object_at: Dict[str, ObjectPlace] = field(default_factory=dict)

    @classmethod
    def for_task(cls, graph: SkillStateGraph, task: TaskSpec) -> "WorldState":
        """Held objects start in their gripper; the rest where ``task.objects`` says, else at the robot."""
        object_at: Dict[str, ObjectPlace] = {}
        for obj in graph.objects:
            if task.initial.left == obj:
                object_at[obj] = InGripper("left")
            elif task.initial.right == obj:
                object_at[obj] = InGripper("right")
            else:
                object_at[obj] = AtLocation(task.objects.get(obj, task.initial.location))
        world = cls(task.initial, object_at)
        world.check_invariants()
        return world

    def lost_objects(self) -> Set[str]:
        return {obj for obj, place in self.object_at.items() if place is LOST}

    def check_invariants(self) -> None:
        for side in ("left", "right"):
            held = self.ego.gripper(side)
            if held is not None and self.object_at.get(held) != InGripper(side):
                raise WorldInvariantError(f"{side} gripper holds {held} but object is at {self.object_at.get(held)}")
            in_side = [o for o, p in self.object_at.items() if p == InGripper(side)]
            if in_side != ([held] if held is not None else []):
                raise WorldInvariantError(f"{side} gripper is {held!r} but objects {in_side} claim to be in it")

    def snapshot(self) -> Dict[str, Any]:
        return {obj: self.object_at[obj].to_json() for obj in sorted(self.object_at)}


# ============================================================================
# Failure model
# ============================================================================

class DeviationCause(str, Enum):
    DROP_IN_PLACE = "DropInPlace"
    DROP_LOST = "DropLost"
    NAV_SHORTFALL = "NavShortfall"
    STALL = "Stall"


CAUSES = tuple(DeviationCause)

DEFAULT_WEIGHTS = {
    DeviationCause.DROP_IN_PLACE: 0.4,
    DeviationCause.DROP_LOST: 0.0,
    DeviationCause.NAV_SHORTFALL: 0.3,
    DeviationCause.STALL: 0.3,
}


def _probability(value: Any, what: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{what} must lie in [0, 1], got {value}")
    return value


@dataclass(frozen=True)
class FailureModel:
    """Per-skill success probability and the distribution of deviation causes.

    Lookup order for a skill's success probability: ``per_skill``,
    ``per_category``, then ``p_ok``.
    """

    p_ok: float = 1.0
    per_category: Mapping[str, float] = field(default_factory=dict)
    per_skill: Mapping[str, float] = field(default_factory=dict)
    weights: Mapping[DeviationCause, float] = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    seed: int = 0

    def __post_init__(self) -> None:
        _probability(self.p_ok, "p_ok")
        for key, value in {**self.per_category, **self.per_skill}.items():
            _probability(value, f"success probability of {key}")
        if set(self.weights) - set(CAUSES):
            raise ValueError(f"unknown deviation causes: {set(self.weights) - set(CAUSES)}")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("deviation weights must be non-negative")
        if not math.isclose(sum(self.weights.values()), 1.0, abs_tol=1e-9):
            raise ValueError(f"deviation weights must sum to 1, got {sum(self.weights.values())}")

    def success_probability(self, skill: SemanticSkill) -> float:
        if skill.id in self.per_skill:
            return float(self.per_skill[skill.id])
        if skill.category.value in self.per_category:
            return float(self.per_category[skill.category.value])
        return float(self.p_ok)

    def cause_probabilities(self) -> np.ndarray:
        return np.array([float(self.weights.get(c, 0.0)) for c in CAUSES])

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "FailureModel":
        weights = data.get("weights")
        return cls(
            p_ok=float(data.get("p_ok", 1.0)),
            per_category=dict(data.get("per_category", {})),
            per_skill=dict(data.get("per_skill", {})),
            weights=dict(DEFAULT_WEIGHTS) if weights is None else {DeviationCause(k): float(v) for k, v in weights.items()},
            seed=int(data.get("seed", 0)),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "p_ok": self.p_ok,
            "per_category": dict(sorted(self.per_category.items())),
            "per_skill": dict(sorted(self.per_skill.items())),
            "weights": {c.value: float(self.weights.get(c, 0.0)) for c in CAUSES},
            "seed": self.seed,
        }


# ============================================================================
# Execution and monitoring
# ============================================================================

@dataclass(frozen=True)
class Outcome:
    expected: EmbodimentState
    observed: EmbodimentState
    cause: Optional[DeviationCause] = None

    @property
    def success(self) -> bool:
        return self.cause is None

    def to_dict(self) -> Dict[str, Any]:
        if self.success:
            return {"variant": "Success", "observed": state_to_json(self.observed)}
        return {"variant": "Deviation", "cause": self.cause.value, "observed": state_to_json(self.observed)}


def execute_skill(world: WorldState, skill: SemanticSkill, model: FailureModel, rng: np.random.Generator) -> Outcome:
    """Execute ``skill`` in ``world`` (mutated in place) and report what happened.

    Exactly one uniform draw decides success; a failure draws one more value to
    pick the cause. On failure the skill's delta is not applied; drop causes
    release one object (the one being placed, else the one being picked, else
    the first held one when navigating). Causes with nothing to act on degrade
    to Stall.
    """
    if not matches(world.ego, skill.pre):
        raise PreconditionViolated(f"{skill.id} executed from {format_state(world.ego)}")
    expected = try_apply(world.ego, skill.delta)
    if expected is None:
        raise PreconditionViolated(f"delta of {skill.id} cannot apply at {format_state(world.ego)}")

    cause: Optional[DeviationCause] = None
    if not rng.random() < model.success_probability(skill):
        cause = CAUSES[int(rng.choice(len(CAUSES), p=model.cause_probabilities()))]

    if cause is None and any(world.object_at.get(obj) is LOST for _, obj in skill.delta.added()):
        # nothing there to grasp
        cause = DeviationCause.STALL

    if cause is None:
        world.ego = expected
        for side, obj in skill.delta.added():
            world.object_at[obj] = InGripper(side)
        for _, obj in skill.delta.released():
            world.object_at[obj] = AtLocation(expected.location)
    elif cause is DeviationCause.NAV_SHORTFALL:
        if skill.delta.scene is None:
            cause = DeviationCause.STALL
    elif cause in (DeviationCause.DROP_IN_PLACE, DeviationCause.DROP_LOST):
        cause = _drop(world, skill, cause)

    world.check_invariants()
    logger.debug("%s -> %s", skill.id, "ok" if cause is None else cause.value)
    return Outcome(expected, world.ego, cause)


def _drop(world: WorldState, skill: SemanticSkill, cause: DeviationCause) -> DeviationCause:
    released = skill.delta.released()
    added = [(side, obj) for side, obj in skill.delta.added() if world.object_at.get(obj) is not LOST]
    if released:
        side, obj = released[0]
    elif added:
        side, obj = added[0]
    else:
        held = [(s, world.ego.gripper(s)) for s in ("left", "right") if world.ego.gripper(s) is not None]
        if not held:
            return DeviationCause.STALL
        side, obj = held[0]
    if world.ego.gripper(side) == obj:
        world.ego = world.ego.with_gripper(side, None)
    world.object_at[obj] = AtLocation(world.ego.location) if cause is DeviationCause.DROP_IN_PLACE else LOST
    return cause


@dataclass(frozen=True)
class MonitorResult:
    ok: bool
    observed: EmbodimentState
    layer: Optional[str] = None
    detail: str = ""


def _semantic_issue(skill: SemanticSkill, world: WorldState) -> Optional[str]:
    for side, obj in skill.delta.released():
        if world.object_at.get(obj) != AtLocation(world.ego.location):
            return f"{obj} is not at {world.ego.location}"
    for side, obj in skill.delta.added():
        if world.object_at.get(obj) != InGripper(side):
            return f"{obj} is not in the {side} gripper"
    return None


def monitor(
    expected: EmbodimentState,
    world: WorldState,
    semantic_check: bool = False,
    skill: Optional[SemanticSkill] = None,
    rng: Optional[np.random.Generator] = None,
    false_negative_rate: float = 0.0,
) -> MonitorResult:
    """Ego comparison first; then, if enabled, the object effect of ``skill``."""
    if world.ego != expected:
        return MonitorResult(
            False, world.ego, "ego", f"expected {format_state(expected)}, observed {format_state(world.ego)}"
        )
    if semantic_check and skill is not None:
        issue = _semantic_issue(skill, world)
        if issue is not None:
            if false_negative_rate > 0.0 and rng is not None and rng.random() < false_negative_rate:
                logger.debug("semantic check missed: %s", issue)
                return MonitorResult(True, world.ego)
            return MonitorResult(False, world.ego, "semantic", issue)
    return MonitorResult(True, world.ego)


def replan_mask(graph: SkillStateGraph, world: WorldState) -> Set[str]:
    """Skills that touch an object which is gone for good."""
    lost = world.lost_objects()
    if not lost:
        return set()
    return {sid for sid, skill in graph.skills.items() if lost.intersection(skill.delta.objects())}


def replan(
    graph: SkillStateGraph,
    observed: EmbodimentState,
    world_hint: WorldState,
    remaining_goals: Sequence[str],
    max_expansions: int = MAX_EXPANSIONS,
) -> Optional[Plan]:
    """Shortest corrective plan from ``observed`` through the remaining goals, or None."""
    if not remaining_goals:
        raise ValueError("replan needs at least one remaining goal")
    mask = replan_mask(graph, world_hint)
    if mask.intersection(remaining_goals):
        logger.info("goal skill depends on a lost object; no corrective plan")
        return None
    return shortest_plan(graph, observed, remaining_goals, mask=mask, max_expansions=max_expansions)


# ============================================================================
# Episodes
# ============================================================================

def parse_depth(value: Any) -> Optional[Union[int, float]]:
    """``None`` (no pruning), ``"inf"`` (full closure) or a positive integer."""
    if value is None or value == "none":
        return None
    if value in ("inf", math.inf):
        return math.inf
    depth = int(value)
    if depth < 1:
        raise ValueError(f"prune depth must be >= 1, got {value}")
    return depth


class TerminalMode(str, Enum):
    SUCCESS = "Success"
    UNRECOVERABLE_STATE = "UnrecoverableState"
    STEP_LIMIT_EXCEEDED = "StepLimitExceeded"
    REGRESSION_DETECTED = "RegressionDetected"


class FailureMode(str, Enum):
    FLE = "FLE"
    TLE = "TLE"
    PTF = "PTF"
    NOT_A_FAILURE = "NotAFailure"


@dataclass(frozen=True)
class Terminal:
    mode: TerminalMode
    at_step: int
    note: str = ""

    @property
    def success(self) -> bool:
        return self.mode is TerminalMode.SUCCESS

    def to_dict(self) -> Dict[str, Any]:
        return {"mode": self.mode.value, "at_step": self.at_step, "note": self.note}


@dataclass(frozen=True)
class ReplanRecord:
    trigger_state: EmbodimentState
    corrective_plan: Plan

    def to_dict(self) -> Dict[str, Any]:
        return {"trigger_state": state_to_json(self.trigger_state), "corrective_plan": list(self.corrective_plan)}


@dataclass(frozen=True)
class EpisodeEvent:
    step: int
    skill: str
    outcome: Outcome
    monitor: MonitorResult
    replan: Optional[ReplanRecord] = None
    goal_completed: Optional[str] = None
    object_at: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "step": self.step,
            "skill": self.skill,
            "outcome": self.outcome.to_dict(),
            "monitor": {"ok": self.monitor.ok, "layer": self.monitor.layer, "detail": self.monitor.detail},
            "replan": None if self.replan is None else self.replan.to_dict(),
            "goal_completed": self.goal_completed,
            "object_at": dict(self.object_at),
        }


@dataclass(frozen=True)
class EpisodePolicy:
    closed_loop: bool = True
    max_retries: int = 2
    prune_depth: Optional[Union[int, float]] = None
    step_limit: Optional[int] = None
    semantic_check: bool = True
    false_negative_rate: float = 0.0
    check_adjacency: bool = False
    replan_via: str = "search"
    planner_timeout: Optional[float] = None
    max_expansions: int = MAX_EXPANSIONS

    def __post_init__(self) -> None:
        if self.replan_via not in ("search", "planner"):
            raise ValueError(f"replan_via must be 'search' or 'planner', got {self.replan_via!r}")
        if self.step_limit is not None and self.step_limit < 0:
            raise ValueError("step_limit must be non-negative")
        _probability(self.false_negative_rate, "false_negative_rate")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EpisodePolicy":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown policy keys: {', '.join(sorted(unknown))}")
        values = dict(data)
        values["prune_depth"] = parse_depth(values.get("prune_depth"))
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "closed_loop": self.closed_loop,
            "max_retries": self.max_retries,
            "prune_depth": None if self.prune_depth is None else ("inf" if self.prune_depth == math.inf else self.prune_depth),
            "step_limit": self.step_limit,
            "semantic_check": self.semantic_check,
            "false_negative_rate": self.false_negative_rate,
            "check_adjacency": self.check_adjacency,
            "replan_via": self.replan_via,
            "planner_timeout": self.planner_timeout,
            "max_expansions": self.max_expansions,
        }


@dataclass(frozen=True)
class EpisodeTrace:
    task: TaskSpec
    events: Tuple[EpisodeEvent, ...]
    goals_completed: Tuple[str, ...]
    terminal: Terminal
    planning_attempts: int = 0
    prompt_bytes: int = 0
    transcript: Tuple[Attempt, ...] = ()
    plan: Plan = ()
    planning_failure: Optional[str] = None

    @property
    def planned(self) -> bool:
        return self.terminal.note != "planning"

    @property
    def replans(self) -> int:
        return sum(1 for e in self.events if e.replan is not None)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "task": self.task.id,
            "goal_skills": list(self.task.goal_skills),
            "plan": list(self.plan),
            "planning_attempts": self.planning_attempts,
            "prompt_bytes": self.prompt_bytes,
            "transcript": [a.to_dict() for a in self.transcript],
            "events": [e.to_dict() for e in self.events],
            "goals_completed": list(self.goals_completed),
            "terminal": self.terminal.to_dict(),
            "planning_failure": self.planning_failure,
        }


def _undone_placement(trace: EpisodeTrace) -> Optional[str]:
    """First object a goal step placed that a later snapshot shows moved without being picked."""
    held = {obj for obj in (trace.task.initial.left, trace.task.initial.right) if obj is not None}
    placed: Dict[str, Any] = {}
    for event in trace.events:
        snapshot = event.object_at
        for obj in [o for o in placed if o in snapshot]:
            if "gripper" in snapshot[obj]:
                del placed[obj]
            elif snapshot[obj] != placed[obj]:
                return obj
        if event.goal_completed is not None:
            for obj in held:
                where = snapshot.get(obj)
                if isinstance(where, Mapping) and "at" in where:
                    placed[obj] = where
        if snapshot:
            held = {obj for obj, where in snapshot.items() if isinstance(where, Mapping) and "gripper" in where}
    return None


def classify(trace: EpisodeTrace) -> FailureMode:
    """Failure mode of a finished episode; a placement undone later in the trace is PTF whatever the terminal."""
    if _undone_placement(trace) is not None:
        return FailureMode.PTF
    return {
        TerminalMode.UNRECOVERABLE_STATE: FailureMode.FLE,
        TerminalMode.STEP_LIMIT_EXCEEDED: FailureMode.TLE,
        TerminalMode.REGRESSION_DETECTED: FailureMode.PTF,
    }.get(trace.terminal.mode, FailureMode.NOT_A_FAILURE)


def _planner_replan(
    planner: Planner,
    graph: SkillStateGraph,
    task: TaskSpec,
    world: WorldState,
    remaining: Sequence[str],
    policy: EpisodePolicy,
) -> Optional[Plan]:
    mask = replan_mask(graph, world)
    if mask.intersection(remaining):
        return None
    try:
        result = plan_with_verification(
            planner, graph, task.replace(world.ego, remaining), policy.max_retries,
            policy.prune_depth, policy.check_adjacency, policy.planner_timeout,
        )
    except PlanningFailed as exc:
        logger.info("planner could not repair the plan: %s", exc)
        return None
    if mask.intersection(result.plan):
        return None
    return result.plan


def run_episode(
    graph: SkillStateGraph,
    task: TaskSpec,
    planner: Planner,
    model: FailureModel,
    policy: EpisodePolicy = EpisodePolicy(),
    rng: Optional[np.random.Generator] = None,
) -> EpisodeTrace:
    """Plan with verification, then execute step by step under the failure model."""
    rng = rng if rng is not None else episode_rng(model.seed)
    try:
        planned = plan_with_verification(
            planner, graph, task, policy.max_retries, policy.prune_depth,
            policy.check_adjacency, policy.planner_timeout,
        )
    except PlanningFailed as exc:
        logger.info("task %s: %s", task.id, exc)
        return EpisodeTrace(
            task, (), (), Terminal(TerminalMode.UNRECOVERABLE_STATE, 0, "planning"),
            len(exc.transcript), exc.prompt_bytes, exc.transcript, (), exc.reason,
        )

    def finish(mode: TerminalMode, note: str = "") -> EpisodeTrace:
        return EpisodeTrace(
            task, tuple(events), tuple(completed), Terminal(mode, step, note),
            planned.attempts, planned.prompt_bytes, planned.transcript, planned.plan,
        )

    world = WorldState.for_task(graph, task)
    limit = math.inf if policy.step_limit is None else policy.step_limit
    queue = deque(planned.plan)
    remaining = list(task.goal_skills)
    completed: List[str] = []
    events: List[EpisodeEvent] = []
    placed: Dict[str, str] = {}
    step = 0

    while remaining:
        if not queue:
            if not policy.closed_loop:
                return finish(TerminalMode.UNRECOVERABLE_STATE, "open-loop")
            corrective = _corrective(graph, task, planner, world, remaining, policy)
            if corrective is None:
                return finish(TerminalMode.UNRECOVERABLE_STATE, "no corrective plan")
            queue = deque(corrective)
        if step >= limit:
            return finish(TerminalMode.STEP_LIMIT_EXCEEDED)

        skill = graph.skills[queue.popleft()]
        outcome = execute_skill(world, skill, model, rng)
        step += 1
        check = monitor(outcome.expected, world, policy.semantic_check, skill, rng, policy.false_negative_rate)

        # open loop succeeds only when every step did
        step_ok = check.ok and (policy.closed_loop or outcome.success)
        if check.ok and not outcome.success:
            logger.info("task %s: %s deviated (%s) but matches the expected state", task.id, skill.id, outcome.cause.value)

        goal_done = None
        if step_ok and skill.id == remaining[0]:
            goal_done = remaining.pop(0)
            completed.append(goal_done)
            for _, obj in skill.delta.released():
                if world.object_at.get(obj) == AtLocation(world.ego.location):
                    placed[obj] = world.ego.location

        picked_now = {obj for _, obj in skill.delta.added()}
        for obj in list(placed):
            if obj in picked_now:
                del placed[obj]
            elif world.object_at.get(obj) != AtLocation(placed[obj]):
                events.append(EpisodeEvent(step, skill.id, outcome, check, None, goal_done, world.snapshot()))
                logger.error("task %s: %s left %s without being picked", task.id, obj, placed[obj])
                return finish(TerminalMode.REGRESSION_DETECTED)

        record = None
        if not step_ok:
            if not policy.closed_loop:
                events.append(EpisodeEvent(step, skill.id, outcome, check, None, goal_done, world.snapshot()))
                return finish(TerminalMode.UNRECOVERABLE_STATE, "open-loop")
            corrective = _corrective(graph, task, planner, world, remaining, policy)
            if corrective is None:
                events.append(EpisodeEvent(step, skill.id, outcome, check, None, goal_done, world.snapshot()))
                return finish(TerminalMode.UNRECOVERABLE_STATE, "no corrective plan")
            record = ReplanRecord(world.ego, corrective)
            queue = deque(corrective)
            logger.info("task %s: replanned at step %d (%d steps)", task.id, step, len(corrective))

        events.append(EpisodeEvent(step, skill.id, outcome, check, record, goal_done, world.snapshot()))

    return finish(TerminalMode.SUCCESS)


def _corrective(
    graph: SkillStateGraph,
    task: TaskSpec,
    planner: Planner,
    world: WorldState,
    remaining: Sequence[str],
    policy: EpisodePolicy,
) -> Optional[Plan]:
    """Corrective plan for the whole remainder; it replaces the unexecuted queue."""
    if policy.replan_via == "planner":
        plan = _planner_replan(planner, graph, task, world, remaining, policy)
    else:
        try:
            plan = replan(graph, world.ego, world, remaining, policy.max_expansions)
        except SearchBudgetExceeded as exc:
            logger.warning("replanning gave up: %s", exc)
            return None
    if plan is None:
        return None
    if not verify(graph, world.ego, plan).feasible:
        logger.error("corrective plan %s failed re-verification", list(plan))
        return None
    return plan
