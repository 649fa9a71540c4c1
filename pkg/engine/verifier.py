"""
State-driven feasibility verification of candidate skill sequences.

Starting from the initial embodiment state, each step's precondition is checked
against the running state and its delta applied; verification stops at the
first violation. Optionally, consecutive steps must also be graph edges.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional, Sequence, Tuple

from .skill_graph import SkillStateGraph, TopoView, executable_skills
from .state import DeltaError, EmbodimentState, apply_delta, first_mismatch, format_precondition, format_state, state_to_json

logger = logging.getLogger(__name__)

Plan = Tuple[str, ...]

SLOT_NAMES = {"location": "location", "left": "left gripper", "right": "right gripper"}


class Verdict(str, Enum):
    FEASIBLE = "Feasible"
    INFEASIBLE = "Infeasible"


class ConflictKind(str, Enum):
    PRECONDITION_MISMATCH = "PreconditionMismatch"
    DELTA_INAPPLICABLE = "DeltaInapplicable"
    UNKNOWN_SKILL = "UnknownSkill"
    NON_ADJACENT_TRANSITION = "NonAdjacentTransition"
    # raised by the planning loop, never by verify()
    GOAL_NOT_REACHED = "GoalNotReached"


@dataclass(frozen=True)
class Conflict:
    index: int
    skill: str
    kind: ConflictKind
    detail: str
    slot: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "index": self.index,
            "skill": self.skill,
            "kind": self.kind.value,
            "slot": self.slot,
            "detail": self.detail,
        }


@dataclass(frozen=True)
class VerificationReport:
    verdict: Verdict
    state_chain: Tuple[EmbodimentState, ...]
    conflict: Optional[Conflict] = None
    plan: Plan = field(default=())

    @property
    def feasible(self) -> bool:
        return self.verdict is Verdict.FEASIBLE

    @property
    def final_state(self) -> EmbodimentState:
        return self.state_chain[-1]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "verdict": self.verdict.value,
            "plan": list(self.plan),
            "state_chain": [state_to_json(s) for s in self.state_chain],
            "conflict": None if self.conflict is None else self.conflict.to_dict(),
        }


class NotInfeasible(ValueError):
    pass


def _reject(plan: Plan, chain, index: int, skill: str, kind: ConflictKind, detail: str, slot=None) -> VerificationReport:
    logger.debug("plan rejected at index %d (%s): %s", index, kind.value, detail)
    return VerificationReport(Verdict.INFEASIBLE, tuple(chain), Conflict(index, skill, kind, detail, slot), plan)


def verify(
    graph: SkillStateGraph,
    initial: EmbodimentState,
    plan: Sequence[str],
    check_adjacency: bool = False,
) -> VerificationReport:
    plan = tuple(plan)
    chain = [initial]
    state = initial
    for index, skill_id in enumerate(plan):
        skill = graph.skills.get(skill_id)
        if skill is None:
            return _reject(plan, chain, index, skill_id, ConflictKind.UNKNOWN_SKILL, f"{skill_id!r} is not a skill of this graph")
        if check_adjacency and index >= 1 and not graph.digraph.has_edge(plan[index - 1], skill_id):
            return _reject(
                plan, chain, index, skill_id, ConflictKind.NON_ADJACENT_TRANSITION,
                f"no edge {plan[index - 1]} -> {skill_id}",
            )
        slot = first_mismatch(state, skill.pre)
        if slot is not None:
            return _reject(
                plan, chain, index, skill_id, ConflictKind.PRECONDITION_MISMATCH,
                f"state {format_state(state)} does not satisfy {format_precondition(skill.pre)}",
                slot,
            )
        try:
            state = apply_delta(state, skill.delta)
        except DeltaError as exc:
            return _reject(plan, chain, index, skill_id, ConflictKind.DELTA_INAPPLICABLE, str(exc), exc.slot)
        chain.append(state)
    return VerificationReport(Verdict.FEASIBLE, tuple(chain), None, plan)


def conflict_feedback(report: VerificationReport, graph: SkillStateGraph, view: Optional[TopoView] = None) -> str:
    """One-paragraph explanation of a rejection, for a planner retry."""
    if report.feasible or report.conflict is None:
        raise NotInfeasible("conflict feedback needs an infeasible report")
    conflict = report.conflict
    state = report.final_state
    allowed = set(view.node_ids) if view is not None else set(graph.skills)
    step = conflict.index + 1

    if conflict.kind is ConflictKind.UNKNOWN_SKILL:
        valid = ", ".join(sorted(allowed))
        return (
            f"The plan was rejected at step {step}: '{conflict.skill}' is not a known skill. "
            f"Use only these skill ids: {valid}."
        )

    executable = [sid for sid in executable_skills(graph, state) if sid in allowed]
    options = ", ".join(executable) if executable else "none"
    if conflict.kind is ConflictKind.GOAL_NOT_REACHED:
        head = f"The plan ends after step {conflict.index} without completing the task: {conflict.detail}."
    elif conflict.kind is ConflictKind.NON_ADJACENT_TRANSITION:
        head = f"The plan was rejected at step {step}: '{conflict.skill}' cannot directly follow the previous skill ({conflict.detail})."
    else:
        where = SLOT_NAMES.get(conflict.slot or "", "state")
        head = (
            f"The plan was rejected at step {step}: '{conflict.skill}' is not executable because of the {where} "
            f"({conflict.detail})."
        )
    return f"{head} State at that point: {format_state(state)}. Skills executable from this state: {options}."
