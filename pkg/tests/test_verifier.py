"""
Unit tests for the plan verifier.

This module tests:
- verify() on hand-written feasible and infeasible plans
- Exhaustive agreement with a reference simulator on every short plan
- conflict_feedback() wording and determinism
"""

import itertools

import pytest

from engine.skill_graph import prune_view
from engine.state import EmbodimentState, format_state
from engine.verifier import ConflictKind, NotInfeasible, Verdict, conflict_feedback, verify

from factories import as_triple, brute_run

FEASIBLE_PLAN = ("pick_bowl_pantry", "nav_pantry_to_table", "place_bowl_table")


class TestVerify:
    """Tests for verify()."""

    def test_feasible_plan_chain(self, mini_graph, pantry_empty):
        """Verify pick, drive, place is feasible and ends with empty grippers at the table."""
        report = verify(mini_graph, pantry_empty, FEASIBLE_PLAN)
        assert report.verdict is Verdict.FEASIBLE
        assert report.conflict is None
        assert [format_state(s) for s in report.state_chain] == [
            "(pantry, ∅, ∅)",
            "(pantry, bowl, ∅)",
            "(table, bowl, ∅)",
            "(table, ∅, ∅)",
        ]

    def test_double_pick_fails_at_second_step(self, mini_graph, pantry_empty):
        """Verify picking the cup with the bowl already in hand fails on the left gripper."""
        report = verify(mini_graph, pantry_empty, ["pick_bowl_pantry", "pick_cup_pantry"])
        assert not report.feasible
        assert report.conflict.index == 1
        assert report.conflict.kind is ConflictKind.PRECONDITION_MISMATCH
        assert report.conflict.slot == "left"
        assert report.final_state == EmbodimentState("pantry", "bowl", None)
        assert "step 2" in conflict_feedback(report, mini_graph)
        assert "left gripper" in conflict_feedback(report, mini_graph)

    def test_wrong_location(self, mini_graph, pantry_empty):
        """Verify placing at the pantry fails on the location slot."""
        report = verify(mini_graph, pantry_empty, ["pick_bowl_pantry", "place_bowl_table"])
        assert report.conflict.index == 1
        assert report.conflict.slot == "location"

    def test_unknown_skill(self, mini_graph, pantry_empty):
        """Verify an id outside the library is reported with its index."""
        report = verify(mini_graph, pantry_empty, ["pick_bowl_pantry", "teleport"])
        assert report.conflict.kind is ConflictKind.UNKNOWN_SKILL
        assert report.conflict.index == 1
        assert len(report.state_chain) == 2

    def test_empty_plan_is_feasible(self, mini_graph, pantry_empty):
        """Verify the empty plan is trivially feasible."""
        report = verify(mini_graph, pantry_empty, [])
        assert report.feasible
        assert report.state_chain == (pantry_empty,)

    def test_adjacency_check_never_rejects_state_feasible_plans(self, mini_graph, pantry_empty):
        """Verify a state-feasible plan only uses graph edges, so the adjacency check agrees."""
        assert verify(mini_graph, pantry_empty, FEASIBLE_PLAN, check_adjacency=True).feasible

    def test_report_to_dict(self, mini_graph, pantry_empty):
        """Verify the machine form uses structured states and names the conflict."""
        data = verify(mini_graph, pantry_empty, ["place_bowl_table"]).to_dict()
        assert data["verdict"] == "Infeasible"
        assert data["state_chain"] == [{"location": "pantry", "left": None, "right": None}]
        assert data["conflict"]["kind"] == "PreconditionMismatch"


class TestAgainstReference:
    """Exhaustive comparison with the reference simulator."""

    def test_every_plan_up_to_length_five(self, mini_graph, pantry_empty):
        """Verify verdict, chain and failing index for all 19,608 plans of length 0 to 5."""
        ids = mini_graph.skill_ids
        checked = 0
        for length in range(6):
            for plan in itertools.product(ids, repeat=length):
                report = verify(mini_graph, pantry_empty, plan)
                chain, failed_at = brute_run(mini_graph, pantry_empty, plan)
                assert [as_triple(s) for s in report.state_chain] == chain
                if failed_at is None:
                    assert report.feasible
                else:
                    assert report.conflict.index == failed_at
                checked += 1
        assert checked == 19_608

    def test_prefix_of_feasible_plan_is_feasible(self, mini_graph):
        """Verify prefixes keep feasibility and truncate the chain."""
        start = EmbodimentState("table", None, None)
        plan = ("nav_table_to_pantry", "pick_cup_pantry", "nav_pantry_to_table", "place_cup_table")
        full = verify(mini_graph, start, plan)
        assert full.feasible
        for k in range(len(plan)):
            prefix = verify(mini_graph, start, plan[:k])
            assert prefix.feasible
            assert prefix.state_chain == full.state_chain[: k + 1]


class TestConflictFeedback:
    """Tests for conflict_feedback()."""

    def test_lists_executable_skills(self, mini_graph, pantry_empty):
        """Verify the message ends with the skills executable at the failing state."""
        report = verify(mini_graph, pantry_empty, ["place_bowl_table"])
        text = conflict_feedback(report, mini_graph)
        assert text.endswith(
            "State at that point: (pantry, ∅, ∅). "
            "Skills executable from this state: nav_pantry_to_table, pick_bowl_pantry, pick_cup_pantry."
        )

    def test_unknown_skill_lists_valid_ids(self, mini_graph, pantry_empty):
        """Verify a hallucinated id is answered with the allowed vocabulary."""
        report = verify(mini_graph, pantry_empty, ["teleport"])
        text = conflict_feedback(report, mini_graph, prune_view(mini_graph, pantry_empty))
        assert "'teleport' is not a known skill" in text
        assert "open_cupboard" not in text
        assert "place_cup_table" in text

    def test_feedback_is_deterministic(self, mini_graph, pantry_empty):
        """Verify the same report always gives the same text."""
        report = verify(mini_graph, pantry_empty, ["pick_bowl_pantry", "pick_cup_pantry"])
        assert conflict_feedback(report, mini_graph) == conflict_feedback(report, mini_graph)

    def test_feasible_report_is_refused(self, mini_graph, pantry_empty):
        """Verify asking for feedback on a feasible report raises."""
        with pytest.raises(NotInfeasible):
            conflict_feedback(verify(mini_graph, pantry_empty, FEASIBLE_PLAN), mini_graph)
