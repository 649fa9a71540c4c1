"""
Unit tests for the embodiment-state algebra.

Covers pattern matching, delta application and its error reasons, the implied
precondition of a delta, state enumeration and the literal codecs.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from engine.state import (
    ANY_STATE,
    IDENTITY,
    WILDCARD,
    Add,
    DeltaError,
    DeltaErrorReason,
    EmbodimentState,
    LiteralError,
    Move,
    Precondition,
    StateDelta,
    Sub,
    apply_delta,
    enumerate_states,
    first_mismatch,
    format_delta,
    format_precondition,
    format_state,
    implied_precondition,
    implies,
    matches,
    parse_precondition,
    parse_state,
    state_from_json,
    state_space_size,
    state_to_json,
    try_apply,
)

LOCATIONS = ["pantry", "table", "cupboard"]
OBJECTS = ["bowl", "cup"]

states = st.builds(
    EmbodimentState,
    st.sampled_from(LOCATIONS),
    st.sampled_from([None] + OBJECTS),
    st.sampled_from([None] + OBJECTS),
)
gripper_ops = st.one_of(st.none(), st.builds(Add, st.sampled_from(OBJECTS)), st.builds(Sub, st.sampled_from(OBJECTS)))
scene_ops = st.one_of(
    st.none(),
    st.tuples(st.sampled_from(LOCATIONS), st.sampled_from(LOCATIONS))
    .filter(lambda pair: pair[0] != pair[1])
    .map(lambda pair: Move(*pair)),
)
deltas = st.builds(StateDelta, scene_ops, gripper_ops, gripper_ops)

DETERMINISTIC = settings(derandomize=True, max_examples=300, deadline=None)


class TestMatches:
    """Tests for matches() and first_mismatch()."""

    def test_exact_and_wildcard_slots_match(self):
        """Verify an exact location plus an empty-gripper requirement matches."""
        pre = Precondition("pantry", None, WILDCARD)
        assert matches(EmbodimentState("pantry"), pre)

    def test_occupied_gripper_fails_empty_requirement(self):
        """Verify a pick pattern rejects a state whose left gripper is occupied."""
        pre = Precondition(WILDCARD, None, WILDCARD)
        state = EmbodimentState("table", "bowl", None)
        assert not matches(state, pre)
        assert first_mismatch(state, pre) == "left"

    def test_wildcard_matches_empty_gripper(self):
        """Verify the wildcard also matches an empty gripper."""
        assert matches(EmbodimentState("table", None, None), Precondition("table", WILDCARD, WILDCARD))

    def test_first_mismatch_reports_location_first(self):
        """Verify slots are checked in location, left, right order."""
        pre = Precondition("table", "cup", "bowl")
        assert first_mismatch(EmbodimentState("pantry"), pre) == "location"

    @DETERMINISTIC
    @given(states)
    def test_all_wildcard_matches_every_state(self, state):
        """Verify the all-wildcard pattern is total."""
        assert matches(state, ANY_STATE)


class TestApplyDelta:
    """Tests for apply_delta() and its error reasons."""

    def test_add_fills_empty_gripper(self):
        """Verify ADD puts the object into an empty gripper."""
        result = apply_delta(EmbodimentState("pantry"), StateDelta(None, Add("bowl"), None))
        assert result == EmbodimentState("pantry", "bowl", None)

    def test_move_keeps_held_objects(self):
        """Verify MOVE relocates the base and leaves the grippers alone."""
        result = apply_delta(EmbodimentState("pantry", "bowl", None), StateDelta(Move("pantry", "table")))
        assert result == EmbodimentState("table", "bowl", None)

    def test_sub_of_wrong_object_is_rejected(self):
        """Verify SUB of an object that is not held names the slot and reason."""
        with pytest.raises(DeltaError) as exc_info:
            apply_delta(EmbodimentState("table", "cup", None), StateDelta(None, Sub("bowl"), None))
        assert exc_info.value.slot == "left"
        assert exc_info.value.reason is DeltaErrorReason.SUB_ON_WRONG_OBJECT

    @pytest.mark.parametrize("state, delta, slot, reason", [
        (EmbodimentState("table"), StateDelta(Move("pantry", "table")), "location", DeltaErrorReason.MOVE_FROM_MISMATCH),
        (EmbodimentState("pantry", None, "cup"), StateDelta(None, None, Add("bowl")), "right", DeltaErrorReason.ADD_ON_OCCUPIED),
        (EmbodimentState("pantry"), StateDelta(None, None, Sub("cup")), "right", DeltaErrorReason.SUB_ON_EMPTY),
    ])
    def test_error_reasons(self, state, delta, slot, reason):
        """Verify each applicability rule maps to its own reason."""
        with pytest.raises(DeltaError) as exc_info:
            apply_delta(state, delta)
        assert (exc_info.value.slot, exc_info.value.reason) == (slot, reason)
        assert try_apply(state, delta) is None

    def test_move_to_same_location_is_invalid(self):
        """Verify a MOVE needs two distinct locations."""
        with pytest.raises(ValueError):
            Move("pantry", "pantry")

    @DETERMINISTIC
    @given(states)
    def test_identity_delta(self, state):
        """Verify the all-NoOp delta leaves every state unchanged."""
        assert apply_delta(state, IDENTITY) == state

    @DETERMINISTIC
    @given(states, st.sampled_from(OBJECTS), st.sampled_from(["left", "right"]))
    def test_add_then_sub_restores_state(self, state, obj, side):
        """Verify ADD followed by SUB of the same object is an inverse pair."""
        add = StateDelta(None, Add(obj), None) if side == "left" else StateDelta(None, None, Add(obj))
        sub = StateDelta(None, Sub(obj), None) if side == "left" else StateDelta(None, None, Sub(obj))
        after = try_apply(state, add)
        if after is not None:
            assert apply_delta(after, sub) == state

    @DETERMINISTIC
    @given(states, st.sampled_from(LOCATIONS))
    def test_move_there_and_back(self, state, target):
        """Verify MOVE(A, B) then MOVE(B, A) restores the location."""
        if target == state.location:
            return
        there = apply_delta(state, StateDelta(Move(state.location, target)))
        assert apply_delta(there, StateDelta(Move(target, state.location))) == state

    @DETERMINISTIC
    @given(states, deltas)
    def test_apply_is_deterministic(self, state, delta):
        """Verify identical inputs give identical outputs."""
        assert try_apply(state, delta) == try_apply(state, delta)


class TestImpliedPrecondition:
    """Tests for implied_precondition() and implies()."""

    def test_move_requires_source_location(self):
        """Verify a MOVE implies only the source location."""
        assert implied_precondition(StateDelta(Move("pantry", "table"))) == Precondition("pantry", WILDCARD, WILDCARD)

    def test_add_requires_empty_gripper(self):
        """Verify ADD implies an empty gripper on its side."""
        assert implied_precondition(StateDelta(None, Add("bowl"), None)) == Precondition(WILDCARD, None, WILDCARD)

    def test_identity_implies_nothing(self):
        """Verify the identity delta implies the all-wildcard pattern."""
        assert implied_precondition(IDENTITY) == ANY_STATE

    def test_random_pairs_agree_with_application(self):
        """Verify matches(S, implied(d)) iff d applies to S over 10,000 random pairs."""
        rng = np.random.default_rng(2024)
        locations = [f"l{k}" for k in range(5)]
        objects = [f"o{k}" for k in range(4)]
        contents = [None] + objects

        def gripper_op():
            roll = rng.integers(3)
            obj = objects[int(rng.integers(len(objects)))]
            return None if roll == 0 else (Add(obj) if roll == 1 else Sub(obj))

        for _ in range(10_000):
            state = EmbodimentState(
                locations[int(rng.integers(5))],
                contents[int(rng.integers(len(contents)))],
                contents[int(rng.integers(len(contents)))],
            )
            scene = None
            if rng.random() < 0.5:
                a, b = rng.choice(5, size=2, replace=False)
                scene = Move(locations[int(a)], locations[int(b)])
            delta = StateDelta(scene, gripper_op(), gripper_op())
            assert matches(state, implied_precondition(delta)) == (try_apply(state, delta) is not None)

    def test_implies_is_slotwise(self):
        """Verify a stronger exact pattern implies a wildcard one but not the reverse."""
        strong = Precondition("pantry", None, "cup")
        weak = Precondition(WILDCARD, None, WILDCARD)
        assert implies(strong, weak)
        assert not implies(weak, strong)


class TestEnumeration:
    """Tests for enumerate_states() and state_space_size()."""

    def test_mini_vocabulary_has_27_states(self):
        """Verify three locations and two objects give 3 x 3 x 3 states."""
        produced = list(enumerate_states(LOCATIONS, OBJECTS))
        assert len(produced) == state_space_size(3, 2) == 27
        assert len(set(produced)) == 27

    def test_order_is_stable(self):
        """Verify enumeration order does not depend on input order."""
        assert list(enumerate_states(LOCATIONS, OBJECTS)) == list(enumerate_states(reversed(LOCATIONS), reversed(OBJECTS)))


class TestLiterals:
    """Tests for the literal and JSON codecs."""

    def test_format_state_uses_empty_marker(self):
        """Verify empty grippers print as the empty-set marker."""
        assert format_state(EmbodimentState("pantry", "bowl", None)) == "(pantry, bowl, ∅)"

    @pytest.mark.parametrize("text", ["(pantry,null,null)", "( pantry , null , ∅ )"])
    def test_parse_state_accepts_null_and_marker(self, text):
        """Verify both empty encodings parse."""
        assert parse_state(text) == EmbodimentState("pantry")

    @pytest.mark.parametrize("text", ["pantry", "(pantry, _, null)", "(pantry, null)", "(null, null, null)", "(pan try, null, null)"])
    def test_parse_state_rejects_malformed(self, text):
        """Verify malformed or wildcard-bearing literals are rejected."""
        with pytest.raises(LiteralError):
            parse_state(text)

    def test_precondition_literal_round_trip(self):
        """Verify a pattern with wildcard and empty slots prints and parses back."""
        pre = Precondition("table", None, WILDCARD)
        assert format_precondition(pre) == "(table, ∅, _)"
        assert parse_precondition("(table, null, _)") == pre

    def test_format_delta(self):
        """Verify the delta literal names each operation."""
        delta = StateDelta(Move("pantry", "table"), Add("bowl"), Sub("cup"))
        assert format_delta(delta) == "(MOVE(pantry, table), ADD(bowl), SUB(cup))"

    def test_state_json_codec(self):
        """Verify the structured form uses null for an empty gripper."""
        state = EmbodimentState("table", None, "cup")
        assert state_to_json(state) == {"location": "table", "left": None, "right": "cup"}
        assert state_from_json(state_to_json(state)) == state
        assert state_from_json("(table, null, cup)") == state

    def test_state_json_rejects_missing_location(self):
        """Verify an object without a location is not a state."""
        with pytest.raises(LiteralError):
            state_from_json({"left": None})
