"""
Embodiment-state algebra.

A robot state is a (location, left gripper, right gripper) triple. Skills are
described by a precondition pattern over that triple and a state delta that
moves the base (MOVE) or fills/empties a gripper (ADD/SUB).

Gripper contents are plain values: ``None`` means empty, a string is the id of
the held object. Pattern slots additionally admit ``WILDCARD``.

Literal forms:
- human readable: ``(pantry, bowl, ∅)`` with ``_`` for wildcard
- structured files: ``null`` for empty, ``"_"`` for wildcard
"""
from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable, Iterator, List, Optional, Tuple, Union

EMPTY_MARK = "∅"
WILDCARD_MARK = "_"
SLOTS = ("location", "left", "right")

_TOKEN_RE = re.compile(r"^\S+$")


class _Wildcard:
    """Pattern slot that matches any concrete value, including an empty gripper."""

    _instance: Optional["_Wildcard"] = None

    def __new__(cls) -> "_Wildcard":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "WILDCARD"

    def __reduce__(self):
        return (_Wildcard, ())


WILDCARD = _Wildcard()

GripperContent = Optional[str]
GripperPattern = Union[_Wildcard, None, str]
LocationPattern = Union[_Wildcard, str]


def is_token(value: Any) -> bool:
    """Identifiers are non-empty strings without whitespace."""
    return isinstance(value, str) and bool(_TOKEN_RE.match(value)) and value != WILDCARD_MARK


@dataclass(frozen=True)
class EmbodimentState:
    location: str
    left: GripperContent = None
    right: GripperContent = None

    def gripper(self, side: str) -> GripperContent:
        return self.left if side == "left" else self.right

    def with_gripper(self, side: str, content: GripperContent) -> "EmbodimentState":
        if side == "left":
            return EmbodimentState(self.location, content, self.right)
        return EmbodimentState(self.location, self.left, content)

    def sort_key(self) -> Tuple[str, str, str]:
        return (self.location, self.left or "", self.right or "")

    def __str__(self) -> str:
        return format_state(self)


@dataclass(frozen=True)
class Precondition:
    location: LocationPattern = WILDCARD
    left: GripperPattern = WILDCARD
    right: GripperPattern = WILDCARD

    def slot(self, name: str):
        return getattr(self, name)

    def __str__(self) -> str:
        return format_precondition(self)


ANY_STATE = Precondition()


@dataclass(frozen=True)
class Move:
    source: str
    target: str

    def __post_init__(self) -> None:
        if self.source == self.target:
            raise ValueError(f"MOVE needs distinct locations, got {self.source!r} twice")


@dataclass(frozen=True)
class Add:
    obj: str


@dataclass(frozen=True)
class Sub:
    obj: str


SceneOp = Optional[Move]
GripperOp = Union[None, Add, Sub]


@dataclass(frozen=True)
class StateDelta:
    scene: SceneOp = None
    left: GripperOp = None
    right: GripperOp = None

    def gripper_op(self, side: str) -> GripperOp:
        return self.left if side == "left" else self.right

    def is_identity(self) -> bool:
        return self.scene is None and self.left is None and self.right is None

    def added(self) -> List[Tuple[str, str]]:
        """(side, object) pairs this delta puts into a gripper."""
        return [(side, op.obj) for side in ("left", "right") if isinstance(op := self.gripper_op(side), Add)]

    def released(self) -> List[Tuple[str, str]]:
        """(side, object) pairs this delta takes out of a gripper."""
        return [(side, op.obj) for side in ("left", "right") if isinstance(op := self.gripper_op(side), Sub)]

    def objects(self) -> List[str]:
        return [obj for _, obj in self.added() + self.released()]

    def __str__(self) -> str:
        return format_delta(self)


IDENTITY = StateDelta()


class DeltaErrorReason(str, Enum):
    MOVE_FROM_MISMATCH = "MoveFromMismatch"
    ADD_ON_OCCUPIED = "AddOnOccupied"
    SUB_ON_WRONG_OBJECT = "SubOnWrongObject"
    SUB_ON_EMPTY = "SubOnEmpty"


class DeltaError(ValueError):
    """A delta was applied to a state that violates one of its applicability rules."""

    def __init__(self, slot: str, reason: DeltaErrorReason, detail: str = ""):
        self.slot = slot
        self.reason = reason
        self.detail = detail
        super().__init__(f"{slot}: {reason.value}" + (f" ({detail})" if detail else ""))


class LiteralError(ValueError):
    pass


# ----------------------------------------------------------------------------
# Matching and application
# ----------------------------------------------------------------------------

def _slot_matches(value: GripperContent, pattern: Any) -> bool:
    if pattern is WILDCARD:
        return True
    return value == pattern


def first_mismatch(state: EmbodimentState, pre: Precondition) -> Optional[str]:
    """Name of the first slot of ``pre`` that ``state`` fails, or None."""
    for name in SLOTS:
        if not _slot_matches(getattr(state, name), pre.slot(name)):
            return name
    return None


def matches(state: EmbodimentState, pre: Precondition) -> bool:
    return first_mismatch(state, pre) is None


def _apply_gripper(side: str, content: GripperContent, op: GripperOp) -> GripperContent:
    if op is None:
        return content
    if isinstance(op, Add):
        if content is not None:
            raise DeltaError(side, DeltaErrorReason.ADD_ON_OCCUPIED, f"holding {content}, cannot add {op.obj}")
        return op.obj
    if content is None:
        raise DeltaError(side, DeltaErrorReason.SUB_ON_EMPTY, f"cannot release {op.obj} from an empty gripper")
    if content != op.obj:
        raise DeltaError(side, DeltaErrorReason.SUB_ON_WRONG_OBJECT, f"holding {content}, not {op.obj}")
    return None


def apply_delta(state: EmbodimentState, delta: StateDelta) -> EmbodimentState:
    """Return the state after ``delta``; raises DeltaError when a rule is violated."""
    location = state.location
    if delta.scene is not None:
        if state.location != delta.scene.source:
            raise DeltaError(
                "location",
                DeltaErrorReason.MOVE_FROM_MISMATCH,
                f"at {state.location}, move starts at {delta.scene.source}",
            )
        location = delta.scene.target
    left = _apply_gripper("left", state.left, delta.left)
    right = _apply_gripper("right", state.right, delta.right)
    return EmbodimentState(location, left, right)


def try_apply(state: EmbodimentState, delta: StateDelta) -> Optional[EmbodimentState]:
    try:
        return apply_delta(state, delta)
    except DeltaError:
        return None


def _implied_gripper(op: GripperOp) -> GripperPattern:
    if op is None:
        return WILDCARD
    if isinstance(op, Add):
        return None
    return op.obj


def implied_precondition(delta: StateDelta) -> Precondition:
    """Weakest pattern under which ``apply_delta`` cannot fail."""
    location = WILDCARD if delta.scene is None else delta.scene.source
    return Precondition(location, _implied_gripper(delta.left), _implied_gripper(delta.right))


def implies(stronger: Precondition, weaker: Precondition) -> bool:
    """True when every state matching ``stronger`` also matches ``weaker`` (slot-wise)."""
    for name in SLOTS:
        want = weaker.slot(name)
        if want is WILDCARD:
            continue
        if stronger.slot(name) is WILDCARD or stronger.slot(name) != want:
            return False
    return True


def enumerate_states(locations: Iterable[str], objects: Iterable[str]) -> Iterator[EmbodimentState]:
    """Every concrete state over the vocabulary, in a fixed order."""
    contents: List[GripperContent] = [None] + sorted(objects)
    for loc, left, right in itertools.product(sorted(locations), contents, contents):
        yield EmbodimentState(loc, left, right)


def state_space_size(n_locations: int, n_objects: int) -> int:
    return n_locations * (n_objects + 1) ** 2


# ----------------------------------------------------------------------------
# Literals
# ----------------------------------------------------------------------------

def _fmt_content(value: Any) -> str:
    if value is WILDCARD:
        return WILDCARD_MARK
    if value is None:
        return EMPTY_MARK
    return str(value)


def format_state(state: EmbodimentState) -> str:
    return f"({state.location}, {_fmt_content(state.left)}, {_fmt_content(state.right)})"


def format_precondition(pre: Precondition) -> str:
    return f"({_fmt_content(pre.location)}, {_fmt_content(pre.left)}, {_fmt_content(pre.right)})"


def _fmt_gripper_op(op: GripperOp) -> str:
    if op is None:
        return EMPTY_MARK
    return f"{'ADD' if isinstance(op, Add) else 'SUB'}({op.obj})"


def format_delta(delta: StateDelta) -> str:
    scene = EMPTY_MARK if delta.scene is None else f"MOVE({delta.scene.source}, {delta.scene.target})"
    return f"({scene}, {_fmt_gripper_op(delta.left)}, {_fmt_gripper_op(delta.right)})"


def _split_literal(text: str) -> List[str]:
    body = (text or "").strip()
    if not (body.startswith("(") and body.endswith(")")):
        raise LiteralError(f"state literal must be parenthesised: {text!r}")
    parts = [p.strip() for p in body[1:-1].split(",")]
    if len(parts) != 3 or not all(parts):
        raise LiteralError(f"state literal needs exactly three slots: {text!r}")
    return parts


def _parse_content(token: str) -> GripperContent:
    if token in ("null", EMPTY_MARK):
        return None
    if not is_token(token):
        raise LiteralError(f"invalid identifier {token!r}")
    return token


def parse_state(text: str) -> EmbodimentState:
    """Parse ``(loc, left, right)``; ``null`` or ``∅`` mark an empty gripper."""
    loc, left, right = _split_literal(text)
    if loc in ("null", EMPTY_MARK, WILDCARD_MARK) or not is_token(loc):
        raise LiteralError(f"a concrete state needs a location, got {loc!r}")
    if WILDCARD_MARK in (left, right):
        raise LiteralError("wildcards are not allowed in a concrete state")
    return EmbodimentState(loc, _parse_content(left), _parse_content(right))


def parse_precondition(text: str) -> Precondition:
    loc, left, right = _split_literal(text)

    def slot(token: str) -> Any:
        return WILDCARD if token == WILDCARD_MARK else _parse_content(token)

    location = slot(loc)
    if location is None:
        raise LiteralError("the location slot cannot be empty")
    return Precondition(location, slot(left), slot(right))


# JSON slot codecs used by the graph and scenario files.

def pattern_to_json(value: Any) -> Any:
    return WILDCARD_MARK if value is WILDCARD else value


def pattern_from_json(value: Any) -> Any:
    return WILDCARD if value == WILDCARD_MARK else value


def state_to_json(state: EmbodimentState) -> dict:
    return {"location": state.location, "left": state.left, "right": state.right}


def state_from_json(data: Any) -> EmbodimentState:
    if isinstance(data, str):
        return parse_state(data)
    if not isinstance(data, dict) or "location" not in data:
        raise LiteralError(f"state must be a literal or an object with a location: {data!r}")
    left, right = data.get("left"), data.get("right")
    for value in (data["location"], left, right):
        if value is not None and not is_token(value):
            raise LiteralError(f"invalid identifier {value!r} in state")
    return EmbodimentState(data["location"], left, right)


def scene_op_to_json(op: SceneOp) -> Any:
    return None if op is None else {"move": [op.source, op.target]}


def gripper_op_to_json(op: GripperOp) -> Any:
    if op is None:
        return None
    return {"add": op.obj} if isinstance(op, Add) else {"sub": op.obj}


def delta_to_json(delta: StateDelta) -> dict:
    return {
        "scene": scene_op_to_json(delta.scene),
        "left": gripper_op_to_json(delta.left),
        "right": gripper_op_to_json(delta.right),
    }


def precondition_to_json(pre: Precondition) -> dict:
    return {name: pattern_to_json(pre.slot(name)) for name in SLOTS}
