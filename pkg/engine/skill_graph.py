"""
Hierarchical skill library and Skill-State Graph.

Semantic skills carry a precondition pattern and a state delta; action skills
are bare primitives that semantic skills reference through ``action_refs``.
Edges are feasible local transitions between semantic skills, either declared
in the graph file (and checked) or derived by enumerating the finite state
space.

Graph file (JSON):
    {
      "locations": ["pantry", "table"],
      "objects": ["bowl"],
      "actions": [{"id": "open_gripper", "label": "..."}],
      "skills": [{"id": "...", "label": "...", "category": "pick",
                  "pre": {"location": "pantry", "left": null, "right": "_"},
                  "delta": {"scene": null, "left": {"add": "bowl"}, "right": null},
                  "action_refs": []}],
      "edges": [["a", "b"]],
      "edge_mode": "declared" | "derived"
    }

A skill entry may carry ``"for_each": {"obj": "objects", "loc": ["pantry"]}``;
it is expanded at load time by substituting ``{obj}`` / ``{loc}`` in every
string of the entry. ``"distinct": true`` skips bindings that repeat a value.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import networkx as nx

from .state import (
    WILDCARD,
    Add,
    EmbodimentState,
    Move,
    Precondition,
    StateDelta,
    Sub,
    delta_to_json,
    enumerate_states,
    format_delta,
    format_precondition,
    implied_precondition,
    implies,
    is_token,
    matches,
    pattern_from_json,
    precondition_to_json,
    state_space_size,
    try_apply,
)

logger = logging.getLogger(__name__)

MAX_STATES = int(os.environ.get("SKILLSTATE_MAX_STATES", str(10**6)))

EDGE_MODES = ("declared", "derived")


class SkillCategory(str, Enum):
    PICK = "pick"
    PLACE = "place"
    NAVIGATE = "navigate"
    OPEN = "open"
    CLOSE = "close"
    RECOVERY = "recovery"
    OTHER = "other"


@dataclass(frozen=True)
class ActionSkill:
    id: str
    label: str = ""


@dataclass(frozen=True)
class SemanticSkill:
    id: str
    label: str
    category: SkillCategory
    pre: Precondition
    delta: StateDelta
    action_refs: Tuple[str, ...] = ()


class SkillStateGraph:
    """Skill library plus its edge set, stored as a frozen ``nx.DiGraph``.

    Nodes are skill ids carrying the ``SemanticSkill`` under the ``skill``
    attribute. The state-transition digraph (embodiment states as nodes, one
    edge per executable skill) is built on first use and shared by copies made
    with ``with_edges``.
    """

    def __init__(
        self,
        locations: Sequence[str],
        objects: Sequence[str],
        skills: Mapping[str, SemanticSkill],
        actions: Optional[Mapping[str, ActionSkill]] = None,
        edges: Iterable[Tuple[str, str]] = (),
        edge_mode: str = "derived",
        transitions: Optional[nx.DiGraph] = None,
    ):
        self.locations = tuple(locations)
        self.objects = tuple(objects)
        self.skills = skills
        self.actions = actions or {}
        self.edge_mode = edge_mode
        digraph = nx.DiGraph()
        for sid in sorted(skills):
            digraph.add_node(sid, skill=skills[sid])
        digraph.add_edges_from(sorted(edges))
        self.digraph = nx.freeze(digraph)
        self._transitions = transitions

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SkillStateGraph):
            return NotImplemented
        return (
            (self.locations, self.objects, dict(self.skills), dict(self.actions), self.edge_mode, self.edges)
            == (other.locations, other.objects, dict(other.skills), dict(other.actions), other.edge_mode, other.edges)
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return (
            f"SkillStateGraph({len(self.skills)} skills, {self.digraph.number_of_edges()} edges, "
            f"edge_mode={self.edge_mode!r})"
        )

    @property
    def skill_ids(self) -> List[str]:
        return sorted(self.skills)

    @property
    def edges(self) -> FrozenSet[Tuple[str, str]]:
        return frozenset(self.digraph.edges)

    def successors(self, skill_id: str) -> List[str]:
        return sorted(self.digraph.successors(skill_id))

    def with_edges(self, edges: Iterable[Tuple[str, str]]) -> "SkillStateGraph":
        return SkillStateGraph(
            self.locations, self.objects, self.skills, self.actions, edges, self.edge_mode, self._transitions
        )

    def transitions(self, max_states: int = MAX_STATES) -> nx.DiGraph:
        """State-transition digraph; edge ``(s, t)`` lists the skills taking s to t."""
        if self._transitions is None:
            self._transitions = nx.freeze(_transition_graph(self, max_states))
        return self._transitions


@dataclass(frozen=True)
class Diagnostic:
    path: str
    code: str
    reason: str

    def __str__(self) -> str:
        return f"{self.path}: {self.code}: {self.reason}"


class GraphLoadError(ValueError):
    def __init__(self, diagnostics: Sequence[Diagnostic]):
        self.diagnostics = list(diagnostics)
        summary = "; ".join(str(d) for d in self.diagnostics[:5])
        more = f" (+{len(self.diagnostics) - 5} more)" if len(self.diagnostics) > 5 else ""
        super().__init__(f"graph failed validation: {summary}{more}")


class StateSpaceTooLarge(RuntimeError):
    pass


class AnnotatedRequiresFullGraph(ValueError):
    pass


# ============================================================================
# Loading
# ============================================================================

class _Collector:
    def __init__(self) -> None:
        self.items: List[Diagnostic] = []

    def add(self, path: str, code: str, reason: str) -> None:
        self.items.append(Diagnostic(path, code, reason))


def _expand_templates(entries: List[Any], locations: List[str], objects: List[str], diag: _Collector):
    """Yield (path, entry) with ``for_each`` entries expanded into grounded skills."""
    for index, entry in enumerate(entries):
        path = f"skills[{index}]"
        if not isinstance(entry, dict):
            diag.add(path, "MalformedDocument", "skill entry must be an object")
            continue
        axes = entry.get("for_each")
        if axes is None:
            yield path, entry
            continue
        if not isinstance(axes, dict) or not axes:
            diag.add(f"{path}.for_each", "MalformedDocument", "for_each must map placeholders to value lists")
            continue
        names = sorted(axes)
        domains = []
        for name in names:
            values = axes[name]
            if values == "objects":
                values = objects
            elif values == "locations":
                values = locations
            if not isinstance(values, list) or not values:
                diag.add(f"{path}.for_each.{name}", "MalformedDocument", "expected a value list, 'objects' or 'locations'")
                break
            domains.append([str(v) for v in values])
        else:
            body = {k: v for k, v in entry.items() if k not in ("for_each", "distinct")}
            for combo in itertools.product(*domains):
                if entry.get("distinct") and len(set(combo)) < len(combo):
                    continue
                binding = dict(zip(names, combo))
                tag = ",".join(f"{k}={v}" for k, v in binding.items())
                yield f"{path}<{tag}>", _substitute(body, binding)


def _substitute(value: Any, binding: Mapping[str, str]) -> Any:
    if isinstance(value, str):
        for name, replacement in binding.items():
            value = value.replace("{" + name + "}", replacement)
        return value
    if isinstance(value, list):
        return [_substitute(v, binding) for v in value]
    if isinstance(value, dict):
        return {k: _substitute(v, binding) for k, v in value.items()}
    return value


def _decode_location_slot(raw: Any, path: str, locations: Set[str], diag: _Collector):
    value = pattern_from_json(raw)
    if value is WILDCARD:
        return value
    if not is_token(value):
        diag.add(path, "MalformedDocument", f"location slot must be '_' or a location id, got {raw!r}")
    elif value not in locations:
        diag.add(path, "UnknownLocation", f"location {value!r} is not declared")
    return value


def _decode_gripper_slot(raw: Any, path: str, objects: Set[str], diag: _Collector):
    value = pattern_from_json(raw)
    if value is WILDCARD or value is None:
        return value
    if not is_token(value):
        diag.add(path, "MalformedDocument", f"gripper slot must be '_', null or an object id, got {raw!r}")
    elif value not in objects:
        diag.add(path, "UnknownObject", f"object {value!r} is not declared")
    return value


def _decode_scene_op(raw: Any, path: str, locations: Set[str], diag: _Collector) -> Optional[Move]:
    if raw is None:
        return None
    pair = raw.get("move") if isinstance(raw, dict) else None
    if not (isinstance(pair, list) and len(pair) == 2 and all(is_token(p) for p in pair)):
        diag.add(path, "MalformedDocument", 'scene op must be null or {"move": [from, to]}')
        return None
    for loc in pair:
        if loc not in locations:
            diag.add(path, "UnknownLocation", f"location {loc!r} is not declared")
    if pair[0] == pair[1]:
        diag.add(path, "MalformedDocument", f"MOVE from {pair[0]!r} to itself")
        return None
    return Move(pair[0], pair[1])


def _decode_gripper_op(raw: Any, path: str, objects: Set[str], diag: _Collector):
    if raw is None:
        return None
    if isinstance(raw, dict) and len(raw) == 1:
        (kind, obj), = raw.items()
        if kind in ("add", "sub") and is_token(obj):
            if obj not in objects:
                diag.add(path, "UnknownObject", f"object {obj!r} is not declared")
            return Add(obj) if kind == "add" else Sub(obj)
    diag.add(path, "MalformedDocument", 'gripper op must be null, {"add": obj} or {"sub": obj}')
    return None


def _decode_skill(path: str, entry: Mapping[str, Any], locations: Set[str], objects: Set[str],
                  actions: Mapping[str, ActionSkill], diag: _Collector) -> Optional[SemanticSkill]:
    before = len(diag.items)
    skill_id = entry.get("id")
    if not is_token(skill_id):
        diag.add(f"{path}.id", "MalformedDocument", f"skill id must be a non-empty token, got {skill_id!r}")
        return None
    try:
        category = SkillCategory(str(entry.get("category", "other")).lower())
    except ValueError:
        diag.add(f"{path}.category", "MalformedDocument", f"unknown category {entry.get('category')!r}")
        category = SkillCategory.OTHER
    pre_raw = entry.get("pre", {})
    delta_raw = entry.get("delta", {})
    if not isinstance(pre_raw, dict) or not isinstance(delta_raw, dict):
        diag.add(path, "MalformedDocument", "pre and delta must be objects")
        return None
    pre = Precondition(
        _decode_location_slot(pre_raw.get("location", "_"), f"{path}.pre.location", locations, diag),
        _decode_gripper_slot(pre_raw.get("left", "_"), f"{path}.pre.left", objects, diag),
        _decode_gripper_slot(pre_raw.get("right", "_"), f"{path}.pre.right", objects, diag),
    )
    delta = StateDelta(
        _decode_scene_op(delta_raw.get("scene"), f"{path}.delta.scene", locations, diag),
        _decode_gripper_op(delta_raw.get("left"), f"{path}.delta.left", objects, diag),
        _decode_gripper_op(delta_raw.get("right"), f"{path}.delta.right", objects, diag),
    )
    refs = entry.get("action_refs", []) or []
    if not isinstance(refs, list):
        diag.add(f"{path}.action_refs", "MalformedDocument", "action_refs must be a list")
        refs = []
    for k, ref in enumerate(refs):
        if ref not in actions:
            diag.add(f"{path}.action_refs[{k}]", "UnknownActionRef", f"action skill {ref!r} is not declared")
    if len(diag.items) > before:
        return None
    if not implies(pre, implied_precondition(delta)):
        diag.add(
            f"{path}.pre",
            "PreconditionContradictsDelta",
            f"{skill_id}: pre {format_precondition(pre)} admits states where delta "
            f"{format_delta(delta)} cannot apply (needs {format_precondition(implied_precondition(delta))})",
        )
        return None
    return SemanticSkill(skill_id, str(entry.get("label", skill_id)), category, pre, delta, tuple(refs))


def _token_list(data: Mapping[str, Any], key: str, diag: _Collector) -> List[str]:
    raw = data.get(key, [])
    if not isinstance(raw, list):
        diag.add(key, "MalformedDocument", f"{key} must be a list of identifiers")
        return []
    seen: List[str] = []
    for k, item in enumerate(raw):
        if not is_token(item):
            diag.add(f"{key}[{k}]", "MalformedDocument", f"invalid identifier {item!r}")
        elif item in seen:
            diag.add(f"{key}[{k}]", "DuplicateDeclaration", f"{item!r} declared twice")
        else:
            seen.append(item)
    return seen


def load_graph(document: Union[str, bytes, Mapping[str, Any]], max_states: int = MAX_STATES) -> SkillStateGraph:
    """Parse and validate a graph document; raises GraphLoadError with all diagnostics."""
    diag = _Collector()
    if isinstance(document, (str, bytes)):
        try:
            data = json.loads(document)
        except json.JSONDecodeError as exc:
            raise GraphLoadError([Diagnostic("$", "MalformedDocument", f"invalid JSON: {exc}")])
    else:
        data = document
    if not isinstance(data, dict):
        raise GraphLoadError([Diagnostic("$", "MalformedDocument", "graph document must be an object")])

    locations = _token_list(data, "locations", diag)
    objects = _token_list(data, "objects", diag)

    actions: Dict[str, ActionSkill] = {}
    for k, entry in enumerate(data.get("actions", []) or []):
        path = f"actions[{k}]"
        if not isinstance(entry, dict) or not is_token(entry.get("id")):
            diag.add(path, "MalformedDocument", "action entry needs a token id")
            continue
        if entry["id"] in actions:
            diag.add(f"{path}.id", "DuplicateActionId", f"action {entry['id']!r} declared twice")
            continue
        actions[entry["id"]] = ActionSkill(entry["id"], str(entry.get("label", "")))

    skills: Dict[str, SemanticSkill] = {}
    raw_skills = data.get("skills", [])
    if not isinstance(raw_skills, list):
        diag.add("skills", "MalformedDocument", "skills must be a list")
        raw_skills = []
    for path, entry in _expand_templates(raw_skills, locations, objects, diag):
        skill = _decode_skill(path, entry, set(locations), set(objects), actions, diag)
        if skill is None:
            continue
        if skill.id in skills:
            diag.add(f"{path}.id", "DuplicateSkillId", f"skill {skill.id!r} defined twice")
            continue
        skills[skill.id] = skill

    edge_mode = data.get("edge_mode", "derived")
    if edge_mode not in EDGE_MODES:
        diag.add("edge_mode", "MalformedDocument", f"edge_mode must be one of {EDGE_MODES}")
        edge_mode = "derived"

    if diag.items:
        raise GraphLoadError(diag.items)

    graph = SkillStateGraph(tuple(sorted(locations)), tuple(sorted(objects)), skills, actions, frozenset(), edge_mode)
    try:
        feasible = derive_edges(graph, max_states=max_states)
    except StateSpaceTooLarge as exc:
        raise GraphLoadError([Diagnostic("$", "StateSpaceTooLarge", str(exc))])

    raw_edges = data.get("edges", []) or []
    if edge_mode == "derived":
        if raw_edges:
            logger.warning("edge_mode is 'derived'; ignoring %d listed edges", len(raw_edges))
        edges = feasible
    else:
        declared: Set[Tuple[str, str]] = set()
        for k, pair in enumerate(raw_edges):
            path = f"edges[{k}]"
            if not (isinstance(pair, list) and len(pair) == 2):
                diag.add(path, "MalformedDocument", "edge must be a [from, to] pair")
                continue
            src, dst = pair
            missing = [p for p in (src, dst) if p not in skills]
            if missing:
                diag.add(path, "DanglingEdge", f"unknown skill(s) {', '.join(map(repr, missing))}")
                continue
            if (src, dst) in declared:
                diag.add(path, "DuplicateEdge", f"{src} -> {dst} listed twice")
                continue
            if (src, dst) not in feasible:
                diag.add(path, "InfeasibleDeclaredEdge", f"no state makes {dst} executable right after {src}")
                continue
            declared.add((src, dst))
        if diag.items:
            raise GraphLoadError(diag.items)
        edges = frozenset(declared)

    graph = graph.with_edges(edges)
    logger.info(
        "loaded skill graph: %d skills, %d actions, %d edges (%s)",
        len(skills), len(actions), len(edges), edge_mode,
    )
    return graph


def load_graph_file(path: Union[str, Path], max_states: int = MAX_STATES) -> SkillStateGraph:
    with open(path, "r", encoding="utf-8") as f:
        return load_graph(f.read(), max_states=max_states)


def serialize_graph(graph: SkillStateGraph) -> Dict[str, Any]:
    """Graph as a JSON-ready document that ``load_graph`` accepts unchanged."""
    return {
        "locations": list(graph.locations),
        "objects": list(graph.objects),
        "actions": [{"id": a.id, "label": a.label} for _, a in sorted(graph.actions.items())],
        "skills": [
            {
                "id": s.id,
                "label": s.label,
                "category": s.category.value,
                "pre": precondition_to_json(s.pre),
                "delta": delta_to_json(s.delta),
                "action_refs": list(s.action_refs),
            }
            for _, s in sorted(graph.skills.items())
        ],
        "edges": [list(e) for e in sorted(graph.edges)],
        "edge_mode": graph.edge_mode,
    }


def dump_graph(graph: SkillStateGraph) -> str:
    return json.dumps(serialize_graph(graph), indent=2, ensure_ascii=False) + "\n"


# ============================================================================
# Edge derivation
# ============================================================================

def _check_size(graph: SkillStateGraph, max_states: int) -> None:
    size = state_space_size(len(graph.locations), len(graph.objects))
    if size > max_states:
        raise StateSpaceTooLarge(f"state space has {size} states, bound is {max_states}")


def _checked_states(graph: SkillStateGraph, max_states: int) -> List[EmbodimentState]:
    _check_size(graph, max_states)
    return list(enumerate_states(graph.locations, graph.objects))


def _transition_graph(graph: SkillStateGraph, max_states: int) -> nx.DiGraph:
    transitions = nx.DiGraph()
    for state in _checked_states(graph, max_states):
        transitions.add_node(state)
        for sid in graph.skill_ids:
            skill = graph.skills[sid]
            if not matches(state, skill.pre):
                continue
            post = try_apply(state, skill.delta)
            if post is None:
                continue
            if transitions.has_edge(state, post):
                transitions[state][post]["skills"].append(sid)
            else:
                transitions.add_edge(state, post, skills=[sid])
    return transitions


def derive_edges(graph: SkillStateGraph, max_states: int = MAX_STATES) -> FrozenSet[Tuple[str, str]]:
    """(i, j) iff some state admits i and the state after i admits j."""
    _check_size(graph, max_states)
    post: Dict[str, Set[EmbodimentState]] = {sid: set() for sid in graph.skills}
    for _, after, skills in graph.transitions(max_states).edges(data="skills"):
        for sid in skills:
            post[sid].add(after)
    edges = set()
    for i in graph.skill_ids:
        after_i = post[i]
        for j in graph.skill_ids:
            pre_j = graph.skills[j].pre
            if any(matches(p, pre_j) for p in after_i):
                edges.add((i, j))
    return frozenset(edges)


def find_edge_witness(graph: SkillStateGraph, i: str, j: str, max_states: int = MAX_STATES) -> Optional[EmbodimentState]:
    """First state (in enumeration order) that makes j executable right after i."""
    first, second = graph.skills[i], graph.skills[j]
    for s in _checked_states(graph, max_states):
        if matches(s, first.pre):
            post = try_apply(s, first.delta)
            if post is not None and matches(post, second.pre):
                return s
    return None


def is_executable(skill: SemanticSkill, state: EmbodimentState) -> bool:
    return matches(state, skill.pre) and try_apply(state, skill.delta) is not None


def executable_skills(graph: SkillStateGraph, state: EmbodimentState) -> List[str]:
    return [sid for sid in graph.skill_ids if is_executable(graph.skills[sid], state)]


# ============================================================================
# Topological views
# ============================================================================

@dataclass(frozen=True)
class TopoNode:
    id: str
    label: str
    category: str


@dataclass(frozen=True)
class TopoView:
    """State-stripped projection: skill nodes and adjacency only."""

    nodes: Tuple[TopoNode, ...] = ()
    adjacency: Mapping[str, Tuple[str, ...]] = field(default_factory=dict)

    @property
    def node_ids(self) -> List[str]:
        return [n.id for n in self.nodes]

    def edges(self) -> List[Tuple[str, str]]:
        return [(src, dst) for src in self.node_ids for dst in self.adjacency.get(src, ())]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "nodes": [{"id": n.id, "label": n.label, "category": n.category} for n in self.nodes],
            "adjacency": {src: list(self.adjacency.get(src, ())) for src in self.node_ids},
        }


def _view_of(digraph: nx.DiGraph) -> TopoView:
    ids = sorted(digraph.nodes)
    nodes = tuple(
        TopoNode(sid, digraph.nodes[sid]["skill"].label, digraph.nodes[sid]["skill"].category.value) for sid in ids
    )
    adjacency = {sid: tuple(sorted(digraph.successors(sid))) for sid in ids}
    return TopoView(nodes, adjacency)


def topo_view(graph: SkillStateGraph) -> TopoView:
    return _view_of(graph.digraph)


def reachable_skills(graph: SkillStateGraph, state: EmbodimentState, depth: Union[int, float] = math.inf) -> Set[str]:
    """Skills executable within ``depth`` executions of ``state``."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    transitions = graph.transitions()
    if state not in transitions:
        raise ValueError(f"state {state} is outside the graph vocabulary")
    cutoff = None if depth == math.inf else int(depth) - 1
    visited = nx.single_source_shortest_path_length(transitions, state, cutoff=cutoff)
    return {sid for _, _, skills in transitions.out_edges(list(visited), data="skills") for sid in skills}


def prune_view(graph: SkillStateGraph, state: EmbodimentState, depth: Union[int, float] = math.inf) -> TopoView:
    """Topological view restricted to skills reachable from ``state``; ``math.inf`` is the full closure."""
    return _view_of(graph.digraph.subgraph(reachable_skills(graph, state, depth)))


# ============================================================================
# DOT export
# ============================================================================

def _quote(text: str) -> str:
    escaped = text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")
    return f'"{escaped}"'


def export_dot(target: Union[TopoView, SkillStateGraph], annotated: bool = False) -> str:
    if isinstance(target, TopoView):
        if annotated:
            raise AnnotatedRequiresFullGraph("annotated export needs the full graph, not a topological view")
        view, graph = target, None
    else:
        view, graph = topo_view(target), target
    if not view.nodes:
        return "digraph skillstate {}\n"
    lines = ["digraph skillstate {"]
    for node in view.nodes:
        label = node.label
        if annotated and graph is not None:
            skill = graph.skills[node.id]
            label = f"{node.label}\npre {format_precondition(skill.pre)}\ndelta {format_delta(skill.delta)}"
        style = ", style=dashed" if node.category == SkillCategory.RECOVERY.value else ""
        lines.append(f"  {_quote(node.id)} [label={_quote(label)}, shape=box{style}];")
    for src, dst in view.edges():
        lines.append(f"  {_quote(src)} -> {_quote(dst)};")
    lines.append("}")
    return "\n".join(lines) + "\n"
