"""
Random graph builders and brute-force reference implementations for the tests.

The reference functions re-implement skill semantics directly on
(location, left, right) tuples so that they do not share code with the engine.
"""

from __future__ import annotations

import itertools
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from engine.planner import TaskSpec
from engine.skill_graph import SkillStateGraph, load_graph
from engine.state import WILDCARD, Add, EmbodimentState, Sub

Triple = Tuple[str, Optional[str], Optional[str]]
SIDES = ("left", "right")


# ----------------------------------------------------------------------------
# Random graphs
# ----------------------------------------------------------------------------

def _side_of(objects: Sequence[str], obj: str) -> str:
    # every object is only ever handled by one gripper, so it can't be held twice
    return SIDES[objects.index(obj) % 2]


def _gripper_pattern(rng: np.random.Generator, objects: Sequence[str], side: str):
    options: List = ["_", None] + [o for o in objects if _side_of(objects, o) == side]
    return options[int(rng.integers(len(options)))]


def random_graph_document(rng: np.random.Generator, max_skills: int = 8, max_locations: int = 4, max_objects: int = 3) -> dict:
    locations = [f"loc{k}" for k in range(int(rng.integers(1, max_locations + 1)))]
    objects = [f"obj{k}" for k in range(int(rng.integers(0, max_objects + 1)))]
    kinds = ["other"]
    if len(locations) > 1:
        kinds.append("navigate")
    if objects:
        kinds += ["pick", "place"]

    skills = []
    for k in range(int(rng.integers(1, max_skills + 1))):
        kind = kinds[int(rng.integers(len(kinds)))]
        pre = {
            "location": "_" if rng.random() < 0.3 else locations[int(rng.integers(len(locations)))],
            "left": _gripper_pattern(rng, objects, "left"),
            "right": _gripper_pattern(rng, objects, "right"),
        }
        delta = {"scene": None, "left": None, "right": None}
        if kind == "navigate":
            src, dst = rng.choice(len(locations), size=2, replace=False)
            pre["location"] = locations[int(src)]
            delta["scene"] = {"move": [locations[int(src)], locations[int(dst)]]}
        elif kind in ("pick", "place"):
            obj = objects[int(rng.integers(len(objects)))]
            side = _side_of(objects, obj)
            pre[side] = None if kind == "pick" else obj
            delta[side] = {"add": obj} if kind == "pick" else {"sub": obj}
        skills.append({
            "id": f"{kind}{k}",
            "label": f"{kind} skill {k}",
            "category": kind,
            "pre": pre,
            "delta": delta,
        })
    return {"locations": locations, "objects": objects, "actions": [], "skills": skills, "edge_mode": "derived"}


def random_graph(rng: np.random.Generator, **limits) -> SkillStateGraph:
    return load_graph(random_graph_document(rng, **limits))


def random_state(rng: np.random.Generator, graph: SkillStateGraph) -> EmbodimentState:
    objects = list(graph.objects)
    location = graph.locations[int(rng.integers(len(graph.locations)))]
    held = {}
    for side in SIDES:
        options = [None] + [o for o in objects if _side_of(objects, o) == side]
        held[side] = options[int(rng.integers(len(options)))]
    return EmbodimentState(location, held["left"], held["right"])


# ----------------------------------------------------------------------------
# Reference semantics
# ----------------------------------------------------------------------------

def as_triple(state: EmbodimentState) -> Triple:
    return (state.location, state.left, state.right)


def brute_step(skill, state: Triple) -> Optional[Triple]:
    """Post-state of ``skill`` from ``state``, or None when it is not executable."""
    loc, left, right = state
    pre = skill.pre
    if pre.location is not WILDCARD and pre.location != loc:
        return None
    if pre.left is not WILDCARD and pre.left != left:
        return None
    if pre.right is not WILDCARD and pre.right != right:
        return None
    if skill.delta.scene is not None:
        if skill.delta.scene.source != loc:
            return None
        loc = skill.delta.scene.target
    hands = {"left": left, "right": right}
    for side in SIDES:
        op = getattr(skill.delta, side)
        if isinstance(op, Add):
            if hands[side] is not None:
                return None
            hands[side] = op.obj
        elif isinstance(op, Sub):
            if hands[side] != op.obj:
                return None
            hands[side] = None
    return (loc, hands["left"], hands["right"])


def brute_run(graph: SkillStateGraph, initial: EmbodimentState, plan: Sequence[str]) -> Tuple[List[Triple], Optional[int]]:
    """(chain of visited states, index of the first failing step or None)."""
    chain = [as_triple(initial)]
    for index, sid in enumerate(plan):
        skill = graph.skills.get(sid)
        post = None if skill is None else brute_step(skill, chain[-1])
        if post is None:
            return chain, index
        chain.append(post)
    return chain, None


def brute_states(graph: SkillStateGraph) -> List[Triple]:
    contents = [None] + list(graph.objects)
    return list(itertools.product(graph.locations, contents, contents))


def brute_edges(graph: SkillStateGraph) -> Set[Tuple[str, str]]:
    edges = set()
    for i, first in graph.skills.items():
        for state in brute_states(graph):
            post = brute_step(first, state)
            if post is None:
                continue
            for j, second in graph.skills.items():
                if _pre_holds(second, post):
                    edges.add((i, j))
    return edges


def _pre_holds(skill, state: Triple) -> bool:
    return all(
        pattern is WILDCARD or pattern == value
        for pattern, value in zip((skill.pre.location, skill.pre.left, skill.pre.right), state)
    )


def brute_reachable(graph: SkillStateGraph, initial: EmbodimentState) -> Set[str]:
    seen = {as_triple(initial)}
    stack = [as_triple(initial)]
    reached: Set[str] = set()
    while stack:
        state = stack.pop()
        for sid, skill in graph.skills.items():
            post = brute_step(skill, state)
            if post is None:
                continue
            reached.add(sid)
            if post not in seen:
                seen.add(post)
                stack.append(post)
    return reached


def brute_shortest(graph: SkillStateGraph, initial: EmbodimentState, goals: Sequence[str]) -> Optional[Tuple[str, ...]]:
    """Lexicographically smallest among the shortest plans through ``goals``, via distance labels."""
    goals = tuple(goals)
    ids = sorted(graph.skills)

    def successors(node):
        state, k = node
        for sid in ids:
            post = brute_step(graph.skills[sid], state)
            if post is not None:
                yield sid, (post, k + 1 if sid == goals[k] else k)

    start = (as_triple(initial), 0)
    nodes = {start}
    frontier = [start]
    while frontier:
        nxt = []
        for node in frontier:
            if node[1] == len(goals):
                continue
            for _, child in successors(node):
                if child not in nodes:
                    nodes.add(child)
                    nxt.append(child)
        frontier = nxt

    inf = float("inf")
    dist: Dict = {n: (0 if n[1] == len(goals) else inf) for n in nodes}
    changed = True
    while changed:
        changed = False
        for node in nodes:
            if node[1] == len(goals):
                continue
            best = min((dist[c] + 1 for _, c in successors(node)), default=inf)
            if best < dist[node]:
                dist[node] = best
                changed = True
    if dist[start] == inf:
        return None

    plan = []
    node = start
    while dist[node] > 0:
        for sid, child in successors(node):
            if dist[child] == dist[node] - 1:
                plan.append(sid)
                node = child
                break
    return tuple(plan)


def random_walk_task(rng: np.random.Generator, graph: SkillStateGraph, initial: EmbodimentState,
                     task_id: str = "walk", max_len: int = 6, max_goals: int = 3) -> Optional[TaskSpec]:
    """Task whose goals are an ordered sample of a random executable walk; None if nothing is executable."""
    state = as_triple(initial)
    walk = []
    for _ in range(int(rng.integers(1, max_len + 1))):
        options = [sid for sid in sorted(graph.skills) if brute_step(graph.skills[sid], state) is not None]
        if not options:
            break
        sid = options[int(rng.integers(len(options)))]
        walk.append(sid)
        state = brute_step(graph.skills[sid], state)
    if not walk:
        return None
    count = int(rng.integers(1, min(max_goals, len(walk)) + 1))
    picks = sorted(rng.choice(len(walk), size=count, replace=False))
    return TaskSpec(task_id, tuple(walk[int(p)] for p in picks), initial)
