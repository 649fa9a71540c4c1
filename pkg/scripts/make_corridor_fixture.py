import argparse
import json
import os
import sys
sys.path.append('.')


# Build a straight corridor of rooms with forward and backward drives
def corridor_document(rooms: int) -> dict:
    names = [f"room{k:02d}" for k in range(rooms + 1)]
    skills = []
    for a, b in zip(names, names[1:]):
        for src, dst in ((a, b), (b, a)):
            skills.append({
                "id": f"go_{src}_{dst}",
                "label": f"drive from {src} to {dst}",
                "category": "navigate",
                "pre": {"location": src, "left": "_", "right": "_"},
                "delta": {"scene": {"move": [src, dst]}, "left": None, "right": None},
            })
    return {
        "locations": names,
        "objects": [],
        "actions": [],
        "skills": skills,
        "edge_mode": "derived",
    }


def corridor_scenario(rooms: int, p_ok: float) -> dict:
    names = [f"room{k:02d}" for k in range(rooms + 1)]
    return {
        "graph": "corridor.json",
        "tasks": [{
            "id": "traverse",
            "instruction": f"drive from {names[0]} to {names[-1]}",
            "goal_skills": [f"go_{a}_{b}" for a, b in zip(names, names[1:])],
            "initial": f"({names[0]}, null, null)",
        }],
        "failure_model": {
            "p_ok": p_ok,
            "weights": {"DropInPlace": 0.4, "DropLost": 0.0, "NavShortfall": 0.3, "Stall": 0.3},
        },
        "policy": {"step_limit": None},
    }


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Write the corridor graph and scenario fixtures")
    parser.add_argument("--rooms", type=int, default=10)
    parser.add_argument("--p-ok", type=float, default=0.7)
    parser.add_argument("--dir", default="fixtures")
    args = parser.parse_args()

    os.makedirs(args.dir, exist_ok=True)
    with open(os.path.join(args.dir, "corridor.json"), "w", encoding="utf-8") as f:
        json.dump(corridor_document(args.rooms), f, indent=2)
        f.write("\n")
    with open(os.path.join(args.dir, "corridor_scenario.json"), "w", encoding="utf-8") as f:
        json.dump(corridor_scenario(args.rooms, args.p_ok), f, indent=2)
        f.write("\n")
    print(f"Corridor with {args.rooms} drives written to {args.dir}/")

    from engine.skill_graph import load_graph_file

    graph = load_graph_file(os.path.join(args.dir, "corridor.json"))
    print(f"{len(graph.skills)} skills, {len(graph.edges)} derived edges")
