"""
Skill-state planning engine.

This package contains the core logic used by the CLI and the Streamlit app:
- embodiment-state algebra (state)
- skill library, Skill-State Graph and topological views (skill_graph)
- plan verification and conflict feedback (verifier)
- planners and the propose/verify/retry loop (planner, llm)
- closed-loop execution with failure injection (simulator, scenario)
- benchmark suites and run history (bench, db)
"""
