import streamlit as st
import json
import os

# Page Configuration
st.set_page_config(
    page_title="Skill-State Planner",
    page_icon="🤖",
    layout="wide",
    initial_sidebar_state="expanded"
)

FIXTURE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures")

# --- ENGINE LOADING ---
IMPORT_ERROR = None
try:
    from engine.skill_graph import load_graph, export_dot, prune_view, GraphLoadError
    from engine.state import parse_state, format_state, LiteralError
    from engine.verifier import verify, conflict_feedback
    from engine.planner import build_planner
    from engine.scenario import load_scenario, ScenarioError
    from engine.simulator import EpisodePolicy, episode_rng, run_episode
    from engine.bench import SuiteConfig, run_suite, summary_frame, phase_frame, emit_report
    from engine.db import save_report, list_runs, cells_frame, get_run

    ENGINES_AVAILABLE = True
except Exception as e:
    IMPORT_ERROR = str(e)
    ENGINES_AVAILABLE = False

if "current_page" not in st.session_state:
    st.session_state.current_page = "Home"

if IMPORT_ERROR:
    st.error(f"⚠️ **System Alert:** Engines failed to load.\n\nError Details: `{IMPORT_ERROR}`")

PAGES = ["Home", "Graph", "Verify", "Simulate", "Bench", "History"]


def _read_url_page():
    try:
        val = st.query_params.get("page", None)
    except Exception:
        return None
    if isinstance(val, list):
        return val[0]
    return val


url_page = _read_url_page()
if url_page in PAGES:
    st.session_state.current_page = url_page

st.session_state.current_page = st.sidebar.radio(
    "Navigate", PAGES, index=PAGES.index(st.session_state.current_page)
)


def _fixture_files(suffix: str):
    if not os.path.isdir(FIXTURE_DIR):
        return []
    return sorted(f for f in os.listdir(FIXTURE_DIR) if f.endswith(suffix))


def _graph_from_upload(uploaded, default_name: str):
    """Uploaded graph JSON, else the named fixture."""
    if uploaded is not None:
        return load_graph(uploaded.read())
    with open(os.path.join(FIXTURE_DIR, default_name), "r", encoding="utf-8") as f:
        return load_graph(f.read())


current_page = st.session_state.current_page

# ============================================================================
# PAGE: HOME
# ============================================================================
if current_page == "Home":
    st.markdown("## 🤖 Skill-State Planner")
    st.markdown(
        "Build skill graphs grounded in the robot's embodiment state, verify candidate plans "
        "before execution, and measure how planners hold up when skills fail."
    )
    st.divider()
    col1, col2, col3 = st.columns(3, gap="large")
    with col1:
        st.markdown("**🗺️ Graph**  \nValidate a graph file and export it as DOT.")
        st.markdown("**✅ Verify**  \nCheck a plan against the state algebra.")
    with col2:
        st.markdown("**🎲 Simulate**  \nRun one seeded episode with failure injection.")
        st.markdown("**📊 Bench**  \nRun a policy grid and read phase-wise success.")
    with col3:
        st.markdown("**🗂️ History**  \nBrowse benchmark runs stored in SQLite.")

# ============================================================================
# PAGE: GRAPH
# ============================================================================
elif current_page == "Graph":
    st.markdown("## 🗺️ Skill-State Graph")
    st.divider()
    col1, col2 = st.columns([1, 2])
    with col1:
        fixture = st.selectbox("Graph fixture", [f for f in _fixture_files(".json") if "scenario" not in f and "suite" not in f])
        uploaded = st.file_uploader("…or upload a graph", type=["json"])
        state_text = st.text_input("Prune from state (optional)", placeholder="(pantry, null, null)")
        depth = st.number_input("Prune depth (0 = full closure)", min_value=0, value=0)
        annotated = st.checkbox("Annotate nodes with pre/delta")
    with col2:
        if ENGINES_AVAILABLE and (fixture or uploaded):
            try:
                graph = _graph_from_upload(uploaded, fixture)
                st.success(f"{len(graph.skills)} skills, {len(graph.edges)} edges ({graph.edge_mode})")
                if state_text:
                    target = prune_view(graph, parse_state(state_text), depth or float("inf"))
                    st.caption(f"{len(target.nodes)} skills reachable")
                    dot = export_dot(target)
                else:
                    dot = export_dot(graph, annotated=annotated)
                st.graphviz_chart(dot)
                st.download_button("Download DOT", dot, file_name="skillstate.dot")
            except GraphLoadError as e:
                st.error("Graph failed validation")
                st.code("\n".join(str(d) for d in e.diagnostics))
            except LiteralError as e:
                st.error(f"Invalid state: {e}")

# ============================================================================
# PAGE: VERIFY
# ============================================================================
elif current_page == "Verify":
    st.markdown("## ✅ Plan Verifier")
    st.divider()
    col1, col2 = st.columns([1, 1])
    with col1:
        fixture = st.selectbox("Graph fixture", [f for f in _fixture_files(".json") if "scenario" not in f and "suite" not in f])
        state_text = st.text_input("Initial state", value="(pantry, null, null)")
        plan_text = st.text_area("Plan (one skill id per line)", height=200)
        check_adjacency = st.checkbox("Require graph edges between steps")
        verify_btn = st.button("Verify", use_container_width=True)
    with col2:
        if verify_btn and ENGINES_AVAILABLE:
            try:
                graph = _graph_from_upload(None, fixture)
                plan = [line.strip() for line in plan_text.splitlines() if line.strip()]
                report = verify(graph, parse_state(state_text), plan, check_adjacency)
                if report.feasible:
                    st.success(f"Feasible; final state {format_state(report.final_state)}")
                else:
                    st.error(conflict_feedback(report, graph))
                st.markdown("**State chain**")
                st.code("\n".join(format_state(s) for s in report.state_chain))
            except (GraphLoadError, LiteralError) as e:
                st.error(str(e))

# ============================================================================
# PAGE: SIMULATE
# ============================================================================
elif current_page == "Simulate":
    st.markdown("## 🎲 Closed-Loop Episode")
    st.divider()
    scenarios = _fixture_files("_scenario.json")
    col1, col2 = st.columns([1, 2])
    with col1:
        scenario_file = st.selectbox("Scenario", scenarios)
        scenario = None
        if ENGINES_AVAILABLE and scenario_file:
            try:
                scenario = load_scenario(os.path.join(FIXTURE_DIR, scenario_file))
            except (ScenarioError, GraphLoadError) as e:
                st.error(str(e))
        if scenario is not None:
            task_id = st.selectbox("Task", [t.id for t in scenario.tasks])
            profile = st.selectbox("Failure profile", sorted(scenario.profiles))
            planner_name = st.selectbox("Planner", ["oracle", "adversarial"])
            closed_loop = st.checkbox("Closed loop", value=scenario.policy.closed_loop)
            seed = st.number_input("Seed", min_value=0, value=0)
            run_btn = st.button("▶ Run episode", use_container_width=True)
    with col2:
        if scenario is not None and run_btn:
            task = scenario.task(task_id)
            policy_dict = scenario.policy.to_dict()
            policy_dict["closed_loop"] = closed_loop
            planner = build_planner(planner_name, scenario.graph, rng=episode_rng(seed, 1), p_valid=0.5)
            with st.spinner("Running episode..."):
                trace = run_episode(
                    scenario.graph, task, planner, scenario.profile(profile),
                    EpisodePolicy.from_dict(policy_dict), rng=episode_rng(seed, 0),
                )
            if trace.terminal.success:
                st.success(f"Success after {len(trace.events)} steps ({trace.replans} replans)")
            else:
                st.error(f"{trace.terminal.mode.value} at step {trace.terminal.at_step} {trace.terminal.note}")
            st.dataframe([
                {
                    "step": e.step,
                    "skill": e.skill,
                    "outcome": "ok" if e.outcome.success else e.outcome.cause.value,
                    "monitor": "ok" if e.monitor.ok else e.monitor.layer,
                    "replanned": e.replan is not None,
                    "goal": e.goal_completed or "",
                }
                for e in trace.events
            ], use_container_width=True)
            with st.expander("Trace JSON"):
                st.json(trace.to_dict())

# ============================================================================
# PAGE: BENCH
# ============================================================================
elif current_page == "Bench":
    st.markdown("## 📊 Benchmark Suite")
    st.divider()
    scenarios = _fixture_files("_scenario.json")
    col1, col2 = st.columns([1, 2])
    with col1:
        scenario_file = st.selectbox("Scenario", scenarios)
        planner_name = st.selectbox("Planner", ["oracle", "adversarial"])
        p_valid = st.slider("Adversarial p_valid", 0.0, 1.0, 0.5)
        loops = st.multiselect("Loop", ["closed", "open"], default=["closed", "open"])
        episodes = st.number_input("Episodes per group", min_value=1, value=50)
        groups = st.number_input("Trial groups", min_value=1, value=3)
        seed = st.number_input("Seed", min_value=0, value=7)
        save = st.checkbox("Save to run history")
        bench_btn = st.button("▶ Run suite", use_container_width=True)
    with col2:
        if bench_btn and ENGINES_AVAILABLE and scenario_file and loops:
            config = SuiteConfig(
                scenario=os.path.join(FIXTURE_DIR, scenario_file),
                planner=planner_name,
                planner_options={"p_valid": p_valid} if planner_name == "adversarial" else {},
                closed_loop=tuple(loop == "closed" for loop in loops),
                episodes=int(episodes),
                groups=int(groups),
                seed=int(seed),
            )
            with st.spinner("Running episodes..."):
                report = run_suite(config, jobs=os.cpu_count() or 1)
            st.markdown("**Summary**")
            st.dataframe(summary_frame(report), use_container_width=True)
            st.markdown("**Phase-wise cumulative success**")
            st.line_chart(phase_frame(report))
            st.download_button("Download report", emit_report(report, "machine"), file_name="report.json")
            if save:
                run_id = save_report(report, label=scenario_file)
                st.success(f"Saved as run {run_id}")

# ============================================================================
# PAGE: HISTORY
# ============================================================================
elif current_page == "History":
    st.markdown("## 🗂️ Run History")
    st.divider()
    if ENGINES_AVAILABLE:
        runs = list_runs()
        if runs.empty:
            st.info("No runs stored yet. Run a suite with 'Save to run history' or `cli.py bench --db`.")
        else:
            st.dataframe(runs, use_container_width=True)
            run_id = st.selectbox("Run", runs["id"].tolist())
            st.dataframe(cells_frame(int(run_id)), use_container_width=True)
            report = get_run(int(run_id))
            if report:
                st.download_button(
                    "Download report", json.dumps(report, indent=2), file_name=f"run_{run_id}.json"
                )
