"""
Unit tests for benchmark suites and reports.

This module tests:
- Suite loading and overrides
- Phase tables and per-cell accounting
- Report invariants and the machine report schema
- Determinism across worker counts
- CSV and trace exports
"""

import json
from dataclasses import replace

import pytest
from jsonschema import ValidationError

from engine.bench import (
    Cell,
    EpisodeResult,
    MixedTasks,
    ReportInvariantError,
    SuiteConfig,
    SuiteReport,
    check_cell,
    emit_report,
    load_suite,
    phase_frame,
    phase_table,
    run_suite,
    summary_frame,
    validate_report,
    write_phase_csv,
    write_traces,
)
from engine.planner import OraclePlanner
from engine.scenario import ScenarioError
from engine.simulator import FailureModel, episode_rng, run_episode


@pytest.fixture
def mini_suite(fixtures_dir):
    return load_suite(fixtures_dir / "mini_suite.json")


@pytest.fixture
def small_report(mini_suite):
    return run_suite(replace(mini_suite, episodes=10, groups=2), keep_traces=True)


class TestLoadSuite:
    """Tests for load_suite()."""

    def test_grid(self, mini_suite):
        """Verify grid axes are read as tuples."""
        assert mini_suite.closed_loop == (True, False)
        assert mini_suite.prune_depth == (None, float("inf"))
        assert mini_suite.profiles == ("default", "flaky")
        assert (mini_suite.episodes, mini_suite.groups, mini_suite.seed) == (50, 2, 7)

    def test_overrides(self, fixtures_dir):
        """Verify command-line style overrides replace fields and None is ignored."""
        config = load_suite(fixtures_dir / "mini_suite.json", seed=99, planner=None)
        assert config.seed == 99
        assert config.planner == "oracle"

    def test_invalid_suite(self, tmp_path):
        """Verify a suite without a scenario is rejected."""
        path = tmp_path / "suite.json"
        path.write_text(json.dumps({"episodes": 3}), encoding="utf-8")
        with pytest.raises(ScenarioError):
            load_suite(path)

    def test_episode_count_must_be_positive(self, fixtures_dir):
        """Verify zero episodes is rejected."""
        with pytest.raises(ValueError):
            SuiteConfig(scenario=fixtures_dir / "mini_scenario.json", episodes=0)


class TestPhaseTable:
    """Tests for phase_table()."""

    def test_perfect_runs(self, mini_graph, mini_scenario):
        """Verify every phase is 1.0 when all episodes succeed."""
        task = mini_scenario.task("set_table")
        traces = [
            run_episode(mini_graph, task, OraclePlanner(mini_graph), FailureModel(), rng=episode_rng(k)) for k in range(3)
        ]
        assert phase_table(traces, task) == [1.0, 1.0]
        assert phase_table(traces, task, total=6) == [0.5, 0.5]

    def test_empty(self, mini_scenario):
        """Verify no episodes give zero phases."""
        assert phase_table([], mini_scenario.task("set_table")) == [0.0, 0.0]

    def test_mixed_tasks_rejected(self, mini_graph, mini_scenario):
        """Verify traces of another task cannot be tabled together."""
        trace = run_episode(
            mini_graph, mini_scenario.task("serve_bowl"), OraclePlanner(mini_graph), FailureModel(), rng=episode_rng(0)
        )
        with pytest.raises(MixedTasks):
            phase_table([trace], mini_scenario.task("set_table"))


class TestCheckCell:
    """Tests for check_cell()."""

    def _cell(self, **changes):
        cell = {
            "key": "t/closed/prune=none/default",
            "episodes": 10,
            "phases": [0.8, 0.5],
            "failure_modes": {"FLE": 3, "TLE": 1, "PTF": 0},
            "planning_failures": 1,
            "execution_successes": 5,
            "errors": 0,
        }
        cell.update(changes)
        return cell

    def test_consistent_cell(self):
        """Verify a balanced cell passes."""
        check_cell(self._cell())

    @pytest.mark.parametrize("changes", [
        {"phases": [0.5, 0.8]},
        {"failure_modes": {"FLE": 2, "TLE": 1, "PTF": 1}},
        {"execution_successes": 6},
    ])
    def test_broken_cells(self, changes):
        """Verify rising phases, regressions and lost episodes are caught."""
        with pytest.raises(ReportInvariantError):
            check_cell(self._cell(**changes))


class TestRunSuite:
    """Tests for run_suite()."""

    def test_cells_and_accounting(self, small_report):
        """Verify one cell per grid point and consistent counts in each."""
        assert len(small_report.cells) == 2 * 2 * 2 * 2
        for cell in small_report.cells:
            assert cell["episodes"] == 20
            assert cell["failure_modes"]["PTF"] == 0
            assert all(a >= b for a, b in zip(cell["phases"], cell["phases"][1:]))
            assert len(cell["groups"]) == 2
            assert sum(g["episodes"] for g in cell["groups"]) == 20

    def test_reliable_profile_always_succeeds(self, small_report):
        """Verify cells with the reliable default profile succeed everywhere."""
        for cell in small_report.cells:
            if cell["profile"] == "default":
                assert cell["task_success_rate"] == 1.0
                assert cell["phases"][-1] == 1.0
                assert cell["group_std"]["task_success_rate"] == 0.0

    def test_pruning_never_grows_prompts(self, small_report):
        """Verify pruned cells use prompts no larger than unpruned ones."""
        by_key = {c["key"]: c for c in small_report.cells}
        for key, cell in by_key.items():
            if "/prune=inf/" in key:
                full = by_key[key.replace("/prune=inf/", "/prune=none/")]
                assert cell["mean_prompt_bytes"] <= full["mean_prompt_bytes"]

    def test_machine_report_validates(self, small_report):
        """Verify the machine report satisfies its schema."""
        data = validate_report(emit_report(small_report, "machine"))
        assert data["schema_version"] == 1

    def test_schema_rejects_regressions(self, small_report):
        """Verify a report claiming a regression fails validation."""
        data = json.loads(emit_report(small_report, "machine"))
        data["cells"][0]["failure_modes"]["PTF"] = 1
        with pytest.raises(ValidationError):
            validate_report(data)

    def test_jobs_do_not_change_results(self, mini_suite):
        """Verify one and four workers give byte-identical reports."""
        config = replace(mini_suite, episodes=15)
        assert emit_report(run_suite(config, jobs=1)) == emit_report(run_suite(config, jobs=4))

    def test_seed_changes_digest(self, mini_suite):
        """Verify the config digest covers the seed."""
        a = run_suite(replace(mini_suite, episodes=1, groups=1, profiles=("default",)))
        b = run_suite(replace(mini_suite, episodes=1, groups=1, profiles=("default",), seed=8))
        assert a.config_digest != b.config_digest

    def test_unknown_task(self, mini_suite):
        """Verify naming a missing task is an error."""
        with pytest.raises(ScenarioError):
            run_suite(replace(mini_suite, tasks=("wash_dishes",)))

    def test_adversarial_planning_accounting(self, fixtures_dir):
        """Verify the planning success rate equals accepted transcripts per episode over 1,000 episodes."""
        config = replace(load_suite(fixtures_dir / "adversarial_suite.json"), episodes=1000, groups=1)
        report = run_suite(config, jobs=4)
        (cell,) = report.cells
        assert cell["errors"] == 0
        assert cell["planning_success_rate"] == round(cell["transcript_accepted"] / cell["episodes"], 6)
        assert cell["execution_successes"] == cell["episodes"] - cell["planning_failures"]
        assert set(cell["attempts_histogram"]) <= {"1", "2", "3", "failed"}
        # three independent 0.4 draws
        assert abs(cell["planning_success_rate"] - (1 - 0.6 ** 3)) < 0.05

    def test_corridor_suite(self, fixtures_dir):
        """Verify closed loop always reaches the last room while open loop rarely does."""
        config = replace(load_suite(fixtures_dir / "corridor_suite.json"), episodes=100, groups=2)
        report = run_suite(config, jobs=2)
        rates = {c["closed_loop"]: c["task_success_rate"] for c in report.cells}
        assert rates[True] == 1.0
        assert rates[False] < 0.2


class TestReports:
    """Tests for report rendering and exports."""

    def test_human_report(self, small_report):
        """Verify the human report has both tables."""
        text = emit_report(small_report, "human")
        assert "Summary" in text
        assert "Phase-wise cumulative success" in text

    def test_empty_report(self):
        """Verify a report without cells renders."""
        report = SuiteReport("0" * 64)
        assert "(no cells)" in emit_report(report, "human")
        assert validate_report(emit_report(report))["cells"] == []

    def test_unknown_format(self, small_report):
        """Verify unknown formats are rejected."""
        with pytest.raises(ValueError):
            emit_report(small_report, "yaml")

    def test_frames(self, small_report):
        """Verify the phase frame has one column per cell and the summary one row per cell."""
        frame = phase_frame(small_report)
        assert list(frame.columns) == [c["key"] for c in small_report.cells]
        assert list(frame.index) == ["phase 1", "phase 2"]
        assert frame.iloc[1].isna().sum() == len(frame.columns) // 2
        assert len(summary_frame(small_report)) == len(small_report.cells)

    def test_phase_csv(self, small_report, tmp_path):
        """Verify the phase table is written as CSV."""
        path = tmp_path / "phases.csv"
        write_phase_csv(small_report, path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0].startswith("phase,")
        assert len(lines) == 3

    def test_traces(self, small_report, tmp_path):
        """Verify one JSON line per episode in cell order."""
        path = tmp_path / "traces.jsonl"
        assert write_traces(small_report, path) == 16 * 20
        first = json.loads(path.read_text(encoding="utf-8").splitlines()[0])
        assert first["cell"] == small_report.cells[0]["key"]
        assert first["task"] == "serve_bowl"


class TestCellKey:
    """Tests for Cell.key and EpisodeResult."""

    def test_key_format(self, mini_scenario):
        """Verify the key names task, loop, depth and profile."""
        cell = Cell(mini_scenario.task("serve_bowl"), 0, False, float("inf"), "flaky")
        assert cell.key == "serve_bowl/open/prune=inf/flaky"

    def test_error_result_has_no_trace(self):
        """Verify an errored episode carries its message only."""
        result = EpisodeResult(0, error="RuntimeError: boom")
        assert result.trace is None
