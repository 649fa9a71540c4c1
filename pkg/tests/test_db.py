"""
Unit tests for the SQLite run history.

Every test uses a database file under tmp_path; the default DB_FILE is never touched.
"""

import json
from dataclasses import replace
from pathlib import Path

import pytest

from engine import db
from engine.bench import emit_report, load_suite, run_suite


@pytest.fixture(scope="module")
def report():
    config = load_suite(Path(__file__).resolve().parents[1] / "fixtures" / "mini_suite.json")
    return run_suite(replace(config, episodes=3, groups=1, profiles=("default",)))


@pytest.fixture
def db_path(tmp_path):
    return str(tmp_path / "runs.sqlite")


class TestInitializeDb:
    """Tests for initialize_db()."""

    def test_creates_tables(self, db_path):
        """Verify both tables exist after initialization."""
        db.initialize_db(db_path)
        conn = db.get_db_connection(db_path)
        names = {row[0] for row in conn.execute("SELECT name FROM sqlite_master WHERE type = 'table'")}
        conn.close()
        assert {"runs", "cells"} <= names

    def test_idempotent(self, db_path):
        """Verify initializing twice is harmless."""
        db.initialize_db(db_path)
        db.initialize_db(db_path)
        assert db.list_runs(db_path).empty


class TestSaveReport:
    """Tests for save_report() and the listings."""

    def test_round_trip(self, report, db_path):
        """Verify the stored machine report is returned unchanged."""
        run_id = db.save_report(report, label="mini", db_path=db_path)
        assert db.get_run(run_id, db_path) == json.loads(emit_report(report))

    def test_list_runs(self, report, db_path):
        """Verify each run is listed with its cell count."""
        first = db.save_report(report, label="a", db_path=db_path)
        second = db.save_report(report, label="b", db_path=db_path)
        runs = db.list_runs(db_path)
        assert runs["id"].tolist() == [first, second]
        assert runs["label"].tolist() == ["a", "b"]
        assert runs["cells"].tolist() == [len(report.cells)] * 2

    def test_cells_frame(self, report, db_path):
        """Verify one row per cell with failure counts."""
        run_id = db.save_report(report, db_path=db_path)
        frame = db.cells_frame(run_id, db_path)
        assert len(frame) == len(report.cells)
        assert sorted(frame["key"]) == sorted(c["key"] for c in report.cells)
        assert (frame["ptf"] == 0).all()
        assert json.loads(frame["phases"].iloc[0])

    def test_missing_run(self, db_path):
        """Verify an unknown run id gives None."""
        assert db.get_run(42, db_path) is None


class TestExports:
    """Tests for the CSV and JSON exports."""

    def test_export_cells_to_csv(self, report, db_path, tmp_path):
        """Verify the cells table is written with a header row."""
        run_id = db.save_report(report, db_path=db_path)
        out = tmp_path / "cells.csv"
        assert db.export_cells_to_csv(str(out), run_id, db_path)
        lines = out.read_text(encoding="utf-8").splitlines()
        assert lines[0].startswith("run_id,key,")
        assert len(lines) == len(report.cells) + 1

    def test_export_run_to_json(self, report, db_path, tmp_path):
        """Verify a stored run is exported as JSON."""
        run_id = db.save_report(report, db_path=db_path)
        out = tmp_path / "run.json"
        assert db.export_run_to_json(run_id, str(out), db_path)
        assert json.loads(out.read_text(encoding="utf-8"))["config_digest"] == report.config_digest

    def test_export_missing_run(self, db_path, tmp_path):
        """Verify exporting an unknown run reports failure."""
        assert not db.export_run_to_json(7, str(tmp_path / "none.json"), db_path)

    def test_env_default_path(self, monkeypatch, tmp_path, report):
        """Verify DB_FILE is used when no path is passed."""
        monkeypatch.setattr(db, "DB_FILE", str(tmp_path / "default.sqlite"))
        run_id = db.save_report(report)
        assert db.get_run(run_id) is not None
        assert (tmp_path / "default.sqlite").exists()
