"""
Run history for benchmark suites, stored in SQLite.

Each saved suite report becomes one row in ``runs`` (with the full machine
report) and one row per cell in ``cells``; listings and exports go through
pandas.
"""

import json
import logging
import os
import sqlite3
from datetime import datetime, timezone
from typing import Any, Dict, Optional

import pandas as pd

from .bench import SuiteReport, emit_report

logger = logging.getLogger(__name__)

_base_dir = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
DB_FILE = os.environ.get("SKILLSTATE_DB", os.path.join(_base_dir, "skillstate_runs.sqlite"))


def get_db_connection(db_path: Optional[str] = None) -> sqlite3.Connection:
    return sqlite3.connect(db_path or DB_FILE)


def initialize_db(db_path: Optional[str] = None) -> None:
    """Create tables if they don't exist."""
    conn = get_db_connection(db_path)
    cursor = conn.cursor()
    cursor.execute('''
        CREATE TABLE IF NOT EXISTS runs (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            created_at TEXT NOT NULL,
            label TEXT,
            config_digest TEXT NOT NULL,
            report TEXT NOT NULL
        )
    ''')
    cursor.execute('''
        CREATE TABLE IF NOT EXISTS cells (
            run_id INTEGER NOT NULL REFERENCES runs(id),
            key TEXT NOT NULL,
            task TEXT,
            closed_loop INTEGER,
            prune_depth TEXT,
            profile TEXT,
            episodes INTEGER,
            planning_success_rate REAL,
            task_success_rate REAL,
            fle INTEGER,
            tle INTEGER,
            ptf INTEGER,
            planning_failures INTEGER,
            errors INTEGER,
            mean_prompt_bytes REAL,
            phases TEXT,
            PRIMARY KEY (run_id, key)
        )
    ''')
    conn.commit()
    conn.close()


def save_report(report: SuiteReport, label: str = "", db_path: Optional[str] = None) -> int:
    """Store a suite report; returns the new run id."""
    initialize_db(db_path)
    conn = get_db_connection(db_path)
    try:
        cursor = conn.cursor()
        cursor.execute(
            "INSERT INTO runs (created_at, label, config_digest, report) VALUES (?, ?, ?, ?)",
            (
                datetime.now(timezone.utc).isoformat(timespec="seconds"),
                label,
                report.config_digest,
                emit_report(report, "machine"),
            ),
        )
        run_id = cursor.lastrowid
        for cell in report.cells:
            modes = cell["failure_modes"]
            cursor.execute('''
                INSERT INTO cells (run_id, key, task, closed_loop, prune_depth, profile, episodes,
                                   planning_success_rate, task_success_rate, fle, tle, ptf,
                                   planning_failures, errors, mean_prompt_bytes, phases)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
            ''', (
                run_id,
                cell["key"],
                cell["task"],
                int(cell["closed_loop"]),
                None if cell["prune_depth"] is None else str(cell["prune_depth"]),
                cell["profile"],
                cell["episodes"],
                cell["planning_success_rate"],
                cell["task_success_rate"],
                modes["FLE"],
                modes["TLE"],
                modes["PTF"],
                cell["planning_failures"],
                cell["errors"],
                cell["mean_prompt_bytes"],
                json.dumps(cell["phases"]),
            ))
        conn.commit()
        logger.info("saved run %d with %d cell(s)", run_id, len(report.cells))
        return int(run_id)
    finally:
        conn.close()


def list_runs(db_path: Optional[str] = None) -> pd.DataFrame:
    initialize_db(db_path)
    conn = get_db_connection(db_path)
    try:
        return pd.read_sql_query(
            '''
            SELECT r.id, r.created_at, r.label, r.config_digest, COUNT(c.key) AS cells
            FROM runs r LEFT JOIN cells c ON c.run_id = r.id
            GROUP BY r.id ORDER BY r.id
            ''',
            conn,
        )
    finally:
        conn.close()


def get_run(run_id: int, db_path: Optional[str] = None) -> Optional[Dict[str, Any]]:
    """The stored machine report of a run, or None."""
    initialize_db(db_path)
    conn = get_db_connection(db_path)
    try:
        row = conn.execute("SELECT report FROM runs WHERE id = ?", (run_id,)).fetchone()
    finally:
        conn.close()
    return json.loads(row[0]) if row else None


def cells_frame(run_id: Optional[int] = None, db_path: Optional[str] = None) -> pd.DataFrame:
    initialize_db(db_path)
    conn = get_db_connection(db_path)
    try:
        if run_id is None:
            return pd.read_sql_query("SELECT * FROM cells ORDER BY run_id, key", conn)
        return pd.read_sql_query("SELECT * FROM cells WHERE run_id = ? ORDER BY key", conn, params=(run_id,))
    finally:
        conn.close()


def export_cells_to_csv(file_path: str, run_id: Optional[int] = None, db_path: Optional[str] = None) -> bool:
    try:
        cells_frame(run_id, db_path).to_csv(file_path, index=False)
        return True
    except (OSError, sqlite3.Error) as e:
        logger.error("error exporting cells to CSV: %s", e)
        return False


def export_run_to_json(run_id: int, file_path: str, db_path: Optional[str] = None) -> bool:
    report = get_run(run_id, db_path)
    if report is None:
        logger.error("no run %d in %s", run_id, db_path or DB_FILE)
        return False
    try:
        with open(file_path, "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2, sort_keys=True, ensure_ascii=False)
        return True
    except OSError as e:
        logger.error("error exporting run to JSON: %s", e)
        return False
