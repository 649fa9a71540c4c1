from __future__ import annotations

import sys
from pathlib import Path
from unittest.mock import MagicMock

import pytest

PROJECT_ROOT = Path(__file__).resolve().parents[1]
FIXTURES = PROJECT_ROOT / "fixtures"


def pytest_configure() -> None:
    root_str = str(PROJECT_ROOT)
    if root_str not in sys.path:
        sys.path.insert(0, root_str)

    # Mock streamlit so importing the dashboard helpers never needs a running server
    if "streamlit" not in sys.modules:
        mock_st = MagicMock()
        mock_st.cache_resource = lambda *args, **kwargs: (lambda fn: fn)
        sys.modules["streamlit"] = mock_st


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def mini_graph():
    from engine.skill_graph import load_graph_file

    return load_graph_file(FIXTURES / "mini_household.json")


@pytest.fixture
def half_graph():
    from engine.skill_graph import load_graph_file

    return load_graph_file(FIXTURES / "half_reachable.json")


@pytest.fixture
def mini_scenario():
    from engine.scenario import load_scenario

    return load_scenario(FIXTURES / "mini_scenario.json")


@pytest.fixture
def corridor_scenario():
    from engine.scenario import load_scenario

    return load_scenario(FIXTURES / "corridor_scenario.json")


@pytest.fixture
def pantry_empty():
    from engine.state import EmbodimentState

    return EmbodimentState("pantry")
