"""
Shared fixtures: src on the import path, a fresh config per test, and one
converged KAM run on twist-1-1 reused by the kamflow and verify tests.
"""

import os
import sys
from pathlib import Path

import pytest

SRC = Path(__file__).resolve().parents[1] / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from services.config_manager import ConfigManager  # noqa: E402
from services.kamflow import KamSettings, run_iteration  # noqa: E402
from services.model import standard_test_model  # noqa: E402


@pytest.fixture(autouse=True)
def fresh_config(monkeypatch):
    """Every test starts from the declared defaults, without KAM_* overrides."""
    for key in list(os.environ):
        if key.startswith("KAM_") and key != "KAM_LOG_LEVEL":
            monkeypatch.delenv(key)
    ConfigManager.reset()
    yield
    ConfigManager.reset()


@pytest.fixture(scope="session")
def twist_run():
    """(state, limit, problem, hamiltonian) for twist-1-1 at eps = 1e-6, t = 0.1, xi = 0.5."""
    _, _, hamiltonian = standard_test_model("twist-1-1", epsilon=1e-6, t=0.1)
    state, limit, problem = run_iteration(hamiltonian, [0.5], KamSettings())
    return state, limit, problem, hamiltonian
