from __future__ import annotations

import itertools
import json
from pathlib import Path

import pytest

from foamforge import bench
from foamforge.llm import HashEmbedder
from foamforge.models import Config
from foamforge.workflow import WorkflowEngine, counter_clock, default_knowledge

FIXTURES = Path(__file__).parent / "fixtures"

# acceptance criterion -> "PASS"/"FAIL", filled by tests/test_acceptance.py
ACCEPTANCE_RESULTS: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict in ACCEPTANCE_RESULTS.items():
        terminalreporter.write_line(f"{verdict} {name}")


@pytest.fixture(scope="session")
def hash_embedder():
    return HashEmbedder(1536)


@pytest.fixture(scope="session")
def knowledge():
    """Bundled-corpus index shared across tests (read only)."""
    provider = bench.ScenarioProvider(bench.Scenario(name="k"))
    return default_knowledge(provider, Config())


def make_engine(tmp_path, scenario: bench.Scenario, knowledge, **config):
    cfg = Config(**config)
    provider = bench.ScenarioProvider(scenario, cfg.embedding_dim)
    executor = bench.scenario_executor(scenario, cfg.file_dependency_enabled)
    engine = WorkflowEngine(provider, executor, tmp_path, cfg, knowledge, clock=counter_clock())
    return engine, provider, executor


def counter_ids(prefix: str):
    n = itertools.count(1)
    return lambda: f"{prefix}-{next(n):012x}"


def load_json(path: Path):
    return json.loads(path.read_text("utf-8"))
