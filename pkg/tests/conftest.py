"""Shared fixtures and helpers for the test suite."""

from __future__ import annotations

import json
from importlib import resources

import numpy as np
import pytest

from topogen.backends import MockBackend, MockScript
from topogen.executor import AgentProfile
from topogen.graph import HeteroGraph, Relation


def default_config_payload() -> dict:
    return json.loads(resources.files("topogen.data").joinpath("default_config.json").read_text("utf-8"))


@pytest.fixture
def config_payload() -> dict:
    return default_config_payload()


@pytest.fixture
def config_file(tmp_path, config_payload):
    """Write the packaged default config to disk and return its path."""
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config_payload))
    return str(path)


@pytest.fixture
def queries_file(tmp_path):
    rows = [
        {"id": "q1", "query": "What is 6 times 7?", "gold": "42"},
        {"id": "q2", "query": "Compute 40 plus 2.", "gold": "42"},
        {"id": "q3", "query": "How many answers does everything have?", "gold": "42"},
    ]
    path = tmp_path / "queries.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    return str(path)


def make_mock_roster(n: int, decision_maker: int, script: MockScript | None = None) -> tuple[list[AgentProfile], MockBackend]:
    """A roster of ``n`` scripted agents sharing one auditable mock backend."""
    backend = MockBackend(script or MockScript(default_response="42"))
    roster = [
        AgentProfile(
            id=i,
            role=f"agent-{i}" if i != decision_maker else "decision maker",
            backend=backend,
            system_prompt="",
            decision_maker=(i == decision_maker),
        )
        for i in range(n)
    ]
    return roster, backend


def random_valid_topology(rng: np.random.Generator, n: int) -> HeteroGraph:
    """A random graph satisfying every HeteroGraph invariant.

    Conditioned/debate edges only go from lower to higher index (acyclic by
    construction); feedback edges may point either way.
    """
    g = HeteroGraph(list(range(n)))
    for j in range(1, n):
        for i in range(j):
            choice = rng.integers(0, 5)
            if choice == 1:
                g.add_edge(i, j, Relation.CONDITIONED, float(rng.uniform(0.1, 1.0)))
            elif choice == 2:
                g.add_edge(i, j, Relation.DEBATE, float(rng.uniform(0.1, 1.0)))
            elif choice == 3:
                g.add_edge(i, j, Relation.FEEDBACK, float(rng.uniform(0.1, 1.0)))
            elif choice == 4:
                g.add_edge(j, i, Relation.FEEDBACK, float(rng.uniform(0.1, 1.0)))
    return g
