"""Graph structure, reachability, validation, and the topology artifact schema."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from topogen.graph import (
    ACYCLIC_RELATIONS,
    HeteroGraph,
    Relation,
    edge_type_distribution,
    reachable,
    topology_from_dict,
    topology_to_dict,
    validate,
)


def graph_with(edges):
    n = 1 + max((max(s, d) for s, d, _ in edges), default=0)
    g = HeteroGraph(list(range(n)))
    for src, dst, rel in edges:
        g.add_edge(src, dst, rel)
    return g


class TestReachable:
    def test_path_transitivity(self):
        g = graph_with([(0, 1, Relation.CONDITIONED), (1, 2, Relation.CONDITIONED)])
        assert reachable(g, 0, 2, ACYCLIC_RELATIONS)

    def test_no_backward_edges(self):
        g = graph_with([(0, 1, Relation.CONDITIONED), (1, 2, Relation.CONDITIONED)])
        assert not reachable(g, 2, 0, ACYCLIC_RELATIONS)

    def test_relation_filter_excludes_feedback(self):
        g = graph_with([(0, 1, Relation.FEEDBACK)])
        assert not reachable(g, 0, 1, ACYCLIC_RELATIONS)
        assert reachable(g, 0, 1, {Relation.FEEDBACK})

    def test_reflexive(self):
        g = HeteroGraph([0, 1])
        assert reachable(g, 0, 0, ACYCLIC_RELATIONS)

    def test_invalid_node_rejected(self):
        g = HeteroGraph([0, 1])
        with pytest.raises(ValueError):
            reachable(g, 0, 9, ACYCLIC_RELATIONS)

    @settings(max_examples=50, deadline=None)
    @given(st.data())
    def test_preorder_transitive(self, data):
        """reachable is reflexive and transitive for any fixed relation set."""
        rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
        n = data.draw(st.integers(2, 6))
        g = HeteroGraph(list(range(n)))
        for j in range(1, n):
            for i in range(j):
                if rng.random() < 0.4:
                    g.add_edge(i, j, Relation.CONDITIONED)
        for a in range(n):
            assert reachable(g, a, a, ACYCLIC_RELATIONS)
            for b in range(n):
                for c in range(n):
                    if reachable(g, a, b, ACYCLIC_RELATIONS) and reachable(g, b, c, ACYCLIC_RELATIONS):
                        assert reachable(g, a, c, ACYCLIC_RELATIONS)


class TestValidate:
    def test_two_cycle_flagged(self):
        g = graph_with([(0, 1, Relation.CONDITIONED), (1, 0, Relation.CONDITIONED)])
        violations = validate(g)
        assert len(violations) == 1
        assert "cycle" in violations[0]

    def test_mixed_loop_legal(self):
        g = graph_with([(0, 1, Relation.CONDITIONED), (1, 0, Relation.FEEDBACK)])
        assert validate(g) == []

    def test_empty_graph_legal(self):
        assert validate(HeteroGraph([])) == []

    def test_feedback_cycle_legal(self):
        g = graph_with([(0, 1, Relation.FEEDBACK), (1, 0, Relation.FEEDBACK)])
        assert validate(g) == []

    def test_self_loop_flagged(self):
        from topogen.graph import Edge

        g = HeteroGraph([0])
        g.edges.append(Edge(0, 0, Relation.CONDITIONED))
        assert any("self-loop" in v for v in validate(g))

    def test_duplicate_pair_flagged(self):
        g = graph_with([(0, 1, Relation.CONDITIONED)])
        g.add_edge(0, 1, Relation.FEEDBACK)
        assert any("duplicate" in v for v in validate(g))

    def test_confidence_out_of_range_flagged(self):
        g = HeteroGraph([0, 1])
        g.add_edge(0, 1, Relation.CONDITIONED, confidence=1.5)
        assert any("confidence" in v for v in validate(g))


class TestEdgeTypeDistribution:
    def test_counting(self):
        g = graph_with(
            [
                (0, 1, Relation.CONDITIONED),
                (0, 2, Relation.CONDITIONED),
                (1, 2, Relation.FEEDBACK),
                (0, 3, Relation.DEBATE),
            ]
        )
        probs, empty = edge_type_distribution(g)
        assert not empty
        np.testing.assert_allclose(probs, [0.5, 0.25, 0.25])

    def test_single_type(self):
        probs, empty = edge_type_distribution(graph_with([(0, 1, Relation.DEBATE)]))
        assert not empty
        np.testing.assert_allclose(probs, [0.0, 0.0, 1.0])

    def test_empty_convention(self):
        probs, empty = edge_type_distribution(HeteroGraph([0, 1]))
        assert empty
        np.testing.assert_array_equal(probs, np.zeros(3))

    def test_sums_to_one_when_nonempty(self):
        rng = np.random.default_rng(3)
        from tests.conftest import random_valid_topology

        for _ in range(50):
            g = random_valid_topology(rng, 5)
            probs, empty = edge_type_distribution(g)
            if not empty:
                assert abs(probs.sum() - 1.0) < 1e-12


class TestTopologyArtifact:
    def test_round_trip(self):
        g = graph_with([(0, 2, Relation.DEBATE), (0, 1, Relation.CONDITIONED)])
        roles = {0: "a", 1: "b", 2: "c"}
        payload = topology_to_dict(g, "q7", roles)
        g2, query_id, roles2 = topology_from_dict(payload)
        assert query_id == "q7"
        assert roles2 == roles
        assert sorted(g2.nodes) == sorted(g.nodes)
        assert {(e.src, e.dst, e.relation) for e in g2.edges} == {
            (e.src, e.dst, e.relation) for e in g.edges
        }

    def test_edges_sorted_by_src_dst(self):
        g = graph_with([(1, 2, Relation.FEEDBACK), (0, 1, Relation.CONDITIONED)])
        payload = topology_to_dict(g, "q", {})
        keys = [(e["src"], e["dst"]) for e in payload["edges"]]
        assert keys == sorted(keys)

    def test_schema_keys(self):
        payload = topology_to_dict(graph_with([(0, 1, Relation.CONDITIONED)]), "q", {0: "x", 1: "y"})
        assert set(payload) == {"version", "nodes", "edges", "query_id"}
        assert payload["version"] == 1
        assert set(payload["edges"][0]) == {"src", "dst", "type", "confidence"}
        json.dumps(payload)  # must be serializable as-is

    def test_unknown_version_rejected(self):
        with pytest.raises(ValueError):
            topology_from_dict({"version": 2, "nodes": [], "edges": [], "query_id": "q"})
