"""Heterogeneous directed graph over agent nodes with typed edges.

Three edge types are materialized (conditioned / feedback / debate); the
decoder additionally reasons about a fourth "no edge" outcome that is never
stored. Acyclicity is only required on the conditioned+debate subgraph:
feedback edges may close loops.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

import numpy as np


class Relation(enum.Enum):
    """A materialized edge type."""

    CONDITIONED = "conditioned"
    FEEDBACK = "feedback"
    DEBATE = "debate"


#: Relation order used everywhere a distribution over edge types is reported.
RELATIONS: tuple[Relation, ...] = (Relation.CONDITIONED, Relation.FEEDBACK, Relation.DEBATE)

#: Relations subject to the acyclicity constraint (feedback edges exempt).
ACYCLIC_RELATIONS: frozenset[Relation] = frozenset({Relation.CONDITIONED, Relation.DEBATE})


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    relation: Relation
    confidence: float = 1.0


@dataclass
class HeteroGraph:
    """Directed graph with at most one typed edge per ordered node pair.

    Mutation (``add_edge``) happens single-threaded during decoding; after
    construction the graph is treated as immutable and may be shared freely.
    """

    nodes: list[int]
    edges: list[Edge] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._node_set = set(self.nodes)

    def add_edge(self, src: int, dst: int, relation: Relation, confidence: float = 1.0) -> None:
        self._check_node(src)
        self._check_node(dst)
        self.edges.append(Edge(src, dst, relation, confidence))

    def _check_node(self, node: int) -> None:
        if node not in self._node_set:
            raise ValueError(f"unknown node id {node}")

    def has_node(self, node: int) -> bool:
        return node in self._node_set

    def out_edges(self, node: int) -> list[Edge]:
        return [e for e in self.edges if e.src == node]

    def in_edges(self, node: int) -> list[Edge]:
        return [e for e in self.edges if e.dst == node]


#: A prior graph is structurally a HeteroGraph; its relation labels feed the
#: encoder's relation-specific aggregation and it is never executed.
PriorGraph = HeteroGraph


def reachable(g: HeteroGraph, src: int, dst: int, relations: frozenset[Relation] | set[Relation]) -> bool:
    """True iff a directed path src -> dst exists using only ``relations``.

    Reflexive: ``reachable(g, v, v, ...)`` is always true.
    """
    g._check_node(src)
    g._check_node(dst)
    if src == dst:
        return True
    adjacency: dict[int, list[int]] = {}
    for e in g.edges:
        if e.relation in relations:
            adjacency.setdefault(e.src, []).append(e.dst)
    seen = {src}
    queue = deque([src])
    while queue:
        node = queue.popleft()
        for nxt in adjacency.get(node, ()):
            if nxt == dst:
                return True
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return False


def validate(g: HeteroGraph) -> list[str]:
    """Check every structural invariant; returns violation descriptions.

    An empty list means the graph is well-formed. Violations are data, not
    exceptions: callers decide how to react.
    """
    violations: list[str] = []
    seen_pairs: set[tuple[int, int]] = set()
    for e in g.edges:
        if e.src == e.dst:
            violations.append(f"self-loop at node {e.src}")
        if not g.has_node(e.src) or not g.has_node(e.dst):
            violations.append(f"edge ({e.src}, {e.dst}) references unknown node")
        pair = (e.src, e.dst)
        if pair in seen_pairs:
            violations.append(f"duplicate edge for ordered pair {pair}")
        seen_pairs.add(pair)
        if not (0.0 <= e.confidence <= 1.0):
            violations.append(f"edge {pair} confidence {e.confidence} outside [0, 1]")

    cycle = _find_restricted_cycle(g)
    if cycle is not None:
        violations.append(f"cycle in conditioned/debate subgraph: {cycle}")
    return violations


def _find_restricted_cycle(g: HeteroGraph) -> list[int] | None:
    """Kahn's algorithm on the conditioned+debate subgraph; returns leftover nodes."""
    indeg = {v: 0 for v in g.nodes}
    adjacency: dict[int, list[int]] = {v: [] for v in g.nodes}
    for e in g.edges:
        if e.relation in ACYCLIC_RELATIONS and g.has_node(e.src) and g.has_node(e.dst):
            adjacency[e.src].append(e.dst)
            indeg[e.dst] += 1
    queue = deque(v for v in g.nodes if indeg[v] == 0)
    visited = 0
    while queue:
        node = queue.popleft()
        visited += 1
        for nxt in adjacency[node]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                queue.append(nxt)
    if visited == len(g.nodes):
        return None
    return sorted(v for v in g.nodes if indeg[v] > 0)


def edge_type_distribution(g: HeteroGraph) -> tuple[np.ndarray, bool]:
    """Empirical distribution over (conditioned, feedback, debate).

    Returns ``(probs, empty)``. With no edges the convention is a zero vector
    plus ``empty=True``; the reward module maps that to zero diversity.
    """
    counts = np.zeros(len(RELATIONS), dtype=np.float64)
    for e in g.edges:
        counts[RELATIONS.index(e.relation)] += 1.0
    total = counts.sum()
    if total == 0:
        return counts, True
    return counts / total, False


# ---------------------------------------------------------------------------
# Topology artifact file (version 1)
# ---------------------------------------------------------------------------

def topology_to_dict(g: HeteroGraph, query_id: str, roles: dict[int, str]) -> dict:
    """Serialize to the versioned topology artifact schema (edges sorted by (src, dst))."""
    return {
        "version": 1,
        "query_id": query_id,
        "nodes": [{"id": v, "role": roles.get(v, "")} for v in sorted(g.nodes)],
        "edges": [
            {
                "src": e.src,
                "dst": e.dst,
                "type": e.relation.value,
                "confidence": e.confidence,
            }
            for e in sorted(g.edges, key=lambda e: (e.src, e.dst))
        ],
    }


def topology_from_dict(payload: dict) -> tuple[HeteroGraph, str, dict[int, str]]:
    if payload.get("version") != 1:
        raise ValueError(f"unsupported topology version: {payload.get('version')!r}")
    nodes = [int(n["id"]) for n in payload["nodes"]]
    roles = {int(n["id"]): n["role"] for n in payload["nodes"]}
    g = HeteroGraph(nodes)
    for e in payload["edges"]:
        g.add_edge(int(e["src"]), int(e["dst"]), Relation(e["type"]), float(e["confidence"]))
    return g, payload["query_id"], roles
