"""Autoregressive typed-edge decoding.

Pairs are visited in a prespecified order (for target node j = 1..N-1, each
source i < j). Each pair gets a temperature-scaled softmax over the extended
decision space (no-edge, conditioned, feedback, debate); a dynamic mask zeros
conditioned/debate whenever inserting i -> j would close a cycle in the
restricted subgraph. Sampling uses inverse-transform over the fixed category
order. Top-K sparsification keeps the highest-confidence edges and drops
nodes left without any kept edge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .graph import ACYCLIC_RELATIONS, Edge, HeteroGraph, Relation, reachable
from .numerics import NumpyOps, ParamStore

#: Extended decision space in fixed CDF order. Index 0 is "no edge".
DECISIONS: tuple[Relation | None, ...] = (
    None,
    Relation.CONDITIONED,
    Relation.FEEDBACK,
    Relation.DEBATE,
)

RELATION_WEIGHTS = "decoder/relation_weights"


def init_decoder_params(store: ParamStore, d: int, rng: np.random.Generator, scale: float = 0.1) -> None:
    """One relation vector of width 2d per decision, stored as a [4, 2d] matrix."""
    store.add(RELATION_WEIGHTS, rng.uniform(-scale, scale, size=(len(DECISIONS), 2 * d)))


@dataclass(frozen=True)
class PairDecision:
    src: int
    dst: int
    distribution: np.ndarray  # post-mask, over DECISIONS
    chosen: int  # index into DECISIONS
    chosen_prob: float
    masked: bool


@dataclass
class DecodeTrace:
    sampled_graph: HeteroGraph
    per_pair: list[PairDecision]
    joint_log_prob: float
    masked_pairs: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class SparsifyResult:
    kept_edges: list[Edge]
    kept_nodes: list[int]
    dropped_edges: list[Edge]
    dropped_nodes: list[int]
    empty: bool = False


def pair_logits(h_i, h_j, weights, tau: float, ops=NumpyOps):
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return ops.scale(ops.matvec(weights, ops.concat(h_i, h_j)), 1.0 / tau)


def pair_distribution(h_i: np.ndarray, h_j: np.ndarray, weights: np.ndarray, tau: float) -> np.ndarray:
    """Softmax over the four decisions for one ordered pair."""
    logits = pair_logits(h_i, h_j, weights, tau)
    return NumpyOps.masked_softmax(logits, np.ones(len(DECISIONS), dtype=bool))


def cycle_masked(partial: HeteroGraph, i: int, j: int) -> bool:
    """True when inserting a conditioned/debate edge i -> j would close a cycle.

    That happens exactly when j already reaches i through the restricted
    subgraph.
    """
    return reachable(partial, j, i, ACYCLIC_RELATIONS)


def apply_mask(dist: np.ndarray, partial: HeteroGraph, i: int, j: int) -> tuple[np.ndarray, bool]:
    """Zero conditioned/debate mass and renormalize when the pair is cycle-bound.

    No-edge and feedback are never masked, so the result always sums to 1.
    Returns ``(distribution, masked)``.
    """
    if not cycle_masked(partial, i, j):
        return dist, False
    masked = dist.copy()
    masked[DECISIONS.index(Relation.CONDITIONED)] = 0.0
    masked[DECISIONS.index(Relation.DEBATE)] = 0.0
    return masked / masked.sum(), True


def mask_allowed(masked: bool) -> np.ndarray:
    """Boolean allowed-decision vector corresponding to a mask flag."""
    allowed = np.ones(len(DECISIONS), dtype=bool)
    if masked:
        allowed[DECISIONS.index(Relation.CONDITIONED)] = False
        allowed[DECISIONS.index(Relation.DEBATE)] = False
    return allowed


def sample_relation(dist: np.ndarray, u: float) -> int:
    """Inverse-transform sample: min index whose CDF reaches ``u``."""
    if not (0.0 <= u < 1.0):
        raise ValueError(f"u must be in [0, 1), got {u}")
    cdf = 0.0
    for idx, p in enumerate(dist):
        cdf += p
        if cdf >= u and p > 0.0:
            return idx
    # Guard against accumulated rounding: last positive-mass category.
    return int(np.max(np.nonzero(dist)))


def pair_order(n: int) -> list[tuple[int, int]]:
    """The prespecified decoding order: (i, j) for j = 1..n-1, i = 0..j-1."""
    return [(i, j) for j in range(1, n) for i in range(j)]


def decode_graph(
    h: list[np.ndarray],
    weights: np.ndarray,
    tau: float,
    rng: np.random.Generator,
) -> DecodeTrace:
    """Sample a full typed topology autoregressively."""
    n = len(h)
    g = HeteroGraph(list(range(n)))
    decisions: list[PairDecision] = []
    masked_pairs: list[tuple[int, int]] = []
    joint_log_prob = 0.0
    for i, j in pair_order(n):
        dist = pair_distribution(h[i], h[j], weights, tau)
        dist, masked = apply_mask(dist, g, i, j)
        if masked:
            masked_pairs.append((i, j))
        u = rng.random()
        chosen = sample_relation(dist, u)
        prob = float(dist[chosen])
        if DECISIONS[chosen] is not None:
            g.add_edge(i, j, DECISIONS[chosen], confidence=prob)
        decisions.append(PairDecision(i, j, dist, chosen, prob, masked))
        joint_log_prob += math.log(prob)
    return DecodeTrace(g, decisions, joint_log_prob, masked_pairs)


def kept_edge_count(sampled: int, alpha: float) -> int:
    """max(1, ceil((1 - alpha) * sampled)); zero when nothing was sampled."""
    if sampled == 0:
        return 0
    # Snap away float fuzz so ceil of an intended integer never jumps up.
    return max(1, math.ceil((1.0 - alpha) * sampled - 1e-9))


def sparsify(trace: DecodeTrace, alpha: float) -> SparsifyResult:
    """Keep the top-confidence edges under the sparsity budget ratio ``alpha``.

    Ties break by ascending (src, dst). Kept nodes are exactly the endpoints
    of kept edges.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    edges = sorted(trace.sampled_graph.edges, key=lambda e: (-e.confidence, e.src, e.dst))
    keep = kept_edge_count(len(edges), alpha)
    kept, dropped = edges[:keep], edges[keep:]
    kept_nodes = sorted({v for e in kept for v in (e.src, e.dst)})
    dropped_nodes = sorted(set(trace.sampled_graph.nodes) - set(kept_nodes))
    return SparsifyResult(
        kept_edges=kept,
        kept_nodes=kept_nodes,
        dropped_edges=dropped,
        dropped_nodes=dropped_nodes,
        empty=not kept,
    )


def final_graph(result: SparsifyResult) -> HeteroGraph:
    """Materialize the kept edges/nodes as a graph ready for scheduling."""
    g = HeteroGraph(list(result.kept_nodes))
    for e in result.kept_edges:
        g.add_edge(e.src, e.dst, e.relation, e.confidence)
    return g
