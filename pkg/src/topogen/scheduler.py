"""Deterministic execution planning for a final topology.

Traversal is breadth-first over the conditioned/debate subgraph (feedback
edges are excluded from degree calculations), expanding ready nodes in
ascending index order. When a node is activated, debates on its incoming
debate edges run first, then its own activation, then its outgoing feedback
exchanges fire immediately so downstream consumers see the re-handled output.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

from .graph import ACYCLIC_RELATIONS, HeteroGraph, Relation


@dataclass(frozen=True)
class Activate:
    node: int
    conditioned_inputs: tuple[int, ...] = ()
    post_debate: bool = False


@dataclass(frozen=True)
class FeedbackExchange:
    author: int
    critic: int


@dataclass(frozen=True)
class DebateExchange:
    proposer: int
    challenger: int
    rounds: int = 2


Step = Activate | FeedbackExchange | DebateExchange


@dataclass
class ExecutionPlan:
    steps: list[Step]
    decision_maker: int
    fallback: bool = False
    participants: set[int] = field(default_factory=set)

    def __post_init__(self) -> None:
        for step in self.steps:
            if isinstance(step, Activate):
                self.participants.add(step.node)
            elif isinstance(step, FeedbackExchange):
                self.participants.update((step.author, step.critic))
            else:
                self.participants.update((step.proposer, step.challenger))

    def counts(self) -> dict[str, int]:
        return {
            "activate": sum(isinstance(s, Activate) for s in self.steps),
            "feedback": sum(isinstance(s, FeedbackExchange) for s in self.steps),
            "debate": sum(isinstance(s, DebateExchange) for s in self.steps),
        }

    def expected_calls(self) -> int:
        """Backend calls this plan will make: |A| + 2|F| + sum(2 * rounds) over debates."""
        calls = 0
        for step in self.steps:
            if isinstance(step, Activate):
                calls += 1
            elif isinstance(step, FeedbackExchange):
                calls += 2
            else:
                calls += 2 * step.rounds
        return calls


def build_plan(g: HeteroGraph, decision_maker: int, debate_rounds: int = 2) -> ExecutionPlan:
    """Plan execution of ``g``; pure function of its inputs.

    Falls back to a single-agent plan when the graph has no edges or node
    filtering dropped the decision maker, guaranteeing an answer for every
    query.
    """
    if not g.edges or not g.has_node(decision_maker):
        return ExecutionPlan([Activate(decision_maker)], decision_maker, fallback=True)

    # A node answers the query itself iff it touches a conditioned/debate
    # edge, authors feedback, or is the decision maker. Pure feedback critics
    # participate only inside their exchange.
    activated: set[int] = {decision_maker}
    for e in g.edges:
        if e.relation in ACYCLIC_RELATIONS:
            activated.update((e.src, e.dst))
        else:
            activated.add(e.src)

    indeg = {v: 0 for v in g.nodes}
    restricted_out: dict[int, list[int]] = {v: [] for v in g.nodes}
    cond_in: dict[int, list[int]] = {v: [] for v in g.nodes}
    debate_in: dict[int, list[int]] = {v: [] for v in g.nodes}
    feedback_out: dict[int, list[int]] = {v: [] for v in g.nodes}
    for e in g.edges:
        if e.relation in ACYCLIC_RELATIONS:
            indeg[e.dst] += 1
            restricted_out[e.src].append(e.dst)
            target = cond_in if e.relation is Relation.CONDITIONED else debate_in
            target[e.dst].append(e.src)
        else:
            feedback_out[e.src].append(e.dst)

    steps: list[Step] = []
    ready = [v for v in g.nodes if indeg[v] == 0]
    heapq.heapify(ready)
    while ready:
        node = heapq.heappop(ready)
        if node in activated:
            for proposer in sorted(debate_in[node]):
                steps.append(DebateExchange(proposer, node, debate_rounds))
            steps.append(
                Activate(
                    node,
                    conditioned_inputs=tuple(sorted(cond_in[node])),
                    post_debate=bool(debate_in[node]),
                )
            )
            for critic in sorted(feedback_out[node]):
                steps.append(FeedbackExchange(author=node, critic=critic))
        for nxt in restricted_out[node]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                heapq.heappush(ready, nxt)
    return ExecutionPlan(steps, decision_maker)


def plan_to_json(plan: ExecutionPlan) -> list[dict]:
    """Debug dump used by the CLI ``inspect`` command."""
    out: list[dict] = []
    for step in plan.steps:
        if isinstance(step, Activate):
            out.append(
                {
                    "kind": "activate",
                    "node": step.node,
                    "conditioned_inputs": list(step.conditioned_inputs),
                    "post_debate": step.post_debate,
                }
            )
        elif isinstance(step, FeedbackExchange):
            out.append({"kind": "feedback", "author": step.author, "critic": step.critic})
        else:
            out.append(
                {
                    "kind": "debate",
                    "proposer": step.proposer,
                    "challenger": step.challenger,
                    "rounds": step.rounds,
                }
            )
    return out
