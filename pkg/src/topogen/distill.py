"""Decentralized stage: per-agent local policies distilled from the teacher.

Each agent owns a small two-layer network mapping the concatenated initial
features of an ordered pair to a distribution over the four decisions. The
higher-index node of a pair owns the decision, mirroring the centralized
factorization. Distillation minimizes per-pair KL against Monte-Carlo
averaged teacher conditionals and never touches an agent backend.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import decoder
from .decoder import DECISIONS, DecodeTrace, PairDecision
from .features import QueryRecord, embed_query
from .graph import HeteroGraph, PriorGraph
from .numerics import NumpyOps, ParamStore, Var, VarOps, constant, mul, neg, sgd_update, vsum
from .policy import CentralizedPolicy

STUDENT_EPS = 1e-8


@dataclass
class LocalPolicy:
    """One agent's relation predictor over ordered pairs it owns."""

    owner: int
    store: ParamStore

    @classmethod
    def create(cls, owner: int, d: int, rng: np.random.Generator, hidden: int = 64, scale: float = 0.1) -> "LocalPolicy":
        store = ParamStore()
        store.add("w1", rng.uniform(-scale, scale, size=(hidden, 2 * d)))
        store.add("b1", np.zeros(hidden))
        store.add("w2", rng.uniform(-scale, scale, size=(len(DECISIONS), hidden)))
        store.add("b2", np.zeros(len(DECISIONS)))
        return cls(owner, store)

    def _logits(self, x, params, ops):
        hidden = ops.relu(ops.add(ops.matvec(params["w1"], ops.wrap(x)), params["b1"]))
        return ops.add(ops.matvec(params["w2"], hidden), params["b2"])

    def distribution(self, h_i: np.ndarray, h_j: np.ndarray) -> np.ndarray:
        x = np.concatenate([h_i, h_j])
        logits = self._logits(x, self.store.arrays, NumpyOps)
        return NumpyOps.masked_softmax(logits, np.ones(len(DECISIONS), dtype=bool))

    def distribution_var(self, h_i: np.ndarray, h_j: np.ndarray, leaves: dict[str, Var]) -> Var:
        x = np.concatenate([h_i, h_j])
        logits = self._logits(x, leaves, VarOps)
        return VarOps.masked_softmax(logits, np.ones(len(DECISIONS), dtype=bool))

    def save(self, path: str) -> None:
        self.store.save(path)

    @classmethod
    def load(cls, owner: int, path: str) -> "LocalPolicy":
        return cls(owner, ParamStore.load(path))


def teacher_marginals(
    policy: CentralizedPolicy,
    roles: list[int],
    q_emb: np.ndarray,
    g_pri: PriorGraph,
    tau: float,
    samples: int,
    rng: np.random.Generator,
) -> dict[tuple[int, int], np.ndarray]:
    """Average the post-mask conditionals over ``samples`` seeded decodes."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    h = policy.node_representations(roles, q_emb, g_pri)
    weights = policy.store.arrays[decoder.RELATION_WEIGHTS]
    sums: dict[tuple[int, int], np.ndarray] = {}
    for _ in range(samples):
        trace = decoder.decode_graph(h, weights, tau, rng)
        for dec in trace.per_pair:
            key = (dec.src, dec.dst)
            sums[key] = sums.get(key, 0.0) + dec.distribution
    return {pair: total / samples for pair, total in sums.items()}


def distill_loss(teacher: np.ndarray, student: np.ndarray, eps: float = STUDENT_EPS) -> float:
    """KL(teacher || student) with the student clamped below by ``eps``."""
    mask = teacher > 0.0
    t = teacher[mask]
    s = np.maximum(student[mask], eps)
    return float(np.sum(t * (np.log(t) - np.log(s))))


def _kl_loss_var(teacher: np.ndarray, student_probs: Var) -> Var:
    """Differentiable KL(teacher || student); teacher is a constant."""
    log_s = VarOps.log(student_probs, STUDENT_EPS)
    cross = neg(vsum(mul(constant(teacher), log_s)))
    nz = teacher[teacher > 0.0]
    teacher_entropy = float(-np.sum(nz * np.log(nz)))
    return VarOps.add(cross, constant(-teacher_entropy))


@dataclass
class DistillConfig:
    query_budget: int = 40  # M'
    lr: float = 0.01
    teacher_samples: int = 8  # S
    tau: float = 0.5
    inner_steps: int = 20
    hidden: int = 64


def create_students(nodes: list[int], d: int, rng: np.random.Generator, hidden: int = 64) -> dict[int, LocalPolicy]:
    return {node: LocalPolicy.create(node, d, rng, hidden) for node in nodes}


def distill_train(
    queries: list[QueryRecord],
    policy: CentralizedPolicy,
    roles: list[int],
    g_pri: PriorGraph,
    embedder,
    students: dict[int, LocalPolicy],
    cfg: DistillConfig,
    rng: np.random.Generator,
) -> list[dict]:
    """Stage-2 loop; returns per-query mean KL report. Zero backend calls."""
    report: list[dict] = []
    if cfg.query_budget == 0:
        return report
    if not queries:
        raise ValueError("dataset must be nonempty")
    for step in range(cfg.query_budget):
        query = queries[step % len(queries)]
        q_emb = embed_query(embedder, query.text)
        h0 = policy.initial_features(roles, q_emb)
        targets = teacher_marginals(policy, roles, q_emb, g_pri, cfg.tau, cfg.teacher_samples, rng)
        for _ in range(cfg.inner_steps):
            for (i, j), teacher in targets.items():
                student = students[j]  # pair (i, j) is owned by the higher-index node
                leaves = student.store.leaves()
                probs = student.distribution_var(h0[i], h0[j], leaves)
                loss = _kl_loss_var(teacher, probs)
                loss.backward()
                student.store.accumulate(leaves)
                sgd_update(student.store, cfg.lr)
        kls = [
            distill_loss(teacher, students[j].distribution(h0[i], h0[j]))
            for (i, j), teacher in targets.items()
        ]
        report.append({"step": step, "query_id": query.id, "mean_kl": float(np.mean(kls))})
    return report


def mean_pairwise_kl(
    policy: CentralizedPolicy,
    students: dict[int, LocalPolicy],
    queries: list[QueryRecord],
    roles: list[int],
    g_pri: PriorGraph,
    embedder,
    cfg: DistillConfig,
    rng: np.random.Generator,
) -> float:
    """Mean per-pair teacher-student KL across a query set."""
    kls: list[float] = []
    for query in queries:
        q_emb = embed_query(embedder, query.text)
        h0 = policy.initial_features(roles, q_emb)
        targets = teacher_marginals(policy, roles, q_emb, g_pri, cfg.tau, cfg.teacher_samples, rng)
        for (i, j), teacher in targets.items():
            kls.append(distill_loss(teacher, students[j].distribution(h0[i], h0[j])))
    return float(np.mean(kls))


def decentralized_decode(
    students: dict[int, LocalPolicy],
    h0: list[np.ndarray],
    rng: np.random.Generator,
) -> DecodeTrace:
    """Decode a topology from local policies only, under the shared constraints.

    Pairs follow the same prespecified order as the centralized decoder; each
    pair (i, j) is decided by node j's local policy on the initial features.
    """
    n = len(h0)
    for node in range(n):
        if node not in students:
            raise ValueError(f"missing local policy for node {node}")
    g = HeteroGraph(list(range(n)))
    decisions: list[PairDecision] = []
    masked_pairs: list[tuple[int, int]] = []
    joint_log_prob = 0.0
    for i, j in decoder.pair_order(n):
        dist = students[j].distribution(h0[i], h0[j])
        dist, masked = decoder.apply_mask(dist, g, i, j)
        if masked:
            masked_pairs.append((i, j))
        chosen = decoder.sample_relation(dist, rng.random())
        prob = float(dist[chosen])
        if DECISIONS[chosen] is not None:
            g.add_edge(i, j, DECISIONS[chosen], confidence=prob)
        decisions.append(PairDecision(i, j, dist, chosen, prob, masked))
        joint_log_prob += math.log(prob)
    return DecodeTrace(g, decisions, joint_log_prob, masked_pairs)
