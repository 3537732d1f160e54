"""Centralized policy optimization.

One training step per query: embed, encode, decode, sparsify, schedule,
execute, reward, then a REINFORCE update with a moving-average baseline and
entropy regularization. Temperature anneals linearly from 2.0 to 0.5 across
the planned steps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import decoder, policy as policy_mod
from .decoder import DecodeTrace, SparsifyResult
from .executor import AgentProfile, ExecutorConfig, TokenStats, Transcript, answers_match, run_topology
from .features import QueryRecord, embed_query
from .graph import HeteroGraph, PriorGraph, edge_type_distribution
from .numerics import sgd_update
from .scheduler import build_plan

logger = logging.getLogger(__name__)


@dataclass
class RewardConfig:
    lambda_: float = 0.5
    gamma: float = 0.01
    baseline_decay: float = 0.9

    def __post_init__(self) -> None:
        if not (0.0 <= self.lambda_ <= 1.0):
            raise ValueError("lambda must be in [0, 1]")
        if self.gamma < 0.0:
            raise ValueError("gamma must be >= 0")
        if not (0.0 < self.baseline_decay < 1.0):
            raise ValueError("baseline decay must be in (0, 1)")


@dataclass
class TrainerState:
    baseline: float = 0.0
    step: int = 0
    tau_start: float = 2.0
    tau_end: float = 0.5
    total_steps: int = 1

    def tau(self) -> float:
        return anneal_temperature(self.step, self.total_steps, self.tau_start, self.tau_end)


@dataclass
class EpisodeRecord:
    query_id: str
    trace: DecodeTrace
    sparsified: SparsifyResult
    roles: list[int]
    q_emb: np.ndarray
    tau: float
    r_task: float
    r_div: float
    reward: float
    transcript: Transcript | None = None
    token_stats: TokenStats | None = None


def diversity_reward(g: HeteroGraph) -> float:
    """Shannon entropy (natural log) of the edge-type distribution; 0 when empty."""
    probs, empty = edge_type_distribution(g)
    if empty:
        return 0.0
    nz = probs[probs > 0.0]
    return float(-np.sum(nz * np.log(nz)))


def total_reward(r_task: float, r_div: float, lambda_: float) -> float:
    if not (0.0 <= lambda_ <= 1.0):
        raise ValueError("lambda must be in [0, 1]")
    return lambda_ * r_task + (1.0 - lambda_) * r_div


def policy_entropy(trace: DecodeTrace) -> float:
    """Sum over pairs of the entropy of each post-mask decision distribution."""
    total = 0.0
    for dec in trace.per_pair:
        nz = dec.distribution[dec.distribution > 0.0]
        total += float(-np.sum(nz * np.log(nz)))
    return total


def anneal_temperature(step: int, total_steps: int, start: float = 2.0, end: float = 0.5) -> float:
    """Linear interpolation from ``start`` at step 0 to ``end`` at total_steps."""
    if total_steps <= 0:
        return end
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return start + (end - start) * (step / total_steps)


def reinforce_step(
    episodes: list[EpisodeRecord],
    policy: policy_mod.CentralizedPolicy,
    g_pri: PriorGraph,
    state: TrainerState,
    cfg: RewardConfig,
    lr: float,
) -> None:
    """Ascend the surrogate on one batch, then update baseline, step, and tau."""
    usable = [ep for ep in episodes if math.isfinite(ep.reward)]
    for ep in episodes:
        if not math.isfinite(ep.reward):
            logger.warning("discarding episode %s with non-finite reward", ep.query_id)
    if not usable:
        raise ValueError("batch must contain at least one finite-reward episode")

    leaves = policy.store.leaves()
    loss = policy_mod.surrogate_loss(
        policy,
        [(ep.trace, ep.roles, ep.q_emb, ep.reward) for ep in usable],
        g_pri,
        usable[0].tau,
        state.baseline,
        cfg.gamma,
        leaves,
    )
    loss.backward()
    policy.store.accumulate(leaves)
    sgd_update(policy.store, lr)

    mean_reward = float(np.mean([ep.reward for ep in usable]))
    state.baseline = cfg.baseline_decay * state.baseline + (1.0 - cfg.baseline_decay) * mean_reward
    state.step += 1


#: evaluator(query, final answer, executed graph) -> task reward in {0, 1}
TaskEvaluator = Callable[[QueryRecord, str, HeteroGraph], float]


def gold_match_evaluator(query: QueryRecord, answer: str, _graph: HeteroGraph) -> float:
    if query.gold is None:
        return 0.0
    return 1.0 if answers_match(answer, query.gold) else 0.0


@dataclass
class TrainConfig:
    query_budget: int = 40  # M
    alpha: float = 0.7
    lr: float = 0.01
    reward: RewardConfig = field(default_factory=RewardConfig)
    tau_start: float = 2.0
    tau_end: float = 0.5
    debate_rounds: int = 2
    executor: ExecutorConfig = field(default_factory=ExecutorConfig)
    evaluator: TaskEvaluator = gold_match_evaluator
    keep_transcripts: bool = False


def run_episode(
    policy: policy_mod.CentralizedPolicy,
    query: QueryRecord,
    roles: list[int],
    roster: list[AgentProfile],
    g_pri: PriorGraph,
    embedder,
    tau: float,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[EpisodeRecord, str]:
    """Generate, execute, and score one topology for one query."""
    q_emb = embed_query(embedder, query.text)
    trace = policy.decode(roles, q_emb, g_pri, tau, rng)
    spars = decoder.sparsify(trace, cfg.alpha)
    g_final = decoder.final_graph(spars)
    decision_maker = next(a.id for a in roster if a.decision_maker)
    plan = build_plan(g_final, decision_maker, cfg.debate_rounds)
    answer, transcript, stats = run_topology(plan, roster, query, cfg.executor)
    r_task = float(cfg.evaluator(query, answer, g_final))
    r_div = diversity_reward(g_final)
    reward = total_reward(r_task, r_div, cfg.reward.lambda_)
    record = EpisodeRecord(
        query_id=query.id,
        trace=trace,
        sparsified=spars,
        roles=roles,
        q_emb=q_emb,
        tau=tau,
        r_task=r_task,
        r_div=r_div,
        reward=reward,
        transcript=transcript if cfg.keep_transcripts else None,
        token_stats=stats,
    )
    return record, answer


def train(
    queries: list[QueryRecord],
    roster: list[AgentProfile],
    roles: list[int],
    g_pri: PriorGraph,
    policy: policy_mod.CentralizedPolicy,
    embedder,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> list[dict]:
    """Stage-1 loop over ``query_budget`` episodes; returns the training report."""
    if cfg.query_budget < 0:
        raise ValueError("query budget must be >= 0")
    report: list[dict] = []
    if cfg.query_budget == 0:
        return report
    if not queries:
        raise ValueError("dataset must be nonempty")
    state = TrainerState(tau_start=cfg.tau_start, tau_end=cfg.tau_end, total_steps=cfg.query_budget)
    for step in range(cfg.query_budget):
        query = queries[step % len(queries)]
        tau = state.tau()
        episode, _answer = run_episode(policy, query, roles, roster, g_pri, embedder, tau, cfg, rng)
        baseline_before = state.baseline
        reinforce_step([episode], policy, g_pri, state, cfg.reward, cfg.lr)
        report.append(
            {
                "step": step,
                "query_id": query.id,
                "reward": episode.reward,
                "r_task": episode.r_task,
                "r_div": episode.r_div,
                "entropy": policy_entropy(episode.trace),
                "tau": tau,
                "baseline": baseline_before,
            }
        )
    return report
