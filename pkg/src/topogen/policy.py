"""Centralized topology policy: features + relational encoder + decoder.

One forward implementation serves two modes: plain numpy for sampling and
tape-building for gradients. Training replays a recorded decode trace (the
sampled relations and mask flags are data) to get a differentiable joint
log-probability and policy entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import decoder, encoder, features
from .decoder import DECISIONS, DecodeTrace
from .graph import PriorGraph
from .numerics import NumpyOps, ParamStore, Var, VarOps, add, add_many, log_clamped, mul, neg, pick, scale, vsum


@dataclass
class PolicyConfig:
    num_roles: int
    d: int = 64
    num_layers: int = 2
    init_scale: float = 0.1
    decoder_init_scale: float | None = None
    d_q: int = features.EMBED_DIM


@dataclass
class CentralizedPolicy:
    cfg: PolicyConfig
    store: ParamStore

    @classmethod
    def create(cls, cfg: PolicyConfig, rng: np.random.Generator) -> "CentralizedPolicy":
        store = ParamStore()
        features.init_feature_params(store, cfg.num_roles, cfg.d, rng, cfg.init_scale, cfg.d_q)
        encoder.init_rgcn_params(store, cfg.d, cfg.num_layers, rng, cfg.init_scale)
        w_scale = cfg.decoder_init_scale if cfg.decoder_init_scale is not None else cfg.init_scale
        decoder.init_decoder_params(store, cfg.d, rng, w_scale)
        return cls(cfg, store)

    def node_representations(self, roles: list[int], q_emb: np.ndarray, g_pri: PriorGraph, params=None, ops=NumpyOps):
        """h^(0) rows through the relational encoder; numpy or tape mode."""
        params = params if params is not None else self.store.arrays
        h0 = features.init_node_features(roles, q_emb, params, ops)
        return encoder.rgcn_forward(h0, g_pri, params, self.cfg.num_layers, ops)

    def initial_features(self, roles: list[int], q_emb: np.ndarray) -> list[np.ndarray]:
        """Pre-encoder h^(0) rows (the local-policy inputs)."""
        return features.init_node_features(roles, q_emb, self.store.arrays, NumpyOps)

    def decode(
        self,
        roles: list[int],
        q_emb: np.ndarray,
        g_pri: PriorGraph,
        tau: float,
        rng: np.random.Generator,
    ) -> DecodeTrace:
        h = self.node_representations(roles, q_emb, g_pri)
        return decoder.decode_graph(h, self.store.arrays[decoder.RELATION_WEIGHTS], tau, rng)

    def replay(
        self,
        trace: DecodeTrace,
        roles: list[int],
        q_emb: np.ndarray,
        g_pri: PriorGraph,
        tau: float,
        leaves: dict[str, Var],
    ) -> tuple[Var, Var]:
        """Differentiable (log-prob, entropy) of a recorded decode.

        The chosen relations and mask flags come from the trace; only the
        distributions are recomputed on the tape.
        """
        h = self.node_representations(roles, q_emb, g_pri, params=leaves, ops=VarOps)
        weights = leaves[decoder.RELATION_WEIGHTS]
        log_terms: list[Var] = []
        entropy_terms: list[Var] = []
        for dec in trace.per_pair:
            logits = decoder.pair_logits(h[dec.src], h[dec.dst], weights, tau, ops=VarOps)
            probs = VarOps.masked_softmax(logits, decoder.mask_allowed(dec.masked))
            log_probs = log_clamped(probs)
            log_terms.append(pick(log_probs, dec.chosen))
            entropy_terms.append(neg(vsum(mul(probs, log_probs))))
        if not log_terms:
            zero = Var(0.0)
            return zero, zero
        return add_many(log_terms), add_many(entropy_terms)


def surrogate_loss(
    policy: CentralizedPolicy,
    episodes: list[tuple[DecodeTrace, list[int], np.ndarray, float]],
    g_pri: PriorGraph,
    tau: float,
    baseline: float,
    gamma: float,
    leaves: dict[str, Var],
) -> Var:
    """Negated REINFORCE surrogate, averaged over the batch.

    Each episode is (trace, roles, query embedding, reward). Ascending the
    surrogate sum[log pi * (R - b) + gamma * H] / B is done by descending
    this loss with a plain gradient step.
    """
    if not episodes:
        raise ValueError("batch must be nonempty")
    terms: list[Var] = []
    for trace, roles, q_emb, reward in episodes:
        log_prob, entropy = policy.replay(trace, roles, q_emb, g_pri, tau, leaves)
        term = scale(log_prob, reward - baseline)
        if gamma != 0.0:
            term = add(term, scale(entropy, gamma))
        terms.append(term)
    return scale(neg(add_many(terms)), 1.0 / len(episodes))


def enumerate_outcomes(
    h: list[np.ndarray],
    weights: np.ndarray,
    tau: float,
) -> list[tuple[tuple[int, ...], float]]:
    """Exhaustive enumeration of the autoregressive chain (oracle-sized N only).

    Returns every decision sequence over the pair order with its joint
    probability, including the dynamic mask at each step.
    """
    from .graph import HeteroGraph

    order = decoder.pair_order(len(h))
    results: list[tuple[tuple[int, ...], float]] = []

    def recurse(pos: int, g: HeteroGraph, choices: tuple[int, ...], prob: float) -> None:
        if pos == len(order):
            results.append((choices, prob))
            return
        i, j = order[pos]
        dist = decoder.pair_distribution(h[i], h[j], weights, tau)
        dist, _ = decoder.apply_mask(dist, g, i, j)
        for idx, p in enumerate(dist):
            if p == 0.0:
                continue
            g2 = HeteroGraph(list(g.nodes), list(g.edges))
            if DECISIONS[idx] is not None:
                g2.add_edge(i, j, DECISIONS[idx], confidence=float(p))
            recurse(pos + 1, g2, choices + (idx,), prob * float(p))

    recurse(0, HeteroGraph(list(range(len(h)))), (), 1.0)
    return results
