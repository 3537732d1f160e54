"""Relational graph convolution over the prior graph.

Each layer computes, per node, the mean of in-neighbor features under each
relation (transformed by a relation-specific weight) plus a self term, then
applies a rectifier on hidden layers and identity on the final layer.
Summation order is fixed by ascending (relation, neighbor) so results are
bitwise reproducible.
"""

from __future__ import annotations

import numpy as np

from .graph import RELATIONS, PriorGraph
from .numerics import ParamStore


def rgcn_param_names(num_layers: int) -> list[str]:
    names = []
    for layer in range(num_layers):
        names.append(f"rgcn/{layer}/self")
        names.extend(f"rgcn/{layer}/{rel.value}" for rel in RELATIONS)
    return names


def init_rgcn_params(
    store: ParamStore,
    d: int,
    num_layers: int,
    rng: np.random.Generator,
    scale: float = 0.1,
) -> None:
    for name in rgcn_param_names(num_layers):
        store.add(name, rng.uniform(-scale, scale, size=(d, d)))


def rgcn_forward(h0: list, g_pri: PriorGraph, params, num_layers: int, ops):
    """Apply ``num_layers`` relational convolutions; returns per-node vectors.

    ``h0`` is a list of per-node feature vectors (arrays or tape Vars) indexed
    by position in ``g_pri.nodes``. Messages flow along edge direction:
    node i aggregates its in-neighbors.
    """
    n = len(g_pri.nodes)
    if len(h0) != n:
        raise ValueError(f"got {len(h0)} feature rows for {n} prior-graph nodes")
    index = {v: i for i, v in enumerate(g_pri.nodes)}

    # in_neighbors[i][rel] = sorted list of source positions
    in_neighbors: list[dict[object, list[int]]] = [
        {rel: [] for rel in RELATIONS} for _ in range(n)
    ]
    for e in g_pri.edges:
        in_neighbors[index[e.dst]][e.relation].append(index[e.src])
    for per_node in in_neighbors:
        for rel in RELATIONS:
            per_node[rel].sort()

    h = h0
    for layer in range(num_layers):
        w_self = params[f"rgcn/{layer}/self"]
        w_rel = {rel: params[f"rgcn/{layer}/{rel.value}"] for rel in RELATIONS}
        nxt = []
        for i in range(n):
            acc = ops.matvec(w_self, h[i])
            for rel in RELATIONS:
                neigh = in_neighbors[i][rel]
                if not neigh:
                    continue  # empty relation: skip, no division by zero
                msg = ops.matvec(w_rel[rel], h[neigh[0]])
                for j in neigh[1:]:
                    msg = ops.add(msg, ops.matvec(w_rel[rel], h[j]))
                acc = ops.add(acc, ops.scale(msg, 1.0 / len(neigh)))
            if layer < num_layers - 1:
                acc = ops.relu(acc)
            nxt.append(acc)
        h = nxt
    return h
