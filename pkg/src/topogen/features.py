"""Query embedding and initial node features.

Initial node features combine a learnable per-role embedding with a linear
projection of the query embedding; every node sees the same projected query
term. The default embedder is a deterministic feature-hashing scheme so the
whole pipeline runs offline and reproducibly.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass

import numpy as np

from .numerics import ParamStore

EMBED_DIM = 384

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class QueryRecord:
    id: str
    text: str
    gold: str | None = None


def load_queries(path: str) -> list[QueryRecord]:
    """Read a JSONL dataset of ``{"id":..., "query":..., "gold":...}`` lines."""
    records: list[QueryRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            qid = str(obj["id"])
            if not qid:
                raise ValueError(f"{path}:{lineno}: empty query id")
            if qid in seen:
                raise ValueError(f"{path}:{lineno}: duplicate query id {qid!r}")
            seen.add(qid)
            records.append(QueryRecord(qid, obj["query"], obj.get("gold")))
    return records


class HashEmbedder:
    """Deterministic token n-gram feature hashing into a signed 384-d vector.

    Pure: the same text maps to the same unit-norm vector on every run and
    platform (hashing uses blake2b, not Python's randomized ``hash``).
    """

    dimension = EMBED_DIM

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        tokens = _TOKEN_RE.findall(text.lower())
        grams = list(tokens)
        grams.extend(f"{a} {b}" for a, b in zip(tokens, tokens[1:]))
        if not grams:
            grams = [text]
        vec = np.zeros(self.dimension, dtype=np.float64)
        for gram in grams:
            digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
            value = int.from_bytes(digest, "big")
            bucket = value % self.dimension
            sign = 1.0 if (value >> 63) & 1 else -1.0
            vec[bucket] += sign
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            # All signed counts cancelled; fall back to a one-hot of the text hash.
            digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
            vec[int.from_bytes(digest, "big") % self.dimension] = 1.0
            norm = 1.0
        return vec / norm


def embed_query(embedder, text: str) -> np.ndarray:
    """Embed ``text`` with any backend exposing ``embed``; validates the contract."""
    if not text:
        raise ValueError("cannot embed empty text")
    vec = np.asarray(embedder.embed(text), dtype=np.float64)
    if vec.shape != (EMBED_DIM,):
        raise ValueError(f"embedder returned shape {vec.shape}, expected ({EMBED_DIM},)")
    if not np.all(np.isfinite(vec)):
        raise ValueError("embedder returned non-finite values")
    return vec


# Parameter names in the shared ParamStore.
ROLE_EMBEDDINGS = "features/role_embeddings"
QUERY_PROJECTION = "features/query_projection"


def init_feature_params(
    store: ParamStore,
    num_roles: int,
    d: int,
    rng: np.random.Generator,
    scale: float = 0.1,
    d_q: int = EMBED_DIM,
) -> None:
    """Add role embeddings [num_roles, d] and query projection [d, d_q]."""
    store.add(ROLE_EMBEDDINGS, rng.uniform(-scale, scale, size=(num_roles, d)))
    store.add(QUERY_PROJECTION, rng.uniform(-scale, scale, size=(d, d_q)))


def init_node_features(roles: list[int], q_emb: np.ndarray, params, ops):
    """Row i = role_embedding[roles[i]] + W_q @ q_emb.

    ``params`` maps parameter names to arrays or tape Vars; ``ops`` selects
    the evaluation mode. Returns a list of per-node feature vectors.
    """
    role_emb = params[ROLE_EMBEDDINGS]
    w_q = params[QUERY_PROJECTION]
    num_roles, d = np.shape(getattr(role_emb, "value", role_emb))
    d_w, d_q = np.shape(getattr(w_q, "value", w_q))
    if q_emb.shape != (d_q,):
        raise ValueError(f"query embedding shape {q_emb.shape} does not match projection [{d_w}, {d_q}]")
    for r in roles:
        if not (0 <= r < num_roles):
            raise ValueError(f"role index {r} out of range [0, {num_roles})")
    query_term = ops.matvec(w_q, ops.wrap(q_emb))
    return [ops.add(ops.row(role_emb, r), query_term) for r in roles]
