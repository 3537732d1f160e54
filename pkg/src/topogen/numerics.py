"""Parameter storage and reverse-mode gradients for the trainable arrays.

Everything is 64-bit numpy. The autodiff tape (:class:`Var`) covers exactly
the operations the forward passes need: matrix-vector products, row gathers,
concatenation, rectifier, masked softmax, clamped log, and reductions.
Gradient checks against central finite differences live in the test suite.
"""

from __future__ import annotations

import json
from typing import Callable, Iterable

import numpy as np


class NumericError(RuntimeError):
    """Raised when a forward or backward pass produces non-finite values."""


class Var:
    """Node in the reverse-mode tape wrapping a float64 numpy array."""

    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(
        self,
        value: np.ndarray | float,
        parents: tuple["Var", ...] = (),
        vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._vjp = vjp

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable Var."""
        if self.value.shape != ():
            raise ValueError("backward() requires a scalar")
        order = _toposort(self)
        for node in order:
            node.grad = np.zeros_like(node.value)
        self.grad = np.ones_like(self.value)
        for node in order:
            if node._vjp is None:
                continue
            assert node.grad is not None
            parent_grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                parent.grad += g


def _toposort(root: Var) -> list[Var]:
    """Reverse topological order (root first), iterative to avoid recursion."""
    seen: set[int] = set()
    order: list[Var] = []
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    order.reverse()
    return order


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------

def constant(value: np.ndarray | float) -> Var:
    return Var(value)


def add(a: Var, b: Var) -> Var:
    return Var(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Var, b: Var) -> Var:
    return Var(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Var, b: Var) -> Var:
    va, vb = a.value, b.value
    return Var(va * vb, (a, b), lambda g: (g * vb, g * va))


def scale(a: Var, s: float) -> Var:
    return Var(a.value * s, (a,), lambda g: (g * s,))


def neg(a: Var) -> Var:
    return Var(-a.value, (a,), lambda g: (-g,))


def matvec(w: Var, x: Var) -> Var:
    """w [m, n] @ x [n] -> [m]."""
    wv, xv = w.value, x.value
    return Var(wv @ xv, (w, x), lambda g: (np.outer(g, xv), wv.T @ g))


def relu(a: Var) -> Var:
    mask = (a.value > 0.0).astype(np.float64)
    return Var(a.value * mask, (a,), lambda g: (g * mask,))


def concat(a: Var, b: Var) -> Var:
    na = a.value.shape[0]
    return Var(
        np.concatenate([a.value, b.value]),
        (a, b),
        lambda g: (g[:na], g[na:]),
    )


def row(m: Var, i: int) -> Var:
    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        out = np.zeros_like(m.value)
        out[i] = g
        return (out,)

    return Var(m.value[i], (m,), vjp)


def pick(v: Var, i: int) -> Var:
    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        out = np.zeros_like(v.value)
        out[i] = g
        return (out,)

    return Var(v.value[i], (v,), vjp)


def vsum(v: Var) -> Var:
    return Var(np.sum(v.value), (v,), lambda g: (g * np.ones_like(v.value),))


def log_clamped(v: Var, eps: float = 1e-300) -> Var:
    clamped = np.maximum(v.value, eps)
    return Var(np.log(clamped), (v,), lambda g: (g / clamped,))


def masked_softmax(logits: Var, allowed: np.ndarray) -> Var:
    """Softmax over ``allowed`` positions; disallowed entries get probability 0.

    ``allowed`` is a boolean array treated as a constant, so no gradient flows
    to masked positions.
    """
    allowed = np.asarray(allowed, dtype=bool)
    if not allowed.any():
        raise NumericError("masked_softmax: all positions masked")
    shifted = np.where(allowed, logits.value, -np.inf)
    shifted = shifted - np.max(shifted)
    ex = np.exp(shifted)
    probs = ex / np.sum(ex)
    if not np.all(np.isfinite(probs)):
        raise NumericError("masked_softmax produced non-finite probabilities")

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        # Jacobian of softmax: diag(p) - p p^T, zero on masked positions.
        return (probs * (g - np.dot(g, probs)),)

    return Var(probs, (logits,), vjp)


def add_many(terms: Iterable[Var]) -> Var:
    terms = list(terms)
    if not terms:
        raise ValueError("add_many needs at least one term")
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


# ---------------------------------------------------------------------------
# Ops adapters: one forward implementation, two evaluation modes
# ---------------------------------------------------------------------------

class VarOps:
    """Tape-building operations; inputs and outputs are :class:`Var`."""

    add = staticmethod(add)
    sub = staticmethod(sub)
    mul = staticmethod(mul)
    scale = staticmethod(scale)
    neg = staticmethod(neg)
    matvec = staticmethod(matvec)
    relu = staticmethod(relu)
    concat = staticmethod(concat)
    row = staticmethod(row)
    pick = staticmethod(pick)
    vsum = staticmethod(vsum)
    log = staticmethod(log_clamped)
    masked_softmax = staticmethod(masked_softmax)

    @staticmethod
    def wrap(value: np.ndarray | float) -> Var:
        return Var(value)


class NumpyOps:
    """Plain numpy operations with the same surface as :class:`VarOps`."""

    @staticmethod
    def add(a, b):
        return a + b

    @staticmethod
    def sub(a, b):
        return a - b

    @staticmethod
    def mul(a, b):
        return a * b

    @staticmethod
    def scale(a, s):
        return a * s

    @staticmethod
    def neg(a):
        return -a

    @staticmethod
    def matvec(w, x):
        return w @ x

    @staticmethod
    def relu(a):
        return np.maximum(a, 0.0)

    @staticmethod
    def concat(a, b):
        return np.concatenate([a, b])

    @staticmethod
    def row(m, i):
        return m[i]

    @staticmethod
    def pick(v, i):
        return v[i]

    @staticmethod
    def vsum(v):
        return np.sum(v)

    @staticmethod
    def log(v, eps: float = 1e-300):
        return np.log(np.maximum(v, eps))

    @staticmethod
    def masked_softmax(logits, allowed):
        allowed = np.asarray(allowed, dtype=bool)
        if not allowed.any():
            raise NumericError("masked_softmax: all positions masked")
        shifted = np.where(allowed, logits, -np.inf)
        shifted = shifted - np.max(shifted)
        ex = np.exp(shifted)
        probs = ex / np.sum(ex)
        if not np.all(np.isfinite(probs)):
            raise NumericError("masked_softmax produced non-finite probabilities")
        return probs

    @staticmethod
    def wrap(value):
        return np.asarray(value, dtype=np.float64)


# ---------------------------------------------------------------------------
# Parameter store
# ---------------------------------------------------------------------------

class ParamStore:
    """Named float64 arrays plus same-shaped gradient accumulators."""

    def __init__(self) -> None:
        self.arrays: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.step: int = 0

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.arrays:
            raise ValueError(f"parameter {name!r} already exists")
        arr = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"parameter {name!r} initialized with non-finite values")
        self.arrays[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def leaves(self) -> dict[str, Var]:
        """Fresh tape leaves for one forward pass."""
        return {name: Var(arr) for name, arr in self.arrays.items()}

    def accumulate(self, leaves: dict[str, Var]) -> None:
        """Fold gradients from a completed backward pass into the store."""
        for name, leaf in leaves.items():
            if leaf.grad is None:
                continue
            if not np.all(np.isfinite(leaf.grad)):
                raise NumericError(f"NaN/Inf gradient for parameter {name!r}")
            self.grads[name] += leaf.grad

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def save(self, path: str) -> None:
        payload = {
            "version": 1,
            "arrays": {
                name: {"shape": list(a.shape), "data": a.ravel().tolist()}
                for name, a in sorted(self.arrays.items())
            },
            "step": self.step,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path: str) -> "ParamStore":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("version") != 1:
            raise ValueError(f"unsupported checkpoint version: {payload.get('version')!r}")
        store = cls()
        for name, spec in payload["arrays"].items():
            store.add(name, np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"]))
        store.step = int(payload["step"])
        return store


def sgd_update(store: ParamStore, lr: float) -> None:
    """Plain gradient step p <- p - lr * g; clears accumulators afterwards."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, arr in store.arrays.items():
        arr -= lr * store.grads[name]
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite parameter {name!r} after update")
    store.zero_grads()
    store.step += 1
