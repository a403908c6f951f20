"""Reverse-mode autodiff over a closed set of matrix primitives.

A Tape records primitive applications in execution order; values are
computed eagerly so the recorded order is already topological. The
primitive methods mirror the eager backend in :mod:`slora.attention`
(same formulas, same numpy calls), so a forward built on a tape is
bit-identical to the eager forward. ``backward`` walks the record once
in reverse, propagating vector-Jacobian products only along paths that
reach a trainable leaf; frozen constants never receive gradients.

The serial input transform x + b @ (a @ x) is a fused primitive so its
backward never materializes an identity matrix.
"""

from __future__ import annotations

import numpy as np

from .attention import softmax_rows
from .linalg import Rng

GradientMap = dict


class Node:
    """One tape entry: a value plus how to push gradients to its parents."""

    __slots__ = ("value", "parents", "vjp", "requires_grad", "param_id", "index")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False, param_id=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.param_id = param_id
        self.index = -1

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Append-only record of primitives; inputs always precede their users."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _record(self, node: Node) -> Node:
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    # -- leaves --------------------------------------------------------

    def constant(self, value) -> Node:
        return self._record(Node(np.asarray(value, dtype=np.float64)))

    def param(self, value, param_id: str) -> Node:
        if param_id is None:
            raise ValueError("trainable leaves need a param_id")
        return self._record(
            Node(np.asarray(value, dtype=np.float64), requires_grad=True, param_id=param_id)
        )

    # -- primitives ----------------------------------------------------

    def _op(self, value, parents, vjp) -> Node:
        requires = any(p.requires_grad for p in parents)
        return self._record(
            Node(value, parents=parents, vjp=vjp, requires_grad=requires)
        )

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.shape[1] != b.value.shape[0]:
            raise ValueError(f"matmul mismatch {a.value.shape} @ {b.value.shape}")

        def vjp(g):
            return (g @ b.value.T, a.value.T @ g)

        return self._op(a.value @ b.value, (a, b), vjp)

    def transpose(self, a: Node) -> Node:
        return self._op(a.value.T, (a,), lambda g: (g.T,))

    def add(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ValueError(f"add mismatch {a.value.shape} vs {b.value.shape}")
        return self._op(a.value + b.value, (a, b), lambda g: (g, g))

    def sub(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ValueError(f"sub mismatch {a.value.shape} vs {b.value.shape}")
        return self._op(a.value - b.value, (a, b), lambda g: (g, -g))

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._op(c * a.value, (a,), lambda g: (c * g,))

    def softmax_rows(self, a: Node) -> Node:
        y = softmax_rows(a.value)

        def vjp(g):
            # row-wise: dL/ds = y * (g - sum(g * y))
            return (y * (g - np.sum(g * y, axis=1, keepdims=True)),)

        return self._op(y, (a,), vjp)

    def serial_transform(self, x: Node, b: Node, a: Node) -> Node:
        if x.value.shape[0] != a.value.shape[1]:
            raise ValueError(
                f"serial_transform mismatch: x {x.value.shape}, a {a.value.shape}"
            )
        ax = a.value @ x.value
        y = x.value + b.value @ ax

        def vjp(g):
            btg = b.value.T @ g
            gx = g + a.value.T @ btg
            gb = g @ ax.T
            ga = btg @ x.value.T
            return (gx, gb, ga)

        return self._op(y, (x, b, a), vjp)

    def row_slice(self, a: Node, start: int, stop: int) -> Node:
        def vjp(g):
            out = np.zeros_like(a.value)
            out[start:stop] = g
            return (out,)

        return self._op(a.value[start:stop], (a,), vjp)

    def concat_rows(self, parts) -> Node:
        parts = tuple(parts)
        sizes = [p.value.shape[0] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def vjp(g):
            return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

        return self._op(np.concatenate([p.value for p in parts], axis=0), parts, vjp)

    def mean_cols(self, a: Node) -> Node:
        n = a.value.shape[1]

        def vjp(g):
            return (np.repeat(g / n, n, axis=1),)

        return self._op(a.value.mean(axis=1, keepdims=True), (a,), vjp)

    def sum_squares(self, a: Node) -> Node:
        def vjp(g):
            return (2.0 * g[0, 0] * a.value,)

        return self._op(np.array([[float(np.sum(a.value * a.value))]]), (a,), vjp)

    def cross_entropy(self, logits: Node, label: int) -> Node:
        z = logits.value
        if z.shape[1] != 1:
            raise ValueError(f"logits must be a column, got {z.shape}")
        if not (0 <= label < z.shape[0]):
            raise ValueError(f"label {label} out of range for {z.shape[0]} classes")
        zmax = z.max()
        lse = zmax + np.log(np.sum(np.exp(z - zmax)))
        loss = float(lse - z[label, 0])

        def vjp(g):
            p = np.exp(z - lse)
            p[label, 0] -= 1.0
            return (g[0, 0] * p,)

        return self._op(np.array([[loss]]), (logits,), vjp)


def backward(tape: Tape, loss: Node) -> GradientMap:
    """Reverse sweep; returns {param_id: gradient} for trainable leaves only.

    Every trainable leaf on the tape gets an entry (zeros when the loss
    does not depend on it); frozen leaves and intermediates never appear.
    """
    if loss.value.shape != (1, 1):
        raise ValueError(f"loss must be scalar (1x1), got shape {loss.value.shape}")
    grads = {loss.index: np.ones((1, 1))}
    for node in reversed(tape.nodes[: loss.index + 1]):
        if node.vjp is None:
            continue
        g = grads.pop(node.index, None)
        if g is None or not node.requires_grad:
            continue
        parent_grads = node.vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            if not parent.requires_grad:
                continue
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + pg
            else:
                grads[parent.index] = pg
    out: GradientMap = {}
    for node in tape.nodes:
        if node.param_id is not None:
            out[node.param_id] = grads.get(node.index, np.zeros_like(node.value))
    return out


def grad_check(model_closure, params: dict, eps: float, subsample_seed: int = 0) -> float:
    """Central-difference verification of analytic gradients.

    ``model_closure(params)`` must return (loss, gradient map) and be
    deterministic; the closure is evaluated twice up front and rejected
    if the losses differ. All scalar entries are checked when the
    parameter count is below 2000, otherwise a seeded subsample of 256
    entries. Returns the max relative error with denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if not (0.0 < eps <= 1e-3):
        raise ValueError(f"eps must be in (0, 1e-3], got {eps}")
    loss0, grads = model_closure(params)
    loss1, _ = model_closure(params)
    if loss0 != loss1:
        raise ValueError(
            f"model closure is not deterministic: {loss0!r} != {loss1!r}"
        )

    entries = []
    for name in sorted(params):
        for flat in range(params[name].size):
            entries.append((name, flat))
    total = len(entries)
    if total > 2000:
        picks = Rng(subsample_seed).uniform(256)
        chosen = sorted({int(p * total) for p in picks})
        entries = [entries[i] for i in chosen]

    max_rel = 0.0
    for name, flat in entries:
        p = params[name]
        old = p.flat[flat]
        p.flat[flat] = old + eps
        plus, _ = model_closure(params)
        p.flat[flat] = old - eps
        minus, _ = model_closure(params)
        p.flat[flat] = old
        numeric = (plus - minus) / (2.0 * eps)
        analytic = grads[name].flat[flat]
        denom = max(abs(analytic), abs(numeric), 1e-8)
        max_rel = max(max_rel, abs(analytic - numeric) / denom)
    return max_rel
