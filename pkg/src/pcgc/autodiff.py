"""A small array-valued reverse-mode tape.

Each op computes its forward value with numpy, appends a :class:`Node` to
the tape and stores a closure that maps the node's adjoint to adjoints of
its parents. Nodes are appended in execution order, so walking the list
backwards is a valid topological order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import entropy, tensor
from .errors import NonScalarLoss, ShapeMismatch


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Node(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Records differentiable ops.

    ``dtype`` sets the working precision of leaves; float32 roughly halves the
    cost of the sparse convolutions during training, float64 is used for
    gradient checks and inference.
    """

    def __init__(self, grad_enabled: bool = True, dtype=np.float64):
        self.grad_enabled = grad_enabled
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []

    # -- leaves

    def param(self, value) -> Node:
        node = Node(np.asarray(value, dtype=self.dtype), requires_grad=self.grad_enabled)
        self.nodes.append(node)
        return node

    def const(self, value) -> Node:
        return Node(np.asarray(value, dtype=self.dtype))

    def _record(self, value, parents: Sequence[Node], backward_fn: Callable) -> Node:
        needs = self.grad_enabled and any(p.requires_grad for p in parents)
        node = Node(value, tuple(parents), backward_fn if needs else None, needs)
        if needs:
            self.nodes.append(node)
        return node

    # -- backward

    def backward(self, loss: Node):
        if np.size(loss.value) != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {np.shape(loss.value)}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    # -- convolutions

    def conv_same(self, x: Node, w: Node, b: Node, nbr: np.ndarray, nbr_rev=None) -> Node:
        out, cols = tensor.same_apply(x.value, nbr, w.value, b.value)

        def back(g):
            return tensor.same_adjoint(g, nbr, w.value, cols, x.requires_grad, nbr_rev)

        return self._record(out, (x, w, b), back)

    def conv_down(self, x: Node, w: Node, b: Node, dmap: tensor.DownMap) -> Node:
        out, cols = tensor.down_apply(x.value, dmap, w.value, b.value)

        def back(g):
            return tensor.down_adjoint(g, dmap, w.value, cols)

        return self._record(out, (x, w, b), back)

    def conv_up(self, x: Node, w: Node, b: Node, umap: tensor.UpMap) -> Node:
        out, _ = tensor.up_apply(x.value, umap, w.value, b.value)
        feats = x.value

        def back(g):
            return tensor.up_adjoint(g, umap, w.value, feats)

        return self._record(out, (x, w, b), back)

    # -- elementwise and structural

    def relu(self, x: Node) -> Node:
        mask = x.value > 0
        return self._record(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))

    def sigmoid(self, x: Node) -> Node:
        y = entropy._sigmoid(x.value).astype(x.value.dtype, copy=False)
        return self._record(y, (x,), lambda g: (g * y * (1.0 - y),))

    def add(self, a: Node, b: Node) -> Node:
        return self._record(a.value + b.value, (a, b), lambda g: (g, g))

    def scale(self, x: Node, k: float) -> Node:
        return self._record(x.value * k, (x,), lambda g: (g * k,))

    def add_const(self, x: Node, c: np.ndarray) -> Node:
        """``x + c`` for a constant ``c``; the adjoint passes through unchanged."""
        return self._record(x.value + np.asarray(c, dtype=x.value.dtype), (x,), lambda g: (g,))

    def concat(self, parts: Sequence[Node]) -> Node:
        widths = np.cumsum([p.value.shape[1] for p in parts])[:-1]

        def back(g):
            return tuple(np.split(g, widths, axis=1))

        return self._record(np.concatenate([p.value for p in parts], axis=1), tuple(parts), back)

    def take_rows(self, x: Node, idx: np.ndarray) -> Node:
        n = x.value.shape[0]

        def back(g):
            out = np.zeros((n, g.shape[1]))
            out[idx] = g  # idx has no repeats
            return (out,)

        return self._record(x.value[idx], (x,), back)

    def sum(self, x: Node) -> Node:
        shape = x.value.shape
        return self._record(np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))

    def mean(self, xs: Sequence[Node]) -> Node:
        """Mean of scalar nodes."""
        k = 1.0 / len(xs)
        total = sum(float(x.value) for x in xs) * k
        return self._record(np.asarray(total), tuple(xs), lambda g: tuple(g * k for _ in xs))

    # -- losses

    def bce(self, p: Node, labels: np.ndarray) -> Node:
        """Mean binary cross-entropy (natural log) with ``p`` clamped to [1e-12, 1 - 1e-12]."""
        # float64 here: in float32 the clamp bound 1 - 1e-12 rounds to 1.0
        pv = np.asarray(p.value, dtype=np.float64).reshape(-1)
        y = np.asarray(labels, dtype=np.float64).reshape(-1)
        if pv.shape != y.shape:
            raise ShapeMismatch(f"{pv.shape[0]} probabilities, {y.shape[0]} labels")
        eps = 1e-12
        pc = np.clip(pv, eps, 1.0 - eps)
        n = len(pv)
        loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
        inside = (pv > eps) & (pv < 1.0 - eps)
        shape = p.value.shape

        def back(g):
            d = np.where(inside, (pc - y) / (pc * (1.0 - pc)) / n, 0.0)
            return ((g * d).reshape(shape).astype(p.value.dtype, copy=False),)

        return self._record(np.asarray(loss), (p,), back)

    def rate_bits(self, x: Node, prior_params: Sequence[Node], channels: int, filters) -> Node:
        """Sum of ``-log2`` bin masses of ``x`` (``N x C``) under the factorized prior."""
        # the prior is always evaluated in float64; adjoints are cast back
        values = [np.asarray(p.value, dtype=np.float64) for p in prior_params]
        prior = entropy.FactorizedPrior.from_parameters(channels, filters, values)
        total, d_x, d_params = entropy.rate_bits_with_grad(prior, np.asarray(x.value, dtype=np.float64))
        nodes = (x, *prior_params)

        def back(g):
            return tuple((g * d).astype(n.value.dtype, copy=False) for n, d in zip(nodes, (d_x, *d_params)))

        return self._record(np.asarray(total), (x, *prior_params), back)


# ------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float):
    """Bias-corrected Adam; updates ``params`` and ``state`` in place and returns both."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("params, grads and optimizer state differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def lr_schedule(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    """Exponential interpolation from ``lr_start`` (first step) to ``lr_end`` (last step)."""
    if total_steps <= 1:
        return lr_start
    t = step / (total_steps - 1)
    return float(lr_start * (lr_end / lr_start) ** t)
