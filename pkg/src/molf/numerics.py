"""Dense-matrix arithmetic and reverse-mode differentiation.

Matrices are plain 2-D float64 numpy arrays.  ``Tape`` records a fixed
whitelist of primitive ops (matmul, add/bias-add, elementwise scale, relu,
dropout with a recorded mask, mean-squared error, softmax cross-entropy) in
execution order, which is by construction a valid topological order, and
``Tape.backward`` walks it in reverse to produce one gradient per requested
leaf.  Every public op validates shapes and checks its output for
non-finite entries.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from . import backend
from .errors import ContractError, DimensionError, NumericError
from .rng import Rng


def as_matrix(x, ctx: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array; existing float64 arrays pass through unchanged."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{ctx}: expected a 2-D matrix, got shape {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, ctx: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"{ctx}: non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product with deterministic left-to-right inner summation."""
    a = as_matrix(a, "matmul lhs")
    b = as_matrix(b, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions differ: {a.shape} @ {b.shape}"
        )
    return backend.matmul(a, b)


class Node:
    """One entry of a compute graph: a leaf value or a primitive op output."""

    __slots__ = ("tape", "idx", "op", "value", "parents", "aux", "name")

    def __init__(self, tape, idx, op, value, parents=(), aux=None, name=None):
        self.tape = tape
        self.idx = idx
        self.op = op
        self.value = value
        self.parents = parents
        self.aux = aux
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        label = self.name or f"#{self.idx}"
        return f"Node({self.op}, {label}, shape={self.value.shape})"


class Tape:
    """Ordered op list plus a leaf registry; records forward, replays backward."""

    def __init__(self):
        self._nodes: list[Node] = []
        self._leaves: dict[str, Node] = {}

    # -- construction -------------------------------------------------------

    def _append(self, op, value, parents=(), aux=None, name=None) -> Node:
        node = Node(self, len(self._nodes), op, value, parents, aux, name)
        self._nodes.append(node)
        return node

    def _operand(self, x, ctx: str) -> Node:
        if not isinstance(x, Node):
            raise ContractError(f"{ctx}: operand must be a tape Node")
        if x.tape is not self:
            raise ContractError(f"{ctx}: operand belongs to a different tape")
        return x

    def leaf(self, value, name: str | None = None) -> Node:
        value = check_finite(as_matrix(value, "leaf"), name or "leaf")
        if name is None:
            name = f"leaf{len(self._leaves)}"
        if name in self._leaves:
            raise ContractError(f"duplicate leaf name {name!r}")
        node = self._append("leaf", value, name=name)
        self._leaves[name] = node
        return node

    @property
    def leaves(self) -> Mapping[str, Node]:
        return dict(self._leaves)

    # -- primitive ops -------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        a = self._operand(a, "matmul")
        b = self._operand(b, "matmul")
        value = matmul(a.value, b.value)
        check_finite(value, "matmul")
        return self._append("matmul", value, (a, b))

    def add(self, a: Node, b: Node) -> Node:
        """Elementwise add; also accepts a (d, 1) bias against a (d, n) matrix."""
        a = self._operand(a, "add")
        b = self._operand(b, "add")
        bias_add = b.shape == (a.shape[0], 1) and a.shape[1] != 1
        if not bias_add and a.shape != b.shape:
            raise DimensionError(f"add: shapes differ: {a.shape} + {b.shape}")
        value = check_finite(a.value + b.value, "add")
        return self._append("add", value, (a, b), aux=bias_add)

    def scale(self, a: Node, c: float) -> Node:
        a = self._operand(a, "scale")
        c = float(c)
        if not np.isfinite(c):
            raise NumericError(f"scale: non-finite factor {c}")
        value = check_finite(c * a.value, "scale")
        return self._append("scale", value, (a,), aux=c)

    def relu(self, a: Node) -> Node:
        a = self._operand(a, "relu")
        value = np.maximum(a.value, 0.0)
        return self._append("relu", value, (a,))

    def dropout(self, a: Node, rate: float, rng: Rng | None = None,
                mask: np.ndarray | None = None) -> Node:
        """Dropout with a recorded mask, reused exactly by the backward pass.

        The mask is drawn from ``rng`` (inverted-dropout scaling 1/(1-rate))
        unless an explicit ``mask`` is supplied, e.g. to replay a step.
        """
        a = self._operand(a, "dropout")
        if not 0.0 <= rate < 1.0:
            raise ContractError(f"dropout: rate must be in [0, 1), got {rate}")
        if mask is None:
            if rate == 0.0:
                mask = np.ones_like(a.value)
            elif rng is None:
                raise ContractError("dropout: rate > 0 requires an rng or an explicit mask")
            else:
                mask = rng.dropout_mask(a.shape[0], a.shape[1], rate)
        else:
            mask = as_matrix(mask, "dropout mask")
            if mask.shape != a.shape:
                raise DimensionError(
                    f"dropout: mask shape {mask.shape} != input shape {a.shape}"
                )
        value = check_finite(a.value * mask, "dropout")
        return self._append("dropout", value, (a,), aux=mask)

    def mse(self, pred: Node, target) -> Node:
        """Mean over all entries of the squared error, as a 1x1 node."""
        pred = self._operand(pred, "mse")
        target = as_matrix(target, "mse target")
        if target.shape != pred.shape:
            raise DimensionError(
                f"mse: prediction shape {pred.shape} != target shape {target.shape}"
            )
        resid = pred.value - target
        value = np.array([[float(np.mean(resid * resid))]])
        check_finite(value, "mse")
        return self._append("mse", value, (pred,), aux=resid)

    def softmax_cross_entropy(self, logits: Node, targets) -> Node:
        """Column-wise softmax CE against one-hot (or soft) target columns, 1x1 node."""
        logits = self._operand(logits, "softmax_cross_entropy")
        targets = as_matrix(targets, "softmax_cross_entropy targets")
        if targets.shape != logits.shape:
            raise DimensionError(
                f"softmax_cross_entropy: logits {logits.shape} != targets {targets.shape}"
            )
        z = logits.value
        shifted = z - z.max(axis=0, keepdims=True)
        ez = np.exp(shifted)
        probs = ez / ez.sum(axis=0, keepdims=True)
        logz = np.log(ez.sum(axis=0, keepdims=True))
        batch = z.shape[1]
        value = np.array([[float(-np.sum(targets * (shifted - logz)) / batch)]])
        check_finite(value, "softmax_cross_entropy")
        return self._append(
            "softmax_cross_entropy", value, (logits,), aux=(probs, targets)
        )

    # -- reverse pass ----------------------------------------------------------

    def backward(self, loss: Node, wrt: Iterable[Node]) -> dict[Node, np.ndarray]:
        """Gradients of a scalar loss node with respect to the given leaves.

        Leaves not reachable from the loss receive zero matrices of their
        own shape.
        """
        loss = self._operand(loss, "backward")
        wrt = [self._operand(n, "backward wrt") for n in wrt]
        if loss.value.shape != (1, 1):
            raise ContractError(
                f"backward: loss node must be scalar-valued (1x1), got {loss.value.shape}"
            )
        for n in wrt:
            if n.op != "leaf":
                raise ContractError("backward: gradients are only produced for leaves")

        acc: list[np.ndarray | None] = [None] * len(self._nodes)
        acc[loss.idx] = np.ones((1, 1))
        for node in reversed(self._nodes[: loss.idx + 1]):
            g = acc[node.idx]
            if g is None or node.op == "leaf":
                continue
            for parent, contrib in self._vjp(node, g):
                if acc[parent.idx] is None:
                    acc[parent.idx] = contrib
                else:
                    acc[parent.idx] = acc[parent.idx] + contrib
        out: dict[Node, np.ndarray] = {}
        for n in wrt:
            g = acc[n.idx]
            out[n] = np.zeros_like(n.value) if g is None else g
        return out

    def _vjp(self, node: Node, g: np.ndarray):
        op = node.op
        if op == "matmul":
            a, b = node.parents
            yield a, backend.matmul(g, b.value.T)
            yield b, backend.matmul(a.value.T, g)
        elif op == "add":
            a, b = node.parents
            yield a, g
            if node.aux:  # bias-add: fold the batch dimension back into (d, 1)
                yield b, g.sum(axis=1, keepdims=True)
            else:
                yield b, g
        elif op == "scale":
            (a,) = node.parents
            yield a, node.aux * g
        elif op == "relu":
            (a,) = node.parents
            yield a, g * (a.value > 0.0)
        elif op == "dropout":
            (a,) = node.parents
            yield a, g * node.aux
        elif op == "mse":
            (pred,) = node.parents
            resid = node.aux
            coeff = 2.0 * float(g[0, 0]) / resid.size
            yield pred, coeff * resid
        elif op == "softmax_cross_entropy":
            (logits,) = node.parents
            probs, targets = node.aux
            coeff = float(g[0, 0]) / logits.shape[1]
            yield logits, coeff * (probs - targets)
        else:  # pragma: no cover - the op whitelist is closed
            raise ContractError(f"unknown op {op!r}")


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function, entry by entry."""
    if h <= 0:
        raise ContractError(f"finite_diff_grad: step h must be > 0, got {h}")
    x = as_matrix(x, "finite_diff_grad")
    grad = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp.flat[i] += h
        fp = float(f(xp))
        xm = x.copy()
        xm.flat[i] -= h
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"finite_diff_grad: f returned a non-finite value at entry {i}")
        grad.flat[i] = (fp - fm) / (2.0 * h)
    return grad
