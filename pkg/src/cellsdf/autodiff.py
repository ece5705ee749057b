"""A small reverse-mode differentiation tape.

Only the operations the decoder needs are provided. Values are dense 2-D
arrays (rows are batch entries) except for the rotation angles, which are a
length-3 vector, and loss scalars, which are stored as ``(1, 1)`` arrays.

The tape is append-only, so creation order is a valid topological order and
:meth:`Tape.backward` simply walks it in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .rotations import euler_matrix, euler_matrix_derivatives

OPS = (
    "input",
    "matmul",
    "add_bias",
    "sin_act",
    "relu_act",
    "concat",
    "scale",
    "rotate3",
    "l1_mean",
    "sum_squares",
    "add",
)


class GraphError(ValueError):
    """Raised when an operation receives operands of incompatible shape."""


class Node:
    __slots__ = ("value", "grad", "op", "parents", "needs_grad", "name", "_backward")

    def __init__(self, value, op, parents=(), needs_grad=False, name=None):
        self.value = value
        self.grad = None
        self.op = op
        self.parents = parents
        self.needs_grad = needs_grad
        self.name = name
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape}, name={self.name!r})"


class Tape:
    """Records operations and replays them backwards.

    With ``record=False`` the same forward arithmetic runs but no backward
    closures are kept, which is what inference uses.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []
        self.inputs: dict[str, Node] = {}

    def _push(self, value, op, parents, backward=None) -> Node:
        needs = self.record and any(p.needs_grad for p in parents)
        node = Node(value, op, tuple(parents), needs)
        if needs:
            node._backward = backward
        if self.record:
            self.nodes.append(node)
        return node

    # -- entry points ------------------------------------------------------

    def input(self, value, name=None, requires_grad=False) -> Node:
        node = Node(np.asarray(value), "input", (), requires_grad and self.record, name)
        self.nodes.append(node)
        if name is not None:
            self.inputs[name] = node
        return node

    # -- operations --------------------------------------------------------

    def matmul(self, x: Node, W: Node) -> Node:
        """``x @ W.T`` for ``x`` of shape (B, c_in) and ``W`` of shape (c_out, c_in)."""
        if x.value.ndim != 2 or W.value.ndim != 2 or x.value.shape[1] != W.value.shape[1]:
            raise GraphError(f"matmul shape mismatch: x{x.value.shape} vs W{W.value.shape}")
        out = x.value @ W.value.T

        def backward(node):
            g = node.grad
            if x.needs_grad:
                x._accumulate(g @ W.value)
            if W.needs_grad:
                W._accumulate(g.T @ x.value)

        return self._push(out, "matmul", (x, W), backward)

    def add_bias(self, x: Node, b: Node) -> Node:
        if b.value.ndim != 1 or x.value.shape[1] != b.value.shape[0]:
            raise GraphError(f"bias shape mismatch: x{x.value.shape} vs b{b.value.shape}")
        out = x.value + b.value

        def backward(node):
            if x.needs_grad:
                x._accumulate(node.grad)
            if b.needs_grad:
                b._accumulate(node.grad.sum(axis=0))

        return self._push(out, "add_bias", (x, b), backward)

    def linear(self, x: Node, W: Node, b: Node) -> Node:
        return self.add_bias(self.matmul(x, W), b)

    def sine(self, x: Node, omega0: float) -> Node:
        if omega0 <= 0:
            raise ValueError("omega0 must be positive")
        out = np.sin(omega0 * x.value)

        def backward(node):
            x._accumulate(node.grad * (omega0 * np.cos(omega0 * x.value)))

        return self._push(out, "sin_act", (x,), backward)

    def relu(self, x: Node) -> Node:
        mask = x.value > 0
        out = np.where(mask, x.value, 0).astype(x.value.dtype, copy=False)

        def backward(node):
            x._accumulate(node.grad * mask)

        return self._push(out, "relu_act", (x,), backward)

    def scale(self, x: Node, c: float) -> Node:
        out = x.value * c

        def backward(node):
            x._accumulate(node.grad * c)

        return self._push(out, "scale", (x,), backward)

    def concat(self, parts: list[Node]) -> Node:
        """Column-wise concatenation; single-row parts are broadcast over the batch."""
        rows = max(p.value.shape[0] for p in parts)
        vals = []
        for p in parts:
            v = p.value
            if v.ndim != 2:
                raise GraphError(f"concat expects 2-D parts, got {v.shape}")
            if v.shape[0] != rows:
                if v.shape[0] != 1:
                    raise GraphError(f"concat row mismatch: {v.shape[0]} vs {rows}")
                v = np.broadcast_to(v, (rows, v.shape[1]))
            vals.append(v)
        out = np.concatenate(vals, axis=1)
        widths = np.cumsum([0] + [p.value.shape[1] for p in parts])

        def backward(node):
            g = node.grad
            for p, lo, hi in zip(parts, widths[:-1], widths[1:]):
                if not p.needs_grad:
                    continue
                gp = g[:, lo:hi]
                if p.value.shape[0] != rows:
                    gp = gp.sum(axis=0, keepdims=True)
                p._accumulate(gp)

        return self._push(out, "concat", tuple(parts), backward)

    def rotate3(self, points: Node, angles: Node) -> Node:
        """Map every row ``x`` to ``R^T x``, i.e. ``points @ R``."""
        if points.value.ndim != 2 or points.value.shape[1] != 3:
            raise GraphError(f"rotate3 expects (B, 3) points, got {points.value.shape}")
        if angles.value.shape != (3,):
            raise GraphError(f"rotate3 expects 3 angles, got {angles.value.shape}")
        R = euler_matrix(angles.value)
        P = points.value
        out = P @ R.astype(P.dtype)

        def backward(node):
            g = node.grad
            if points.needs_grad:
                points._accumulate(g @ R.T.astype(g.dtype))
            if angles.needs_grad:
                dR = P.T.astype(np.float64) @ g.astype(np.float64)
                derivs = euler_matrix_derivatives(angles.value)
                angles._accumulate(np.array([np.sum(dR * d) for d in derivs]))

        return self._push(out, "rotate3", (points, angles), backward)

    def l1_mean(self, pred: Node, target) -> Node:
        """Mean absolute error against a constant target; ``sign(0)`` is 0."""
        p = pred.value.reshape(-1)
        t = np.asarray(target).reshape(-1)
        if p.shape != t.shape:
            raise GraphError(f"l1_mean length mismatch: {p.shape} vs {t.shape}")
        if p.size == 0:
            raise GraphError("l1_mean over an empty batch")
        diff = p - t.astype(p.dtype, copy=False)
        out = np.array([[np.mean(np.abs(diff), dtype=np.float64)]])

        def backward(node):
            g = float(node.grad[0, 0])
            pred._accumulate((np.sign(diff) * (g / p.size)).reshape(pred.value.shape).astype(pred.value.dtype))

        return self._push(out, "l1_mean", (pred,), backward)

    def sum_squares(self, x: Node, c: float = 1.0) -> Node:
        """``c * sum(x**2)`` as a scalar node."""
        v = np.asarray(x.value, dtype=np.float64)
        out = np.array([[c * np.sum(v * v)]])

        def backward(node):
            x._accumulate((2.0 * c * float(node.grad[0, 0])) * x.value)

        return self._push(out, "sum_squares", (x,), backward)

    def add(self, *terms: Node) -> Node:
        """Sum of scalar nodes."""
        for s in terms:
            if s.value.shape != (1, 1):
                raise GraphError("add expects scalar (1, 1) nodes")
        out = np.array([[sum(float(s.value[0, 0]) for s in terms)]])

        def backward(node):
            for s in terms:
                if s.needs_grad:
                    s._accumulate(node.grad.copy())

        return self._push(out, "add", terms, backward)

    # -- reverse sweep -----------------------------------------------------

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Populate ``grad`` on every node and return the gradients of named inputs."""
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        for n in self.nodes:
            n.grad = None
        loss.grad = np.ones_like(loss.value, dtype=np.float64)
        for n in reversed(self.nodes):
            if n.grad is not None and n._backward is not None:
                n._backward(n)
        for n in self.nodes:
            if n.op == "input" and n.grad is None:
                n.grad = np.zeros_like(n.value)
        return {name: node.grad for name, node in self.inputs.items()}


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-5

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # scaled by the tensor's largest gradient entry, so near-zero entries
    # do not dominate through round-off in the finite differences
    denom = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if denom == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / denom)


def check_gradients(
    build: Callable[[Tape, dict[str, Node]], Node],
    params: dict[str, np.ndarray],
    tol: float = 1e-5,
    h: float = 1e-6,
    tape_factory: Callable[[], Tape] = Tape,
) -> GradCheckReport:
    """Compare tape gradients with central finite differences.

    ``build(tape, nodes)`` must return a scalar loss node given input nodes
    created from ``params`` (all float64). The relative error of each input
    is ``max|analytic - numeric| / max(|analytic|, |numeric|)``.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values, record):
        tape = tape_factory() if record else Tape(record=False)
        nodes = {k: tape.input(v, name=k, requires_grad=True) for k, v in values.items()}
        loss = build(tape, nodes)
        return tape, loss

    tape, loss = evaluate(params, record=True)
    analytic = tape.backward(loss)

    report = GradCheckReport(0.0, tol=tol)
    for name, value in params.items():
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            _, lp = evaluate(params, record=False)
            flat[i] = orig - h
            _, lm = evaluate(params, record=False)
            flat[i] = orig
            nflat[i] = (float(lp.value[0, 0]) - float(lm.value[0, 0])) / (2 * h)
        err = _rel_error(np.asarray(analytic[name], dtype=np.float64), numeric)
        report.per_input[name] = err
        report.max_rel_error = max(report.max_rel_error, err)
    return report
