"""Scalar expression tapes with reverse-mode differentiation.

Expressions are built from :class:`Node` handles on a shared :class:`Tape`.
First derivatives come from a numeric reverse sweep.  Higher derivatives
come from :func:`record_gradient`, which writes the adjoint expressions back
onto the same tape so the result is differentiable again.

Derivatives at kinks use fixed one-sided conventions so every run agrees:
relu'(0) = 0, abs'(0) = 0, and max routes its derivative to the first
argument on ties.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping

import numpy as np

from . import _kernels as _k


class TapeError(ValueError):
    """Malformed use of a tape: mixed tapes, bad roots, stale buffers."""


class MissingBindingError(TapeError):
    """A leaf reachable from the evaluation root was left unbound."""


class Node:
    """Handle to one tape entry.  Identity equality; never copied."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    def __repr__(self) -> str:
        return f"Node({self.tape.op_name(self.index)}@{self.index})"

    # Arithmetic sugar.  Plain numbers are wrapped as constants.
    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.neg(self)

    def __sub__(self, other):
        return self.tape.add(self, self.tape.neg(self.tape.wrap(other)))

    def __rsub__(self, other):
        return self.tape.add(self.tape.wrap(other), self.tape.neg(self))

    def exp(self):
        return self.tape.exp(self)

    def log(self):
        return self.tape.log(self)

    def tanh(self):
        return self.tape.tanh(self)

    def relu(self):
        return self.tape.relu(self)

    def abs(self):
        return self.tape.abs(self)


_OP_NAMES = {
    _k.OP_CONST: "const",
    _k.OP_PARAM: "param",
    _k.OP_INPUT: "input",
    _k.OP_ADD: "add",
    _k.OP_MUL: "mul",
    _k.OP_NEG: "neg",
    _k.OP_EXP: "exp",
    _k.OP_LOG: "log",
    _k.OP_TANH: "tanh",
    _k.OP_RELU: "relu",
    _k.OP_MAX: "max",
    _k.OP_ABS: "abs",
    _k.OP_SIGN: "sign",
    _k.OP_STEPGT: "stepgt",
    _k.OP_STEPGE: "stepge",
    _k.OP_RECIP: "recip",
}


class Tape:
    """Append-only list of scalar operations in topological order."""

    def __init__(self):
        self._ops: list[int] = []
        self._p1: list[int] = []
        self._p2: list[int] = []
        self._base: list[float] = []  # constant value per row, 0 elsewhere
        self._nodes: list[Node] = []
        self._param_rows: list[int] = []
        self._input_rows: list[int] = []
        self._input_names: dict[int, str] = {}
        self._const_cache: dict[float, Node] = {}
        self._arrays: tuple[np.ndarray, ...] | None = None
        self._last_values: np.ndarray | None = None
        self._reach_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._record_cache: dict[int, dict[int, int]] = {}

    def __len__(self) -> int:
        return len(self._ops)

    @property
    def n_nodes(self) -> int:
        return len(self._ops)

    def op_name(self, index: int) -> str:
        return _OP_NAMES[self._ops[index]]

    def parameters(self) -> list[Node]:
        return [self._nodes[i] for i in self._param_rows]

    def inputs(self) -> list[Node]:
        return [self._nodes[i] for i in self._input_rows]

    def input_name(self, node: Node) -> str:
        return self._input_names[node.index]

    # -- construction -------------------------------------------------

    def _emit(self, op: int, a: int = -1, b: int = -1, value: float = 0.0) -> Node:
        self._ops.append(op)
        self._p1.append(a)
        self._p2.append(b)
        self._base.append(value)
        node = Node(self, len(self._ops) - 1)
        self._nodes.append(node)
        self._arrays = None
        return node

    def constant(self, value: float) -> Node:
        value = float(value)
        node = self._const_cache.get(value)
        if node is None:
            node = self._emit(_k.OP_CONST, value=value)
            self._const_cache[value] = node
        return node

    def parameter(self) -> Node:
        node = self._emit(_k.OP_PARAM)
        self._param_rows.append(node.index)
        return node

    def input(self, name: str | None = None) -> Node:
        node = self._emit(_k.OP_INPUT)
        self._input_rows.append(node.index)
        self._input_names[node.index] = name if name is not None else f"in{len(self._input_rows) - 1}"
        return node

    def wrap(self, value) -> Node:
        if isinstance(value, Node):
            if value.tape is not self:
                raise TapeError("cannot combine nodes from different tapes")
            return value
        return self.constant(value)

    def _binary(self, op: int, a, b) -> Node:
        a = self.wrap(a)
        b = self.wrap(b)
        return self._emit(op, a.index, b.index)

    def _unary(self, op: int, a) -> Node:
        a = self.wrap(a)
        return self._emit(op, a.index)

    def add(self, a, b) -> Node:
        return self._binary(_k.OP_ADD, a, b)

    def mul(self, a, b) -> Node:
        return self._binary(_k.OP_MUL, a, b)

    def max(self, a, b) -> Node:
        return self._binary(_k.OP_MAX, a, b)

    def neg(self, a) -> Node:
        return self._unary(_k.OP_NEG, a)

    def exp(self, a) -> Node:
        return self._unary(_k.OP_EXP, a)

    def log(self, a) -> Node:
        return self._unary(_k.OP_LOG, a)

    def tanh(self, a) -> Node:
        return self._unary(_k.OP_TANH, a)

    def relu(self, a) -> Node:
        return self._unary(_k.OP_RELU, a)

    def abs(self, a) -> Node:
        return self._unary(_k.OP_ABS, a)

    def sum(self, nodes: Iterable[Node]) -> Node:
        """Left-to-right chained sum; empty sums are the constant 0."""
        total: Node | None = None
        for node in nodes:
            total = node if total is None else self.add(total, node)
        return total if total is not None else self.constant(0.0)

    # -- numeric evaluation -------------------------------------------

    def frozen_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        if self._arrays is None:
            self._arrays = (
                np.asarray(self._ops, dtype=np.int64),
                np.asarray(self._p1, dtype=np.int64),
                np.asarray(self._p2, dtype=np.int64),
                np.asarray(self._base, dtype=np.float64),
            )
        return self._arrays

    def _resolve_root(self, root: Node | None) -> int:
        if root is None:
            if not self._ops:
                raise TapeError("tape is empty")
            return len(self._ops) - 1
        if root.tape is not self:
            raise TapeError("root node belongs to a different tape")
        return root.index

    def required_leaves(self, root_index: int) -> tuple[np.ndarray, np.ndarray]:
        """Parameter and input rows reachable from ``root_index``."""
        cached = self._reach_cache.get(root_index)
        if cached is not None:
            return cached
        seen = np.zeros(root_index + 1, dtype=bool)
        stack = [root_index]
        seen[root_index] = True
        params = []
        inputs = []
        while stack:
            i = stack.pop()
            op = self._ops[i]
            if op == _k.OP_PARAM:
                params.append(i)
            elif op == _k.OP_INPUT:
                inputs.append(i)
            elif op >= _k.N_LEAF_OPS:
                for p in (self._p1[i], self._p2[i]):
                    if p >= 0 and not seen[p]:
                        seen[p] = True
                        stack.append(p)
        result = (np.asarray(sorted(params), dtype=np.int64), np.asarray(sorted(inputs), dtype=np.int64))
        self._reach_cache[root_index] = result
        return result

    def _column_for(self, root_index: int, bindings: Mapping[Node, float]) -> np.ndarray:
        ops, p1, p2, base = self.frozen_arrays()
        vals = base.copy().reshape(-1, 1)
        bound = set()
        for node, value in bindings.items():
            if node.tape is not self:
                raise TapeError("binding key belongs to a different tape")
            op = self._ops[node.index]
            if op == _k.OP_CONST:
                raise TapeError("constants cannot be rebound")
            vals[node.index, 0] = float(value)
            bound.add(node.index)
        params, inputs = self.required_leaves(root_index)
        for rows, kind in ((params, "parameter"), (inputs, "input")):
            for i in rows:
                if i not in bound:
                    label = self._input_names.get(int(i), f"#{int(i)}")
                    raise MissingBindingError(
                        f"{kind} leaf {label} (node {int(i)}) is reachable from the root but unbound"
                    )
        _k.forward_pass(ops, p1, p2, vals)
        return vals

    def extend_values(self, values: np.ndarray) -> np.ndarray:
        """Re-run the forward pass after the tape grew past ``values``.

        Rows present in ``values`` keep their leaf bindings; new rows are
        recorded expressions and constants, which need no bindings.
        """
        ops, p1, p2, base = self.frozen_arrays()
        full = base.copy().reshape(-1, 1)
        full[: values.shape[0], 0] = values
        _k.forward_pass(ops, p1, p2, full)
        return full

    # -- gradient recording (graph on graph) --------------------------

    def record_adjoints(self, root_index: int) -> dict[int, int]:
        """Build adjoint expressions of ``root_index`` onto this tape.

        Returns a map from node row to the row holding its adjoint
        expression.  Nodes unreachable from the root are absent.  Results
        are cached per root; the recorded subgraph only references rows
        that already existed, so later tape growth cannot invalidate it.
        """
        cached = self._record_cache.get(root_index)
        if cached is not None:
            return cached

        reach = np.zeros(root_index + 1, dtype=bool)
        reach[root_index] = True
        for i in range(root_index, -1, -1):
            if not reach[i] or self._ops[i] < _k.N_LEAF_OPS:
                continue
            for p in (self._p1[i], self._p2[i]):
                if p >= 0:
                    reach[p] = True

        one = self.constant(1.0)
        adj: dict[int, Node] = {root_index: one}

        def accumulate(row: int, contribution: Node) -> None:
            existing = adj.get(row)
            adj[row] = contribution if existing is None else self.add(existing, contribution)

        for i in range(root_index, -1, -1):
            if not reach[i]:
                continue
            op = self._ops[i]
            g = adj.get(i)
            if g is None or op < _k.N_LEAF_OPS:
                continue
            if op in (_k.OP_SIGN, _k.OP_STEPGT, _k.OP_STEPGE):
                continue  # locally constant by the kink conventions
            a = self._p1[i]
            b = self._p2[i]
            node_a = self._nodes[a]
            out = self._nodes[i]
            if op == _k.OP_ADD:
                accumulate(a, g)
                accumulate(b, g)
            elif op == _k.OP_MUL:
                accumulate(a, self.mul(g, self._nodes[b]))
                accumulate(b, self.mul(g, node_a))
            elif op == _k.OP_NEG:
                accumulate(a, self.neg(g))
            elif op == _k.OP_EXP:
                accumulate(a, self.mul(g, out))
            elif op == _k.OP_LOG:
                accumulate(a, self.mul(g, self._emit(_k.OP_RECIP, a)))
            elif op == _k.OP_TANH:
                accumulate(a, self.mul(g, one - self.mul(out, out)))
            elif op == _k.OP_RELU:
                accumulate(a, self.mul(g, self._emit(_k.OP_STEPGT, a)))
            elif op == _k.OP_MAX:
                first = self._emit(_k.OP_STEPGE, a, b)
                accumulate(a, self.mul(g, first))
                accumulate(b, self.mul(g, one - first))
            elif op == _k.OP_ABS:
                accumulate(a, self.mul(g, self._emit(_k.OP_SIGN, a)))
            elif op == _k.OP_RECIP:
                accumulate(a, self.neg(self.mul(self.mul(g, out), out)))

        result = {row: node.index for row, node in adj.items()}
        self._record_cache[root_index] = result
        return result


class GradientVector(Mapping):
    """Gradient entries keyed by leaf node; unreachable leaves read 0."""

    def __init__(self, entries: dict[Node, float]):
        self._entries = entries

    def __getitem__(self, node: Node) -> float:
        return self._entries[node]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def as_array(self) -> np.ndarray:
        return np.asarray(list(self._entries.values()), dtype=np.float64)


class ColumnBatch:
    """Reusable (n_nodes, width) value/adjoint buffers for one tape.

    The tape must not grow between construction and use; record every
    gradient before allocating the buffers.
    """

    def __init__(self, tape: Tape, width: int):
        self.tape = tape
        self.width = int(width)
        self._n = tape.n_nodes
        ops, p1, p2, base = tape.frozen_arrays()
        self._ops, self._p1, self._p2 = ops, p1, p2
        self.values = np.repeat(base.reshape(-1, 1), self.width, axis=1)
        self.adjoints = np.zeros((self._n, self.width))

    def _check(self) -> None:
        if self.tape.n_nodes != self._n:
            raise TapeError("tape grew after this batch buffer was created")

    def bind(self, rows: np.ndarray, values: np.ndarray) -> None:
        self.values[rows, :] = values

    def forward(self) -> None:
        self._check()
        _k.forward_pass(self._ops, self._p1, self._p2, self.values)

    def backward(self, seed_rows: np.ndarray, seeds: np.ndarray, start: int | None = None) -> np.ndarray:
        self._check()
        self.adjoints[:] = 0.0
        self.adjoints[seed_rows, :] = seeds
        top = self._n - 1 if start is None else start
        _k.backward_pass(self._ops, self._p1, self._p2, self.values, self.adjoints, top)
        return self.adjoints


def evaluate(tape: Tape, bindings: Mapping[Node, float], root: Node | None = None) -> float:
    """Forward-evaluate ``root`` (default: last node) under ``bindings``."""
    root_index = tape._resolve_root(root)
    vals = tape._column_for(root_index, bindings)
    tape._last_values = vals[:, 0].copy()
    return float(vals[root_index, 0])


def _ensure_values(tape: Tape, bindings: Mapping[Node, float] | None, root_index: int) -> np.ndarray:
    if bindings is not None:
        vals = tape._column_for(root_index, bindings)
        tape._last_values = vals[:, 0].copy()
        return vals[:, 0]
    if tape._last_values is None:
        raise TapeError("evaluate the tape before asking for gradients, or pass bindings")
    return tape._last_values


def gradient(
    tape: Tape,
    root: Node | None,
    wrt: Iterable[Node],
    bindings: Mapping[Node, float] | None = None,
) -> GradientVector:
    """Reverse-mode d(root)/d(wrt) at the last evaluated (or given) point."""
    root_index = tape._resolve_root(root)
    values = _ensure_values(tape, bindings, root_index)
    if values.shape[0] < tape.n_nodes:
        values = tape.extend_values(values)[:, 0]
        tape._last_values = values
    ops, p1, p2, _ = tape.frozen_arrays()
    adj = np.zeros((tape.n_nodes, 1))
    adj[root_index, 0] = 1.0
    _k.backward_pass(ops, p1, p2, values.reshape(-1, 1), adj, root_index)
    return GradientVector({node: float(adj[node.index, 0]) for node in wrt})


def record_gradient(tape: Tape, root: Node | None, wrt: Iterable[Node]) -> dict[Node, Node]:
    """Record adjoint expressions of ``root`` onto the tape.

    Returns one differentiable node per requested leaf; leaves the root
    never touches map to the constant 0.
    """
    root_index = tape._resolve_root(root)
    adj = tape.record_adjoints(root_index)
    out: dict[Node, Node] = {}
    for node in wrt:
        if node.tape is not tape:
            raise TapeError("wrt node belongs to a different tape")
        row = adj.get(node.index)
        out[node] = tape._nodes[row] if row is not None else tape.constant(0.0)
    return out


def second_order(
    tape: Tape,
    root: Node | None,
    wrt_first: Node,
    wrt_second: Iterable[Node],
    bindings: Mapping[Node, float] | None = None,
) -> GradientVector:
    """d/d(wrt_second) of the recorded d(root)/d(wrt_first)."""
    root_index = tape._resolve_root(root)
    values = _ensure_values(tape, bindings, root_index)
    grad_node = record_gradient(tape, root, [wrt_first])[wrt_first]
    full = tape.extend_values(values)
    tape._last_values = full[:, 0]
    ops, p1, p2, _ = tape.frozen_arrays()
    adj = np.zeros_like(full)
    adj[grad_node.index, 0] = 1.0
    _k.backward_pass(ops, p1, p2, full, adj, grad_node.index)
    return GradientVector({node: float(adj[node.index, 0]) for node in wrt_second})


def input_hessian(
    tape: Tape,
    root: Node | None,
    inputs: list[Node],
    bindings: Mapping[Node, float] | None = None,
) -> np.ndarray:
    """Symmetrized Hessian of ``root`` with respect to ``inputs``.

    One recording pass yields all first-derivative nodes; each Hessian row
    is then a numeric reverse sweep from one of them.  The raw matrix is
    averaged with its transpose so kink conventions cannot leave an
    asymmetric result.
    """
    root_index = tape._resolve_root(root)
    values = _ensure_values(tape, bindings, root_index)
    grads = record_gradient(tape, root, inputs)
    full = tape.extend_values(values)
    tape._last_values = full[:, 0]
    ops, p1, p2, _ = tape.frozen_arrays()
    d = len(inputs)
    hess = np.zeros((d, d))
    adj = np.zeros_like(full)
    for i, node in enumerate(inputs):
        g = grads[node]
        adj[:] = 0.0
        adj[g.index, 0] = 1.0
        _k.backward_pass(ops, p1, p2, full, adj, g.index)
        for j, other in enumerate(inputs):
            hess[i, j] = adj[other.index, 0]
    return 0.5 * (hess + hess.T)
