"""Minimal dense-tensor autodiff engine.

Small reverse-mode engine over float64 numpy arrays: a :class:`Graph` is an
append-only list of nodes (leaves and operations), forward evaluation caches
node values, and ``backward`` accumulates vector-Jacobian products back to
every trainable leaf. The op set is the closed set needed by the victim
localization networks and the perturbation objective; it is not a general
autodiff library.

Gradients are exact (they are checked against central finite differences in
the test suite) and evaluation is deterministic: the same leaf values produce
bit-identical outputs.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, GraphError

Tensor = np.ndarray  # float64, C-order


def _as_tensor(value) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(value, dtype=np.float64))
    if not np.all(np.isfinite(arr)):
        raise ContractError("tensor values must be finite (no NaN/Inf)")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class _Node:
    __slots__ = ("op", "inputs", "value", "meta", "aux")

    def __init__(self, op, inputs=(), value=None, meta=None):
        self.op = op
        self.inputs = tuple(inputs)
        self.value = value
        self.meta = meta or {}
        self.aux = None  # forward-pass scratch reused by the backward pass

    def describe(self, nid):
        ins = ",".join(f"#{i}" for i in self.inputs)
        return f"#{nid}:{self.op}({ins})"


class Graph:
    """Append-only computation graph.

    Builder methods append one node and return its integer id. Leaves are the
    only mutable nodes (via :meth:`set_value`); everything downstream is
    recomputed by :meth:`evaluate`. A graph is single-owner: share the arrays
    it produces, not the graph itself.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.parameters: set[int] = set()
        self._mutations = 0
        self._evaluated_at: dict[int, int] = {}
        self._schedules: dict[int, list[int]] = {}

    # -- construction -----------------------------------------------------

    def _append(self, node: _Node) -> int:
        self.nodes.append(node)
        self._schedules.clear()
        return len(self.nodes) - 1

    def _check(self, *ids):
        for i in ids:
            if not (0 <= i < len(self.nodes)):
                raise GraphError(f"node id #{i} does not exist")

    def leaf(self, value, parameter: bool = False) -> int:
        nid = self._append(_Node("leaf", value=_as_tensor(value)))
        if parameter:
            self.parameters.add(nid)
        return nid

    def constant(self, value) -> int:
        return self.leaf(value, parameter=False)

    def set_value(self, nid: int, value) -> None:
        """Replace a leaf's value; downstream caches become stale."""
        self._check(nid)
        if self.nodes[nid].op != "leaf":
            raise ContractError(f"set_value only applies to leaves, not {self.nodes[nid].describe(nid)}")
        self.nodes[nid].value = _as_tensor(value)
        self._mutations += 1

    def value(self, nid: int) -> np.ndarray:
        self._check(nid)
        return self.nodes[nid].value

    # binary ops

    def add(self, a: int, b: int) -> int:
        self._check(a, b)
        return self._append(_Node("add", (a, b)))

    def sub(self, a: int, b: int) -> int:
        self._check(a, b)
        return self._append(_Node("sub", (a, b)))

    def mul(self, a: int, b: int) -> int:
        self._check(a, b)
        return self._append(_Node("mul", (a, b)))

    def matmul(self, a: int, b: int) -> int:
        self._check(a, b)
        return self._append(_Node("matmul", (a, b)))

    # elementwise unary

    def relu(self, a: int) -> int:
        self._check(a)
        return self._append(_Node("relu", (a,)))

    def hinge(self, a: int) -> int:
        """Positive part max(x, 0); same node kind as relu."""
        return self.relu(a)

    def sigmoid(self, a: int) -> int:
        self._check(a)
        return self._append(_Node("sigmoid", (a,)))

    def tanh(self, a: int) -> int:
        self._check(a)
        return self._append(_Node("tanh", (a,)))

    def tanh_reparam(self, xi: int, delta_max: float) -> int:
        """Map unconstrained weights into the open box (1-delta_max, 1+delta_max).

        Computes tanh(xi) * delta_max + 1 elementwise, so every output lies
        strictly inside the box for any finite input.
        """
        self._check(xi)
        if not (0.0 < delta_max < 1.0):
            raise ContractError(f"delta_max must lie in (0, 1), got {delta_max}")
        return self._append(_Node("tanh_reparam", (xi,), meta={"delta_max": float(delta_max)}))

    # reductions and shape ops

    def sum(self, a: int, axis=None) -> int:
        self._check(a)
        return self._append(_Node("sum", (a,), meta={"axis": axis}))

    def mean(self, a: int, axis=None) -> int:
        self._check(a)
        return self._append(_Node("mean", (a,), meta={"axis": axis}))

    def l2norm(self, a: int, axis=None) -> int:
        """Euclidean norm over the whole tensor (axis=None) or one axis."""
        self._check(a)
        return self._append(_Node("l2norm", (a,), meta={"axis": axis}))

    def adjacent_diff(self, a: int) -> int:
        """Differences between consecutive entries along the last axis."""
        self._check(a)
        return self._append(_Node("adjacent_diff", (a,)))

    def reshape(self, a: int, shape) -> int:
        self._check(a)
        return self._append(_Node("reshape", (a,), meta={"shape": tuple(shape)}))

    def transpose(self, a: int, axes) -> int:
        self._check(a)
        return self._append(_Node("transpose", (a,), meta={"axes": tuple(axes)}))

    def minmax_norm(self, a: int) -> int:
        """Rescale each row (last axis) to [0, 1]; constant rows map to 0.5."""
        self._check(a)
        return self._append(_Node("minmax_norm", (a,)))

    # -- forward ----------------------------------------------------------

    def _schedule(self, root: int) -> list[int]:
        """Ancestors of root (root included), in evaluation order."""
        if root in self._schedules:
            return self._schedules[root]
        needed = set()
        stack = [root]
        while stack:
            nid = stack.pop()
            if nid in needed:
                continue
            needed.add(nid)
            stack.extend(self.nodes[nid].inputs)
        order = sorted(needed)
        self._schedules[root] = order
        return order

    def evaluate(self, root: int) -> np.ndarray:
        """Forward-evaluate `root`, caching every intermediate for backward."""
        self._check(root)
        for nid in self._schedule(root):
            node = self.nodes[nid]
            if node.op == "leaf":
                if node.value is None:
                    raise GraphError(f"leaf {node.describe(nid)} has no value")
                continue
            args = [self.nodes[i].value for i in node.inputs]
            try:
                node.value = _FORWARD[node.op](node, *args)
            except (ValueError, TypeError) as exc:
                raise GraphError(f"cannot evaluate {node.describe(nid)}: {exc}") from exc
        self._evaluated_at[root] = self._mutations
        return self.nodes[root].value

    # -- reverse-mode -----------------------------------------------------

    def backward(self, root: int) -> dict[int, np.ndarray]:
        """Gradients of scalar `root` w.r.t. every parameter leaf.

        Requires a prior :meth:`evaluate` on the same root with the current
        leaf values. The returned map covers every parameter (zeros for
        parameters the root does not depend on) and may include intermediates.
        """
        self._check(root)
        if self._evaluated_at.get(root) != self._mutations:
            raise ContractError("backward() requires evaluate() on this root after the last mutation")
        rv = self.nodes[root].value
        if rv.size != 1:
            raise ContractError(f"backward root must be scalar-shaped, got shape {rv.shape}")

        order = self._schedule(root)
        needs = {}
        for nid in order:
            node = self.nodes[nid]
            if node.op == "leaf":
                needs[nid] = nid in self.parameters
            else:
                needs[nid] = any(needs[i] for i in node.inputs)

        grads: dict[int, np.ndarray] = {root: np.ones_like(rv)}
        for nid in reversed(order):
            if nid not in grads or not needs[nid]:
                continue
            node = self.nodes[nid]
            if node.op == "leaf":
                continue
            args = [self.nodes[i].value for i in node.inputs]
            in_grads = _BACKWARD[node.op](node, grads[nid], *args)
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not needs[inp]:
                    continue
                if inp in grads:
                    grads[inp] = grads[inp] + g
                else:
                    grads[inp] = g
        for pid in self.parameters:
            if pid not in grads:
                grads[pid] = np.zeros_like(self.nodes[pid].value)
        return grads


# -- op table ---------------------------------------------------------------


def _fwd_matmul(node, a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    return a @ b


def _bwd_matmul(node, g, a, b):
    ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
    gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
    return ga, gb


def _fwd_l2norm(node, a):
    return np.sqrt(np.sum(a * a, axis=node.meta["axis"]))


def _bwd_l2norm(node, g, a):
    axis = node.meta["axis"]
    n = node.value
    if axis is not None:
        g = np.expand_dims(g, axis)
        n = np.expand_dims(n, axis)
    return (np.divide(a, n, out=np.zeros_like(a), where=n > 0) * g,)


def _bwd_reduce(node, g, a, scale):
    axis = node.meta["axis"]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape) * scale,)


def _fwd_adjacent_diff(node, a):
    if a.shape[-1] < 2:
        raise ValueError("adjacent_diff needs at least 2 entries on the last axis")
    return np.diff(a, axis=-1)


def _bwd_adjacent_diff(node, g, a):
    da = np.zeros_like(a)
    da[..., 1:] += g
    da[..., :-1] -= g
    return (da,)


def _fwd_minmax_norm(node, a):
    lo = a.min(axis=-1, keepdims=True)
    hi = a.max(axis=-1, keepdims=True)
    span = hi - lo
    flat = span == 0.0
    safe = np.where(flat, 1.0, span)
    out = np.where(flat, 0.5, (a - lo) / safe)
    node.aux = (safe, flat, np.argmin(a, axis=-1), np.argmax(a, axis=-1))
    return out


def _bwd_minmax_norm(node, g, a):
    span, flat, imin, imax = node.aux
    y = node.value
    da = g / span
    sum_g = g.sum(axis=-1, keepdims=True)
    sum_gy = (g * y).sum(axis=-1, keepdims=True)
    # row min gets the shift correction, row max the scale correction
    _add_at_last_axis(da, imin, (sum_gy - sum_g) / span)
    _add_at_last_axis(da, imax, -sum_gy / span)
    if flat.any():
        da = np.where(flat, 0.0, da)
    return (da,)


def _add_at_last_axis(arr, idx, val):
    idx = np.expand_dims(idx, -1)
    np.put_along_axis(arr, idx, np.take_along_axis(arr, idx, -1) + val, -1)


def _fwd_sigmoid(node, a):
    # exp overflow for large |a| saturates to exactly 0.0 or 1.0, which is fine
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-a))


def _open_box(values, delta_max):
    # float64 tanh saturates to exactly +/-1 for |x| > ~19 and the final add
    # can round onto 1 +/- delta_max; nudge one ulp inward so the box stays open
    lo = np.nextafter(1.0 - delta_max, 1.0)
    hi = np.nextafter(1.0 + delta_max, -1.0)
    return np.clip(values, lo, hi)


def _fwd_tanh_reparam(node, x):
    d = node.meta["delta_max"]
    return _open_box(np.tanh(x) * d + 1.0, d)


def _bwd_tanh_reparam(node, g, x):
    d = node.meta["delta_max"]
    t = (node.value - 1.0) / d
    return (g * d * (1.0 - t * t),)


_FORWARD = {
    "add": lambda node, a, b: a + b,
    "sub": lambda node, a, b: a - b,
    "mul": lambda node, a, b: a * b,
    "matmul": _fwd_matmul,
    "relu": lambda node, a: np.maximum(a, 0.0),
    "sigmoid": _fwd_sigmoid,
    "tanh": lambda node, a: np.tanh(a),
    "tanh_reparam": _fwd_tanh_reparam,
    "sum": lambda node, a: np.sum(a, axis=node.meta["axis"]),
    "mean": lambda node, a: np.mean(a, axis=node.meta["axis"]),
    "l2norm": _fwd_l2norm,
    "adjacent_diff": _fwd_adjacent_diff,
    "reshape": lambda node, a: a.reshape(node.meta["shape"]),
    "transpose": lambda node, a: np.ascontiguousarray(a.transpose(node.meta["axes"])),
    "minmax_norm": _fwd_minmax_norm,
}

_BACKWARD = {
    "add": lambda node, g, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    "sub": lambda node, g, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    "mul": lambda node, g, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
    "matmul": _bwd_matmul,
    "relu": lambda node, g, a: (g * (a > 0.0),),
    "sigmoid": lambda node, g, a: (g * node.value * (1.0 - node.value),),
    "tanh": lambda node, g, a: (g * (1.0 - node.value * node.value),),
    "tanh_reparam": _bwd_tanh_reparam,
    "sum": lambda node, g, a: _bwd_reduce(node, g, a, 1.0),
    "mean": lambda node, g, a: _bwd_reduce(node, g, a, float(node.value.size) / a.size),
    "l2norm": _bwd_l2norm,
    "adjacent_diff": _bwd_adjacent_diff,
    "reshape": lambda node, g, a: (g.reshape(a.shape),),
    "transpose": lambda node, g, a: (g.transpose(np.argsort(node.meta["axes"])),),
    "minmax_norm": _bwd_minmax_norm,
}


# -- module-level spec surface ------------------------------------------------


def evaluate(graph: Graph, root: int) -> np.ndarray:
    return graph.evaluate(root)


def backward(graph: Graph, root: int) -> dict[int, np.ndarray]:
    return graph.backward(root)


def sgd_step(graph: Graph, grads: dict[int, np.ndarray], eta: float) -> None:
    """Plain gradient step p <- p - eta * grad(p) on every parameter leaf."""
    if not eta > 0:
        raise ContractError(f"learning rate must be positive, got {eta}")
    for pid in sorted(graph.parameters):
        if pid not in grads:
            raise ContractError(f"missing gradient for parameter node #{pid}")
        node = graph.nodes[pid]
        g = grads[pid]
        if g.shape != node.value.shape:
            raise ContractError(
                f"gradient shape {g.shape} does not match parameter #{pid} shape {node.value.shape}"
            )
        node.value = node.value - eta * g
    graph._mutations += 1


def tanh_reparam(xi, delta_max: float) -> np.ndarray:
    """Array version of the box transform: tanh(xi) * delta_max + 1.

    Every output lies strictly inside (1 - delta_max, 1 + delta_max) for any
    finite input, including inputs deep in the tanh saturation regime.
    """
    if not (0.0 < delta_max < 1.0):
        raise ContractError(f"delta_max must lie in (0, 1), got {delta_max}")
    return _open_box(np.tanh(np.asarray(xi, dtype=np.float64)) * delta_max + 1.0, delta_max)
