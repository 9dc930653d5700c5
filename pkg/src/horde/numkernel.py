"""Static reverse-mode differentiation over a fixed op vocabulary.

A :class:`Graph` is built once per configuration (inputs, parameters,
constants and op nodes appended in topological order), then evaluated with
:meth:`Graph.forward` and differentiated with :meth:`Graph.backward`.
All values are float64 numpy arrays.
"""
from __future__ import annotations

import contextlib
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import kernels

NORM_EPS = 1e-12


class GraphError(Exception):
    """Malformed graph or illegal use of one."""


class ShapeError(GraphError, ValueError):
    """Operand shapes rejected by an op; the message names the node."""


class StateError(GraphError):
    """Operation called in the wrong order (e.g. backward before forward)."""


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        # shares storage with a float64 caller array so optimizers can update in place
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return int(self.value.size)


class Node:
    __slots__ = ("graph", "id", "op", "inputs", "attrs", "name", "scope", "needs_grad")

    def __init__(self, graph, id, op, inputs, attrs, name, scope, needs_grad):
        self.graph = graph
        self.id = id
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.name = name
        self.scope = scope
        self.needs_grad = needs_grad

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node #{self.id} {self.op}{label}>"

    def _lift(self, other):
        if isinstance(other, Node):
            return other
        return self.graph.constant(other)

    def __add__(self, other):
        if np.isscalar(other):
            return self.graph.shift(self, other)
        return self.graph.add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        if np.isscalar(other):
            return self.graph.shift(self, -other)
        return self.graph.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.shift(self.graph.scale(self, -1.0), other)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.graph.scale(self, other)
        return self.graph.hadamard(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise GraphError("only division by a scalar is supported")
        return self.graph.scale(self, 1.0 / other)

    def __neg__(self):
        return self.graph.scale(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, self._lift(other))


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- op table: forward(values, attrs, cache) and backward(g, values, out, attrs, cache)


def _fwd_matmul(v, a, cache):
    x, w = v
    if w.ndim == 2 and x.ndim > 2:
        return (x.reshape(-1, x.shape[-1]) @ w).reshape(*x.shape[:-1], w.shape[1])
    return x @ w


def _bwd_matmul(g, v, out, a, cache):
    x, w = v
    if w.ndim == 2 and x.ndim > 2:
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.T).reshape(x.shape)
        gw = x.reshape(-1, x.shape[-1]).T @ g2
        return [gx, gw]
    if x.ndim == 1 or w.ndim == 1:
        if x.ndim == 1 and w.ndim == 1:
            return [g * w, g * x]
        if x.ndim == 1:
            return [w @ g, np.outer(x, g)]
        return [np.outer(g, w), x.T @ g]
    gx = g @ np.swapaxes(w, -1, -2)
    gw = np.swapaxes(x, -1, -2) @ g
    return [_unbroadcast(gx, x.shape), _unbroadcast(gw, w.shape)]


def _fwd_conv2d(v, a, cache):
    x, w = v
    kh, kw, cin, cout = w.shape
    if x.ndim != 4 or x.shape[3] != cin:
        raise ValueError(f"conv2d expects (B,H,W,{cin}) input, got {x.shape}")
    cols = kernels.im2col(np.ascontiguousarray(x), kh, kw, a["stride"], a["pad"])
    cache["cols"] = cols
    b, ho, wo, k = cols.shape
    return (cols.reshape(-1, k) @ w.reshape(k, cout)).reshape(b, ho, wo, cout)


def _bwd_conv2d(g, v, out, a, cache):
    x, w = v
    kh, kw, cin, cout = w.shape
    cols = cache["cols"]
    k = cols.shape[-1]
    g2 = g.reshape(-1, cout)
    gw = (cols.reshape(-1, k).T @ g2).reshape(w.shape)
    gcols = (g2 @ w.reshape(k, cout).T).reshape(cols.shape)
    gx = kernels.col2im(gcols, x.shape, kh, kw, a["stride"], a["pad"])
    return [gx, gw]


def _fwd_l2n(v, a, cache):
    (x,) = v
    n = np.sqrt(np.sum(x * x, axis=a["axis"], keepdims=True))
    n = np.maximum(n, NORM_EPS)
    cache["norm"] = n
    return x / n


def _bwd_l2n(g, v, out, a, cache):
    n = cache["norm"]
    clamped = n <= NORM_EPS
    proj = np.sum(g * out, axis=a["axis"], keepdims=True)
    proj = np.where(clamped, 0.0, proj)
    return [(g - out * proj) / n]


def _fwd_pdist(v, a, cache):
    (x,) = v
    diff = x[:, None, :] - x[None, :, :]
    return np.einsum("ije,ije->ij", diff, diff)


def _bwd_pdist(g, v, out, a, cache):
    (x,) = v
    s = g + g.T
    return [2.0 * (s.sum(axis=1)[:, None] * x - s @ x)]


def _fwd_mean(v, a, cache):
    return np.mean(v[0], axis=a["axes"])


def _bwd_mean(g, v, out, a, cache):
    x = v[0]
    axes = a["axes"]
    if axes is None:
        return [np.broadcast_to(g / x.size, x.shape).copy()]
    count = int(np.prod([x.shape[i] for i in axes]))
    return [np.broadcast_to(np.expand_dims(g, axes) / count, x.shape).copy()]


def _fwd_sum(v, a, cache):
    return np.sum(v[0], axis=a["axes"])


def _bwd_sum(g, v, out, a, cache):
    x = v[0]
    axes = a["axes"]
    if axes is None:
        return [np.broadcast_to(g, x.shape).copy()]
    return [np.broadcast_to(np.expand_dims(g, axes), x.shape).copy()]


def _bwd_concat(g, v, out, a, cache):
    bounds = np.cumsum([x.shape[a["axis"]] for x in v])[:-1]
    return np.split(g, bounds, axis=a["axis"])


def _bwd_sqrt(g, v, out, a, cache):
    # zero subgradient at 0 (coincident embeddings)
    safe = np.where(out > 0, out, 1.0)
    return [np.where(out > 0, g * 0.5 / safe, 0.0)]


_OPS = {
    "matmul": (_fwd_matmul, _bwd_matmul),
    "hadamard": (
        lambda v, a, c: v[0] * v[1],
        lambda g, v, o, a, c: [_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)],
    ),
    "add": (
        lambda v, a, c: v[0] + v[1],
        lambda g, v, o, a, c: [_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)],
    ),
    "sub": (
        lambda v, a, c: v[0] - v[1],
        lambda g, v, o, a, c: [_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)],
    ),
    "scale": (lambda v, a, c: a["alpha"] * v[0], lambda g, v, o, a, c: [a["alpha"] * g]),
    "shift": (lambda v, a, c: v[0] + a["value"], lambda g, v, o, a, c: [g]),
    "exp": (lambda v, a, c: np.exp(v[0]), lambda g, v, o, a, c: [g * o]),
    "log": (lambda v, a, c: np.log(v[0]), lambda g, v, o, a, c: [g / v[0]]),
    "relu": (lambda v, a, c: np.maximum(v[0], 0.0), lambda g, v, o, a, c: [g * (v[0] > 0)]),
    "square": (lambda v, a, c: v[0] * v[0], lambda g, v, o, a, c: [2.0 * g * v[0]]),
    "sqrt": (lambda v, a, c: np.sqrt(np.maximum(v[0], 0.0)), _bwd_sqrt),
    "softplus": (lambda v, a, c: np.logaddexp(0.0, v[0]), lambda g, v, o, a, c: [g * _sigmoid(v[0])]),
    "conv2d": (_fwd_conv2d, _bwd_conv2d),
    "mean": (_fwd_mean, _bwd_mean),
    "sum": (_fwd_sum, _bwd_sum),
    "l2_normalize": (_fwd_l2n, _bwd_l2n),
    "concat": (lambda v, a, c: np.concatenate(v, axis=a["axis"]), _bwd_concat),
    "reshape": (lambda v, a, c: v[0].reshape(a["shape"]), lambda g, v, o, a, c: [g.reshape(v[0].shape)]),
    "expand_dims": (
        lambda v, a, c: np.expand_dims(v[0], a["axis"]),
        lambda g, v, o, a, c: [np.squeeze(g, axis=a["axis"])],
    ),
    "transpose": (
        lambda v, a, c: np.transpose(v[0], a["axes"]),
        lambda g, v, o, a, c: [np.transpose(g, np.argsort(a["axes"]))],
    ),
    "pairwise_sqdist": (_fwd_pdist, _bwd_pdist),
}

OP_KINDS = tuple(_OPS)
_LEAVES = ("input", "parameter", "constant")


@dataclass
class OpTally:
    """Nodes built and ops executed, across every graph, while active."""

    built: Counter = field(default_factory=Counter)
    executed: Counter = field(default_factory=Counter)
    built_scopes: Counter = field(default_factory=Counter)
    executed_scopes: Counter = field(default_factory=Counter)


_TALLIES: list[OpTally] = []


@contextlib.contextmanager
def op_counter():
    """Count graph construction and execution inside the block, by op and scope."""
    tally = OpTally()
    _TALLIES.append(tally)
    try:
        yield tally
    finally:
        _TALLIES.remove(tally)


class Graph:
    """A static computation graph with a named parameter registry."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Parameter] = {}
        self.inputs: dict[str, Node] = {}
        self.outputs: dict[str, Node] = {}
        self.op_counts: Counter = Counter()
        self._param_nodes: dict[str, Node] = {}
        self._consts: dict[int, np.ndarray] = {}
        self._scope: str | None = None
        self._values: list | None = None
        self._cache: dict[int, dict] = {}
        self._feed: dict | None = None

    # -- construction

    @contextlib.contextmanager
    def scope(self, name: str):
        """Tag every node created inside the block with ``name``."""
        prev = self._scope
        self._scope = name
        try:
            yield
        finally:
            self._scope = prev

    def _append(self, op, inputs=(), name=None, needs_grad=None, **attrs) -> Node:
        for n in inputs:
            if not isinstance(n, Node) or n.graph is not self:
                raise GraphError(f"{op}: operand {n!r} does not belong to this graph")
        if needs_grad is None:
            needs_grad = any(n.needs_grad for n in inputs)
        node = Node(self, len(self.nodes), op, tuple(n.id for n in inputs), attrs, name, self._scope, needs_grad)
        self.nodes.append(node)
        for t in _TALLIES:
            t.built[op] += 1
            t.built_scopes[self._scope] += 1
        self._values = None
        return node

    def input(self, name: str, differentiable: bool = True) -> Node:
        """Declare (or fetch) a named input bound at :meth:`forward` time."""
        if name in self.inputs:
            return self.inputs[name]
        if name in self.params:
            raise GraphError(f"name {name!r} already used by a parameter")
        node = self._append("input", name=name, needs_grad=differentiable)
        self.inputs[name] = node
        return node

    def parameter(self, name: str, value) -> Node:
        if name in self.params or name in self.inputs:
            raise GraphError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value)
        if not np.all(np.isfinite(p.value)):
            raise GraphError(f"parameter {name!r} has non-finite entries")
        self.params[name] = p
        node = self._append("parameter", name=name, needs_grad=True)
        self._param_nodes[name] = node
        return node

    def constant(self, value, name: str | None = None) -> Node:
        node = self._append("constant", name=name, needs_grad=False)
        self._consts[node.id] = np.asarray(value, dtype=np.float64)
        return node

    def output(self, name: str, node: Node) -> Node:
        self.outputs[name] = node
        return node

    def param_node(self, name: str) -> Node:
        return self._param_nodes[name]

    def num_parameters(self, prefix: str = "") -> int:
        return sum(p.size for n, p in self.params.items() if n.startswith(prefix))

    def count_nodes(self, scope: str | None = None, op: str | None = None) -> int:
        return sum(
            1 for n in self.nodes if (scope is None or n.scope == scope) and (op is None or n.op == op)
        )

    # -- op vocabulary

    def matmul(self, a, b):
        return self._append("matmul", (a, b))

    def hadamard(self, a, b):
        return self._append("hadamard", (a, b))

    def add(self, a, b):
        return self._append("add", (a, b))

    def sub(self, a, b):
        return self._append("sub", (a, b))

    def scale(self, a, alpha: float):
        return self._append("scale", (a,), alpha=float(alpha))

    def shift(self, a, value: float):
        return self._append("shift", (a,), value=float(value))

    def exp(self, a):
        return self._append("exp", (a,))

    def log(self, a):
        return self._append("log", (a,))

    def relu(self, a):
        return self._append("relu", (a,))

    def square(self, a):
        return self._append("square", (a,))

    def sqrt(self, a):
        """Square root of a nonnegative input; derivative taken as 0 at 0."""
        return self._append("sqrt", (a,))

    def softplus(self, a):
        return self._append("softplus", (a,))

    def conv2d(self, x, w, stride: int = 1, pad: int = 0):
        """NHWC convolution with an HWIO kernel."""
        return self._append("conv2d", (x, w), stride=int(stride), pad=int(pad))

    def mean(self, a, axes=None):
        return self._append("mean", (a,), axes=_axes(axes))

    def sum(self, a, axes=None):
        return self._append("sum", (a,), axes=_axes(axes))

    def l2_normalize(self, a, axis: int = -1):
        return self._append("l2_normalize", (a,), axis=int(axis))

    def concat(self, nodes, axis: int = -1):
        return self._append("concat", tuple(nodes), axis=int(axis))

    def reshape(self, a, shape):
        return self._append("reshape", (a,), shape=tuple(int(s) for s in shape))

    def expand_dims(self, a, axis: int):
        return self._append("expand_dims", (a,), axis=int(axis))

    def transpose(self, a, axes=None):
        if axes is None:
            axes = (1, 0)
        return self._append("transpose", (a,), axes=tuple(axes))

    def pairwise_sqdist(self, a):
        """(B, E) -> (B, B) squared Euclidean distances, computed from differences."""
        return self._append("pairwise_sqdist", (a,))

    # -- evaluation

    def forward(self, inputs: dict | None = None) -> dict:
        """Evaluate every node; return the values of the declared outputs.

        If no outputs were declared, the sink nodes (nodes nobody consumes)
        are returned under their name or ``"node<id>"``.
        """
        inputs = dict(inputs or {})
        missing = [n for n in self.inputs if n not in inputs]
        if missing:
            raise GraphError(f"unbound graph inputs: {missing}")
        values: list = [None] * len(self.nodes)
        cache: dict[int, dict] = {}
        for node in self.nodes:
            if node.op == "input":
                values[node.id] = np.asarray(inputs[node.name], dtype=np.float64)
            elif node.op == "parameter":
                values[node.id] = self.params[node.name].value
            elif node.op == "constant":
                values[node.id] = self._consts[node.id]
            else:
                fwd = _OPS[node.op][0]
                c = cache.setdefault(node.id, {})
                try:
                    with np.errstate(over="raise", invalid="raise", divide="raise"):
                        values[node.id] = np.asarray(fwd([values[i] for i in node.inputs], node.attrs, c))
                except ValueError as exc:
                    shapes = [values[i].shape for i in node.inputs]
                    raise ShapeError(f"node #{node.id} ({node.op}{' ' + node.name if node.name else ''}): "
                                     f"operand shapes {shapes}: {exc}") from None
                except FloatingPointError as exc:
                    raise FloatingPointError(f"node #{node.id} ({node.op}): {exc}") from None
                self.op_counts[node.op] += 1
                for t in _TALLIES:
                    t.executed[node.op] += 1
                    t.executed_scopes[node.scope] += 1
        self._values = values
        self._cache = cache
        self._feed = inputs
        return {name: values[n.id] for name, n in self._sinks().items()}

    def _sinks(self) -> dict:
        if self.outputs:
            return self.outputs
        used = {i for n in self.nodes for i in n.inputs}
        return {(n.name or f"node{n.id}"): n for n in self.nodes if n.id not in used}

    def value(self, node: Node) -> np.ndarray:
        if self._values is None:
            raise StateError("forward has not been run on this graph")
        return self._values[node.id]

    def backward(self, seeds: dict | None = None) -> dict:
        """Propagate seed gradients from the outputs back to parameters and inputs.

        ``seeds`` maps output names to upstream gradients; by default a single
        scalar output is seeded with 1. Returns gradients keyed by parameter
        and (differentiable) input name; parameter gradients are also stored
        on ``graph.params[name].grad``.
        """
        if self._values is None:
            raise StateError("backward called before forward")
        sinks = self._sinks()
        if seeds is None:
            if len(sinks) != 1:
                raise GraphError("seed gradients required when the graph has several outputs")
            (name, node), = sinks.items()
            if self._values[node.id].size != 1:
                raise GraphError(f"output {name!r} is not scalar; pass explicit seeds")
            seeds = {name: np.ones_like(self._values[node.id])}
        grads: list = [None] * len(self.nodes)
        for name, seed in seeds.items():
            node = sinks.get(name) or self.outputs.get(name)
            if node is None:
                raise GraphError(f"unknown output {name!r}")
            seed = np.broadcast_to(np.asarray(seed, dtype=np.float64), self._values[node.id].shape)
            grads[node.id] = seed.copy() if grads[node.id] is None else grads[node.id] + seed
        for node in reversed(self.nodes):
            g = grads[node.id]
            if g is None or node.op in _LEAVES or not node.needs_grad:
                continue
            vals = [self._values[i] for i in node.inputs]
            in_grads = _OPS[node.op][1](g, vals, self._values[node.id], node.attrs, self._cache.get(node.id, {}))
            for i, gi in zip(node.inputs, in_grads):
                if not self.nodes[i].needs_grad:
                    continue
                grads[i] = gi if grads[i] is None else grads[i] + gi
        out = {}
        for name, node in self._param_nodes.items():
            g = grads[node.id]
            p = self.params[name]
            p.grad = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=np.float64).reshape(p.value.shape)
            out[name] = p.grad
        for name, node in self.inputs.items():
            if node.needs_grad:
                g = grads[node.id]
                out[name] = np.zeros_like(self._values[node.id]) if g is None else g
        return out


def _axes(axes):
    if axes is None:
        return None
    if isinstance(axes, int):
        return (axes,)
    return tuple(int(a) for a in axes)


def forward(graph: Graph, inputs: dict | None = None) -> dict:
    return graph.forward(inputs)


def backward(graph: Graph, seed_gradients: dict | None = None) -> dict:
    return graph.backward(seed_gradients)


def _scalar_output(graph: Graph) -> float:
    sinks = graph._sinks()
    if len(sinks) != 1:
        raise GraphError("finite_diff_check needs exactly one output")
    (node,) = sinks.values()
    val = graph._values[node.id]
    if val.size != 1:
        raise GraphError(f"finite_diff_check needs a scalar sink, got shape {val.shape}")
    return float(val.reshape(()))


def finite_diff_check(graph: Graph, parameter: str, step: float = 1e-4, max_entries: int | None = None,
                      seed: int = 0) -> float:
    """Max over entries of |analytic - central difference| / max(1, |analytic|).

    Uses the inputs of the most recent :meth:`Graph.forward` call.
    ``parameter`` may name a parameter or a differentiable input. With
    ``max_entries`` a seeded random subset of entries is checked.
    """
    if not 1e-6 <= step <= 1e-2:
        raise ValueError(f"step {step} outside [1e-6, 1e-2]")
    if graph._feed is None:
        raise StateError("run forward before finite_diff_check")
    feed = {k: np.array(v, dtype=np.float64, copy=True) for k, v in graph._feed.items()}
    graph.forward(feed)
    _scalar_output(graph)
    analytic = graph.backward()[parameter]
    if parameter in graph.params:
        target = graph.params[parameter].value
    elif parameter in graph.inputs:
        target = feed[parameter]
    else:
        raise GraphError(f"unknown parameter or input {parameter!r}")
    flat = target.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = np.sort(np.random.default_rng(seed).choice(flat.size, size=max_entries, replace=False))
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        graph.forward(feed)
        fp = _scalar_output(graph)
        flat[i] = orig - step
        graph.forward(feed)
        fm = _scalar_output(graph)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * step)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    graph.forward(feed)
    return worst
