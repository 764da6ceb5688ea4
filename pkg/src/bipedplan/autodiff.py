"""Small reverse-mode autodiff over dense float64 numpy arrays.

Every differentiable operation is a named primitive with a forward function and
a vector-Jacobian product.  Tensors record the primitive that produced them, so
a computation can be differentiated (``Tensor.backward`` / :func:`gradients`)
or frozen into a :class:`Graph` and replayed on new inputs with
:func:`evaluate`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

CHECKPOINT_FORMAT = "bipedplan-tensors"
CHECKPOINT_VERSION = 1


class AutodiffError(ValueError):
    pass


class ShapeError(AutodiffError):
    """Raised when a primitive receives incompatible operand shapes."""

    def __init__(self, op: str, shapes, node: str | None = None, detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        self.node = node
        where = f" at node {node}" if node is not None else ""
        msg = f"shape mismatch in '{op}'{where}: operand shapes {self.shapes}"
        super().__init__(msg + (f" ({detail})" if detail else ""))


class NonFiniteError(AutodiffError):
    pass


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., np.ndarray]
    # vjp(grad_out, out, *inputs, **attrs) -> tuple of input gradients
    vjp: Callable[..., tuple]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, [a.shape, b.shape]) from None


def _add(a, b):
    _broadcast_check("add", a, b)
    return a + b


def _sub(a, b):
    _broadcast_check("sub", a, b)
    return a - b


def _mul(a, b):
    _broadcast_check("mul", a, b)
    return a * b


def _div(a, b):
    _broadcast_check("div", a, b)
    return a / b


def _matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", [a.shape, b.shape], detail="expects (m,k) @ (k,n)")
    return a @ b


def _sum(a, axis=None):
    return np.sum(a, axis=axis)


def _sum_vjp(g, out, a, axis=None):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def _mean(a, axis=None):
    return np.mean(a, axis=axis)


def _mean_vjp(g, out, a, axis=None):
    n = a.size if axis is None else a.shape[axis]
    (ga,) = _sum_vjp(g, out, a, axis=axis)
    return (ga / n,)


def _concat(*arrays, axis=0):
    try:
        return np.concatenate(arrays, axis=axis)
    except ValueError:
        raise ShapeError("concat", [x.shape for x in arrays]) from None


def _concat_vjp(g, out, *arrays, axis=0):
    splits = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return tuple(np.split(g, splits, axis=axis))


def _slice(a, index=()):
    try:
        return np.array(a[index], dtype=np.float64)
    except IndexError:
        raise ShapeError("slice", [a.shape], detail=f"index {index!r}") from None


def _slice_vjp(g, out, a, index=()):
    ga = np.zeros_like(a)
    np.add.at(ga, index, g)
    return (ga,)


def _reshape(a, shape=()):
    try:
        return a.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", [a.shape], detail=f"target {shape}") from None


PRIMITIVES: dict[str, Primitive] = {
    p.name: p
    for p in [
        Primitive("add", _add, lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))),
        Primitive("sub", _sub, lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))),
        Primitive("mul", _mul, lambda g, o, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))),
        Primitive("div", _div, lambda g, o, a, b: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * o / b, b.shape))),
        Primitive("matmul", _matmul, lambda g, o, a, b: (g @ b.T, a.T @ g)),
        Primitive("tanh", np.tanh, lambda g, o, a: (g * (1.0 - o * o),)),
        Primitive("relu", lambda a: np.maximum(a, 0.0), lambda g, o, a: (g * (a > 0.0),)),
        Primitive("sqrt", np.sqrt, lambda g, o, a: (g * 0.5 / o,)),
        Primitive("square", np.square, lambda g, o, a: (2.0 * g * a,)),
        Primitive("scale", lambda a, c=1.0: c * a, lambda g, o, a, c=1.0: (c * g,)),
        Primitive("sum", _sum, _sum_vjp),
        Primitive("mean", _mean, _mean_vjp),
        Primitive("concat", _concat, _concat_vjp),
        Primitive("slice", _slice, _slice_vjp),
        Primitive("reshape", _reshape, lambda g, o, a, shape=(): (g.reshape(a.shape),)),
    ]
}


def _as_array(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor data contains non-finite values")
    return arr


class Tensor:
    """A float64 array with an optional record of the primitive that made it."""

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "attrs", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.attrs: dict = {}
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def __repr__(self):
        kind = f"op={self.op}" if self.op else "leaf"
        return f"Tensor(shape={self.shape}, {kind}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # operator sugar; everything routes through the primitive table
    def __add__(self, other):
        return apply("add", self, other)

    def __radd__(self, other):
        return apply("add", other, self)

    def __sub__(self, other):
        return apply("sub", self, other)

    def __rsub__(self, other):
        return apply("sub", other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply("scale", self, c=float(other))
        return apply("mul", self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return apply("scale", self, c=1.0 / float(other))
        return apply("div", self, other)

    def __rtruediv__(self, other):
        return apply("div", other, self)

    def __neg__(self):
        return apply("scale", self, c=-1.0)

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def __getitem__(self, index):
        return apply("slice", self, index=index)

    def tanh(self):
        return apply("tanh", self)

    def relu(self):
        return apply("relu", self)

    def sqrt(self):
        return apply("sqrt", self)

    def square(self):
        return apply("square", self)

    def sum(self, axis=None):
        return apply("sum", self, axis=axis)

    def mean(self, axis=None):
        return apply("mean", self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", self, shape=tuple(shape))

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every requires_grad leaf."""
        for leaf, g in _backprop(self).items():
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply(op: str, *inputs, **attrs) -> Tensor:
    prim = PRIMITIVES[op]
    parents = tuple(_wrap(x) for x in inputs)
    try:
        data = prim.forward(*(p.data for p in parents), **attrs)
    except ShapeError as err:
        raise ShapeError(op, err.shapes, node=_describe(parents), detail=str(err)) from None
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.op = op
    out.parents = parents
    out.attrs = attrs
    out.name = None
    return out


def _describe(parents) -> str:
    names = [p.name or (p.op or "leaf") for p in parents]
    return "(" + ", ".join(names) + ")"


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return apply("concat", *tensors, axis=axis)


def _topo_order(roots: Iterable[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(r, False) for r in roots]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _backprop(root: Tensor) -> dict[Tensor, np.ndarray]:
    if root.data.size != 1:
        raise AutodiffError(f"backward seed must be scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo_order([root])):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node.is_leaf:
            leaves[node] = g
            continue
        prim = PRIMITIVES[node.op]
        in_grads = prim.vjp(g, node.data, *(p.data for p in node.parents), **node.attrs)
        for p, pg in zip(node.parents, in_grads):
            if not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(p.shape)
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    return leaves


def gradients(root: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray | None]:
    """Pure gradient query: d(root)/d(w) for each w (None if w does not require grad)."""
    leaves = _backprop(root)
    out = []
    for w in wrt:
        if not w.requires_grad:
            out.append(None)
        else:
            out.append(leaves.get(w, np.zeros_like(w.data)))
    return out


@dataclass
class GraphNode:
    id: int
    op: str | None
    inputs: tuple[int, ...]
    attrs: dict
    name: str | None = None
    const: np.ndarray | None = None


class Graph:
    """Frozen, topologically ordered record of a traced computation.

    Leaves listed in ``inputs`` become named slots that :func:`evaluate` rebinds;
    any other leaf is captured as a constant.
    """

    def __init__(self, inputs: Mapping[str, Tensor], outputs: Mapping[str, Tensor]):
        order = _topo_order(outputs.values())
        index = {id(t): i for i, t in enumerate(order)}
        input_ids = {id(t): name for name, t in inputs.items()}
        self.nodes: list[GraphNode] = []
        self.input_shapes: dict[str, tuple] = {}
        self.input_requires_grad: dict[str, bool] = {}
        for i, t in enumerate(order):
            if t.is_leaf:
                name = input_ids.get(id(t))
                const = None if name is not None else t.data.copy()
                if name is not None:
                    self.input_shapes[name] = t.shape
                    self.input_requires_grad[name] = t.requires_grad
                self.nodes.append(GraphNode(i, None, (), {}, name=name, const=const))
            else:
                ids = tuple(index[id(p)] for p in t.parents)
                self.nodes.append(GraphNode(i, t.op, ids, dict(t.attrs)))
        missing = set(inputs) - set(self.input_shapes)
        if missing:
            raise AutodiffError(f"graph inputs not reachable from outputs: {sorted(missing)}")
        self.outputs: dict[str, int] = {name: index[id(t)] for name, t in outputs.items()}

    def __len__(self):
        return len(self.nodes)


def evaluate(graph: Graph, inputs: Mapping[str, object]) -> dict[str, Tensor]:
    """Replay ``graph`` on new input values; returns live tensors for each output."""
    missing = set(graph.input_shapes) - set(inputs)
    if missing:
        raise AutodiffError(f"unbound graph inputs: {sorted(missing)}")
    values: list[Tensor] = []
    for node in graph.nodes:
        if node.op is None:
            if node.name is None:
                values.append(Tensor(node.const))
                continue
            given = inputs[node.name]
            t = given if isinstance(given, Tensor) else Tensor(
                given, requires_grad=graph.input_requires_grad[node.name], name=node.name
            )
            if not np.all(np.isfinite(t.data)):
                raise NonFiniteError(f"input '{node.name}' contains non-finite values")
            values.append(t)
        else:
            try:
                values.append(apply(node.op, *(values[i] for i in node.inputs), **node.attrs))
            except ShapeError as err:
                raise ShapeError(node.op, err.shapes, node=f"#{node.id}") from None
    return {name: values[i] for name, i in graph.outputs.items()}


def backward(graph: Graph, inputs: Mapping[str, object], seed_output: str) -> dict[str, np.ndarray]:
    """Evaluate ``graph`` and return d(seed_output)/d(input) for grad-requiring inputs."""
    bound = {}
    for name, value in inputs.items():
        if isinstance(value, Tensor):
            bound[name] = value
        elif name in graph.input_requires_grad:
            bound[name] = Tensor(value, requires_grad=graph.input_requires_grad[name], name=name)
    outs = evaluate(graph, bound)
    leaves = _backprop(outs[seed_output])
    result = {}
    for name, t in bound.items():
        if t.requires_grad:
            result[name] = leaves.get(t, np.zeros_like(t.data))
    return result


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **hyper)


def adam_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update.  Inputs are not modified."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise AutodiffError("adam_step: params, grads and moments differ in count")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        p, g = np.asarray(p, dtype=np.float64), np.asarray(g, dtype=np.float64)
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeError("adam_step", [p.shape, g.shape, m.shape])
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)
    return new_params, new_state


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    record = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": dict(meta or {}),
        "tensors": {
            name: {"shape": list(np.shape(arr)), "data": np.asarray(arr, dtype=np.float64).reshape(-1).tolist()}
            for name, arr in tensors.items()
        },
    }
    Path(path).write_text(json.dumps(record, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    record = json.loads(Path(path).read_text())
    if record.get("format") != CHECKPOINT_FORMAT:
        raise AutodiffError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if record.get("version", 0) > CHECKPOINT_VERSION:
        raise AutodiffError(f"{path}: checkpoint version {record['version']} is newer than supported")
    tensors = {}
    for name, entry in record["tensors"].items():
        data = np.asarray(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise ShapeError("load_checkpoint", [shape, data.shape], node=name)
        tensors[name] = data.reshape(shape)
    return tensors, record.get("meta", {})
