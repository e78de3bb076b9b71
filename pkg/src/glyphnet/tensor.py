"""Dense float32 tensors with taped reverse-mode automatic differentiation.

Values are numpy arrays; every differentiable operation appends a node to
the currently active :class:`Graph` (if any), and :func:`backward` replays
the tape in reverse.  Gradients accumulate into ``Tensor.grad`` for every
tensor that requires them, including interior activations, which is what
lets Grad-CAM read gradients at a tagged convolution output.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import (
    DetachedRoot,
    InvalidAxis,
    InvalidShape,
    InvalidStep,
    NotScalar,
    ShapeMismatch,
)

__all__ = [
    "Tensor",
    "Graph",
    "tensor_create",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "exp",
    "log",
    "sqrt",
    "clip",
    "reshape",
    "reduce",
    "backward",
    "finite_difference_check",
]

DTYPE = np.float32


class Tensor:
    """A dense float32 array, optionally carrying a gradient buffer.

    Tensors are value-immutable once handed to an operation; only ``grad``
    is mutated (by one backward pass at a time).  Identity semantics: two
    tensors are never equal unless they are the same object.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = (
            np.zeros_like(arr) if self.requires_grad else None
        )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        """Zero the gradient buffer, allocating it if absent.

        On a tensor produced by an operation this doubles as the retention
        hook: :func:`backward` writes gradients into any tensor that already
        owns a buffer (leaves always do).
        """
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE)  # owned copy; g may be a view
        else:
            self.grad += g

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))


class Node:
    """One recorded operation: inputs, its output, and a backward rule.

    ``backward_fn(upstream) -> per-input gradients`` (``None`` for inputs
    that need no gradient).
    """

    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Append-only operation tape; node order is a topological order.

    Used as a context manager; ops executed inside record themselves here.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Graph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _GRAPH_STACK.pop()
        assert popped is self

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced


_GRAPH_STACK: list[Graph] = []


def _active_graph() -> Graph | None:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=DTYPE))


def record_op(
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward_fn: Callable[[np.ndarray], tuple],
) -> Tensor:
    """Wrap a forward result and tape it on the active graph, if any."""
    out = Tensor(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    graph = _active_graph()
    if graph is not None:
        graph.record(Node(tuple(inputs), out, backward_fn))
    return out


# ---------------------------------------------------------------------------
# construction


def tensor_create(
    shape: Sequence[int], values: Iterable[float], requires_grad: bool = False
) -> Tensor:
    """Build a tensor from a flat row-major value sequence."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise InvalidShape(f"extents must be positive, got {shape}")
    flat = np.asarray(list(values), dtype=DTYPE)
    expected = int(np.prod(shape)) if shape else 1
    if flat.size != expected:
        raise ShapeMismatch(
            f"shape {shape} needs {expected} values, got {flat.size}"
        )
    return Tensor(flat.reshape(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# broadcast helpers


def _check_broadcast(a_shape: tuple[int, ...], b_shape: tuple[int, ...]) -> None:
    """The second operand must broadcast to the first; output keeps a's shape."""
    try:
        out = np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {b_shape} to {a_shape}") from None
    if out != a_shape:
        raise ShapeMismatch(f"cannot broadcast {b_shape} to {a_shape}")


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)

    def bw(g):
        return g, unbroadcast(g, b.shape)

    return record_op((a, b), a.data + b.data, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)

    def bw(g):
        return g, unbroadcast(-g, b.shape)

    return record_op((a, b), a.data - b.data, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    a_data, b_data = a.data, b.data

    def bw(g):
        return g * b_data, unbroadcast(g * a_data, b_data.shape)

    return record_op((a, b), a_data * b_data, bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    a_data, b_data = a.data, b.data

    def bw(g):
        return g / b_data, unbroadcast(-g * a_data / (b_data * b_data), b_data.shape)

    return record_op((a, b), a_data / b_data, bw)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Dispatch one of the binary elementwise operations by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


# ---------------------------------------------------------------------------
# unary ops


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g):
        return (g * out_data,)

    return record_op((a,), out_data, bw)


def log(a: Tensor) -> Tensor:
    a_data = a.data

    def bw(g):
        return (g / a_data,)

    return record_op((a,), np.log(a_data), bw)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bw(g):
        return (g * (0.5 / out_data),)

    return record_op((a,), out_data, bw)


def clip(a: Tensor, lo: float | None, hi: float | None) -> Tensor:
    """Clamp with zero subgradient on the saturated regions."""
    low = -np.inf if lo is None else lo
    high = np.inf if hi is None else hi
    a_data = a.data
    mask = ((a_data > low) & (a_data < high)).astype(DTYPE)

    def bw(g):
        return (g * mask,)

    return record_op((a,), np.clip(a_data, low, high).astype(DTYPE), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    in_shape = a.shape

    def bw(g):
        return (g.reshape(in_shape),)

    return record_op((a,), a.data.reshape(shape), bw)


# ---------------------------------------------------------------------------
# reductions


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    axes = tuple(int(ax) for ax in axes)
    norm = []
    for ax in axes:
        if ax < 0:
            ax += ndim
        if not 0 <= ax < ndim:
            raise InvalidAxis(f"axis {ax} out of range for {ndim}-d tensor")
        norm.append(ax)
    if len(set(norm)) != len(norm):
        raise InvalidAxis(f"repeated axis in {axes}")
    return tuple(norm)


def reduce(op: str, a: Tensor, axes=None, keep_dims: bool = False) -> Tensor:
    """Sum or mean over a set of axes (empty set is an identity copy)."""
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduce op {op!r}")
    axes = _normalize_axes(axes, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    in_shape = a.shape

    if op == "sum":
        out_data = a.data.sum(axis=axes, keepdims=keep_dims, dtype=DTYPE)
    else:
        out_data = a.data.mean(axis=axes, keepdims=keep_dims, dtype=DTYPE)

    scale = 1.0 / count if op == "mean" else 1.0

    def bw(g):
        if not keep_dims and axes:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * scale, in_shape).astype(DTYPE),)

    return record_op((a,), np.asarray(out_data, dtype=DTYPE), bw)


# ---------------------------------------------------------------------------
# backward pass


def backward(root: Tensor, graph: Graph) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every gradient-carrying
    tensor reachable from ``root``.

    Leaves (tensors not produced on this graph) always receive gradients;
    an interior tensor does too once it owns a gradient buffer — call
    ``t.zero_grad()`` before this to retain it, as Grad-CAM does for the
    tagged activation.  The tape is traversed once, in reverse; repeated
    calls keep adding, so callers zero gradients between optimizer steps.
    """
    if root.size != 1:
        raise NotScalar(f"backward root must be scalar, got shape {root.shape}")
    if not graph.produced(root):
        raise DetachedRoot("root tensor was not produced on this graph")

    flow: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    holders: dict[int, Tensor] = {id(root): root}

    for node in reversed(graph.nodes):
        g = flow.pop(id(node.output), None)
        if g is None:
            continue
        holders.pop(id(node.output), None)
        if node.output.grad is not None:
            node.output.grad += g
        grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in flow:
                flow[key] = flow[key] + gi
            else:
                flow[key] = gi
                holders[key] = inp

    # whatever is left in flight belongs to leaves (parameters, inputs)
    for key, g in flow.items():
        holders[key].accumulate_grad(g)


# ---------------------------------------------------------------------------
# gradient oracle


def finite_difference_check(
    f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar-valued function of its tensor
    argument.  The relative error divides by ``max(1, |analytic|)`` so tiny
    gradients are compared absolutely.
    """
    if h <= 0:
        raise InvalidStep(f"step size must be positive, got {h}")

    probe = Tensor(x.data.copy(), requires_grad=True)
    with Graph() as g:
        y = f(probe)
    backward(y, g)
    analytic = probe.grad.copy()

    numeric = np.zeros_like(analytic)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        hi = float(f(Tensor(bumped.reshape(x.shape))).data.reshape(-1)[0])
        bumped[i] = flat[i] - h
        lo = float(f(Tensor(bumped.reshape(x.shape))).data.reshape(-1)[0])
        numeric.reshape(-1)[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
