"""Define-by-run reverse-mode differentiation over dense numpy arrays.

A :class:`Graph` records every operation applied to its tensors as an
append-only list of nodes. Calling :meth:`Graph.backward` on a scalar sweeps
the nodes in reverse order and returns a :class:`GradientMap`.

Only tensor-with-scalar broadcasting is supported. Anything else (bias rows,
neighbour replication, row gating) is an explicit op.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Tensor",
    "GradientMap",
    "ShapeError",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "add_scalar",
    "relu",
    "exp",
    "log",
    "matmul",
    "transpose",
    "reshape",
    "softmax",
    "logsumexp",
    "reduce",
    "reduce_sum",
    "concat",
    "take",
    "add_bias",
    "scale_rows",
    "replicate",
    "column",
    "gather_rows",
    "square",
    "backward",
    "finite_diff_check",
    "numeric_gradient",
    "compare_gradients",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class _Node:
    parents: tuple[int, ...]
    backward: Optional[BackwardFn]
    shape: tuple[int, ...]
    name: Optional[str] = None


_local = threading.local()


def _active_graph() -> Optional["Graph"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Graph:
    """Append-only operation record.

    ``dtype`` fixes the forward numeric width for every tensor created on the
    graph (float32 for training, float64 for verification).
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.float32, np.float64):
            raise ValueError(f"unsupported graph dtype {self.dtype}")
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Graph":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, parents, backward, shape, name=None) -> int:
        self.nodes.append(_Node(tuple(parents), backward, tuple(shape), name))
        return len(self.nodes) - 1

    def tensor(self, data, requires_grad: bool = False, name: Optional[str] = None) -> "Tensor":
        """Wrap ``data`` as a leaf of this graph."""
        arr = np.array(data, dtype=self.dtype, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        node_id = self._record((), None, arr.shape, name) if requires_grad else None
        return Tensor(arr, self, node_id, requires_grad)

    def param(self, data, name: Optional[str] = None) -> "Tensor":
        return self.tensor(data, requires_grad=True, name=name)

    def constant(self, data) -> "Tensor":
        return self.tensor(data, requires_grad=False)

    def backward(self, root: "Tensor") -> "GradientMap":
        return backward(self, root)

    def release(self) -> None:
        """Drop recorded nodes (and the saved values their closures hold)."""
        self.nodes.clear()


class Tensor:
    """A value on a :class:`Graph`; carries a node id when it needs gradients."""

    __slots__ = ("data", "graph", "node_id", "requires_grad")
    __array_priority__ = 100

    def __init__(self, data: np.ndarray, graph: Graph, node_id: Optional[int], requires_grad: bool):
        self.data = data
        self.graph = graph
        self.node_id = node_id
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add_scalar(self, other) if np.isscalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_scalar(self, -other) if np.isscalar(other) else sub(self, other)

    def __rsub__(self, other):
        return add_scalar(scalar_mul(self, -1.0), other)

    def __mul__(self, other):
        return scalar_mul(self, other) if np.isscalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


@dataclass
class GradientMap:
    """Gradients of one backward sweep, keyed by node id."""

    grads: dict[int, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.node_id is None:
            raise KeyError("tensor does not require grad")
        g = self.grads.get(t.node_id)
        if g is None:
            return np.zeros(t.shape, dtype=t.data.dtype)
        return g

    def get(self, t: Tensor, default=None):
        if t.node_id is None:
            return default
        return self.grads.get(t.node_id, default)

    def __contains__(self, t: Tensor) -> bool:
        return t.node_id is not None and t.node_id in self.grads


# ---------------------------------------------------------------------------
# op plumbing


def _graph_of(*tensors: Tensor) -> Graph:
    graph = tensors[0].graph
    for t in tensors[1:]:
        if t.graph is not graph:
            raise ValueError("operands belong to different graphs")
    return graph


def _make(graph: Graph, data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    data = np.asarray(data, dtype=graph.dtype)
    live = [p for p in parents if p.requires_grad]
    if not live:
        return Tensor(data, graph, None, False)
    ids = tuple(p.node_id if p.requires_grad else -1 for p in parents)
    node_id = graph._record(ids, backward_fn, data.shape)
    return Tensor(data, graph, node_id, True)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make(_graph_of(a, b), a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make(_graph_of(a, b), a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    ga, gb = a.requires_grad, b.requires_grad
    return _make(
        _graph_of(a, b), ad * bd, (a, b), lambda g: (g * bd if ga else None, g * ad if gb else None)
    )


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.graph, a.data * s, (a,), lambda g: (g * s,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _make(a.graph, a.data + float(s), (a,), lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _make(a.graph, out, (a,), lambda g: (g * (out > 0),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(a.graph, ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(a.graph, out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0):
        raise ValueError("log of non-positive value")
    return _make(a.graph, np.log(ad), (a,), lambda g: (g / ad,))


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    ga, gb = a.requires_grad, b.requires_grad

    def bw(g):
        return (g @ bd.T if ga else None, ad.T @ g if gb else None)

    return _make(_graph_of(a, b), ad @ bd, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    return _make(a.graph, a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _make(a.graph, out, (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    first = tensors[0]
    axis = _check_axis(first, axis)
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(t.shape, first.shape)) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {first.shape} and {t.shape} on axis {axis}")
    if len(tensors) == 1:
        return first
    graph = _graph_of(*tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return np.split(g, bounds, axis=axis)

    return _make(graph, np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select entries along ``axis``; repeated indices accumulate in backward."""
    axis = _check_axis(a, axis)
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (slice(None),) * axis + (idx,), g)
        return (out,)

    return _make(a.graph, np.take(a.data, idx, axis=axis), (a,), bw)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """``out[i, j] = a[index[i, j]]`` for a 2-D index into the rows of ``a``."""
    idx = np.asarray(index, dtype=np.intp)
    shape = a.shape
    flat = idx.ravel()

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, flat, g.reshape((flat.size,) + shape[1:]))
        return (out,)

    return _make(a.graph, a.data[idx], (a,), bw)


def column(a: Tensor, j: int) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"column expects a 2-D tensor, got {a.shape}")
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[:, j] = g
        return (out,)

    return _make(a.graph, a.data[:, j], (a,), bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-c vector to every row of an (..., c) tensor."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    red = tuple(range(x.ndim - 1))
    gb = b.requires_grad
    return _make(_graph_of(x, b), x.data + b.data, (x, b), lambda g: (g, g.sum(axis=red) if gb else None))


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of an (m, c) tensor by ``s[i]``."""
    if x.ndim != 2 or s.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows: scale {s.shape} does not match rows of {x.shape}")
    xd, sd = x.data, s.data
    gx, gs = x.requires_grad, s.requires_grad
    return _make(
        _graph_of(x, s),
        xd * sd[:, None],
        (x, s),
        lambda g: (g * sd[:, None] if gx else None, (g * xd).sum(axis=1) if gs else None),
    )


def replicate(x: Tensor, times: int, axis: int) -> Tensor:
    """Insert a new axis of length ``times`` at ``axis`` holding copies of ``x``."""
    if times < 1:
        raise ShapeError("replicate count must be positive")
    axis = axis % (x.ndim + 1)
    out = np.repeat(np.expand_dims(x.data, axis), times, axis=axis)
    return _make(x.graph, out, (x,), lambda g: (g.sum(axis=axis),))


# ---------------------------------------------------------------------------
# reductions and normalisers


def reduce(op_kind: str, x: Tensor, axis: int) -> Tensor:
    """Max or mean along ``axis``.

    Max routes the whole upstream gradient to the first argmax.
    """
    axis = _check_axis(x, axis)
    size = x.shape[axis]
    if size < 1:
        raise ShapeError(f"reduce over empty axis {axis} of {x.shape}")
    if op_kind == "mean":
        shape = x.shape

        def bw_mean(g):
            return (np.broadcast_to(np.expand_dims(g, axis) / size, shape).copy(),)

        return _make(x.graph, x.data.mean(axis=axis), (x,), bw_mean)
    if op_kind == "max":
        arg = np.argmax(x.data, axis=axis)
        out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
        shape = x.shape

        def bw_max(g):
            grad = np.zeros(shape, dtype=g.dtype)
            np.put_along_axis(grad, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
            return (grad,)

        return _make(x.graph, out, (x,), bw_max)
    raise ValueError(f"unknown reduction {op_kind!r}")


def reduce_sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = x.shape
    if axis is None:
        return _make(x.graph, x.data.sum(), (x,), lambda g: (np.full(shape, g, dtype=x.data.dtype),))
    axis = _check_axis(x, axis)
    return _make(
        x.graph,
        x.data.sum(axis=axis),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
    )


def softmax(x: Tensor, axis: int = -1, scale: float = 1.0) -> Tensor:
    """Softmax of ``x / scale`` along ``axis``, max-subtracted."""
    if scale <= 0:
        raise ValueError("softmax scale must be positive")
    axis = _check_axis(x, axis)
    z = x.data / scale
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot) / scale,)

    return _make(x.graph, out, (x,), bw)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    m = x.data.max(axis=axis, keepdims=True)
    s = np.exp(x.data - m)
    tot = s.sum(axis=axis, keepdims=True)
    out = (np.log(tot) + m).squeeze(axis)
    w = s / tot
    return _make(x.graph, out, (x,), lambda g: (w * np.expand_dims(g, axis),))


# ---------------------------------------------------------------------------
# reverse sweep


def backward(graph: Graph, root: Tensor) -> GradientMap:
    """Reverse-mode sweep from a scalar ``root``; gradients sum at shared parents."""
    if root.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    if root.graph is not graph:
        raise ValueError("root does not belong to this graph")
    result = GradientMap()
    if not root.requires_grad:
        return result
    grads: dict[int, np.ndarray] = {root.node_id: np.ones(root.shape, dtype=graph.dtype)}
    nodes = graph.nodes
    for nid in range(root.node_id, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        node = nodes[nid]
        if node.backward is None:
            result.grads[nid] = g
            continue
        for pid, pg in zip(node.parents, node.backward(g)):
            if pid < 0 or pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = np.asarray(pg, dtype=graph.dtype)
    return result


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst_index: Optional[tuple[int, ...]]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def numeric_gradient(
    value_fn: Callable[[np.ndarray], float],
    x,
    h: float = 1e-5,
    refine: int = 0,
    kink_tol: float = 1e-4,
    f0: Optional[float] = None,
) -> np.ndarray:
    """Central differences of a scalar function of a float64 array.

    With ``refine > 0`` the forward and backward one-sided quotients are
    compared; when they disagree by more than ``kink_tol`` (relative) a
    non-smooth point lies inside the stencil and the step is cut tenfold, up
    to ``refine`` times. Piecewise-smooth functions (relu, max) then get the
    derivative of the piece that contains ``x``. ``f0`` may pass in a known
    value of ``value_fn(x)``.
    """
    x0 = np.array(x, dtype=np.float64)
    if refine and f0 is None:
        f0 = float(value_fn(x0))
    numeric = np.zeros_like(x0)
    for idx in np.ndindex(*x0.shape):
        step = h
        for attempt in range(refine + 1):
            vals = []
            for sgn in (1.0, -1.0):
                xp = x0.copy()
                xp[idx] += sgn * step
                v = float(value_fn(xp))
                if not np.isfinite(v):
                    raise FloatingPointError(f"f is not finite at coordinate {idx}")
                vals.append(v)
            numeric[idx] = (vals[0] - vals[1]) / (2 * step)
            if not refine:
                break
            fwd, bwd = (vals[0] - f0) / step, (f0 - vals[1]) / step
            if abs(fwd - bwd) <= kink_tol * max(abs(fwd), abs(bwd)) + 1e-7:
                break
            step /= 10.0
    return numeric


def compare_gradients(analytic, numeric, tol: float = 1e-4, rel_floor: float = 1e-5) -> GradCheckReport:
    """Worst ``|a - n| / max(|a|, |n|, floor)`` with ``floor = rel_floor * max|g|``.

    The floor keeps coordinates whose true gradient is zero (where the
    numeric side only carries rounding noise) from dominating the result.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ShapeError(f"gradient shapes differ: {analytic.shape} vs {numeric.shape}")
    if not analytic.size:
        return GradCheckReport(0.0, 0.0, None, tol)
    abs_err = np.abs(analytic - numeric)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max())
    floor = max(rel_floor * scale, 1e-300)
    rel = abs_err / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    worst = tuple(int(i) for i in np.unravel_index(np.argmax(rel), rel.shape))
    return GradCheckReport(float(rel.max()), float(abs_err.max()), worst, tol)


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x,
    h: float = 1e-5,
    tol: float = 1e-4,
    rel_floor: float = 1e-5,
) -> GradCheckReport:
    """Compare ``backward`` against central differences of ``f`` at ``x``.

    ``f`` receives a float64 leaf tensor and must return a scalar tensor on the
    same graph.
    """
    x0 = np.array(x, dtype=np.float64)
    with Graph(np.float64) as graph:
        leaf = graph.param(x0)
        out = f(leaf)
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError("f is not finite at x")
        analytic = backward(graph, out)[leaf]

    def value(xp):
        with Graph(np.float64) as g2:
            return f(g2.tensor(xp)).data

    return compare_gradients(analytic, numeric_gradient(value, x0, h), tol, rel_floor)
