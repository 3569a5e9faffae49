"""Reverse-mode automatic differentiation on a dynamic float64 tape.

Backward rules are themselves written in terms of the primitive ops, so a
gradient produced with ``create_graph=True`` is an ordinary tape node and can
be differentiated again.  That is what makes the second-order meta-gradient
of the bi-level training objective exact rather than approximated.

Everything is float64.  Broadcasting follows numpy rules for elementwise ops
(gradients are summed back over broadcast axes); matmul is strictly 2-D.
"""

from __future__ import annotations

import itertools
import threading
import warnings
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "GradWarning",
    "ShapeMismatchError",
    "as_tensor",
    "constant",
    "leaf",
    "no_grad",
    "grad",
    "forward",
    "finite_diff_check",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose",
    "relu", "tanh", "exp", "log", "pow_const", "sqrt",
    "softmax", "tsum", "tmean", "max_reduce", "clip", "sign",
    "reshape", "slice1d", "pad1d", "concat1d", "take_per_row", "scatter_per_row",
]

_node_ids = itertools.count(1)
_state = threading.local()

DETACHED = -1  # node_id marker for constants living outside any graph


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible; names the offending node."""


class GradWarning(UserWarning):
    """Warning channel for grad() oddities such as unreachable wrt tensors."""


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _active_graph():
    return getattr(_state, "graph", None)


@contextmanager
def no_grad():
    """Disable tape construction; ops inside produce constant tensors."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """An n-d float64 array, optionally a node of the ambient tape.

    Tensors are immutable once created: ops return fresh tensors and never
    write into an operand's buffer.
    """

    __slots__ = ("data", "requires_grad", "node_id", "_op", "_parents",
                 "_backward", "_attrs", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad) and _grad_enabled()
        self.node_id = next(_node_ids)
        self._op = "leaf"
        self._parents = ()
        self._backward = None
        self._attrs = None
        self.name = name
        g = _active_graph()
        if g is not None:
            g._record(self)

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.node_id = DETACHED
        t._op = "leaf"
        t._parents = ()
        t._backward = None
        t._attrs = None
        t.name = None
        return t

    def __repr__(self):
        grad_tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{grad_tag})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def constant(x) -> Tensor:
    """A tensor that never requires grad (e.g. masks, labels-as-floats)."""
    return Tensor(x, requires_grad=False)


def leaf(x, name=None) -> Tensor:
    """A differentiable leaf (parameters, attack perturbations)."""
    return Tensor(x, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Primitive registry.  Forward impls are shared by eager execution and graph
# replay so both produce bit-identical results.
# ---------------------------------------------------------------------------

_FORWARD = {}


def _register(op):
    def deco(fn):
        _FORWARD[op] = fn
        return fn
    return deco


def _make(op, out_data, parents, backward, attrs=None):
    """Build the output tensor of a primitive op and hook it to the tape."""
    t = Tensor.__new__(Tensor)
    t.data = out_data
    t.node_id = next(_node_ids)
    t._op = op
    t.name = None
    t._attrs = attrs
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    t.requires_grad = track
    if track:
        t._parents = parents
        t._backward = backward
    else:
        t._parents = ()
        t._backward = None
    g = _active_graph()
    if g is not None:
        g._record(t, parents)
    return t


def _shape_error(op, msg):
    return ShapeMismatchError(f"op '{op}': {msg}")


def _sum_to_shape(g: Tensor, shape) -> Tensor:
    """Sum a broadcasted gradient back down to the original operand shape."""
    if g.shape == tuple(shape):
        return g
    gd = g
    extra = len(gd.shape) - len(shape)
    if extra > 0:
        gd = tsum(gd, axis=tuple(range(extra)), keepdims=False)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and gd.shape[i] != 1)
    if axes:
        gd = tsum(gd, axis=axes, keepdims=True)
    if gd.shape != tuple(shape):
        gd = reshape(gd, shape)
    return gd


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise arithmetic --------------------------------------------------

@_register("add")
def _add_fwd(a, b):
    return a + b


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    def backward(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)
    return _make("add", _add_fwd(a.data, b.data), (a, b), backward)


@_register("sub")
def _sub_fwd(a, b):
    return a - b


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    def backward(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(neg(g), b.shape)
    return _make("sub", _sub_fwd(a.data, b.data), (a, b), backward)


@_register("mul")
def _mul_fwd(a, b):
    return a * b


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    def backward(g):
        return (_sum_to_shape(mul(g, b), a.shape),
                _sum_to_shape(mul(g, a), b.shape))
    return _make("mul", _mul_fwd(a.data, b.data), (a, b), backward)


@_register("div")
def _div_fwd(a, b):
    return a / b


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    def backward(g):
        ga = _sum_to_shape(div(g, b), a.shape)
        gb = _sum_to_shape(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb
    return _make("div", _div_fwd(a.data, b.data), (a, b), backward)


def neg(a) -> Tensor:
    return mul(a, -1.0)


# -- linear algebra ----------------------------------------------------------

@_register("matmul")
def _matmul_fwd(a, b):
    return a @ b


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise _shape_error("matmul", f"expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", f"inner dims differ: {a.shape} @ {b.shape}")
    def backward(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)
    return _make("matmul", _matmul_fwd(a.data, b.data), (a, b), backward)


@_register("transpose")
def _transpose_fwd(a):
    return a.T.copy()


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise _shape_error("transpose", f"expects a 2-D operand, got {a.shape}")
    def backward(g):
        return (transpose(g),)
    return _make("transpose", _transpose_fwd(a.data), (a,), backward)


# -- nonlinearities ----------------------------------------------------------

@_register("relu")
def _relu_fwd(a):
    return np.maximum(a, 0.0)


def relu(a) -> Tensor:
    a = as_tensor(a)
    def backward(g):
        return (mul(g, constant((a.data > 0.0).astype(np.float64))),)
    return _make("relu", _relu_fwd(a.data), (a,), backward)


@_register("tanh")
def _tanh_fwd(a):
    return np.tanh(a)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = _make("tanh", _tanh_fwd(a.data), (a,), None)
    def backward(g):
        return (mul(g, sub(1.0, mul(out, out))),)
    out._backward = backward if out.requires_grad else None
    return out


@_register("exp")
def _exp_fwd(a):
    return np.exp(a)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _make("exp", _exp_fwd(a.data), (a,), None)
    def backward(g):
        return (mul(g, out),)
    out._backward = backward if out.requires_grad else None
    return out


@_register("log")
def _log_fwd(a):
    return np.log(a)


def log(a) -> Tensor:
    a = as_tensor(a)
    def backward(g):
        return (div(g, a),)
    return _make("log", _log_fwd(a.data), (a,), backward)


@_register("pow_const")
def _pow_fwd(a, p):
    return a ** p


def pow_const(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    def backward(g):
        return (mul(g, mul(p, pow_const(a, p - 1.0))),)
    return _make("pow_const", _pow_fwd(a.data, p), (a,), backward, attrs={"p": p})


def sqrt(a) -> Tensor:
    return pow_const(a, 0.5)


@_register("softmax")
def _softmax_fwd(a, axis):
    shifted = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(a, axis=-1) -> Tensor:
    """Softmax along ``axis``; gradient is y*(g - sum(g*y)) as usual."""
    a = as_tensor(a)
    axis = int(axis)
    out = _make("softmax", _softmax_fwd(a.data, axis), (a,), None, attrs={"axis": axis})
    def backward(g):
        gy = mul(g, out)
        s = tsum(gy, axis=axis, keepdims=True)
        return (sub(gy, mul(out, s)),)
    out._backward = backward if out.requires_grad else None
    return out


# -- reductions --------------------------------------------------------------

def _keepdims_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(shape) for a in axes)
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


@_register("sum")
def _sum_fwd(a, axis, keepdims):
    return np.sum(a, axis=axis, keepdims=keepdims)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axis = tuple(axis) if isinstance(axis, (list, tuple)) else axis
    def backward(g):
        gk = reshape(g, _keepdims_shape(a.shape, axis)) if not keepdims else g
        return (mul(gk, constant(np.ones(a.shape))),)
    out_data = _sum_fwd(a.data, axis, keepdims)
    return _make("sum", np.asarray(out_data, dtype=np.float64), (a,), backward,
                 attrs={"axis": axis, "keepdims": keepdims})


@_register("mean")
def _mean_fwd(a, axis, keepdims):
    return np.mean(a, axis=axis, keepdims=keepdims)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axis = tuple(axis) if isinstance(axis, (list, tuple)) else axis
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    def backward(g):
        gk = reshape(g, _keepdims_shape(a.shape, axis)) if not keepdims else g
        return (mul(gk, constant(np.full(a.shape, 1.0 / count))),)
    out_data = _mean_fwd(a.data, axis, keepdims)
    return _make("mean", np.asarray(out_data, dtype=np.float64), (a,), backward,
                 attrs={"axis": axis, "keepdims": keepdims})


@_register("max_reduce")
def _max_fwd(a, axis, keepdims):
    return np.max(a, axis=axis, keepdims=keepdims)


def max_reduce(a, axis=None, keepdims=False) -> Tensor:
    """Max over ``axis``.  Ties route the gradient to the first maximizer."""
    a = as_tensor(a)
    out_data = np.asarray(_max_fwd(a.data, axis, keepdims), dtype=np.float64)
    def backward(g):
        full = np.reshape(np.asarray(_max_fwd(a.data, axis, True)),
                          _keepdims_shape(a.shape, axis))
        hit = (a.data == full)
        if axis is None:
            first = np.zeros(a.shape, dtype=bool)
            first[np.unravel_index(np.argmax(a.data), a.shape)] = True
            mask = first
        else:
            # keep only the first maximizer along the reduced axis
            cum = np.cumsum(hit, axis=axis)
            mask = hit & (cum == 1)
        gk = reshape(g, _keepdims_shape(a.shape, axis)) if not keepdims else g
        return (mul(gk, constant(mask.astype(np.float64))),)
    return _make("max_reduce", out_data, (a,), backward,
                 attrs={"axis": axis, "keepdims": keepdims})


# -- clipping and sign -------------------------------------------------------

@_register("clip")
def _clip_fwd(a, lo, hi):
    return np.clip(a, lo, hi)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through strictly inside the box."""
    a = as_tensor(a)
    lo, hi = float(lo), float(hi)
    def backward(g):
        inside = ((a.data >= lo) & (a.data <= hi)).astype(np.float64)
        return (mul(g, constant(inside)),)
    return _make("clip", _clip_fwd(a.data, lo, hi), (a,), backward,
                 attrs={"lo": lo, "hi": hi})


@_register("sign")
def _sign_fwd(a):
    return np.sign(a)


def sign(a) -> Tensor:
    """Elementwise sign with derivative 0 everywhere (sign(0) = 0)."""
    a = as_tensor(a)
    def backward(g):
        return (constant(np.zeros(a.shape)),)
    return _make("sign", _sign_fwd(a.data), (a,), backward)


# -- structural ops ----------------------------------------------------------

@_register("reshape")
def _reshape_fwd(a, shape):
    return np.reshape(a, shape)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    if int(np.prod(shape, dtype=np.int64)) != a.data.size and -1 not in shape:
        raise _shape_error("reshape", f"cannot reshape {a.shape} to {shape}")
    def backward(g):
        return (reshape(g, a.shape),)
    return _make("reshape", _reshape_fwd(a.data, shape), (a,), backward,
                 attrs={"shape": shape})


@_register("slice1d")
def _slice1d_fwd(a, start, stop):
    return a[start:stop].copy()


def slice1d(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 1:
        raise _shape_error("slice1d", f"expects a 1-D operand, got {a.shape}")
    n = a.shape[0]
    start, stop = int(start), int(stop)
    if not (0 <= start <= stop <= n):
        raise _shape_error("slice1d", f"range [{start}:{stop}] out of bounds for length {n}")
    def backward(g):
        return (pad1d(g, start, n - stop),)
    return _make("slice1d", _slice1d_fwd(a.data, start, stop), (a,), backward,
                 attrs={"start": start, "stop": stop})


@_register("pad1d")
def _pad1d_fwd(a, left, right):
    return np.concatenate([np.zeros(left), a, np.zeros(right)])


def pad1d(a, left: int, right: int) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 1:
        raise _shape_error("pad1d", f"expects a 1-D operand, got {a.shape}")
    left, right = int(left), int(right)
    def backward(g):
        return (slice1d(g, left, left + a.shape[0]),)
    return _make("pad1d", _pad1d_fwd(a.data, left, right), (a,), backward,
                 attrs={"left": left, "right": right})


@_register("concat1d")
def _concat1d_fwd(*parts):
    return np.concatenate(parts)


def concat1d(parts) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    for p in parts:
        if p.data.ndim != 1:
            raise _shape_error("concat1d", f"expects 1-D operands, got {p.shape}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    def backward(g):
        return tuple(slice1d(g, int(bounds[i]), int(bounds[i + 1]))
                     for i in range(len(parts)))
    return _make("concat1d", _concat1d_fwd(*(p.data for p in parts)), parts, backward)


@_register("take_per_row")
def _take_per_row_fwd(a, idx):
    return a[np.arange(a.shape[0]), idx].copy()


def take_per_row(a, idx) -> Tensor:
    """out[i] = a[i, idx[i]] for a 2-D tensor; used to pick true-class scores."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise _shape_error("take_per_row", f"bad shapes {a.shape}, idx {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise _shape_error("take_per_row", "index out of range")
    def backward(g):
        return (scatter_per_row(g, idx, a.shape[1]),)
    return _make("take_per_row", _take_per_row_fwd(a.data, idx), (a,), backward,
                 attrs={"idx": idx})


@_register("scatter_per_row")
def _scatter_per_row_fwd(a, idx, ncol):
    out = np.zeros((a.shape[0], ncol))
    out[np.arange(a.shape[0]), idx] = a
    return out


def scatter_per_row(a, idx, ncol: int) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 1 or idx.shape != a.shape:
        raise _shape_error("scatter_per_row", f"bad shapes {a.shape}, idx {idx.shape}")
    def backward(g):
        return (take_per_row(g, idx),)
    return _make("scatter_per_row", _scatter_per_row_fwd(a.data, idx, int(ncol)),
                 (a,), backward, attrs={"idx": idx, "ncol": int(ncol)})


# ---------------------------------------------------------------------------
# grad
# ---------------------------------------------------------------------------

def grad(output: Tensor, wrt, create_graph: bool = False):
    """Gradients of a scalar ``output`` w.r.t. each tensor in ``wrt``.

    With ``create_graph=True`` the returned tensors are live tape nodes and
    can be differentiated again; otherwise they are constants.  Accumulation
    runs in descending node-id order, which fixes the reduction order and
    makes repeated backward passes bitwise identical.  A wrt tensor that the
    output does not depend on yields a zero gradient plus a GradWarning.
    """
    if output.data.size != 1:
        raise ValueError(f"grad expects a scalar output, got shape {output.shape}")
    wrt = list(wrt)

    # Reachable differentiable subgraph.
    visited = set()
    nodes = {}
    stack = [output]
    while stack:
        t = stack.pop()
        if id(t) in visited or not t.requires_grad:
            continue
        visited.add(id(t))
        nodes[t.node_id] = t
        stack.extend(t._parents)

    wrt_ids = {w.node_id for w in wrt}
    grads: dict[int, Tensor] = {}
    g_active = _active_graph()
    if g_active is not None:
        g_active.gradient_taped = True
    ctx = _noop_context() if create_graph else no_grad()
    with ctx:
        if output.requires_grad:
            grads[output.node_id] = Tensor(np.ones(output.shape))
            for nid in sorted(nodes, reverse=True):
                t = nodes[nid]
                g = grads.get(nid) if nid in wrt_ids else grads.pop(nid, None)
                if g is None or t._backward is None:
                    continue
                pgrads = t._backward(g)
                for p, pg in zip(t._parents, pgrads):
                    if not p.requires_grad:
                        continue
                    if p.node_id in grads:
                        grads[p.node_id] = add(grads[p.node_id], pg)
                    else:
                        grads[p.node_id] = pg

        results = []
        for w in wrt:
            gw = grads.get(w.node_id)
            if gw is None:
                warnings.warn(
                    f"grad: output does not depend on wrt tensor "
                    f"(node {w.node_id}); returning zeros", GradWarning,
                    stacklevel=2)
                gw = Tensor(np.zeros(w.shape))
            results.append(gw if create_graph else gw.detach())
    return results


@contextmanager
def _noop_context():
    yield


# ---------------------------------------------------------------------------
# Recorded graphs: an explicit replayable tape with named inputs/outputs.
# ---------------------------------------------------------------------------

class Graph:
    """Explicit tape of primitive ops, replayable on fresh input values.

    Nodes are recorded in creation order and refer only to earlier nodes, so
    the recorded list is already a topological order.  ``gradient_taped`` is
    set when a grad(create_graph=True) call appended its backward nodes here.
    """

    def __init__(self):
        self.nodes = []          # (node_id, op, parent_ids, attrs, leaf_data)
        self._by_id = {}
        self.input_names = {}    # node_id -> name
        self.output_names = {}   # name -> node_id
        self.gradient_taped = False

    @contextmanager
    def recording(self):
        prev = _active_graph()
        _state.graph = self
        try:
            yield self
        finally:
            _state.graph = prev

    def _record(self, t: Tensor, parents=()):
        if t._op == "leaf":
            entry = (t.node_id, "leaf", (), None, t.data)
        else:
            entry = (t.node_id, t._op, tuple(p.node_id for p in parents), t._attrs, None)
        self.nodes.append(entry)
        self._by_id[t.node_id] = entry

    def mark_input(self, t: Tensor, name: str):
        if t.node_id not in self._by_id:
            raise ValueError("tensor was not recorded in this graph")
        self.input_names[t.node_id] = name
        return t

    def mark_output(self, t: Tensor, name: str):
        if t.node_id not in self._by_id:
            raise ValueError("tensor was not recorded in this graph")
        self.output_names[name] = t.node_id
        return t


def forward(graph: Graph, inputs: dict) -> dict:
    """Replay a recorded graph with new values bound to its named inputs.

    Returns the named outputs as plain arrays.  Replay reuses the exact
    forward kernels of eager mode, so identical inputs reproduce identical
    outputs bit for bit.  Inputs are never mutated.
    """
    missing = set(graph.input_names.values()) - set(inputs)
    if missing:
        raise ValueError(f"forward: unbound inputs {sorted(missing)}")
    values = {}
    for node_id, op, parent_ids, attrs, leaf_data in graph.nodes:
        if op == "leaf":
            name = graph.input_names.get(node_id)
            if name is not None:
                values[node_id] = np.asarray(inputs[name], dtype=np.float64)
            else:
                values[node_id] = leaf_data
            continue
        args = [values[pid] for pid in parent_ids]
        try:
            if op == "pow_const":
                out = _FORWARD[op](args[0], attrs["p"])
            elif op in ("sum", "mean", "max_reduce"):
                out = _FORWARD[op](args[0], attrs["axis"], attrs["keepdims"])
            elif op == "softmax":
                out = _FORWARD[op](args[0], attrs["axis"])
            elif op == "clip":
                out = _FORWARD[op](args[0], attrs["lo"], attrs["hi"])
            elif op == "reshape":
                out = _FORWARD[op](args[0], attrs["shape"])
            elif op == "slice1d":
                out = _FORWARD[op](args[0], attrs["start"], attrs["stop"])
            elif op == "pad1d":
                out = _FORWARD[op](args[0], attrs["left"], attrs["right"])
            elif op == "take_per_row":
                out = _FORWARD[op](args[0], attrs["idx"])
            elif op == "scatter_per_row":
                out = _FORWARD[op](args[0], attrs["idx"], attrs["ncol"])
            else:
                out = _FORWARD[op](*args)
        except (ValueError, IndexError) as e:
            raise ShapeMismatchError(f"replay failed at node {node_id} op '{op}': {e}") from e
        values[node_id] = np.asarray(out, dtype=np.float64)
    return {name: values[nid] for name, nid in graph.output_names.items()}


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_check(fn, at, step: float = 1e-5):
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` takes len(at) leaf tensors and returns a scalar tensor; ``at`` is
    a list of arrays giving the evaluation point.  Returns the max over all
    coordinates of |analytic - numeric| / (|analytic| + 1e-8).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    at = [np.asarray(v, dtype=np.float64) for v in at]
    leaves = [leaf(v) for v in at]
    out = fn(*leaves)
    analytic = [g.data for g in grad(out, leaves)]

    def value(args):
        # fn may call grad() internally (bi-level objectives), so evaluate
        # with fresh differentiable leaves rather than inert constants.
        return fn(*[leaf(v) for v in args]).item()

    worst = 0.0
    for k, v in enumerate(at):
        num = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            vp = v.copy(); vp[idx] += step
            vm = v.copy(); vm[idx] -= step
            args_p = [vp if j == k else at[j] for j in range(len(at))]
            args_m = [vm if j == k else at[j] for j in range(len(at))]
            num[idx] = (value(args_p) - value(args_m)) / (2.0 * step)
        err = np.abs(analytic[k] - num) / (np.abs(analytic[k]) + 1e-8)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
