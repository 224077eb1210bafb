"""Tape-based reverse-mode differentiation over dense float64 arrays.

Execution is eager: ``record_op`` computes the forward value immediately and
appends one node to an append-only tape, so node ids are already in
topological order and ``backward`` is a single reverse sweep with additive
gradient accumulation.  A graph belongs to one forward/backward pass and is
not safe for concurrent mutation.

The op vocabulary is fixed: affine, matmul, add, mul, tanh, sigmoid, exp,
log, relu, sum, mean, concat, slice, softmax.  Everything else in the
package (subtraction, scaling, attention-free pooling, losses) is composed
from these.
"""

from __future__ import annotations

import numpy as np

from dualdyn.kernels import impl as K

OP_KINDS = (
    "affine",
    "matmul",
    "add",
    "mul",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "relu",
    "sum",
    "mean",
    "concat",
    "slice",
    "softmax",
)

_UNARY = {"tanh", "sigmoid", "exp", "log", "relu"}


class GraphError(ValueError):
    """Malformed tape operation: unknown kind, bad arity or shape mismatch."""


class Tensor:
    """Dense 64-bit value plus a trainability flag.

    ``data`` is always a C-contiguous float64 array (scalars are rank-0).
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # ascontiguousarray would flatten rank-0
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    def copy(self):
        return Tensor(self.data.copy(), self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Node:
    __slots__ = ("id", "kind", "value", "inputs", "needs_grad", "meta", "name")

    def __init__(self, nid, kind, value, inputs, needs_grad, meta=None, name=None):
        self.id = nid
        self.kind = kind
        self.value = value
        self.inputs = inputs
        self.needs_grad = needs_grad
        self.meta = meta
        self.name = name


class Graph:
    """Append-only tape of eagerly evaluated ops.

    ``gradients`` is populated by :func:`backward` (one entry per node,
    ``None`` where the loss does not reach).
    """

    def __init__(self):
        self.nodes = []
        self.gradients = None
        self._bound = {}

    def __len__(self):
        return len(self.nodes)

    def leaf(self, tensor, name=None):
        """Append a leaf node holding ``tensor`` and return its id."""
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        nid = len(self.nodes)
        self.nodes.append(
            Node(nid, "leaf", tensor.data, (), tensor.requires_grad, name=name)
        )
        return nid

    def param(self, name, tensor):
        """Bind a named parameter once; repeated binds return the same node."""
        nid = self._bound.get(name)
        if nid is not None:
            if self.nodes[nid].value is not tensor.data:
                raise GraphError(f"parameter name {name!r} bound to two different tensors")
            return nid
        nid = self.leaf(tensor, name=name)
        self._bound[name] = nid
        return nid

    def constant(self, value):
        return self.leaf(Tensor(value, requires_grad=False))

    def value(self, nid):
        return self.nodes[nid].value

    def grad(self, nid):
        if self.gradients is None:
            return None
        return self.gradients[nid]


def _check_arity(kind, inputs, expected):
    if len(inputs) != expected:
        raise GraphError(f"{kind}: expected {expected} inputs, got {len(inputs)}")


def record_op(graph, kind, inputs, **meta):
    """Evaluate one op on existing nodes and append the result node.

    ``inputs`` is a sequence of node ids.  Per-kind keyword metadata:
    ``axis`` for sum/mean/concat, ``key`` (a tuple of slices) for slice.
    Returns the new node id.
    """
    if kind not in OP_KINDS:
        raise GraphError(f"unknown op kind {kind!r}")
    inputs = tuple(int(i) for i in inputs)
    n = len(graph.nodes)
    for i in inputs:
        if not 0 <= i < n:
            raise GraphError(f"{kind}: input id {i} out of range (tape has {n} nodes)")
    vals = [graph.nodes[i].value for i in inputs]

    if kind == "affine":
        _check_arity(kind, inputs, 3)
        x, w, b = vals
        vec = x.ndim == 1
        if w.ndim != 2 or b.ndim != 1 or x.ndim not in (1, 2):
            raise GraphError(
                f"affine: need x 1-D/2-D, w 2-D, b 1-D; got {x.shape}, {w.shape}, {b.shape}"
            )
        if x.shape[-1] != w.shape[0] or w.shape[1] != b.shape[0]:
            raise GraphError(
                f"affine: inner dims disagree for x {x.shape}, w {w.shape}, b {b.shape}"
            )
        x2 = x[None, :] if vec else x
        out = K.affine_forward(x2, w, b)
        value = out[0] if vec else out
        meta = {"vec": vec}
    elif kind == "matmul":
        _check_arity(kind, inputs, 2)
        a, b = vals
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise GraphError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        value = K.matmul_forward(a, b)
    elif kind in ("add", "mul"):
        _check_arity(kind, inputs, 2)
        a, b = vals
        try:
            value = a + b if kind == "add" else a * b
        except ValueError:
            raise GraphError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast")
    elif kind in _UNARY:
        _check_arity(kind, inputs, 1)
        value = getattr(K, kind + "_forward")(vals[0])
    elif kind in ("sum", "mean"):
        _check_arity(kind, inputs, 1)
        axis = meta.get("axis")
        x = vals[0]
        if axis is not None and not -x.ndim <= axis < x.ndim:
            raise GraphError(f"{kind}: axis {axis} invalid for shape {x.shape}")
        value = x.sum(axis=axis) if kind == "sum" else x.mean(axis=axis)
        value = np.asarray(value)
        meta = {"axis": axis}
    elif kind == "concat":
        if len(inputs) < 2:
            raise GraphError("concat: need at least two inputs")
        axis = meta.get("axis", -1)
        try:
            value = np.concatenate(vals, axis=axis)
        except ValueError:
            raise GraphError(
                f"concat: shapes {[v.shape for v in vals]} do not align on axis {axis}"
            )
        meta = {"axis": axis, "sizes": [v.shape[axis] for v in vals]}
    elif kind == "slice":
        _check_arity(kind, inputs, 1)
        key = meta.get("key")
        if not isinstance(key, tuple) or not all(isinstance(k, slice) for k in key):
            raise GraphError("slice: meta 'key' must be a tuple of slice objects")
        x = vals[0]
        if len(key) > x.ndim:
            raise GraphError(f"slice: key length {len(key)} exceeds rank of {x.shape}")
        value = np.ascontiguousarray(x[key])
        meta = {"key": tuple(key)}
    elif kind == "softmax":
        _check_arity(kind, inputs, 1)
        x = vals[0]
        vec = x.ndim == 1
        if x.ndim not in (1, 2):
            raise GraphError(f"softmax: need 1-D or 2-D input, got {x.shape}")
        out = K.softmax_forward(x[None, :] if vec else x)
        value = out[0] if vec else out
        meta = {"vec": vec}

    needs = any(graph.nodes[i].needs_grad for i in inputs)
    nid = len(graph.nodes)
    graph.nodes.append(Node(nid, kind, np.asarray(value), inputs, needs, meta))
    return nid


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _kernel_ready(a):
    """Contiguous writable copy when needed (kernels reject strided views)."""
    if a.flags["C_CONTIGUOUS"] and a.flags["WRITEABLE"]:
        return a
    return np.array(a, dtype=np.float64, order="C")


def _op_input_grads(node, nodes, g):
    """Yield (input id, gradient contribution) pairs for one node."""
    kind = node.kind
    vals = [nodes[i].value for i in node.inputs]
    if kind == "affine":
        x, w, _ = vals
        vec = node.meta["vec"]
        x2 = x[None, :] if vec else x
        g2 = _kernel_ready(g[None, :] if vec else g)
        gx, gw, gb = K.affine_backward(x2, w, g2)
        yield node.inputs[0], gx[0] if vec else gx
        yield node.inputs[1], gw
        yield node.inputs[2], gb
    elif kind == "matmul":
        ga, gb = K.matmul_backward(vals[0], vals[1], _kernel_ready(g))
        yield node.inputs[0], ga
        yield node.inputs[1], gb
    elif kind == "add":
        yield node.inputs[0], _unbroadcast(g, vals[0].shape)
        yield node.inputs[1], _unbroadcast(g, vals[1].shape)
    elif kind == "mul":
        yield node.inputs[0], _unbroadcast(g * vals[1], vals[0].shape)
        yield node.inputs[1], _unbroadcast(g * vals[0], vals[1].shape)
    elif kind in ("tanh", "sigmoid", "exp"):
        yield node.inputs[0], getattr(K, kind + "_backward")(node.value, _kernel_ready(g))
    elif kind in ("log", "relu"):
        yield node.inputs[0], getattr(K, kind + "_backward")(vals[0], _kernel_ready(g))
    elif kind in ("sum", "mean"):
        axis = node.meta["axis"]
        x = vals[0]
        if kind == "mean":
            g = g / (x.size if axis is None else x.shape[axis])
        src = g if axis is None else np.expand_dims(g, axis)
        yield node.inputs[0], np.broadcast_to(src, x.shape).copy()
    elif kind == "concat":
        axis = node.meta["axis"]
        start = 0
        for iid, size in zip(node.inputs, node.meta["sizes"]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + size)
            yield iid, g[tuple(sl)]
            start += size
    elif kind == "slice":
        gx = np.zeros_like(vals[0])
        gx[node.meta["key"]] = g
        yield node.inputs[0], gx
    elif kind == "softmax":
        vec = node.meta["vec"]
        y = node.value[None, :] if vec else node.value
        g2 = _kernel_ready(g[None, :] if vec else g)
        gx = K.softmax_backward(y, g2)
        yield node.inputs[0], gx[0] if vec else gx


def backward(graph, loss_id):
    """Reverse sweep from a scalar loss node.

    Fills ``graph.gradients`` (per node) and returns the gradient set: a dict
    mapping each bound parameter name to its gradient Tensor, with zeros for
    parameters the loss does not reach.
    """
    if not 0 <= loss_id < len(graph.nodes):
        raise GraphError(f"backward: node id {loss_id} not on tape")
    loss = graph.nodes[loss_id]
    if loss.value.shape != ():
        raise GraphError(f"backward: loss must be scalar, got shape {loss.value.shape}")

    grads = [None] * len(graph.nodes)
    grads[loss_id] = np.ones((), dtype=np.float64)
    for nid in range(loss_id, -1, -1):
        g = grads[nid]
        node = graph.nodes[nid]
        if g is None or node.kind == "leaf" or not node.needs_grad:
            continue
        for iid, ig in _op_input_grads(node, graph.nodes, g):
            if not graph.nodes[iid].needs_grad:
                continue
            # out-of-place accumulation: contributions may alias upstream grads
            grads[iid] = ig if grads[iid] is None else grads[iid] + ig
    graph.gradients = grads

    out = {}
    for name, nid in graph._bound.items():
        node = graph.nodes[nid]
        if not node.needs_grad:
            continue
        g = grads[nid]
        if g is None:
            g = np.zeros_like(node.value)
        out[name] = Tensor(np.broadcast_to(g, node.value.shape).copy())
    return out


def finite_difference_grad(f, params, eps=1e-5):
    """Central-difference gradient oracle.

    ``f`` is a zero-argument callable returning a float; it must read the
    current ``.data`` of the tensors in ``params`` (dict name -> Tensor),
    which are perturbed in place one coordinate at a time and restored.
    """
    out = {}
    for name, tensor in params.items():
        flat = tensor.data.ravel()
        grad = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f())
            flat[i] = orig - eps
            fm = float(f())
            flat[i] = orig
            grad[i] = (fp - fm) / (2.0 * eps)
        out[name] = grad.reshape(tensor.data.shape)
    return out


def init_params(shape, scheme="xavier_uniform", rng=None):
    """Fresh parameter Tensor: xavier-uniform weights or zeros."""
    shape = tuple(int(s) for s in shape)
    if scheme == "zeros":
        data = np.zeros(shape)
    elif scheme == "xavier_uniform":
        if rng is None:
            raise ValueError("xavier_uniform needs an rng")
        if len(shape) == 2:
            fan_in, fan_out = shape
        else:
            fan_in = fan_out = shape[0] if shape else 1
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        data = rng.uniform(-limit, limit, size=shape)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(data, requires_grad=True)


class TapeOps:
    """Op context that records on a Graph; handles are node ids.

    Model code is written against this interface once and can run either
    traced (TapeOps) or plain (ArrayOps) for inference-only paths.
    """

    traced = True

    def __init__(self, graph=None):
        self.graph = graph if graph is not None else Graph()

    def value(self, h):
        return self.graph.value(h)

    def param(self, name, tensor):
        return self.graph.param(name, tensor)

    def const(self, value):
        return self.graph.constant(value)

    def affine(self, x, w, b):
        return record_op(self.graph, "affine", (x, w, b))

    def matmul(self, a, b):
        return record_op(self.graph, "matmul", (a, b))

    def add(self, a, b):
        return record_op(self.graph, "add", (a, b))

    def mul(self, a, b):
        return record_op(self.graph, "mul", (a, b))

    def sub(self, a, b):
        neg = record_op(self.graph, "mul", (b, self.const(-1.0)))
        return record_op(self.graph, "add", (a, neg))

    def scale(self, x, c):
        return record_op(self.graph, "mul", (x, self.const(float(c))))

    def tanh(self, x):
        return record_op(self.graph, "tanh", (x,))

    def sigmoid(self, x):
        return record_op(self.graph, "sigmoid", (x,))

    def relu(self, x):
        return record_op(self.graph, "relu", (x,))

    def exp(self, x):
        return record_op(self.graph, "exp", (x,))

    def log(self, x):
        return record_op(self.graph, "log", (x,))

    def softmax(self, x):
        return record_op(self.graph, "softmax", (x,))

    def concat(self, parts, axis=-1):
        return record_op(self.graph, "concat", tuple(parts), axis=axis)

    def slice_cols(self, x, start, stop):
        ndim = self.graph.value(x).ndim
        key = (slice(None),) * (ndim - 1) + (slice(start, stop),)
        return record_op(self.graph, "slice", (x,), key=key)

    def sum(self, x, axis=None):
        return record_op(self.graph, "sum", (x,), axis=axis)

    def mean(self, x, axis=None):
        return record_op(self.graph, "mean", (x,), axis=axis)


class ArrayOps:
    """Numpy twin of TapeOps for untraced evaluation; handles are arrays."""

    traced = False

    def value(self, h):
        return h

    def param(self, name, tensor):
        return tensor.data

    def const(self, value):
        return np.asarray(value, dtype=np.float64)

    def affine(self, x, w, b):
        return x @ w + b

    def matmul(self, a, b):
        return a @ b

    def add(self, a, b):
        return a + b

    def mul(self, a, b):
        return a * b

    def sub(self, a, b):
        return a - b

    def scale(self, x, c):
        return x * float(c)

    def tanh(self, x):
        return np.tanh(x)

    def sigmoid(self, x):
        return K.sigmoid_forward(np.asarray(x, dtype=np.float64))

    def relu(self, x):
        return np.maximum(x, 0.0)

    def exp(self, x):
        return np.exp(x)

    def log(self, x):
        return np.log(x)

    def softmax(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return K.softmax_forward(x[None, :])[0]
        return K.softmax_forward(x)

    def concat(self, parts, axis=-1):
        return np.concatenate(parts, axis=axis)

    def slice_cols(self, x, start, stop):
        return x[..., start:stop]

    def sum(self, x, axis=None):
        return np.asarray(x.sum(axis=axis))

    def mean(self, x, axis=None):
        return np.asarray(x.mean(axis=axis))


def average(ops, handles):
    """Pointwise mean of a non-empty list of same-shape handles."""
    if not handles:
        raise ValueError("average: empty list")
    acc = handles[0]
    for h in handles[1:]:
        acc = ops.add(acc, h)
    return ops.scale(acc, 1.0 / len(handles))
