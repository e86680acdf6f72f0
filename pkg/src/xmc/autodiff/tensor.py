"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Every primitive computes its forward value with numpy and, when a tape is
active and one of its inputs requires a gradient, appends a node to that
tape.  Vector-Jacobian products are themselves written with primitives, so
running ``Tape.gradient(..., create_graph=True)`` records the backward pass
and the result can be differentiated again.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_K = 0.044715


class AutodiffError(Exception):
    """Base class for failures raised by the autodiff engine."""


class UnsupportedPrimitive(AutodiffError):
    def __init__(self, name: str):
        super().__init__(f"unsupported primitive: {name!r}")
        self.primitive = name


class ShapeMismatch(AutodiffError, ValueError):
    def __init__(self, op: str, a: tuple, b: tuple):
        super().__init__(f"{op}: incompatible shapes {a} and {b}")
        self.shapes = (a, b)


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def current_tape() -> "Tape":
    stack = _tape_stack()
    if not stack:
        raise AutodiffError("no active tape")
    return stack[-1]


def _recording() -> bool:
    return getattr(_local, "recording", True)


@contextmanager
def recording(enabled: bool):
    prev = _recording()
    _local.recording = enabled
    try:
        yield
    finally:
        _local.recording = prev


def no_record():
    return recording(False)


class Node:
    __slots__ = ("index", "kind", "inputs", "out", "value", "vjp", "deriv", "tape")

    def __init__(self, kind, inputs, out, vjp, deriv):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.value = out.data
        self.vjp = vjp
        self.deriv = deriv
        self.index = -1
        self.tape = None

    def __repr__(self):
        return f"Node({self.index}, {self.kind}, shape={self.value.shape})"


class Tensor:
    """A dense float64 array that may participate in a recorded graph."""

    __slots__ = ("data", "requires_grad", "node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications.

    Parents always precede children because nodes are appended in execution
    order.  Use as a context manager; nested tapes shadow outer ones.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, Tensor] = {}
        self.output: Tensor | None = None

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:
            stack.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def _append(self, node: Node):
        node.index = len(self.nodes)
        node.tape = self
        self.nodes.append(node)

    def mark(self, name: str, value) -> Tensor:
        """Create a differentiation root named ``name``."""
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self.inputs[name] = t
        return t

    def kinds(self) -> list[str]:
        return [n.kind for n in self.nodes]

    def gradient(self, output: Tensor, wrt: Sequence[Tensor], seed=None,
                 create_graph: bool = False) -> list[Tensor]:
        """Gradients of ``<seed, output>`` with respect to each of ``wrt``.

        ``wrt`` may hold leaves or intermediate tensors recorded on this
        tape.  Inputs unreachable from ``output`` receive zeros.
        """
        if seed is None:
            if output.data.size != 1:
                raise AutodiffError("seed required for non-scalar output")
            seed = np.ones_like(output.data)
        seed = as_tensor(seed)
        if seed.shape != output.shape:
            raise ShapeMismatch("seed", seed.shape, output.shape)
        if output.node is None or output.node.tape is not self:
            return [Tensor(np.zeros_like(w.data)) for w in wrt]
        wanted = {id(w) for w in wrt}
        grads: dict[int, Tensor] = {id(output): seed}
        stop = output.node.index
        _tape_stack().append(self)
        try:
            with recording(create_graph):
                for node in reversed(self.nodes[: stop + 1]):
                    key = id(node.out)
                    g = grads.get(key) if key in wanted else grads.pop(key, None)
                    if g is None:
                        continue
                    in_grads = node.vjp(g, node.out)
                    _accumulate(grads, node.inputs, in_grads)
        finally:
            self.__exit__()
        return [grads.get(id(w)) or Tensor(np.zeros_like(w.data)) for w in wrt]


def _accumulate(grads, inputs, in_grads):
    for inp, gi in zip(inputs, in_grads):
        if gi is None or not inp.requires_grad:
            continue
        key = id(inp)
        prev = grads.get(key)
        grads[key] = gi if prev is None else add(prev, gi)


def _emit(kind: str, data: np.ndarray, inputs: tuple, vjp: Callable,
          deriv: Callable | None = None) -> Tensor:
    out = Tensor(data)
    stack = _tape_stack()
    if stack and _recording() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(kind, inputs, out, vjp, deriv)
        stack[-1]._append(node)
        out.node = node
    return out


def _binary_data(op: str, fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape) from None


def unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    return g if g.shape == tuple(shape) else sum_to(g, shape)


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = _binary_data("add", np.add, a, b)
    return _emit("add", data, (a, b),
                 lambda g, out: (unbroadcast(g, a.shape) if a.requires_grad else None,
                                 unbroadcast(g, b.shape) if b.requires_grad else None))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = _binary_data("sub", np.subtract, a, b)
    return _emit("sub", data, (a, b),
                 lambda g, out: (unbroadcast(g, a.shape) if a.requires_grad else None,
                                 unbroadcast(neg(g), b.shape) if b.requires_grad else None))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = _binary_data("multiply", np.multiply, a, b)

    def vjp(g, out):
        ga = unbroadcast(mul(g, b), a.shape) if a.requires_grad else None
        gb = unbroadcast(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("multiply", data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = _binary_data("divide", np.divide, a, b)

    def vjp(g, out):
        ga = unbroadcast(div(g, b), a.shape) if a.requires_grad else None
        gb = unbroadcast(neg(div(mul(g, out), b)), b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("divide", data, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g, out: (neg(g),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    if a.ndim > 2 and b.ndim == 2:
        # one BLAS call instead of a loop over the leading dimensions
        flat = matmul(reshape(a, (-1, a.shape[-1])), b)
        return reshape(flat, a.shape[:-1] + (b.shape[-1],))
    data = _binary_data("matmul", np.matmul, a, b)

    def vjp(g, out):
        ga = unbroadcast(matmul(g, swapaxes(b, -1, -2)), a.shape) if a.requires_grad else None
        gb = unbroadcast(matmul(swapaxes(a, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", data, (a, b), vjp)


# ---------------------------------------------------------------- reductions / shape

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _keepdims_shape(shape, axes):
    return tuple(1 if i in axes else d for i, d in enumerate(shape))


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    data = np.sum(a.data, axis=axes, keepdims=keepdims)

    def vjp(g, out):
        if not keepdims:
            g = reshape(g, _keepdims_shape(a.shape, axes))
        return (broadcast_to(g, a.shape),)

    return _emit("sum", data, (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum_(a, axes, keepdims), 1.0 / count)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        data = np.array(np.broadcast_to(a.data, shape))
    except ValueError:
        raise ShapeMismatch("broadcast_to", a.shape, shape) from None
    return _emit("broadcast_to", data, (a,), lambda g, out: (sum_to(g, a.shape),))


def sum_to(a, shape) -> Tensor:
    """Sum ``a`` down to ``shape`` (the adjoint of broadcasting)."""
    a = as_tensor(a)
    shape = tuple(shape)
    lead = a.ndim - len(shape)
    if lead < 0:
        raise ShapeMismatch("sum_to", a.shape, shape)
    data = a.data.sum(axis=tuple(range(lead))) if lead else a.data
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and data.shape[i] != 1)
    if axes:
        data = data.sum(axis=axes, keepdims=True)
    if data.shape != shape:
        raise ShapeMismatch("sum_to", a.shape, shape)
    return _emit("sum_to", data, (a,), lambda g, out: (broadcast_to(g, a.shape),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)
    return _emit("reshape", data, (a,), lambda g, out: (reshape(g, a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes)
    return _emit("transpose", data, (a,), lambda g, out: (transpose(g, inverse),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    data = np.swapaxes(a.data, ax1, ax2)
    return _emit("transpose", data, (a,), lambda g, out: (swapaxes(g, ax1, ax2),))


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    data = np.array(a.data[key])
    return _emit("getitem", data, (a,), lambda g, out: (_put(g, key, a.shape),))


def _put(g, key, shape) -> Tensor:
    g = as_tensor(g)
    data = np.zeros(shape)
    np.add.at(data, key, g.data)
    return _emit("put", data, (g,), lambda gg, out: (getitem(gg, key),))


def gather(table, ids) -> Tensor:
    """Embedding lookup: rows of ``table`` selected by integer ``ids``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeMismatch("embedding_gather", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_gather: id out of range for table of {table.shape[0]} rows")
    data = table.data[ids]
    return _emit("embedding_gather", data, (table,),
                 lambda g, out: (scatter_add(g, ids, table.shape[0]),))


def scatter_add(g, ids, rows: int) -> Tensor:
    g = as_tensor(g)
    ids = np.asarray(ids, dtype=np.int64)
    data = np.zeros((rows, g.shape[-1]))
    np.add.at(data, ids.reshape(-1), g.data.reshape(-1, g.shape[-1]))
    return _emit("scatter_add", data, (g,), lambda gg, out: (gather(gg, ids),))


# ---------------------------------------------------------------- nonlinearities

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, out):
        inner = sum_(mul(g, out), axis, keepdims=True)
        return (mul(out, sub(g, inner)),)

    return _emit("softmax", data, (a,), vjp)


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = _sigmoid_np(np.atleast_1d(a.data)).reshape(a.shape)
    return _emit("sigmoid", data, (a,),
                 lambda g, out: (mul(g, mul(out, sub(1.0, out))),),
                 deriv=lambda x, y: y * (1.0 - y))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    return _emit("tanh", np.tanh(a.data), (a,),
                 lambda g, out: (mul(g, sub(1.0, mul(out, out))),),
                 deriv=lambda x, y: 1.0 - y * y)


def exp(a) -> Tensor:
    a = as_tensor(a)
    return _emit("exp", np.exp(a.data), (a,),
                 lambda g, out: (mul(g, out),),
                 deriv=lambda x, y: y)


def _gelu_deriv_np(x, y=None):
    u = _GELU_C * (x + _GELU_K * (x * x * x))
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * _GELU_K * x * x)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    data = 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_K * (x * x * x))))

    def vjp(g, out):
        x2 = mul(a, a)
        t = tanh(mul(a, add(mul(x2, _GELU_C * _GELU_K), _GELU_C)))
        du = add(mul(x2, 3 * _GELU_K * _GELU_C), _GELU_C)
        d = add(mul(add(t, 1.0), 0.5), mul(mul(mul(a, sub(1.0, mul(t, t))), du), 0.5))
        return (mul(g, d),)

    return _emit("gelu", data, (a,), vjp, deriv=_gelu_deriv_np)


def log(a) -> Tensor:
    a = as_tensor(a)
    return _emit("log", np.log(a.data), (a,),
                 lambda g, out: (div(g, a),),
                 deriv=lambda x, y: 1.0 / x)


def rsqrt(a) -> Tensor:
    a = as_tensor(a)
    data = 1.0 / np.sqrt(a.data)
    return _emit("rsqrt", data, (a,),
                 lambda g, out: (mul(g, mul(mul(mul(out, out), out), -0.5)),),
                 deriv=lambda x, y: -0.5 * y**3)


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _emit("abs", np.abs(a.data), (a,),
                 lambda g, out: (mul(g, sign),),
                 deriv=lambda x, y: np.sign(x))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data)
    if lo is not None:
        inside[a.data < lo] = 0.0
    if hi is not None:
        inside[a.data > hi] = 0.0
    return _emit("clamp", data, (a,),
                 lambda g, out: (mul(g, inside),),
                 deriv=lambda x, y: inside)


def layernorm(a, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine part)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    r = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    data = xc * r

    def vjp(g, out):
        xc_t = sub(a, mean(a, -1, keepdims=True))
        r_t = rsqrt(add(mean(mul(xc_t, xc_t), -1, keepdims=True), eps))
        xhat = mul(xc_t, r_t)
        inner = sub(sub(g, mean(g, -1, keepdims=True)),
                    mul(xhat, mean(mul(g, xhat), -1, keepdims=True)))
        return (mul(r_t, inner),)

    return _emit("layernorm", data, (a,), vjp)


def l2_norm(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    data = np.sqrt(np.sum(a.data * a.data, axis=axes, keepdims=keepdims))

    def vjp(g, out):
        if not keepdims:
            g = reshape(g, _keepdims_shape(a.shape, axes))
            out = reshape(out, _keepdims_shape(a.shape, axes))
        safe = add(out, (out.data == 0).astype(np.float64))
        return (mul(a, div(g, safe)),)

    return _emit("l2_norm", data, (a,), vjp)


def l1_norm(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    data = np.sum(np.abs(a.data), axis=axes, keepdims=keepdims)
    sign = np.sign(a.data)

    def vjp(g, out):
        if not keepdims:
            g = reshape(g, _keepdims_shape(a.shape, axes))
        return (mul(broadcast_to(g, a.shape), sign),)

    return _emit("l1_norm", data, (a,), vjp)


# names accepted by graph-description programs
PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "multiply": mul,
    "divide": div,
    "neg": neg,
    "matmul": matmul,
    "sum": sum_,
    "mean": mean,
    "reshape": reshape,
    "transpose": transpose,
    "embedding_gather": gather,
    "softmax": softmax,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "gelu": gelu,
    "layernorm": layernorm,
    "log": log,
    "abs": abs_,
    "clamp": clamp,
    "l1_norm": l1_norm,
    "l2_norm": l2_norm,
}


def primitive(name: str) -> Callable:
    try:
        return PRIMITIVES[name]
    except KeyError:
        raise UnsupportedPrimitive(name) from None
