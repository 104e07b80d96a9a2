"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every primitive records a node on the active :class:`Tape`. The backward pass
is written in terms of the same primitives, so with ``create_graph=True`` the
gradients are themselves recorded and can be differentiated again. This is
what lets the outer loop differentiate through an unrolled inner loop.

Shapes never broadcast implicitly. ``linear`` adds its bias row-wise and
``expand``/``fill`` replicate along an axis; everything else requires equal
shapes.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ADError", "ShapeError", "DomainError", "TapeError",
    "Tape", "Var", "constant", "active_tape", "no_record",
    "add", "sub", "mul", "div", "neg", "scale", "add_scalar",
    "matmul", "linear", "relu", "leaky_relu", "softmax", "log_softmax",
    "log", "exp", "square", "sqrt", "abs", "mean", "sum", "concat",
    "slice_", "one_hot", "transpose", "reshape", "expand", "fill",
    "stop_gradient", "grad", "finite_diff",
]


class ADError(Exception):
    """Base class for engine errors."""


class ShapeError(ADError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        listed = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {listed}")


class DomainError(ADError, ValueError):
    def __init__(self, op: str, detail: str):
        self.op = op
        super().__init__(f"{op}: {detail}")


class TapeError(ADError, RuntimeError):
    pass


_local = threading.local()


def _tapes() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Tape | None:
    """The innermost open tape of this thread, or None when not recording."""
    if getattr(_local, "paused", 0):
        return None
    stack = _tapes()
    return stack[-1] if stack else None


@contextmanager
def no_record():
    """Evaluate operations without recording them (results are constants)."""
    _local.paused = getattr(_local, "paused", 0) + 1
    try:
        yield
    finally:
        _local.paused -= 1


class Node:
    __slots__ = ("index", "op", "parents", "pidx", "attrs", "out", "tape")

    def __init__(self, index, op, parents, attrs, out, tape):
        self.index = index
        self.op = op
        self.parents = parents
        self.pidx = tuple([-1 if p.node is None else p.node.index for p in parents])
        self.attrs = attrs
        self.out = out
        self.tape = tape


class Tape:
    """Ordered record of operations for one differentiation scope.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction. A tape is live while its ``with`` block is open;
    afterwards its variables can still be read but not differentiated.
    """

    _generations = itertools.count()

    def __init__(self):
        self.nodes: list[Node] = []
        self.generation = next(self._generations)
        self.live = False

    def __enter__(self):
        self.live = True
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tapes()
        if stack and stack[-1] is self:
            stack.pop()
        self.live = False
        return False

    def __len__(self):
        return len(self.nodes)

    def watch(self, value, dtype=None) -> Var:
        """Register ``value`` as a differentiable leaf on this tape."""
        if not self.live:
            raise TapeError("cannot watch a value on a closed tape")
        if isinstance(value, Var):
            value = value.value
        arr = np.array(value, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        var = Var(arr)
        var.node = Node(len(self.nodes), "leaf", (), None, var, self)
        self.nodes.append(var.node)
        return var

    def _record(self, op, parents, attrs, value) -> Var:
        var = Var(value)
        var.node = Node(len(self.nodes), op, parents, attrs, var, self)
        self.nodes.append(var.node)
        return var

    def replay(self) -> bool:
        """Recompute every node from its parents' stored values.

        Returns True when every recomputed output is bit-identical to the
        recorded one.
        """
        for node in self.nodes:
            if node.op == "leaf":
                continue
            fwd = _FORWARD[node.op]
            again = fwd(*[p.value for p in node.parents], **(node.attrs or {}))
            if not np.array_equal(again, node.out.value):
                return False
        return True


class Var:
    """A tensor value, optionally attached to a tape node."""

    __slots__ = ("value", "node", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, value, node=None):
        self.value = value
        self.node = node

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        tag = "const" if self.node is None else f"node={self.node.index}"
        return f"Var({self.value!r}, {tag})"

    def __add__(self, other):
        if np.isscalar(other):
            return add_scalar(self, other)
        return add(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if np.isscalar(other):
            return add_scalar(self, -other)
        return sub(self, other)

    def __rsub__(self, other):
        if np.isscalar(other):
            return add_scalar(neg(self), other)
        return sub(_as_var(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def constant(value, dtype=None) -> Var:
    """Wrap an array as a Var that never receives gradient."""
    if isinstance(value, Var):
        return Var(value.value)
    arr = np.asarray(value, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64 if dtype is None else dtype)
    return Var(arr)


def _as_var(x, like: Var | None = None) -> Var:
    if isinstance(x, Var):
        return x
    dtype = like.dtype if like is not None else None
    return Var(np.asarray(x, dtype=dtype))


# op name -> forward(values..., **attrs) and vjp(g, node) -> tuple of Var|None
_FORWARD: dict[str, Callable] = {}
_VJP: dict[str, Callable] = {}
# ops whose vjp takes a third argument: which parents need a gradient
_MASKED: set[str] = set()


def _defop(name, forward, vjp, masked: bool = False):
    _FORWARD[name] = forward
    _VJP[name] = vjp
    if masked:
        _MASKED.add(name)


def _apply(op: str, args: tuple, attrs: dict | None = None) -> Var:
    fwd = _FORWARD[op]
    out = fwd(*[a.value for a in args], **attrs) if attrs else fwd(*[a.value for a in args])
    local = _local.__dict__
    if local.get("paused"):
        return Var(out)
    stack = local.get("tapes")
    if not stack:
        return Var(out)
    tape = stack[-1]
    for a in args:
        node = a.node
        if node is not None:
            if node.tape is not tape:
                raise TapeError(f"{op}: operand belongs to an inactive tape")
            var = Var(out)
            var.node = Node(len(tape.nodes), op, args, attrs, var, tape)
            tape.nodes.append(var.node)
            return var
    return Var(out)


def _same_shape(op, a: Var, b: Var):
    if a.value.shape != b.value.shape:
        raise ShapeError(op, a.value.shape, b.value.shape)


# -- elementwise arithmetic -------------------------------------------------

def _pair(a, b) -> tuple[Var, Var]:
    return _as_var(a, b if isinstance(b, Var) else None), _as_var(b, a if isinstance(a, Var) else None)


def add(a, b) -> Var:
    if a.__class__ is not Var or b.__class__ is not Var:
        a, b = _pair(a, b)
    if a.value.shape != b.value.shape:
        raise ShapeError("add", a.value.shape, b.value.shape)
    return _apply("add", (a, b))


def sub(a, b) -> Var:
    if a.__class__ is not Var or b.__class__ is not Var:
        a, b = _pair(a, b)
    if a.value.shape != b.value.shape:
        raise ShapeError("subtract", a.value.shape, b.value.shape)
    return _apply("sub", (a, b))


def mul(a, b) -> Var:
    if a.__class__ is not Var or b.__class__ is not Var:
        a, b = _pair(a, b)
    if a.value.shape != b.value.shape:
        raise ShapeError("multiply", a.value.shape, b.value.shape)
    return _apply("mul", (a, b))


def div(a, b) -> Var:
    if a.__class__ is not Var or b.__class__ is not Var:
        a, b = _pair(a, b)
    if a.value.shape != b.value.shape:
        raise ShapeError("divide", a.value.shape, b.value.shape)
    return _apply("div", (a, b))


def neg(a: Var) -> Var:
    return _apply("neg", (a,))


def scale(a: Var, c: float) -> Var:
    """Multiply by a Python scalar."""
    return _apply("scale", (a,), {"c": c})


def add_scalar(a: Var, c: float) -> Var:
    return _apply("add_scalar", (a,), {"c": c})


def _mul_vjp(g, n, need):
    a, b = n.parents
    return (mul(g, b) if need[0] else None), (mul(g, a) if need[1] else None)


def _div_vjp(g, n, need):
    b = n.parents[1]
    return ((div(g, b) if need[0] else None),
            (neg(div(mul(g, n.out), b)) if need[1] else None))


_defop("add", np.add, lambda g, n: (g, g))
_defop("sub", np.subtract, lambda g, n, need: (g, neg(g) if need[1] else None), masked=True)
_defop("mul", np.multiply, _mul_vjp, masked=True)
_defop("div", np.divide, _div_vjp, masked=True)
_defop("neg", np.negative, lambda g, n: (neg(g),))


def _scale_fwd(a, c):
    return a * a.dtype.type(c)


def _add_scalar_fwd(a, c):
    return a + a.dtype.type(c)


_defop("scale", _scale_fwd, lambda g, n: (scale(g, n.attrs["c"]),))
_defop("add_scalar", _add_scalar_fwd, lambda g, n: (g,))


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Var:
    a, b = _as_var(a, b if isinstance(b, Var) else None), _as_var(b, a if isinstance(a, Var) else None)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _apply("matmul", (a, b))


def _matmul_vjp(g, n, need):
    a, b = n.parents
    return (matmul_nt(g, b) if need[0] else None), (matmul_tn(a, g) if need[1] else None)


_defop("matmul", np.matmul, _matmul_vjp, masked=True)


# a @ b.T and a.T @ b as single nodes, so backward passes record no transposes
def matmul_nt(a: Var, b: Var) -> Var:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("matmul_nt", a.shape, b.shape)
    return _apply("matmul_nt", (a, b))


def matmul_tn(a: Var, b: Var) -> Var:
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError("matmul_tn", a.shape, b.shape)
    return _apply("matmul_tn", (a, b))


def _matmul_nt_vjp(g, n, need):
    a, b = n.parents
    return (matmul(g, b) if need[0] else None), (matmul_tn(g, a) if need[1] else None)


def _matmul_tn_vjp(g, n, need):
    a, b = n.parents
    return (matmul_nt(b, g) if need[0] else None), (matmul(a, g) if need[1] else None)


_defop("matmul_nt", lambda a, b: a @ b.T, _matmul_nt_vjp, masked=True)
_defop("matmul_tn", lambda a, b: a.T @ b, _matmul_tn_vjp, masked=True)


def linear(x: Var, weight: Var, bias: Var | None = None) -> Var:
    """``x @ weight.T + bias`` with the bias added to every row.

    ``weight`` is (out, in); ``x`` is (n, in); ``bias`` is (out,).
    """
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError("linear", x.shape, weight.shape)
    if bias is None:
        return _apply("linear_nobias", (x, weight))
    if bias.shape != (weight.shape[0],):
        raise ShapeError("linear", weight.shape, bias.shape)
    return _apply("linear", (x, weight, bias))


def _linear_fwd(x, w, b):
    return x @ w.T + b


def _linear_vjp(g, n, need):
    x, w = n.parents[0], n.parents[1]
    gx = matmul(g, w) if need[0] else None
    gw = matmul_tn(g, x) if need[1] else None
    if len(n.parents) == 2:
        return gx, gw
    return gx, gw, (sum(g, axis=0) if need[2] else None)


_defop("linear", _linear_fwd, _linear_vjp, masked=True)
_defop("linear_nobias", lambda x, w: x @ w.T, _linear_vjp, masked=True)


def transpose(a: Var) -> Var:
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _apply("transpose", (a,))


_defop("transpose", lambda a: np.ascontiguousarray(a.T), lambda g, n: (transpose(g),))


def reshape(a: Var, shape) -> Var:
    shape = tuple(shape)
    if math.prod(shape) != a.size:
        raise ShapeError("reshape", a.shape, shape)
    return _apply("reshape", (a,), {"shape": shape})


_defop("reshape", lambda a, shape: a.reshape(shape),
       lambda g, n: (reshape(g, n.parents[0].shape),))


# -- nonlinearities -----------------------------------------------------------

def relu(a: Var) -> Var:
    return _apply("relu", (a,))


def _relu_fwd(a):
    return np.maximum(a, 0).astype(a.dtype, copy=False)


def _relu_vjp(g, n):
    mask = (n.parents[0].value > 0).astype(g.dtype)
    return (mul(g, Var(mask)),)


_defop("relu", _relu_fwd, _relu_vjp)


def leaky_relu(a: Var, slope: float = 0.01) -> Var:
    return _apply("leaky_relu", (a,), {"slope": slope})


def _leaky_fwd(a, slope):
    return np.where(a > 0, a, a * a.dtype.type(slope))


def _leaky_vjp(g, n):
    x = n.parents[0].value
    d = np.where(x > 0, 1.0, n.attrs["slope"]).astype(g.dtype)
    return (mul(g, Var(d)),)


_defop("leaky_relu", _leaky_fwd, _leaky_vjp)


def identity(a: Var) -> Var:
    return a


def softmax(a: Var, axis: int = -1) -> Var:
    return _apply("softmax", (a,), {"axis": axis % a.ndim})


def _softmax_fwd(a, axis):
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_vjp(g, n):
    y = n.out
    axis = n.attrs["axis"]
    inner = expand(sum(mul(g, y), axis=axis), axis, y.shape[axis])
    return (mul(y, sub(g, inner)),)


_defop("softmax", _softmax_fwd, _softmax_vjp)


def log_softmax(a: Var, axis: int = -1) -> Var:
    return _apply("log_softmax", (a,), {"axis": axis % a.ndim})


def _log_softmax_fwd(a, axis):
    z = a - a.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _log_softmax_vjp(g, n):
    axis = n.attrs["axis"]
    p = exp(n.out)
    total = expand(sum(g, axis=axis), axis, p.shape[axis])
    return (sub(g, mul(p, total)),)


_defop("log_softmax", _log_softmax_fwd, _log_softmax_vjp)


def log(a: Var) -> Var:
    if np.any(a.value <= 0):
        raise DomainError("log", "input has non-positive entries")
    return _apply("log", (a,))


_defop("log", np.log, lambda g, n: (div(g, n.parents[0]),))


def exp(a: Var) -> Var:
    return _apply("exp", (a,))


_defop("exp", np.exp, lambda g, n: (mul(g, n.out),))


def square(a: Var) -> Var:
    return _apply("square", (a,))


_defop("square", np.square, lambda g, n: (scale(mul(g, n.parents[0]), 2.0),))


def sqrt(a: Var) -> Var:
    if np.any(a.value < 0):
        raise DomainError("sqrt", "input has negative entries")
    return _apply("sqrt", (a,))


_defop("sqrt", np.sqrt, lambda g, n: (scale(div(g, n.out), 0.5),))


def abs(a: Var) -> Var:  # noqa: A001
    return _apply("abs", (a,))


_defop("abs", np.abs,
       lambda g, n: (mul(g, Var(np.sign(n.parents[0].value).astype(g.dtype))),))


# -- reductions and reshaping ----------------------------------------------

def sum(a: Var, axis: int | None = None) -> Var:  # noqa: A001
    if axis is not None:
        axis = axis % a.ndim
    return _apply("sum", (a,), {"axis": axis})


def _sum_fwd(a, axis):
    return np.asarray(a.sum(axis=axis))


def _sum_vjp(g, n):
    axis = n.attrs["axis"]
    shape = n.parents[0].shape
    if axis is None:
        return (fill(g, shape),)
    return (expand(g, axis, shape[axis]),)


_defop("sum", _sum_fwd, _sum_vjp)


def mean(a: Var, axis: int | None = None) -> Var:
    if axis is not None:
        axis = axis % a.ndim
    return _apply("mean", (a,), {"axis": axis})


def _mean_fwd(a, axis):
    return np.asarray(a.mean(axis=axis))


def _mean_vjp(g, n):
    axis = n.attrs["axis"]
    shape = n.parents[0].shape
    if axis is None:
        return (scale(fill(g, shape), 1.0 / max(int(np.prod(shape)), 1)),)
    return (scale(expand(g, axis, shape[axis]), 1.0 / shape[axis]),)


_defop("mean", _mean_fwd, _mean_vjp)


def expand(a: Var, axis: int, n: int) -> Var:
    """Insert a new axis at ``axis`` and repeat ``a`` ``n`` times along it."""
    return _apply("expand", (a,), {"axis": axis, "n": n})


def _expand_fwd(a, axis, n):
    return np.repeat(np.expand_dims(a, axis), n, axis=axis)


_defop("expand", _expand_fwd, lambda g, n: (sum(g, axis=n.attrs["axis"]),))


def fill(a: Var, shape) -> Var:
    """Replicate a single-element tensor to ``shape``."""
    if a.size != 1:
        raise ShapeError("fill", a.shape, tuple(shape))
    return _apply("fill", (a,), {"shape": tuple(shape)})


def _fill_fwd(a, shape):
    return np.full(shape, a.reshape(()), dtype=a.dtype)


def _sum_to(g: Var, shape) -> Var:
    # total of g as a single-element tensor of ``shape``; the adjoint of fill
    return _apply("sum_to", (g,), {"shape": tuple(shape)})


_defop("fill", _fill_fwd, lambda g, n: (_sum_to(g, n.parents[0].shape),))
_defop("sum_to", lambda g, shape: np.asarray(g.sum()).reshape(shape),
       lambda g, n: (fill(g, n.parents[0].shape),))


def concat(parts: Sequence[Var], axis: int = 0) -> Var:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat")
    ndim = parts[0].ndim
    axis = axis % ndim
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != ndim or any(p.shape[i] != ref[i] for i in range(ndim) if i != axis):
            raise ShapeError("concat", ref, p.shape)
    sizes = tuple(p.shape[axis] for p in parts)
    return _apply("concat", parts, {"axis": axis, "sizes": sizes})


def _concat_fwd(*arrays, axis, sizes):
    return np.concatenate(arrays, axis=axis)


def _concat_vjp(g, n, need):
    axis = n.attrs["axis"]
    out, start = [], 0
    for size, wanted in zip(n.attrs["sizes"], need):
        if wanted:
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, start + size)
            out.append(slice_(g, tuple(index)))
        else:
            out.append(None)
        start += size
    return tuple(out)


_defop("concat", _concat_fwd, _concat_vjp, masked=True)


def _normalize_index(index, ndim):
    if not isinstance(index, tuple):
        index = (index,)
    for item in index:
        if not isinstance(item, (slice, int, np.integer)):
            raise TypeError("only basic integer/slice indexing is supported")
    return index


def slice_(a: Var, index) -> Var:
    """Basic (view-style) indexing with ints and slices."""
    index = _normalize_index(index, a.ndim)
    return _apply("slice", (a,), {"index": index})


def _slice_fwd(a, index):
    return np.array(a[index])


def _slice_vjp(g, n):
    return (_scatter(g, n.attrs["index"], n.parents[0].shape),)


_defop("slice", _slice_fwd, _slice_vjp)


def _scatter(g: Var, index, shape) -> Var:
    return _apply("scatter", (g,), {"index": index, "shape": tuple(shape)})


def _scatter_fwd(g, index, shape):
    out = np.zeros(shape, dtype=g.dtype)
    out[index] = g
    return out


_defop("scatter", _scatter_fwd, lambda g, n: (slice_(g, n.attrs["index"]),))


def one_hot(labels, n: int, dtype=np.float64) -> Var:
    """Constant one-hot matrix of shape (len(labels), n)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or (labels.size and (labels.min() < 0 or labels.max() >= n)):
        raise ShapeError("one_hot", labels.shape, (n,))
    out = np.zeros((labels.size, n), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return Var(out)


def stop_gradient(a: Var) -> Var:
    return Var(a.value)


# -- differentiation --------------------------------------------------------

def grad(output: Var, inputs: Sequence[Var], create_graph: bool = False) -> list[Var]:
    """Gradient of a scalar ``output`` with respect to each of ``inputs``.

    With ``create_graph`` the backward computation is recorded on the tape,
    so the returned gradients can themselves be differentiated. Inputs that
    do not influence ``output`` get a zero gradient.
    """
    if output.size != 1:
        raise ADError(f"grad: output must be scalar, got shape {output.shape}")
    node = output.node
    if node is None:
        raise TapeError("grad: output is not recorded on a tape")
    tape = node.tape
    if not tape.live:
        raise TapeError("grad: output belongs to a closed tape")
    inputs = list(inputs)
    ids = []
    for inp in inputs:
        if not isinstance(inp, Var) or inp.node is None or inp.node.tape is not tape:
            raise TapeError("grad: input is not recorded on the output's tape")
        ids.append(inp.node.index)

    nodes = tape.nodes
    hi = node.index
    lo = min(ids)
    wanted = set(ids)
    relevant = bytearray(hi + 1)
    for i in range(lo, hi + 1):
        if i in wanted:
            relevant[i] = 1
            continue
        for p in nodes[i].pidx:
            if p >= lo and relevant[p]:
                relevant[i] = 1
                break

    results: dict[int, Var] = {}
    if relevant[hi]:
        grads: dict[int, Var] = {hi: Var(np.ones(output.shape, dtype=output.dtype))}
        ctx = _recording_on(tape) if create_graph else no_record()
        with ctx:
            for i in range(hi, lo - 1, -1):
                if not relevant[i]:
                    continue
                g = grads.pop(i, None)
                if g is None:
                    continue
                if i in wanted:
                    results[i] = g
                n = nodes[i]
                if n.op == "leaf":
                    continue
                if n.op in _MASKED:
                    need = tuple(p >= lo and relevant[p] == 1 for p in n.pidx)
                    pgs = _VJP[n.op](g, n, need)
                else:
                    pgs = _VJP[n.op](g, n)
                for p, pg in zip(n.pidx, pgs):
                    if p >= lo and pg is not None and relevant[p]:
                        prev = grads.get(p)
                        if prev is None:
                            grads[p] = pg
                        elif create_graph:
                            grads[p] = add(prev, pg)
                        else:
                            # nothing is recorded, so accumulate the raw arrays
                            grads[p] = Var(prev.value + pg.value)

    out = []
    for inp, i in zip(inputs, ids):
        g = results.get(i)
        if g is None:
            g = Var(np.zeros(inp.shape, dtype=inp.dtype))
        elif not create_graph and g.node is not None:
            g = Var(g.value)
        out.append(g)
    return out


@contextmanager
def _recording_on(tape: Tape):
    paused = getattr(_local, "paused", 0)
    _local.paused = 0
    stack = _tapes()
    pushed = not stack or stack[-1] is not tape
    if pushed:
        stack.append(tape)
    try:
        yield
    finally:
        if pushed:
            stack.pop()
        _local.paused = paused


def finite_diff(f: Callable[[np.ndarray], float], x, eps: float = 1e-6,
                coords: Sequence[int] | None = None, order: int = 2) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    ``order=2`` is the three-point stencil (f(x+e) - f(x-e)) / 2e; ``order=4``
    adds the +-2e points for O(e^4) truncation error. When ``coords`` is
    given only those flat coordinates are estimated and a 1-D array aligned
    with ``coords`` is returned.
    """
    if order == 2:
        stencil = ((1, 0.5), (-1, -0.5))
    elif order == 4:
        stencil = ((2, -1 / 12), (1, 8 / 12), (-1, -8 / 12), (-2, 1 / 12))
    else:
        raise ValueError("order must be 2 or 4")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    index = range(flat.size) if coords is None else coords
    est = []
    for i in index:
        orig = flat[i]
        total = 0.0
        for step, weight in stencil:
            flat[i] = orig + step * eps
            value = float(f(x))
            if not np.isfinite(value):
                flat[i] = orig
                raise DomainError("finite_diff", f"non-finite function value at coordinate {i}")
            total += weight * value
        flat[i] = orig
        est.append(total / eps)
    est = np.asarray(est)
    return est.reshape(x.shape) if coords is None else est
