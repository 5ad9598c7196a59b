"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` records the primitive that produced it together with a
closure mapping the output gradient to input gradients. Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order and accumulates ``.grad`` on every node that requires it.

Only the primitives needed by the transformer models and the losses in this
package are implemented; each one has an analytic backward rule that is
checked against central finite differences in the test-suite.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LAYERNORM_EPS = 1e-6
FD_STEP = 1e-6
# plain floats: numpy float64 scalars would upcast float32 arrays
_GELU_C = math.sqrt(2.0 / math.pi)

_state = {"grad": True, "check_finite": False}
_node_ids = itertools.count()


class GraphError(Exception):
    """Base class for errors raised while building or running a graph."""

    def __init__(self, node: str, message: str):
        super().__init__(f"[{node}] {message}")
        self.node = node


class ShapeError(GraphError):
    pass


class NonFiniteError(GraphError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def check_finite(enabled: bool = True):
    """Raise :class:`NonFiniteError` as soon as any primitive emits inf/nan."""
    prev = _state["check_finite"]
    _state["check_finite"] = enabled
    try:
        yield
    finally:
        _state["check_finite"] = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in a dynamically recorded computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name", "_id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name
        self._id = next(_node_ids)

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def node_name(self) -> str:
        return self.name or f"{self.op}#{self._id}"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # --------------------------------------------------------------- backward
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.shape != ():
                raise ShapeError(self.node_name, f"backward() needs a scalar output, got shape {self.shape}")
            grad = np.ones((), dtype=self.dtype)
        topo = _toposort(self)
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            if node._parents:
                # intermediate gradients are not needed after propagation
                node.grad = None

    # ------------------------------------------------------------- operators
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

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

    def exp(self):
        return exp(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return abs_(self)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _const_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.name = None
    out._id = next(_node_ids)
    needs = _state["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward = backward if needs else None
    if _state["check_finite"] and not np.all(np.isfinite(data)):
        raise NonFiniteError(out.node_name, "non-finite value produced")
    return out


def _guard(op: str, fn, *args):
    try:
        return fn(*args)
    except ValueError as exc:
        raise ShapeError(f"{op}#{next(_node_ids)}", str(exc)) from None


# ----------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b)
    b = _const_like(b, a)
    out = _guard("add", np.add, a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b)
    b = _const_like(b, a)
    out = _guard("sub", np.subtract, a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b)
    b = _const_like(b, a)
    out = _guard("mul", np.multiply, a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b)
    b = _const_like(b, a)
    out = _guard("div", np.divide, a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    ad = a.data
    return _make(out, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "power")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def gelu(a: Tensor) -> Tensor:
    """GELU in its tanh form, 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 0.134145 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(out, (a,), backward, "gelu")


# ----------------------------------------------------------------- reductions
def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([shape[ax] for ax in axes]))
    out = np.mean(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "mean")


# ------------------------------------------------------------------ structure
def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    out = _guard("reshape", np.reshape, a.data, shape)
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: tuple | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = _guard("transpose", np.transpose, a.data, axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = _guard("concat", np.concatenate, [t.data for t in tensors], axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tensors, backward, "concat")


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    out = a.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), backward, "getitem")


def gather(a: Tensor, index: np.ndarray, axis: int = 1) -> Tensor:
    """Select entries along ``axis`` per leading batch row (``take_along_axis``).

    ``index`` has shape ``a.shape[:axis+1]`` with the last axis holding
    positions; trailing feature axes are carried along.
    """
    index = np.asarray(index)
    if index.shape[:axis] != a.shape[:axis]:
        raise ShapeError(f"gather#{next(_node_ids)}", f"index {index.shape} vs input {a.shape}")
    idx = index.reshape(index.shape + (1,) * (a.ndim - index.ndim))
    out = np.take_along_axis(a.data, idx, axis=axis)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        bcast = np.broadcast_to(idx, g.shape)
        # positions are unique per row in token routing, but stay safe for repeats
        if _rows_unique(index, axis):
            np.put_along_axis(full, bcast, g, axis=axis)
        else:
            grids = list(np.indices(g.shape, sparse=True))
            grids[axis] = bcast
            np.add.at(full, tuple(grids), g)
        return (full,)

    return _make(out, (a,), backward, "gather")


def _rows_unique(index: np.ndarray, axis: int) -> bool:
    s = np.sort(index, axis=axis)
    return not np.any(np.diff(s, axis=axis) == 0)


def scatter(base: Tensor, index: np.ndarray, src: Tensor, axis: int = 1) -> Tensor:
    """Write ``src`` into a copy of ``base`` at ``index`` along ``axis``."""
    index = np.asarray(index)
    base = as_tensor(base)
    if not _rows_unique(index, axis):
        raise ShapeError(f"scatter#{next(_node_ids)}", "scatter positions must be unique per row")
    idx = index.reshape(index.shape + (1,) * (base.ndim - index.ndim))
    bidx = np.broadcast_to(idx, src.shape)
    out = base.data.copy()
    try:
        np.put_along_axis(out, bidx, src.data, axis=axis)
    except (ValueError, IndexError) as exc:
        raise ShapeError(f"scatter#{next(_node_ids)}", str(exc)) from None

    def backward(g):
        gb = g.copy()
        np.put_along_axis(gb, bidx, 0.0, axis=axis)
        gs = np.take_along_axis(g, bidx, axis=axis)
        return gb, gs

    return _make(out, (base, src), backward, "scatter")


# --------------------------------------------------------------------- linear
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul#{next(_node_ids)}", f"cannot multiply {a.shape} by {b.shape}")
    out = _guard("matmul", np.matmul, a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 'same' 2-D cross-correlation with an odd square kernel.

    ``x``: (B, C, H, W); ``w``: (O, C, k, k); ``b``: (O,) or None.
    """
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d#{next(_node_ids)}", f"bad shapes {x.shape} and {w.shape}")
    k = w.shape[-1]
    if k % 2 == 0 or w.shape[-2] != k:
        raise ShapeError(f"conv2d#{next(_node_ids)}", f"kernel must be odd and square, got {w.shape[-2:]}")
    out = _conv_same(x.data, w.data)
    parents = [x, w]
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
        parents.append(b)
    xd, wd = x.data, w.data

    def backward(g):
        gx = _conv_same(g, np.flip(wd, (-1, -2)).swapaxes(0, 1)) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            cols = _im2col(xd, k)  # B, H, W, C, k, k
            gw = np.einsum("bohw,bhwcij->ocij", g, cols, optimize=True)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, backward, "conv2d")


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))  # B, C, H, W, k, k
    return win.transpose(0, 2, 3, 1, 4, 5)


def _conv_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    cols = _im2col(x, w.shape[-1])
    return np.einsum("bhwcij,ocij->bohw", cols, w, optimize=True)


# -------------------------------------------------------------- nn primitives
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def layer_norm(a: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis (no affine part); eps sits inside the sqrt."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return _make(out.astype(x.dtype, copy=False), (a,), backward, "layer_norm")


def l2norm(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = a.data
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    out = n if keepdims else np.squeeze(n, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * x / n,)

    return _make(out, (a,), backward, "l2norm")


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Cosine between ``a`` and ``b`` along ``axis`` (broadcasting allowed)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))
    nb = np.sqrt((bd * bd).sum(axis=axis, keepdims=True))
    dot = (ad * bd).sum(axis=axis, keepdims=True)
    cos = dot / (na * nb)
    out = np.squeeze(cos, axis=axis)

    def backward(g):
        g = np.expand_dims(g, axis)
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g * (bd / (na * nb) - cos * ad / (na * na)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(g * (ad / (na * nb) - cos * bd / (nb * nb)), bd.shape)
        return ga, gb

    return _make(out, (a, b), backward, "cosine_similarity")


# ---------------------------------------------------------------------- graph
@dataclass
class Graph:
    """A named computation: ``fn(**inputs) -> Tensor | dict[str, Tensor]``.

    ``parameters`` maps names to trainable leaf tensors closed over by ``fn``.
    """

    fn: Callable[..., Tensor | Mapping[str, Tensor]]
    parameters: dict[str, Tensor] = field(default_factory=dict)


def _bind(inputs: Mapping[str, np.ndarray], requires_grad: bool) -> dict[str, Tensor]:
    return {k: Tensor(np.array(v, copy=True), requires_grad=requires_grad, name=k) for k, v in inputs.items()}


def evaluate(graph: Graph, inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Run ``graph`` on named inputs; non-finite intermediates raise."""
    with no_grad(), check_finite(True):
        out = graph.fn(**_bind(inputs, False))
    if isinstance(out, Tensor):
        out = {"output": out}
    return {k: v.data.copy() for k, v in out.items()}


def backward(graph: Graph, inputs: Mapping[str, np.ndarray], output: str = "output") -> dict[str, np.ndarray]:
    """Gradients of the scalar ``output`` w.r.t. every parameter and input.

    Inputs and parameters the output does not depend on get a zero gradient.
    """
    bound = _bind(inputs, True)
    for p in graph.parameters.values():
        p.grad = None
    with check_finite(True):
        out = graph.fn(**bound)
    if not isinstance(out, Tensor):
        out = out[output]
    if out.shape != ():
        raise ShapeError(out.node_name, f"backward() needs a scalar output, got shape {out.shape}")
    out.backward()
    grads = {}
    for name, t in itertools.chain(graph.parameters.items(), bound.items()):
        grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return grads


def gradcheck(fn: Callable[..., Tensor], inputs: Mapping[str, np.ndarray] | Sequence[np.ndarray],
              step: float = FD_STEP, params: Iterable[Tensor] = ()) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps input tensors (keyword or positional) to a scalar tensor.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    Any ``params`` (leaf tensors closed over by ``fn``) are checked too.
    """
    named = isinstance(inputs, Mapping)
    keys = list(inputs.keys()) if named else list(range(len(inputs)))
    arrays = [np.array(inputs[k], dtype=np.float64, copy=True) for k in keys]
    params = list(params)

    def call(arrs, grad=False):
        ts = [Tensor(a, requires_grad=grad) for a in arrs]
        out = fn(**dict(zip(keys, ts))) if named else fn(*ts)
        return out, ts

    for p in params:
        p.grad = None
    out, ts = call(arrays, grad=True)
    if out.shape != ():
        raise ShapeError(out.node_name, "gradcheck needs a scalar-valued function")
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]
    analytic += [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    def f_value():
        with no_grad():
            o, _ = call(arrays)
        return float(o.data)

    worst = 0.0
    targets = arrays + [p.data for p in params]
    for arr, ana in zip(targets, analytic):
        flat = arr.reshape(-1)
        ana = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f_value()
            flat[i] = orig - step
            fm = f_value()
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            err = abs(ana[i] - num) / max(abs(ana[i]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
