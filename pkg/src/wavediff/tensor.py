"""Dense float64 tensors and a small reverse-mode differentiation engine.

A :class:`Tensor` wraps a contiguous row-major ``numpy`` array.  Every op in
this module records its parents and a backward closure when gradient
tracking is enabled and at least one input requires a gradient.  The
closure maps the output gradient to one gradient per parent (``None`` for
parents that do not need one).

Binary elementwise ops accept operands of equal rank whose extents agree or
are 1 (explicit size-1 broadcasting, e.g. a ``[B, C, 1, 1]`` time embedding
added to a ``[B, C, H, W]`` feature map).  Anything else is a shape error.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True
_flop_counters: list["FlopCounter"] = []


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class GraphError(RuntimeError):
    """The differentiation graph cannot produce the requested gradient."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- array-ish surface --------------------------------------------------
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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # Operators.  No __eq__ so tensors stay hashable by identity.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class FlopCounter:
    """Accumulates forward FLOPs (2 x multiply-accumulates) by op kind."""

    def __init__(self):
        self.by_op: dict[str, int] = {}

    @property
    def total(self) -> int:
        return sum(self.by_op.values())

    def add(self, op: str, flops: int) -> None:
        self.by_op[op] = self.by_op.get(op, 0) + int(flops)


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    _flop_counters.append(counter)
    try:
        yield counter
    finally:
        _flop_counters.remove(counter)


def record_flops(op: str, flops: int) -> None:
    for counter in _flop_counters:
        counter.add(op, flops)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of ``op``; attach the graph when needed."""
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- differentiation --------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _run_backward(root: Tensor, seed: np.ndarray, wanted: set[int] | None):
    """Propagate ``seed`` from ``root``; return {id: grad} for leaves (or wanted ids)."""
    grads: dict[int, np.ndarray] = {id(root): seed}
    found: dict[int, np.ndarray] = {}
    for node in reversed(_toposort(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if wanted is not None and id(node) in wanted:
            found[id(node)] = g
        if node._backward is None:
            if wanted is None:
                found[id(node)] = g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise GraphError(f"{node.op}: gradient shape {pg.shape} != input shape {parent.shape}")
            key = id(parent)
            prev = grads.get(key)
            # fresh array on accumulation: backward closures may share buffers
            grads[key] = pg if prev is None else prev + pg
    return found


def _check_scalar_root(loss: Tensor) -> None:
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached: no input requires a gradient")


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    Returns a map from each leaf tensor to the gradient contributed by this
    call.
    """
    _check_scalar_root(loss)
    leaves = {id(t): t for t in _toposort(loss) if t._backward is None}
    found = _run_backward(loss, np.ones(loss.shape, dtype=DTYPE), None)
    out: dict[Tensor, np.ndarray] = {}
    for key, g in found.items():
        leaf = leaves[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    return out


def grad(output: Tensor, inputs: Sequence[Tensor], grad_output: np.ndarray | None = None) -> list[np.ndarray]:
    """Gradients of ``output`` w.r.t. ``inputs`` without touching ``.grad``.

    ``grad_output`` seeds the reverse pass for non-scalar outputs; inputs not
    reached by the graph get zero gradients.
    """
    if grad_output is None:
        _check_scalar_root(output)
        seed = np.ones(output.shape, dtype=DTYPE)
    else:
        if not output.requires_grad:
            raise GraphError("output is detached: no input requires a gradient")
        seed = np.asarray(grad_output, dtype=DTYPE)
        if seed.shape != output.shape:
            raise ShapeError(f"grad_output shape {seed.shape} != output shape {output.shape}")
    found = _run_backward(output, seed, {id(t) for t in inputs})
    return [found.get(id(t), np.zeros(t.shape, dtype=DTYPE)) for t in inputs]


# -- shape helpers ----------------------------------------------------------

def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    if len(a) != len(b):
        raise ShapeError(f"{op}: rank mismatch {a} vs {b}")
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(f"{op}: shape mismatch {a} vs {b}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# -- elementwise ------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_op(ad * bd, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return make_op(a.data + float(c), (a,), lambda g: (g,), "add_scalar")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 1.0 / (1.0 + np.exp(-x))
    # d/dx x*s(x) = s + x*s*(1-s)
    return make_op(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),), "silu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    factor = np.where(x > 0, 1.0, slope)
    return make_op(x * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_op(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow; derivative is sigmoid."""
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return make_op(y, (a,), lambda g: (g * sig,), "softplus")


def abs_(a: Tensor) -> Tensor:
    x = a.data
    return make_op(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")


def square(a: Tensor) -> Tensor:
    x = a.data
    return make_op(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def elementwise(op: str, a: Tensor, b: Tensor | None = None, value: float | None = None) -> Tensor:
    """Dispatch by name: add, mul, silu, leaky_relu, tanh, scale."""
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "silu":
        return silu(a)
    if op == "leaky_relu":
        return leaky_relu(a, 0.2 if value is None else value)
    if op == "tanh":
        return tanh(a)
    if op == "scale":
        return scale(a, value)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- reductions and reshaping -----------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[index] = g
        return (out,)

    return make_op(np.ascontiguousarray(a.data[index]), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def split(a: Tensor, sections: int, axis: int = 1) -> list[Tensor]:
    n = a.shape[axis]
    if n % sections:
        raise ShapeError(f"split: extent {n} not divisible by {sections}")
    step = n // sections
    out = []
    for i in range(sections):
        index = [slice(None)] * a.ndim
        index[axis] = slice(i * step, (i + 1) * step)
        out.append(getitem(a, tuple(index)))
    return out


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over matching leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data
    batch = int(np.prod(a.shape[:-2])) if a.ndim > 2 else 1
    record_flops("matmul", 2 * batch * ad.shape[-2] * ad.shape[-1] * bd.shape[-1])

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return make_op(ad @ bd, (a, b), bw, "matmul")


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for ``x[B, N]``, ``weight[M, N]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    record_flops("dense", 2 * xd.shape[0] * wd.shape[0] * wd.shape[1])
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_op(out, parents, bw, "dense")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("softmax received non-finite input")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op(y, (a,), bw, "softmax")


# -- convolution ------------------------------------------------------------

def _pad(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    width = ((0, 0), (0, 0), (p, p), (p, p))  # pads the last two axes
    if mode == "zeros":
        return np.pad(x, width)
    if mode == "reflect":
        return np.pad(x, width, mode="reflect")
    raise ValueError(f"unknown padding mode {mode!r}")


def _unpad(gp: np.ndarray, p: int, mode: str) -> np.ndarray:
    """Adjoint of :func:`_pad`."""
    if p == 0:
        return gp
    if mode == "zeros":
        return gp[:, :, p:-p, p:-p]
    g = gp.copy()
    # fold reflected borders back: padded index p-k mirrors interior index p+k
    for axis in (2, 3):
        n = g.shape[axis] - 2 * p
        g = np.moveaxis(g, axis, 0)
        for k in range(1, p + 1):
            g[p + k] += g[p - k]
            g[p + n - 1 - k] += g[p + n - 1 + k]
        g = np.moveaxis(g[p:p + n], 0, axis)
    return g


_COLS_BYTES_LIMIT = 256 * 2 ** 20


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, pad_mode: str = "zeros") -> Tensor:
    """Cross-correlation of ``x[B, Cin, H, W]`` with ``weight[Cout, Cin, kh, kw]``.

    Output extent is ``floor((H + 2p - kh) / stride) + 1``.  Implemented as
    one matrix product against a channel-major column matrix
    ``[Cin*kh*kw, B*Ho*Wo]``, which is kept for the backward pass.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape}, {weight.shape}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")
    B, C, H, W = x.shape
    Cout, Cin, kh, kw = weight.shape
    if C != Cin:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {Cin}")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {Cout} output channels")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")
    record_flops("conv2d", 2 * B * Cout * Ho * Wo * Cin * kh * kw)
    wmat = weight.data.reshape(Cout, Cin * kh * kw)
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0

    xt = x.data.transpose(1, 0, 2, 3)  # C, B, H, W
    tracked = _grad_enabled and (x.requires_grad or weight.requires_grad
                                 or (bias is not None and bias.requires_grad))
    if not tracked and not pointwise and C * kh * kw * B * Ho * Wo * 8 > _COLS_BYTES_LIMIT:
        # large inference-only call: accumulate one matrix product per kernel tap
        xp = _pad(xt, padding, pad_mode)
        out = np.zeros((Cout, B * Ho * Wo))
        # tap-major copy: a strided weight slice drops matmul off the BLAS path
        wt = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1))
        for i in range(kh):
            for j in range(kw):
                tap = np.ascontiguousarray(xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride])
                out += wt[i, j] @ tap.reshape(C, B * Ho * Wo)
        if bias is not None:
            out += bias.data[:, None]
        out = np.ascontiguousarray(out.reshape(Cout, B, Ho, Wo).transpose(1, 0, 2, 3))
        return make_op(out, (), None, "conv2d")
    if pointwise:
        cols = np.ascontiguousarray(xt).reshape(C, B * H * W)
    else:
        xp = _pad(xt, padding, pad_mode)
        cols = np.empty((C, kh, kw, B, Ho, Wo))
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
        cols = cols.reshape(C * kh * kw, B * Ho * Wo)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(Cout, B, Ho, Wo).transpose(1, 0, 2, 3))

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(Cout, B * Ho * Wo)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = wmat.T @ g2
            if pointwise:
                gxt = gcols.reshape(C, B, H, W)
            else:
                gcols = gcols.reshape(C, kh, kw, B, Ho, Wo)
                gp = np.zeros((C, B, H + 2 * padding, W + 2 * padding))
                for i in range(kh):
                    for j in range(kw):
                        gp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, i, j]
                gxt = _unpad(gp, padding, pad_mode)
            gx = np.ascontiguousarray(gxt.transpose(1, 0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_op(out, parents, bw, "conv2d")


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 mean pooling with stride 2."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2: spatial dims must be even, got {H}x{W}")
    record_flops("avg_pool2", 2 * B * C * H * W)
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3),)

    return make_op(out, (x,), bw, "avg_pool2")


def upsample_nearest2(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return make_op(out, (x,), bw, "upsample_nearest2")


# -- normalisation ----------------------------------------------------------

def group_norm(x: Tensor, groups: int, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-6) -> Tensor:
    """Per-sample, per-group standardisation followed by an optional affine map."""
    B, C = x.shape[:2]
    if C % groups:
        raise ShapeError(f"group_norm: {C} channels not divisible into {groups} groups")
    spatial = x.shape[2:]
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    bshape = (1, C) + (1,) * len(spatial)
    out = xhat
    if gamma is not None:
        out = out * gamma.data.reshape(bshape)
    if beta is not None:
        out = out + beta.data.reshape(bshape)
    n = xg.shape[2]
    red = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        gg = gb = None
        if gamma is not None and gamma.requires_grad:
            gg = (g * xhat).sum(axis=red)
        if beta is not None and beta.requires_grad:
            gb = g.sum(axis=red)
        gx = None
        if x.requires_grad:
            gh = g * gamma.data.reshape(bshape) if gamma is not None else g
            gh = gh.reshape(B, groups, n)
            xh = xhat.reshape(B, groups, n)
            gx = inv * (gh - gh.mean(axis=2, keepdims=True) - xh * (gh * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(x.shape)
        grads = [gx]
        if gamma is not None:
            grads.append(gg)
        if beta is not None:
            grads.append(gb)
        return tuple(grads)

    parents = [x] + [p for p in (gamma, beta) if p is not None]
    return make_op(out, parents, bw, "group_norm")


def pixel_norm(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale each row of ``x[B, N]`` to unit root-mean-square."""
    xd = x.data
    n = xd.shape[1]
    r = 1.0 / np.sqrt((xd * xd).mean(axis=1, keepdims=True) + eps)
    y = xd * r

    def bw(g):
        return (r * (g - y * (g * y).sum(axis=1, keepdims=True) / n),)

    return make_op(y, (x,), bw, "pixel_norm")


# -- attention --------------------------------------------------------------

def self_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                   bq: Tensor | None = None, bk: Tensor | None = None, bv: Tensor | None = None,
                   bo: Tensor | None = None, heads: int = 1, norm_groups: int | None = None,
                   gamma: Tensor | None = None, beta: Tensor | None = None) -> Tensor:
    """Residual softmax attention over the ``H*W`` token axis.

    ``out = x + Wo( softmax(Q K^T / sqrt(d)) V )`` with ``Q, K, V`` the 1x1
    projections of ``group_norm(x)`` (skipped when ``norm_groups`` is None)
    and ``d = C / heads``.
    """
    B, C, H, W = x.shape
    if C % heads:
        raise ShapeError(f"self_attention: {C} channels not divisible by {heads} heads")
    h = group_norm(x, norm_groups, gamma, beta) if norm_groups else x
    N, d = H * W, C // heads
    q = conv2d(h, wq, bq)
    k = conv2d(h, wk, bk)
    v = conv2d(h, wv, bv)

    def tokens(t):  # B, C, H, W -> B*heads, N, d
        return transpose(reshape(t, (B, heads, d, N)), (0, 1, 3, 2)).reshape((B * heads, N, d))

    qt, kt, vt = tokens(q), tokens(k), tokens(v)
    logits = scale(matmul(qt, transpose(kt, (0, 2, 1))), 1.0 / math.sqrt(d))
    attn = softmax(logits, axis=-1)
    mixed = matmul(attn, vt)  # B*heads, N, d
    mixed = reshape(transpose(reshape(mixed, (B, heads, N, d)), (0, 1, 3, 2)), (B, C, H, W))
    return add(x, conv2d(mixed, wo, bo))


def sinusoidal_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> Tensor:
    """Constant sinusoidal features of integer step indices ``t[B]``."""
    t = np.asarray(t, dtype=DTYPE).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=DTYPE) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.shape[0], 1))], axis=1)
    return Tensor(emb)


def stack_grads(params: Iterable[Tensor], grads: dict[Tensor, np.ndarray]) -> list[np.ndarray]:
    return [grads.get(p, np.zeros(p.shape, dtype=DTYPE)) for p in params]
