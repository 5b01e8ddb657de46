"""Define-by-run reverse-mode automatic differentiation over float64 numpy arrays.

Every tensor produced by an operation remembers its parents, a closure that maps
the output gradient to parent gradients, and a monotonically increasing sequence
number.  ``backward`` walks the reachable part of the tape in exact reverse
sequence order, which is a valid reverse topological order because a tensor can
only be built from tensors that already exist.

Broadcasting is deliberately limited to scalars (python numbers or 0-d tensors).
Anything else must have matching shapes or a ``ShapeError`` is raised.
"""

from __future__ import annotations

import itertools
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, ShapeError

_seq = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


# ---------------------------------------------------------------------------
# operation counting


class OpCounter:
    """Accumulates multiply-accumulate counts, keyed by scope path.

    A conv inside ``op_scope("encoder")`` then ``op_scope("attention")`` adds to
    ``"encoder"``, ``"encoder/attention"`` and ``"total"``.
    """

    def __init__(self):
        self.counts: Counter = Counter()

    def __getitem__(self, key: str) -> int:
        return self.counts[key]


_counters: list[OpCounter] = []
_scopes: list[str] = []


@contextmanager
def count_ops():
    counter = OpCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


@contextmanager
def op_scope(name: str):
    _scopes.append(name)
    try:
        yield
    finally:
        _scopes.pop()


def _tally(macs: int) -> None:
    if not _counters:
        return
    keys = ["total"] + ["/".join(_scopes[: i + 1]) for i in range(len(_scopes))]
    for counter in _counters:
        for key in keys:
            counter.counts[key] += int(macs)


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "seq")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by python scalars")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return square(self)

    def relu(self):
        return relu(self)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.seq = next(_seq)
    out.op = op
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out.parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.parents = ()
        out._backward = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# graph inspection and backward


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[int, ...]
    output: int


def _collect(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    stack = [root]
    found: list[Tensor] = []
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        found.append(t)
        stack.extend(p for p in t.parents if p.requires_grad)
    return found


def trace(root: Tensor) -> list[Node]:
    """Recorded operations reachable from ``root``, in recording order."""
    tensors = sorted(_collect(root), key=lambda t: t.seq)
    return [Node(t.op, tuple(p.seq for p in t.parents), t.seq) for t in tensors if t.parents]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError("backward needs a scalar loss", shape=loss.shape)
    if not loss.requires_grad:
        return
    order = sorted(_collect(loss), key=lambda t: t.seq, reverse=True)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g, dtype=np.float64) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementwise


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _binary(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape:
        return None
    if b.ndim == 0 or a.ndim == 0:
        return "scalar"
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ", left=a.shape, right=b.shape)


def _fit(g: np.ndarray, shape: tuple) -> np.ndarray:
    return g if g.shape == shape else np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    if _is_scalar(b):
        return _result(a.data + b, (a,), lambda g: (g,), "add")
    a, b = as_tensor(a), as_tensor(b)
    _binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_fit(g, sa), _fit(g, sb)), "add")


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return _result(a.data - b, (a,), lambda g: (g,), "sub")
    a, b = as_tensor(a), as_tensor(b)
    _binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_fit(g, sa), -_fit(g, sb)), "sub")


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, b)
    a, b = as_tensor(a), as_tensor(b)
    _binary(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (_fit(g * bd, ad.shape), _fit(g * ad, bd.shape)), "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(a.data * s, (a,), lambda g: (g * s,), "scale")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    if not np.all(x > 0):
        raise DomainError("log of non-positive value", min=float(np.min(x)))
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a: Tensor) -> Tensor:
    x = a.data
    if not np.all(x > 0):
        raise DomainError("sqrt of non-positive value", min=float(np.min(x)))
    out = np.sqrt(x)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _result(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _result(np.logaddexp(0.0, x), (a,), lambda g: (g * sig,), "softplus")


def absolute(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, exp, log, sqrt, square, relu."""
    table = {
        "add": add, "sub": sub, "mul": mul, "scale": scale, "exp": exp, "log": log,
        "sqrt": sqrt, "square": square, "relu": relu, "softplus": softplus, "abs": absolute,
    }
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*args)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def take(a: Tensor, index) -> Tensor:
    """Numpy-style indexing (basic or advanced) with scatter-add backward."""
    if isinstance(index, Tensor):
        raise TypeError("index with arrays, not tensors")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(a.data[index]), (a,), bw, "take")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack of an empty list")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError("stack needs equal shapes", shapes=[x.shape for x in tensors])
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tensors, bw, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = list(tensors[0].shape)
    for t in tensors:
        other = list(t.shape)
        if len(other) != len(ref) or any(x != y for i, (x, y) in enumerate(zip(other, ref)) if i != axis % len(ref)):
            raise ShapeError("concat shape mismatch", shapes=[x.shape for x in tensors], axis=axis)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(out, tensors, bw, "concat")


# ---------------------------------------------------------------------------
# softmax and einsum


def softmax(a: Tensor, axis: int = 0) -> Tensor:
    x = a.data
    if not np.all(np.isfinite(x)):
        raise DomainError("softmax of non-finite logits")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    _tally(s.size)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (a,), bw, "softmax")


def softmax_over_sequence(stack_: Tensor) -> Tensor:
    """Per-pixel softmax across the leading (sequence) axis of an [N, h, w] stack."""
    return softmax(stack_, axis=0)


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum; every operand index must survive in the output or the other operand."""
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for mine, other in ((sa, sb), (sb, sa)):
        if any(ch not in out_sub and ch not in other for ch in mine):
            raise ShapeError(f"einsum {subscripts!r}: summed index must appear in the other operand")
    ad, bd = a.data, b.data
    out = np.einsum(subscripts, ad, bd)
    dims = {}
    for sub_, arr in ((sa, ad), (sb, bd)):
        for ch, n in zip(sub_, arr.shape):
            if dims.setdefault(ch, n) != n:
                raise ShapeError(f"einsum {subscripts!r}: index {ch} has conflicting sizes")
    _tally(int(np.prod(list(dims.values()))))

    def bw(g):
        return (np.einsum(f"{out_sub},{sb}->{sa}", g, bd), np.einsum(f"{sa},{out_sub}->{sb}", ad, g))

    return _result(out, (a, b), bw, "einsum")


# ---------------------------------------------------------------------------
# convolution and resampling


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Same-padded 2-D cross-correlation.

    ``x`` is ``[C, H, W]`` or batched ``[B, C, H, W]``; ``kernel`` is
    ``[C_out, C_in, kh, kw]`` with odd kh, kw.  Zero padding of (k-1)/2 keeps
    the spatial size at stride 1; stride s gives ceil(H/s).
    """
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4:
        raise ShapeError("conv2d input must be [C,H,W] or [B,C,H,W]", shape=x.shape)
    w = kernel.data
    co, ci, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d kernel sizes must be odd", kernel=w.shape)
    B, C, H, W = xd.shape
    if C != ci:
        raise ShapeError(f"conv2d: kernel expects {ci} input channels, got {C}", expected=ci, got=C)
    if bias is not None and bias.shape != (co,):
        raise ShapeError("conv2d bias must have shape [C_out]", bias=bias.shape, c_out=co)
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    Ho, Wo = (H - 1) // stride + 1, (W - 1) // stride + 1
    # channel-major layout: every (i, j) tap is one contiguous block of cols
    xp = np.zeros((C, B, H + 2 * ph, W + 2 * pw))
    xp[:, :, ph:ph + H, pw:pw + W] = xd.transpose(1, 0, 2, 3)
    cols = np.empty((ci, kh, kw, B, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    cols = cols.reshape(ci * kh * kw, B * Ho * Wo)
    wmat = w.reshape(co, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(co, B, Ho, Wo).transpose(1, 0, 2, 3)
    _tally(B * Ho * Wo * co * ci * kh * kw)
    out = np.ascontiguousarray(out[0] if unbatched else out)

    def bw(g):
        g4 = g[None] if unbatched else g
        g2 = g4.transpose(1, 0, 2, 3).reshape(co, B * Ho * Wo)
        gw = (g2 @ cols.T).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(ci, kh, kw, B, Ho, Wo)
            gxp = np.zeros((C, B, H + 2 * ph, W + 2 * pw))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, i, j]
            gx = gxp[:, :, ph:ph + H, pw:pw + W].transpose(1, 0, 2, 3)
            gx = gx[0] if unbatched else gx
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g2.sum(axis=1),)
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, bw, "conv2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour doubling of the last two axes."""
    d = x.data
    out = d.repeat(2, axis=-2).repeat(2, axis=-1)
    h, w = d.shape[-2:]

    def bw(g):
        return (g.reshape(g.shape[:-2] + (h, 2, w, 2)).sum(axis=(-3, -1)),)

    return _result(out, (x,), bw, "upsample2x")


def _bilinear_setup(flow: np.ndarray, h: int, w: int):
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sx = np.clip(xs + flow[0], 0.0, w - 1)
    sy = np.clip(ys + flow[1], 0.0, h - 1)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return x0, x1, y0, y1, sx - x0, sy - y0


def sample_bilinear_array(m: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Plain-array version of :func:`bilinear_sample` (no graph)."""
    return bilinear_sample(Tensor(m), flow).data


def bilinear_sample(m: Tensor, flow) -> Tensor:
    """Sample ``m`` [c,h,w] at (x + flow[0], y + flow[1]), clamping to the edge.

    Differentiable with respect to ``m`` only; ``flow`` is treated as data.
    """
    flow = flow.data if isinstance(flow, Tensor) else np.asarray(flow, dtype=np.float64)
    c, h, w = m.shape
    if flow.shape != (2, h, w):
        raise ShapeError("flow must be [2,h,w] matching the map", flow=flow.shape, map=m.shape)
    x0, x1, y0, y1, wx, wy = _bilinear_setup(flow, h, w)
    d = m.data
    w00, w01 = (1 - wy) * (1 - wx), (1 - wy) * wx
    w10, w11 = wy * (1 - wx), wy * wx
    out = w00 * d[:, y0, x0] + w01 * d[:, y0, x1] + w10 * d[:, y1, x0] + w11 * d[:, y1, x1]

    def bw(g):
        gm = np.zeros((c, h * w))
        for yy, xx, wt in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
            flat = (yy * w + xx).ravel()
            contrib = (g * wt).reshape(c, -1)
            for ch in range(c):
                gm[ch] += np.bincount(flat, weights=contrib[ch], minlength=h * w)
        return (gm.reshape(c, h, w),)

    return _result(out, (m,), bw, "bilinear_sample")


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))
