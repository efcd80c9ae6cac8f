"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

Every forward call builds a fresh graph of :class:`Value` nodes; :func:`backward`
walks it in reverse topological order and accumulates ``grad`` on every node
that requires one. Only the operations needed by the small conv/dense
networks in this package are provided.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

LOG_CLAMP = 1e-12
MAX_RANK = 4
GROUPS = ("encoder", "task", "discriminator")


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an operation's rule."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Value:
    """A node in the differentiation graph."""

    __slots__ = ("data", "_grad", "op", "parents", "requires_grad", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple["Value", ...] = (),
        backward_fn: BackwardFn | None = None,
        copy: bool = True,
    ):
        arr = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(op, f"rank {arr.ndim} exceeds {MAX_RANK}")
        self.data = arr
        self._grad = None
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self._backward = backward_fn

    @property
    def grad(self) -> np.ndarray:
        # allocated on first use; most intermediate nodes never need one
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = np.asarray(value, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Value(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def detach(v: Value) -> Value:
    """Constant leaf sharing no graph with ``v``."""
    return Value(v.data)


def _lift(x, like: Value) -> Value:
    if isinstance(x, Value):
        return x
    return Value(np.full(like.shape, float(x)))


def _node(data: np.ndarray, op: str, parents: tuple[Value, ...], backward_fn: BackwardFn) -> Value:
    needs = any(p.requires_grad for p in parents)
    return Value(data, requires_grad=needs, op=op, parents=parents,
                 backward_fn=backward_fn if needs else None, copy=False)


@dataclass(frozen=True)
class Parameter:
    """A trainable leaf with a unique hierarchical name and a fixed group."""

    value: Value
    name: str
    group: str

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"unknown parameter group {self.group!r}")
        if not self.value.requires_grad:
            raise ValueError(f"parameter {self.name} must require grad")

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray:
        return self.value.grad


# branch recording, used by the finite-difference checker to skip kinks

_branch_log: list[bytes] | None = None


@contextlib.contextmanager
def record_branches() -> Iterator[list[bytes]]:
    """Collect relu masks and maxpool winners produced while active."""
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def _log_branch(arr: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(np.packbits(arr.astype(bool)).tobytes() if arr.dtype == bool else arr.tobytes())


# ---------------------------------------------------------------- operations


def matmul(a: Value, b: Value) -> Value:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _node(A @ B, "matmul", (a, b), lambda g: (
        g @ B.T if a.requires_grad else None,
        A.T @ g if b.requires_grad else None,
    ))


def add(a: Value, b: Value) -> Value:
    if a.shape == b.shape:
        return _node(a.data + b.data, "add", (a, b), lambda g: (g, g))
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        axes = tuple(range(a.data.ndim - 1))
        return _node(a.data + b.data, "add", (a, b), lambda g: (g, g.sum(axis=axes)))
    raise ShapeError("add", f"shapes {a.shape} and {b.shape} are neither equal nor bias-compatible")


def mul(a: Value, b: Value) -> Value:
    if a.shape != b.shape:
        raise ShapeError("mul", f"shapes {a.shape} and {b.shape} differ")
    A, B = a.data, b.data
    return _node(A * B, "mul", (a, b), lambda g: (g * B, g * A))


def neg(a: Value) -> Value:
    return _node(-a.data, "neg", (a,), lambda g: (-g,))


def relu(a: Value) -> Value:
    mask = a.data > 0
    _log_branch(mask)
    # np.maximum keeps NaN visible so divergence is not masked
    return _node(np.maximum(a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Value) -> Value:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def log(a: Value) -> Value:
    """Natural log of ``max(x, LOG_CLAMP)``; zero gradient below the clamp."""
    x = a.data
    live = x > LOG_CLAMP
    safe = np.maximum(x, LOG_CLAMP)
    return _node(np.log(safe), "log", (a,), lambda g: (np.where(live, g / safe, 0.0),))


def mean(a: Value) -> Value:
    n = a.size
    shape = a.shape
    return _node(np.array(a.data.mean()), "mean", (a,), lambda g: (np.full(shape, float(g) / n),))


def sum(a: Value) -> Value:  # noqa: A001 - mirrors the op-kind name
    shape = a.shape
    return _node(np.array(a.data.sum()), "sum", (a,), lambda g: (np.full(shape, float(g)),))


def reshape(a: Value, shape: Sequence[int]) -> Value:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError("reshape", f"cannot reshape {a.shape} into {shape}")
    src = a.shape
    return _node(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(src),))


def transpose(a: Value, axes: Sequence[int]) -> Value:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError("transpose", f"axes {axes} do not permute rank {a.data.ndim}")
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inverse),))


def concat(values: Sequence[Value], axis: int = 0) -> Value:
    if not values:
        raise ShapeError("concat", "no inputs")
    ref = values[0].shape
    for v in values[1:]:
        if len(v.shape) != len(ref) or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(v.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError("concat", f"shapes {ref} and {v.shape} differ off axis {axis}")
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]
    out = np.concatenate([v.data for v in values], axis=axis)
    return _node(out, "concat", tuple(values), lambda g: tuple(np.split(g, splits, axis=axis)))


def softmax_rows(a: Value) -> Value:
    if a.data.ndim != 2:
        raise ShapeError("softmax_rows", f"expects rank 2, got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _node(p, "softmax_rows", (a,), back)


def conv2d(x: Value, w: Value, b: Value | None = None) -> Value:
    """Stride-1 convolution with zero padding that keeps H and W."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d", f"expects NCHW input and OCkk kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError("conv2d", f"input has {c} channels, kernel expects {ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} must be odd to preserve size")
    if b is not None and b.shape != (o,):
        raise ShapeError("conv2d", f"bias {b.shape} does not match {o} output channels")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    # columns laid out (c, kh, kw) x (n, h, w)
    cols = np.empty((c, kh, kw, n, h, wd))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + h, j:j + wd].transpose(1, 0, 2, 3)
    cols = cols.reshape(c * kh * kw, n * h * wd)
    wmat = w.data.reshape(o, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(o, n, h, wd).transpose(1, 0, 2, 3)

    def back(g):
        gm = g.transpose(1, 0, 2, 3).reshape(o, n * h * wd)
        gw = (gm @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gm).reshape(c, kh, kw, n, h, wd)
            gxp = np.zeros((c, n, h + 2 * ph, wd + 2 * pw))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + h, j:j + wd] += gcols[:, i, j]
            gx = gxp[:, :, ph:ph + h, pw:pw + wd].transpose(1, 0, 2, 3)
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=1)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, "conv2d", parents, back)


def maxpool2x2(x: Value) -> Value:
    """2x2 max pooling, stride 2; ties go to the first element in row-major order."""
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError("maxpool2x2", f"expects NCHW with even H and W, got {x.shape}")
    corners = [x.data[:, :, di::2, dj::2] for di in (0, 1) for dj in (0, 1)]
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))
    masks = []
    taken = np.zeros(out.shape, dtype=bool)
    for corner in corners:
        m = (corner == out) & ~taken
        taken |= m
        masks.append(m)
        _log_branch(m)

    def back(g):
        gx = np.zeros(x.shape)
        for (di, dj), m in zip(((0, 0), (0, 1), (1, 0), (1, 1)), masks):
            gx[:, :, di::2, dj::2] = g * m
        return (gx,)

    return _node(out, "maxpool2x2", (x,), back)


def upsample2x(x: Value) -> Value:
    """Nearest-neighbour upsampling by 2 along H and W."""
    if x.data.ndim != 4:
        raise ShapeError("upsample2x", f"expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _node(out, "upsample2x", (x,),
                 lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def spatial_mean(x: Value) -> Value:
    """Global average over H and W: (N, C, H, W) -> (N, C)."""
    if x.data.ndim != 4:
        raise ShapeError("spatial_mean", f"expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    return _node(x.data.mean(axis=(2, 3)), "spatial_mean", (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


_OPS: dict[str, Callable[..., Value]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "log": log,
    "neg": neg,
    "mean": mean,
    "sum": sum,
    "conv2d": conv2d,
    "maxpool2x2": maxpool2x2,
    "upsample2x": upsample2x,
    "spatial_mean": spatial_mean,
    "reshape": reshape,
    "transpose": transpose,
    "softmax_rows": softmax_rows,
}


def forward_op(kind: str, inputs: Sequence[Value], **attrs) -> Value:
    """Apply the operation named ``kind``; extra attributes go to the op."""
    if kind == "concat":
        return concat(list(inputs), **attrs)
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


# ------------------------------------------------------------------ backward


def _topo_order(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Value) -> None:
    """Accumulate d(root)/d(node) into ``grad`` of every reachable node."""
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad += g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)


def zero_grad(params: Iterable[Parameter | Value]) -> None:
    for p in params:
        v = p.value if isinstance(p, Parameter) else p
        v.grad[...] = 0.0
