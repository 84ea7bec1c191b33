"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient.  Outside a tape every op is a pure
function of its inputs::

    with Tape() as tape:
        y = sum_(mul(x, w))
    tape.backward(y)        # populates x.grad / w.grad where requested

Layout is row-major, channel-first (``C x H x W``) for feature maps.  The
only broadcasting supported by binary ops is a single-channel map
(``1 x H x W``) against a ``C x H x W`` tensor.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Differentiable ops covered by the gradient-check registry.
DIFFERENTIABLE_OPS = (
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "clamp",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "slice",
    "matmul",
    "softmax_lastdim",
    "conv2d",
    "bilinear_resize",
)


class TensorError(ValueError):
    """Shape or argument error raised by a tensor op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class BackwardError(RuntimeError):
    """Invalid use of the tape (non-scalar loss, reused tape, ...)."""


class Tensor:
    """A dense double-precision array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # trusted constructor: arr is a fresh float64 array
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.node is None:
            raise BackwardError("tensor was not produced by a recorded op")
        self.node.tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    tape: "Tape"


@dataclass(eq=False)
class Tape:
    """Ordered record of differentiable ops for one forward pass."""

    nodes: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, node: Node) -> None:
        if self.consumed:
            raise BackwardError("tape already consumed by backward(); call reset() first")
        self.nodes.append(node)

    def reset(self) -> None:
        for node in self.nodes:
            node.output.node = None
        self.nodes = []
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise BackwardError("backward() called twice on the same recording")
        if loss.size != 1:
            raise BackwardError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss.node is None or loss.node.tape is not self:
            raise BackwardError("loss was not recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.node is None:
                    # leaf
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    key = id(t)
                    grads[key] = gi if key not in grads else grads[key] + gi
        self.consumed = True


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it."""
    loss.backward()


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    _check_finite(out, op)
    result = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        node = Node(op, tuple(inputs), result, backward_fn, tape)
        result.node = node
        tape.record(node)
    return result


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None and np.ndim(x) == 0:
        return Tensor._wrap(np.full(like.shape, float(x)))
    return Tensor(x)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _broadcast_kind(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if a.ndim == b.ndim and a.ndim >= 1 and a.shape[1:] == b.shape[1:]:
        if b.shape[0] == 1:
            return "b"
        if a.shape[0] == 1:
            return "a"
    raise TensorError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, kind: str, side: str) -> np.ndarray:
    if kind == side:
        return g.sum(axis=0, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _binary_args(a, b)
    kind = _broadcast_kind(a, b, "add")

    def bw(g):
        return _unbroadcast(g, kind, "a"), _unbroadcast(g, kind, "b")

    return _emit("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _binary_args(a, b)
    kind = _broadcast_kind(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, kind, "a"), -_unbroadcast(g, kind, "b")

    return _emit("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _binary_args(a, b)
    kind = _broadcast_kind(a, b, "mul")

    def bw(g):
        return (
            _unbroadcast(g * b.data, kind, "a"),
            _unbroadcast(g * a.data, kind, "b"),
        )

    return _emit("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    """Elementwise quotient of equal-shaped tensors."""
    a, b = _binary_args(a, b)
    if a.shape != b.shape:
        raise TensorError(f"div: shapes differ {a.shape} vs {b.shape}")
    out = a.data / b.data

    def bw(g):
        return g / b.data, -g * out / b.data

    return _emit("div", out, (a, b), bw)


def _binary_args(a, b) -> tuple:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TensorError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


def scale(x: Tensor, s) -> Tensor:
    """Multiply by a Python number or a one-element tensor."""
    if isinstance(s, Tensor):
        if s.size != 1:
            raise TensorError(f"scale: factor must have one element, got {s.shape}")
        sv = s.data.reshape(-1)[0]

        def bw(g):
            return g * sv, np.sum(g * x.data).reshape(s.shape)

        return _emit("scale", x.data * sv, (x, s), bw)

    sv = float(s)
    return _emit("scale", x.data * sv, (x,), lambda g: (g * sv,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _emit("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero where clipping is active."""
    if lo > hi:
        raise TensorError(f"clamp: lo={lo} > hi={hi}")
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit("clamp", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and layout
# ---------------------------------------------------------------------------


def sum_(x: Tensor) -> Tensor:
    return _emit("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, g.item()),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _emit("mean", np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, g.item() / n),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape).copy()
    except ValueError:
        raise TensorError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise TensorError(f"transpose expects a matrix, got shape {x.shape}")
    return _emit("transpose", x.data.T.copy(), (x,), lambda g: (g.T.copy(),))


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the leading (channel) axis."""
    xs = list(xs)
    if not xs:
        raise TensorError("concat of an empty list")
    tail = xs[0].shape[1:]
    for t in xs:
        if t.shape[1:] != tail:
            raise TensorError(f"concat: trailing shapes differ {xs[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in xs], axis=0)
    bounds = np.cumsum([0] + [t.shape[0] for t in xs])

    def bw(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return _emit("concat", out, xs, bw)


def slice_(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of the leading axis."""
    if not 0 <= start < stop <= x.shape[0]:
        raise TensorError(f"slice [{start}:{stop}] out of range for shape {x.shape}")

    def bw(g):
        full = np.zeros(x.shape)
        full[start:stop] = g
        return (full,)

    return _emit("slice", x.data[start:stop].copy(), (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _emit("matmul", a.data @ b.data, (a, b), bw)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise TensorError(f"softmax needs a non-empty last axis, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_lastdim", out, (x,), bw)


# ---------------------------------------------------------------------------
# convolution and resampling
# ---------------------------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int) -> int:
    return (n + 2 * (k // 2) - k) // stride + 1


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    depthwise: bool = False,
) -> Tensor:
    """2-D cross-correlation with zero padding ``k // 2``.

    ``w`` is ``C_out x C_in x k x k`` (``C x 1 x k x k`` when depthwise).
    Kernel sizes 1 and 3 and strides 1 and 2 are supported.
    """
    if x.ndim != 3 or w.ndim != 4:
        raise TensorError(f"conv2d: expected x CxHxW and 4-D weight, got {x.shape}, {w.shape}")
    c_out, c_in_w, k, k2 = w.shape
    if k != k2 or k not in (1, 3):
        raise TensorError(f"conv2d: unsupported kernel size {k}x{k2}")
    if stride not in (1, 2):
        raise TensorError(f"conv2d: unsupported stride {stride}")
    c_in, h, wd = x.shape
    if depthwise:
        if c_in_w != 1 or c_out != c_in:
            raise TensorError(f"conv2d: depthwise weight {w.shape} does not match {c_in} channels")
    elif c_in_w != c_in:
        raise TensorError(f"conv2d: weight expects {c_in_w} input channels, input has {c_in}")
    if b is not None and b.shape != (c_out,):
        raise TensorError(f"conv2d: bias shape {b.shape} != ({c_out},)")

    pad = k // 2
    ho, wo = conv_output_size(h, k, stride), conv_output_size(wd, k, stride)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    wdata = w.data
    if depthwise:
        out = np.einsum("chwij,cij->chw", win, wdata[:, 0])
    else:
        out = np.tensordot(wdata, win, axes=([1, 2, 3], [0, 3, 4]))
    if b is not None:
        out = out + b.data[:, None, None]

    def bw(g):
        if depthwise:
            gw = np.einsum("chw,chwij->cij", g, win)[:, None]
            gwin = np.einsum("chw,cij->chwij", g, wdata[:, 0])
        else:
            gw = np.tensordot(g, win, axes=([1, 2], [1, 2]))
            gwin = np.tensordot(wdata, g, axes=([0], [0]))  # ci,k,k,ho,wo
            gwin = gwin.transpose(0, 3, 4, 1, 2)
        gxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gwin[..., i, j]
        gx = gxp[:, pad : pad + h, pad : pad + wd] if pad else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(1, 2)))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv2d", out, inputs, bw)


def _resize_axis(n_in: int, n_out: int):
    """Source indices and weights for half-pixel-centre linear sampling."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def _interp_matrix(i0, i1, frac, n_in) -> np.ndarray:
    m = np.zeros((len(i0), n_in))
    rows = np.arange(len(i0))
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize ``C x H x W`` with half-pixel centres and edge clamping."""
    if out_h < 1 or out_w < 1:
        raise TensorError(f"bilinear_resize: bad output size {out_h}x{out_w}")
    if x.ndim != 3:
        raise TensorError(f"bilinear_resize expects CxHxW, got {x.shape}")
    c, h, w = x.shape
    y0, y1, fy = _resize_axis(h, out_h)
    x0, x1, fx = _resize_axis(w, out_w)
    fy_ = fy[None, :, None]
    fx_ = fx[None, None, :]
    # a + f * (b - a) keeps constant maps exact
    top, bot = x.data[:, y0, :], x.data[:, y1, :]
    rows = top + fy_ * (bot - top)
    left, right = rows[:, :, x0], rows[:, :, x1]
    out = left + fx_ * (right - left)

    def bw(g):
        my = _interp_matrix(y0, y1, fy, h)
        mx = _interp_matrix(x0, x1, fx, w)
        return (my.T @ g @ mx,)

    return _emit("bilinear_resize", out, (x,), bw)
