"""Dense float64 tensors with reverse-mode automatic differentiation.

Image tensors are laid out NHWC. Every differentiable operation records a
:class:`Node` on its output; :meth:`Tensor.backward` walks those nodes in
reverse topological order exactly once.
"""
from __future__ import annotations

import contextlib
import logging
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

__all__ = [
    "Tensor",
    "Node",
    "ShapeError",
    "GraphError",
    "conv2d",
    "depthwise_conv2d",
    "pad",
    "sigmoid",
    "leaky_relu",
    "clamp",
    "absolute",
    "smooth_l1",
    "concat",
    "take_channels",
    "reshape",
    "tensor_sum",
    "tensor_mean",
    "channel_sum",
    "grad_check",
    "detect_anomaly",
    "deterministic",
]

_ANOMALY = False


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


class GraphError(RuntimeError):
    """Raised for misuse of the recorded graph (reuse, detached loss, non-scalar loss)."""


class Node:
    """One recorded operation: tag, inputs and the closure mapping output grad to input grads."""

    __slots__ = ("op", "inputs", "backward_fn", "consumed")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    # -- basic properties -------------------------------------------------
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

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    # -- reverse mode -----------------------------------------------------
    def backward(self) -> int:
        """Populate ``.grad`` on every reachable leaf that requires grad.

        The graph is single-use: a second call on the same graph raises
        :class:`GraphError`. Leaf gradients accumulate across distinct graphs,
        so callers reset them between optimizer steps.

        Returns the number of local-gradient evaluations performed, which
        equals the number of recorded nodes reachable from this tensor.
        """
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if self.node is None:
            raise GraphError("loss is detached: no recorded operations lead to it")

        order = _topological(self)
        if any(t.node.consumed for t in order):
            raise GraphError("graph already consumed by a previous backward call")

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        evaluations = 0
        for t in reversed(order):
            node = t.node
            g = grads.pop(id(t), None)
            node.consumed = True
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            evaluations += 1
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    raise ShapeError(f"{node.op}: gradient shape {ig.shape} != input shape {inp.shape}")
                if inp.node is None:
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
                else:
                    key = id(inp)
                    grads[key] = grads[key] + ig if key in grads else ig
            node.backward_fn = _spent
        return evaluations


def _spent(_g):
    raise GraphError("graph already consumed by a previous backward call")


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in t.node.inputs:
            if inp.node is not None and id(inp) not in seen:
                stack.append((inp, False))
    return order


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _ANOMALY and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward_fn)
    return out


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of a custom differentiable op.

    ``backward_fn(grad)`` must return one gradient array (or None) per input.
    """
    return _record(op, np.asarray(data, dtype=np.float64), inputs, backward_fn)


@contextlib.contextmanager
def detect_anomaly(enabled: bool = True) -> Iterator[None]:
    """Raise ``FloatingPointError`` as soon as any op yields NaN or Inf."""
    global _ANOMALY
    prev, _ANOMALY = _ANOMALY, enabled
    try:
        yield
    finally:
        _ANOMALY = prev


@contextlib.contextmanager
def deterministic(enabled: bool = True) -> Iterator[None]:
    """Pin BLAS to a single thread so reductions inside matmul are order-stable."""
    if not enabled:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        logger.warning("threadpoolctl unavailable; BLAS threading left unchanged")
        yield
        return
    with threadpool_limits(limits=1):
        yield


# -- broadcasting binary ops ---------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "add")
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "sub")
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * out / bd, b.shape)

    return _record("div", out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record("scale", a.data * s, (a,), lambda g: (g * s,))


# -- elementwise unary ops -----------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    d = x.data
    slope = np.where(d >= 0, 1.0, alpha)
    return _record("leaky_relu", d * slope, (x,), lambda g: (g * slope,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    d = x.data
    inside = (d >= lo) & (d <= hi)
    return _record("clamp", np.clip(d, lo, hi), (x,), lambda g: (g * inside,))


def absolute(x: Tensor) -> Tensor:
    d = x.data
    return _record("abs", np.abs(d), (x,), lambda g: (g * np.sign(d),))


def square(x: Tensor) -> Tensor:
    d = x.data
    return _record("square", d * d, (x,), lambda g: (2.0 * g * d,))


def smooth_l1(x: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style penalty: quadratic below ``beta``, linear above."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    d = x.data
    a = np.abs(d)
    small = a < beta
    out = np.where(small, 0.5 * d * d / beta, a - 0.5 * beta)
    slope = np.where(small, d / beta, np.sign(d))
    return _record("smooth_l1", out, (x,), lambda g: (g * slope,))


# -- reductions ----------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if x.size == 0:
        raise ShapeError("sum of an empty tensor")
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

    def backward(g):
        return (np.broadcast_to(np.reshape(g, kept), x.shape).copy(),)

    return _record("sum", np.asarray(out), (x,), backward)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if x.size == 0:
        raise ShapeError("mean of an empty tensor")
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

    def backward(g):
        return (np.broadcast_to(np.reshape(g, kept) / count, x.shape).copy(),)

    return _record("mean", np.asarray(out), (x,), backward)


def channel_sum(x: Tensor) -> Tensor:
    """Sum over the spatial axes of an NHWC tensor, one value per (image, channel)."""
    if x.ndim != 4:
        raise ShapeError(f"channel_sum expects NHWC, got rank {x.ndim}")
    return tensor_sum(x, axis=(1, 2))


# -- structural ops ------------------------------------------------------

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", out, tensors, backward)


def take_channels(x: Tensor, start: int, stop: int) -> Tensor:
    src = x.shape

    def backward(g):
        full = np.zeros(src)
        full[..., start:stop] = g
        return (full,)

    return _record("take_channels", x.data[..., start:stop].copy(), (x,), backward)


def _reflect_index(n: int, before: int, after: int, mode: str) -> np.ndarray:
    return np.pad(np.arange(n), (before, after), mode=mode)


def pad(x: Tensor, top: int, bottom: int, left: int, right: int, mode: str = "constant") -> Tensor:
    """Pad the spatial axes of an NHWC tensor with zeros or by reflection."""
    if x.ndim != 4:
        raise ShapeError(f"pad expects NHWC, got rank {x.ndim}")
    if mode == "constant":
        out = np.pad(x.data, ((0, 0), (top, bottom), (left, right), (0, 0)))
        H, W = x.shape[1:3]
        return _record("pad", out, (x,), lambda g: (g[:, top:top + H, left:left + W, :].copy(),))
    if mode != "reflect":
        raise ValueError(f"unknown pad mode {mode!r}")
    ih = _reflect_index(x.shape[1], top, bottom, "reflect")
    iw = _reflect_index(x.shape[2], left, right, "reflect")
    out = x.data[:, ih][:, :, iw]

    def backward(g):
        gw = np.zeros(g.shape[:2] + (x.shape[2],) + g.shape[3:])
        np.add.at(gw, (slice(None), slice(None), iw), g)
        gh = np.zeros(x.shape)
        np.add.at(gh, (slice(None), ih), gw)
        return (gh,)

    return _record("pad_reflect", out, (x,), backward)


# -- convolution ---------------------------------------------------------

def _same_pads(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation of NHWC input with a (kh, kw, Cin, Cout) kernel.

    ``padding="same"`` zero-pads so the output has ``ceil(H / stride)`` rows;
    ``"valid"`` uses no padding.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {kernel.shape}")
    N, H, W, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if x.size == 0:
        raise ShapeError("conv2d on zero-size input")
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {kcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1:
        raise ValueError("stride must be >= 1")

    if padding == "same":
        pt, pb = _same_pads(H, kh, stride)
        pl, pr = _same_pads(W, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    Hp, Wp = H + pt + pb, W + pl + pr
    if kh > Hp or kw > Wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xd = x.data
    xp = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else xd
    k2 = kernel.data.reshape(kh * kw * cin, cout)
    if kh == 1 and kw == 1 and stride == 1:
        cols = xp.reshape(N * Ho * Wo, cin)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(N * Ho * Wo, kh * kw * cin)
    out = cols @ k2
    if bias is not None:
        out += bias.data
    out = out.reshape(N, Ho, Wo, cout)

    def backward(g):
        g2 = g.reshape(N * Ho * Wo, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ k2.T).reshape(N, Ho, Wo, kh, kw, cin)
            gxp = np.zeros((N, Hp, Wp, cin))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, pt:pt + H, pl:pl + W, :]
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record("conv2d", out, inputs, lambda g: backward(g)[:len(inputs)])


def depthwise_conv2d(x: Tensor, kernel: np.ndarray, padding: str = "same") -> Tensor:
    """Apply one fixed 2-D kernel to every channel independently (stride 1).

    ``kernel`` is a constant array of shape (kh, kw); it receives no gradient.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if x.ndim != 4 or kernel.ndim != 2:
        raise ShapeError("depthwise_conv2d expects NHWC input and a 2-D kernel")
    N, H, W, C = x.shape
    kh, kw = kernel.shape
    if padding == "same":
        pt, pb = _same_pads(H, kh, 1)
        pl, pr = _same_pads(W, kw, 1)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    Ho, Wo = H + pt + pb - kh + 1, W + pl + pr - kw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"depthwise_conv2d: kernel {kh}x{kw} larger than input {H}x{W}")
    out = np.zeros((N, Ho, Wo, C))
    for i in range(kh):
        for j in range(kw):
            if kernel[i, j] != 0.0:
                out += kernel[i, j] * xp[:, i:i + Ho, j:j + Wo, :]

    def backward(g):
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                if kernel[i, j] != 0.0:
                    gxp[:, i:i + Ho, j:j + Wo, :] += kernel[i, j] * g
        return (gxp[:, pt:pt + H, pl:pl + W, :],)

    return _record("depthwise_conv2d", out, (x,), backward)


# -- gradient checking ---------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray | Tensor, eps: float = 1e-5,
               indices: Sequence[int] | None = None) -> float:
    """Max relative error between the analytic gradient of ``f`` and central differences.

    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``. ``indices``
    restricts the comparison to a subset of flat coordinates.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    if out.size != 1:
        raise GraphError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = np.zeros_like(base) if xt.grad is None else xt.grad

    flat = base.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(base)).item()
        flat[i] = orig - eps
        fm = f(Tensor(base)).item()
        flat[i] = orig
        num = (fp - fm) / (2.0 * eps)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst
