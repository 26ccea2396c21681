"""A small dense-tensor engine with tape-based reverse-mode differentiation.

Values are float64 numpy arrays.  Every primitive computes its forward value
eagerly; when at least one operand is tracked by a :class:`Tape`, the
primitive appends a node holding its vector-Jacobian product.  Nodes are
appended in creation order, so the tape is topologically sorted by
construction and :meth:`Tape.backward` is a single reverse sweep.

Broadcasting is deliberately absent: elementwise primitives require equal
shapes.  The only implicit expansions are ``scalar_scale`` (a Python float)
and ``channel_bias`` (a vector along axis 1).

Reductions use numpy's fixed pairwise summation order, so forward values and
gradients are bit-reproducible for a given shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "bilinear_sample",
    "channel_bias",
    "concat",
    "conv2d",
    "divide",
    "exp",
    "finite_diff_grad",
    "finite_diff_grads",
    "max_relative_error",
    "multiply",
    "reduce_mean",
    "reduce_sum",
    "reshape",
    "scalar_scale",
    "silu",
    "slice_frames",
    "square",
    "stack",
    "subtract",
    "temporal_conv",
    "transpose",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Node:
    op: str
    parents: tuple[int, ...]
    vjp: VJP | None
    shape: tuple[int, ...]
    name: str | None = None


@dataclass
class Tape:
    """Append-only record of primitive applications."""

    nodes: list[_Node] = field(default_factory=list)

    def watch(self, value, name: str | None = None) -> Tensor:
        """Register a leaf (parameter or input) whose gradient is wanted."""
        data = np.array(value, dtype=np.float64)
        self.nodes.append(_Node("leaf", (), None, data.shape, name))
        return Tensor(data, self, len(self.nodes) - 1, name)

    def record(self, op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: VJP) -> Tensor:
        idx = tuple(p.index if p.tape is self else -1 for p in parents)
        self.nodes.append(_Node(op, idx, vjp, data.shape))
        return Tensor(data, self, len(self.nodes) - 1)

    def backward(self, root: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[str, np.ndarray]:
        return backward(self, root, wrt)

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """A float64 array, optionally tracked by a tape."""

    __slots__ = ("data", "tape", "index", "name")

    def __init__(self, data, tape: Tape | None = None, index: int | None = None, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.index = index
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", tape#{self.index}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scalar_scale(self, 1.0 / float(other))
        return divide(self, other)

    def __neg__(self):
        return scalar_scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs: Tensor) -> Tape | None:
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("operands are recorded on different tapes")
            tape = x.tape
    return tape


def _emit(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: VJP) -> Tensor:
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(data)
    return tape.record(op, data, parents, vjp)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def subtract(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("subtract", a, b)
    return _emit("subtract", a.data - b.data, (a, b), lambda g: (g, -g))


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("multiply", a, b)
    ad, bd = a.data, b.data
    return _emit("multiply", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def divide(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("divide", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = g / bd
        return ga, -ga * out

    return _emit("divide", out, (a, b), vjp)


def scalar_scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit("scalar_scale", a.data * c, (a,), lambda g: (g * c,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _emit("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    s = _sigmoid(ad)
    return _emit("silu", ad * s, (a,), lambda g: (g * (s * (1.0 + ad * (1.0 - s))),))


# -- reductions and layout ----------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def reduce_sum(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    shape = a.shape
    out = np.sum(a.data, axis=axes)
    keep = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def vjp(g):
        return (np.broadcast_to(np.reshape(g, keep), shape).copy(),)

    return _emit("reduce_sum", np.asarray(out, dtype=np.float64), (a,), vjp)


def reduce_mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    s = reduce_sum(a, axes)
    return scalar_scale(s, 1.0 / count)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as err:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from err
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def slice_frames(a, start: int, stop: int, axis: int = 0) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis`` (frames by default)."""
    a = _as_tensor(a)
    axis %= a.data.ndim
    n = a.shape[axis]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice_frames: range [{start}, {stop}) outside axis {axis} of shape {a.shape}")
    sl = (slice(None),) * axis + (slice(start, stop),)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[sl] = g
        return (full,)

    return _emit("slice_frames", a.data[sl].copy(), (a,), vjp)


def concat(xs: Sequence, axis: int) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    nd = xs[0].data.ndim
    axis %= nd
    for x in xs[1:]:
        if x.data.ndim != nd or any(x.shape[i] != xs[0].shape[i] for i in range(nd) if i != axis):
            raise ShapeError(f"concat: shape mismatch {xs[0].shape} vs {x.shape} on axis {axis}")
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return _emit("concat", np.concatenate([x.data for x in xs], axis=axis), xs, vjp)


def stack(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    for x in xs[1:]:
        _same_shape("stack", xs[0], x)
    out = np.stack([x.data for x in xs], axis=axis)
    ax = axis % out.ndim

    def vjp(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(xs)))

    return _emit("stack", out, xs, vjp)


# -- convolutions --------------------------------------------------------------


def _zero_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))  # np.pad is several times slower on small arrays
    xp[:, :, pad:-pad, pad:-pad] = x
    return xp


def _correlate(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    k = w.shape[-1]
    xp = _zero_pad(x, pad)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x, kernel) -> Tensor:
    """Stride-1 cross-correlation with symmetric zero padding.

    ``x`` is ``C_in×H×W`` or ``N×C_in×H×W``; ``kernel`` is
    ``C_out×C_in×k×k`` with odd ``k``.  Output keeps the spatial extent.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    wd = kernel.data
    if xd.ndim != 4 or wd.ndim != 4 or wd.shape[1] != xd.shape[1] or wd.shape[2] != wd.shape[3] or wd.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    pad = wd.shape[2] // 2
    out = _correlate(xd, wd, pad)

    def vjp(g):
        g4 = g[None] if squeeze else g
        gx = gw = None
        if x.tracked:
            flipped = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = _correlate(g4, flipped, pad)
            if squeeze:
                gx = gx[0]
        if kernel.tracked:
            k = wd.shape[2]
            xp = _zero_pad(xd, pad)
            win = sliding_window_view(xp, (k, k), axis=(2, 3))
            gw = np.tensordot(g4, win, axes=([0, 2, 3], [0, 2, 3]))
        return gx, gw

    return _emit("conv2d", out[0] if squeeze else out, (x, kernel), vjp)


def channel_bias(x, bias) -> Tensor:
    """Add a per-channel vector along axis 1 (``N×C×...``) or axis 0 (``C×...``)."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    ax = 0 if x.data.ndim == 3 else 1
    if bias.data.ndim != 1 or x.data.ndim < 2 or x.shape[ax] != bias.shape[0]:
        raise ShapeError(f"channel_bias: input {x.shape} incompatible with bias {bias.shape}")
    view = [1] * x.data.ndim
    view[ax] = bias.shape[0]
    sum_axes = tuple(i for i in range(x.data.ndim) if i != ax)
    return _emit(
        "channel_bias",
        x.data + bias.data.reshape(view),
        (x, bias),
        lambda g: (g, g.sum(axis=sum_axes)),
    )


def temporal_conv(x, kernel) -> Tensor:
    """Depthwise 3-tap convolution along axis 1 of ``B×T×F×...`` with zero padding.

    ``kernel`` is ``F×3``; tap 0 weights the previous frame, tap 2 the next.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    xd, kd = x.data, kernel.data
    if xd.ndim < 3 or kd.shape != (xd.shape[2], 3):
        raise ShapeError(f"temporal_conv: input {x.shape} incompatible with kernel {kernel.shape}")
    view = (1, 1, xd.shape[2]) + (1,) * (xd.ndim - 3)
    k0, k1, k2 = (kd[:, i].reshape(view) for i in range(3))
    out = k1 * xd
    out[:, 1:] += k0 * xd[:, :-1]
    out[:, :-1] += k2 * xd[:, 1:]
    red = (0, 1) + tuple(range(3, xd.ndim))

    def vjp(g):
        gx = k1 * g
        gx[:, :-1] += k0 * g[:, 1:]
        gx[:, 1:] += k2 * g[:, :-1]
        gk = np.stack(
            [
                (g[:, 1:] * xd[:, :-1]).sum(axis=red),
                (g * xd).sum(axis=red),
                (g[:, :-1] * xd[:, 1:]).sum(axis=red),
            ],
            axis=1,
        )
        return gx, gk

    return _emit("temporal_conv", out, (x, kernel), vjp)


# -- sampling ------------------------------------------------------------------


def bilinear_sample(image, xs, ys) -> Tensor:
    """Sample ``image`` (``N×H×W``) at real coordinates with border clamping.

    ``xs``/``ys`` share the image's shape and hold column/row positions.
    Gradients reach both the image and the coordinates; coordinates that
    were clamped receive zero gradient.
    """
    image, xs, ys = _as_tensor(image), _as_tensor(xs), _as_tensor(ys)
    _same_shape("bilinear_sample", image, xs)
    _same_shape("bilinear_sample", image, ys)
    img = image.data
    n, h, w = img.shape
    if h < 2 or w < 2:
        raise ShapeError(f"bilinear_sample: image {img.shape} needs H, W >= 2")
    xc = np.clip(xs.data, 0.0, w - 1.0)
    yc = np.clip(ys.data, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc), w - 2).astype(np.intp)
    y0 = np.minimum(np.floor(yc), h - 2).astype(np.intp)
    wx = xc - x0
    wy = yc - y0
    base = np.arange(n).reshape(n, 1, 1) * (h * w)
    i00 = base + y0 * w + x0
    i01 = i00 + 1
    i10 = i00 + w
    i11 = i10 + 1
    flat = img.reshape(-1)
    v00, v01, v10, v11 = flat[i00], flat[i01], flat[i10], flat[i11]
    top = v00 * (1.0 - wx) + v01 * wx
    bot = v10 * (1.0 - wx) + v11 * wx
    out = top * (1.0 - wy) + bot * wy
    inside_x = (xs.data >= 0.0) & (xs.data <= w - 1.0)
    inside_y = (ys.data >= 0.0) & (ys.data <= h - 1.0)

    def vjp(g):
        gimg = gx = gy = None
        if image.tracked:
            size = n * h * w
            gimg = (
                np.bincount(i00.ravel(), (g * (1.0 - wx) * (1.0 - wy)).ravel(), size)
                + np.bincount(i01.ravel(), (g * wx * (1.0 - wy)).ravel(), size)
                + np.bincount(i10.ravel(), (g * (1.0 - wx) * wy).ravel(), size)
                + np.bincount(i11.ravel(), (g * wx * wy).ravel(), size)
            ).reshape(n, h, w)
        if xs.tracked:
            gx = g * ((v01 - v00) * (1.0 - wy) + (v11 - v10) * wy) * inside_x
        if ys.tracked:
            gy = g * (bot - top) * inside_y
        return gimg, gx, gy

    return _emit("bilinear_sample", out, (image, xs, ys), vjp)


# -- differentiation -----------------------------------------------------------


def backward(tape: Tape, root: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``root``.

    Returns a map from leaf name to gradient.  With ``wrt`` given, exactly
    those leaves are reported (zero gradient if unreachable); otherwise every
    named leaf on the tape.
    """
    if root.tape is not tape:
        raise ValueError("root is not recorded on this tape")
    if root.data.size != 1 or root.data.ndim > 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    nodes = tape.nodes
    grads: list[np.ndarray | None] = [None] * (root.index + 1)
    grads[root.index] = np.ones(root.shape)
    for i in range(root.index, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or node.vjp is None:
            continue
        for p, gp in zip(node.parents, node.vjp(g)):
            if p < 0 or gp is None:
                continue
            grads[p] = gp if grads[p] is None else grads[p] + gp
    if wrt is None:
        leaves = [(i, n) for i, n in enumerate(nodes[: root.index + 1]) if n.op == "leaf" and n.name is not None]
    else:
        leaves = [(t.index, nodes[t.index]) for t in wrt]
    out: dict[str, np.ndarray] = {}
    for i, node in leaves:
        key = node.name if node.name is not None else f"#{i}"
        if key in out:
            raise ValueError(f"duplicate leaf name {key!r}")
        g = grads[i] if i < len(grads) else None
        out[key] = np.zeros(node.shape) if g is None else g
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, epsilon: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = float(f(x))
        flat[i] = orig - epsilon
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * epsilon)
    return grad


def finite_diff_grads(
    f: Callable[[dict[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    epsilon: float = 1e-5,
) -> dict[str, np.ndarray]:
    """:func:`finite_diff_grad` over every entry of a parameter map."""
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    out = {}
    for name in work:
        def g(value, name=name):
            work[name] = value
            return f(work)

        out[name] = finite_diff_grad(g, work[name], epsilon)
        work[name] = np.array(params[name], dtype=np.float64)
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """``max |a - n| / max(|a|, |n|, floor * max|n|)`` over all entries.

    The floor keeps entries whose true gradient is ~0 (where both estimates
    are round-off) from dominating; it is relative to the largest numeric
    entry, so it never loosens the check on the entries that matter.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ShapeError(f"max_relative_error: shapes differ {a.shape} vs {n.shape}")
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * max(float(np.abs(n).max(initial=0.0)), 1e-300))
    return float(np.max(np.abs(a - n) / scale, initial=0.0))
