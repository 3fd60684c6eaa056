"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record explicit nodes on the active :class:`Tape`; gradients are
computed by walking the tape backwards and dispatching on each node's
operation name through :data:`GRAD_RULES`.  Rules live in a plain dict so
other modules (pooling) can register their own and tests can swap one out.

Typical use::

    with Tape() as tape:
        x = tape.variable(np.ones(3))
        loss = ad.sum(ad.mul(x, x))
    grads = backward(tape, loss)
    grads[x.node_id].data   # -> 2 * x
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "Node", "GRAD_RULES", "DimensionError", "TapeError",
    "backward", "finite_diff_check", "register_rule",
    "add", "sub", "mul", "scale", "matmul", "transpose", "reshape", "take",
    "concat", "sum", "mean", "softmax", "sigmoid", "relu", "softplus",
    "conv2d", "global_avg_pool", "scale_channels",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Backward was asked for something the tape cannot provide."""


class Tensor:
    """Immutable n-d float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "grad_enabled", "node_id", "tape")

    def __init__(self, data, grad_enabled: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(n < 1 for n in arr.shape):
            raise DimensionError(f"tensor extents must be >= 1, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.grad_enabled = grad_enabled
        self.node_id: int | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def __repr__(self):
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _raise_not_scalar(t: Tensor):
    raise DimensionError(f"expected a single-element tensor, got shape {t.shape}")


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple[int | None, ...]
    shape: tuple[int, ...]
    saved: dict = field(default_factory=dict)


_active = threading.local()


def _current_tape() -> "Tape | None":
    stack = getattr(_active, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations.

    Nodes are appended as operations execute, so inputs always precede the
    node that consumes them.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        if not hasattr(_active, "stack"):
            _active.stack = []
        _active.stack.append(self)
        return self

    def __exit__(self, *exc):
        _active.stack.pop()
        return False

    def _append(self, op, inputs, shape, saved) -> int:
        nid = len(self.nodes)
        self.nodes.append(Node(nid, op, tuple(inputs), tuple(shape), saved))
        return nid

    def variable(self, data) -> Tensor:
        """Register ``data`` as a grad-enabled leaf on this tape."""
        src = data.data if isinstance(data, Tensor) else data
        t = Tensor(src, grad_enabled=True)
        t.node_id = self._append("leaf", (), t.shape, {})
        t.tape = self
        return t

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        grads = backward(self, loss)
        return [grads[t.node_id].data for t in wrt]

    def check_order(self) -> bool:
        return all(i is None or i < n.id for n in self.nodes for i in n.inputs)


def _tracked(t: Tensor, tape: Tape | None) -> bool:
    return tape is not None and t.tape is tape and t.node_id is not None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(op: str, tensors: Sequence[Tensor], value: np.ndarray, **saved) -> Tensor:
    """Wrap ``value`` as a Tensor and record ``op`` if any input is tracked.

    Input arrays are kept in ``saved["inputs"]`` unless the caller supplies
    that key itself.
    """
    result = Tensor.__new__(Tensor)
    value = np.ascontiguousarray(value, dtype=np.float64)
    value.flags.writeable = False
    result.data = value
    result.node_id = None
    result.tape = None
    result.grad_enabled = False
    tape = _current_tape()
    if tape is not None and any(_tracked(t, tape) for t in tensors):
        ids = [t.node_id if _tracked(t, tape) else None for t in tensors]
        saved.setdefault("inputs", [t.data for t in tensors])
        result.node_id = tape._append(op, ids, value.shape, saved)
        result.tape = tape
        result.grad_enabled = True
    return result


GradRule = Callable[[Node, np.ndarray], Sequence["np.ndarray | None"]]
GRAD_RULES: dict[str, GradRule] = {}


def register_rule(op: str):
    def deco(fn):
        GRAD_RULES[op] = fn
        return fn
    return deco


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Reverse sweep from a scalar ``loss``; returns node_id -> gradient.

    Every leaf on the tape gets an entry (zeros when it does not reach the
    loss).  Accumulation follows reverse tape order, so results are
    deterministic.
    """
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if loss.tape is not tape or loss.node_id is None:
        raise TapeError("loss is not recorded on this tape (detached)")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g = grads.get(node.id)
        if g is None or node.op == "leaf":
            continue
        rule = GRAD_RULES.get(node.op)
        if rule is None:
            raise TapeError(f"no gradient rule for op {node.op!r}")
        in_grads = rule(node, g)
        for nid, ig in zip(node.inputs, in_grads):
            if nid is None or ig is None:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + ig
            else:
                grads[nid] = np.asarray(ig, dtype=np.float64)
    out = {}
    for node in tape.nodes:
        if node.op == "leaf":
            out[node.id] = Tensor(grads.get(node.id, np.zeros(node.shape)))
    return out


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return record("add", [a, b], a.data + b.data)


@register_rule("add")
def _add_grad(node, g):
    a, b = node.saved["inputs"]
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return record("sub", [a, b], a.data - b.data)


@register_rule("sub")
def _sub_grad(node, g):
    a, b = node.saved["inputs"]
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    return record("mul", [a, b], a.data * b.data)


@register_rule("mul")
def _mul_grad(node, g):
    a, b = node.saved["inputs"]
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def scale(x: Tensor, c: float) -> Tensor:
    return record("scale", [x], x.data * c, c=float(c))


@register_rule("scale")
def _scale_grad(node, g):
    return (g * node.saved["c"],)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record("sigmoid", [x], out, out=out)


@register_rule("sigmoid")
def _sigmoid_grad(node, g):
    s = node.saved["out"]
    return (g * s * (1.0 - s),)


def relu(x: Tensor) -> Tensor:
    return record("relu", [x], np.maximum(x.data, 0.0))


@register_rule("relu")
def _relu_grad(node, g):
    (x,) = node.saved["inputs"]
    return (g * (x > 0),)


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), computed without overflow."""
    d = x.data
    return record("softplus", [x], np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d))))


@register_rule("softplus")
def _softplus_grad(node, g):
    (x,) = node.saved["inputs"]
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return (g * s,)


# ------------------------------------------------------------------- shaping


def reshape(x: Tensor, shape) -> Tensor:
    return record("reshape", [x], x.data.reshape(shape))


@register_rule("reshape")
def _reshape_grad(node, g):
    (x,) = node.saved["inputs"]
    return (g.reshape(x.shape),)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    return record("transpose", [x], np.transpose(x.data, axes), axes=axes)


@register_rule("transpose")
def _transpose_grad(node, g):
    return (np.transpose(g, np.argsort(node.saved["axes"])),)


def take(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous range ``[start, stop)`` along axis 0."""
    if not 0 <= start < stop <= x.shape[0]:
        raise DimensionError(f"take [{start},{stop}) out of range for axis of {x.shape[0]}")
    return record("take", [x], x.data[start:stop], start=start, stop=stop)


@register_rule("take")
def _take_grad(node, g):
    (x,) = node.saved["inputs"]
    full = np.zeros_like(x)
    full[node.saved["start"]:node.saved["stop"]] = g
    return (full,)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from None
    return record("concat", xs, out, axis=axis)


@register_rule("concat")
def _concat_grad(node, g):
    sizes = [x.shape[node.saved["axis"]] for x in node.saved["inputs"]]
    return np.split(g, np.cumsum(sizes)[:-1], axis=node.saved["axis"])


# ----------------------------------------------------------------- reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return record("sum", [x], np.array(x.data.sum()))


@register_rule("sum")
def _sum_grad(node, g):
    (x,) = node.saved["inputs"]
    return (np.full(x.shape, float(np.reshape(g, -1)[0])),)


def mean(x: Tensor) -> Tensor:
    return scale(sum(x), 1.0 / x.data.size)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return record("softmax", [x], out, out=out, axis=axis)


@register_rule("softmax")
def _softmax_grad(node, g):
    s, axis = node.saved["out"], node.saved["axis"]
    return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)


# ----------------------------------------------------------------- linear ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; ``a`` may carry leading batch axes when ``b`` is 2-d."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
        b.ndim > 2 and a.shape[:-2] != b.shape[:-2]
    ):
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return record("matmul", [a, b], np.matmul(a.data, b.data))


@register_rule("matmul")
def _matmul_grad(node, g):
    a, b = node.saved["inputs"]
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    if b.ndim == 2 and gb.ndim > 2:
        gb = gb.reshape(-1, *b.shape).sum(axis=0)
    return ga, gb


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    # x: (N, C, H, W) -> (N, C*k*k, H*W), zero same-padding
    n, c, h, w = x.shape
    if k == 1:
        return x.reshape(n, c, h * w)
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    # win: (N, C, H, W, k, k)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, h * w)


def _col2im(cols: np.ndarray, shape, k: int) -> np.ndarray:
    n, c, h, w = shape
    if k == 1:
        return cols.reshape(shape)
    p = k // 2
    cols = cols.reshape(n, c, k, k, h, w)
    out = np.zeros((n, c, h + 2 * p, w + 2 * p))
    for di in range(k):
        for dj in range(k):
            out[:, :, di:di + h, dj:dj + w] += cols[:, :, di, dj]
    return out[:, :, p:p + h, p:p + w]


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded cross-correlation for kernel sizes 1 and 3.

    ``x`` is ``(C_in, H, W)`` or batched ``(N, C_in, H, W)``; ``w`` is
    ``(C_out, C_in, k, k)``.
    """
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d: weight must be (C_out, C_in, k, k), got {w.shape}")
    k = w.shape[2]
    if k not in (1, 3):
        raise DimensionError(f"conv2d: unsupported kernel size {k}")
    if x.ndim not in (3, 4) or x.shape[-3] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} does not match weight {w.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match {w.shape[0]} outputs")
    xb = x.data if x.ndim == 4 else x.data[None]
    n, _, h, wd = xb.shape
    cols = _im2col(xb, k)
    out = np.matmul(w.data.reshape(w.shape[0], -1), cols)
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(n, w.shape[0], h, wd)
    if x.ndim == 3:
        out = out[0]
    inputs = [x, w] + ([bias] if bias is not None else [])
    return record("conv2d", inputs, out, cols=cols, k=k, batched=x.ndim == 4)


@register_rule("conv2d")
def _conv2d_grad(node, g):
    x, w = node.saved["inputs"][:2]
    k, cols = node.saved["k"], node.saved["cols"]
    gb = g if node.saved["batched"] else g[None]
    n, co, h, wd = gb.shape
    g2 = gb.reshape(n, co, h * wd)
    gw = np.matmul(g2, np.swapaxes(cols, 1, 2)).sum(axis=0).reshape(w.shape)
    gcols = np.matmul(w.reshape(co, -1).T, g2)
    gx = _col2im(gcols, (n,) + x.shape[-3:], k)
    if not node.saved["batched"]:
        gx = gx[0]
    grads = [gx, gw]
    if len(node.saved["inputs"]) == 3:
        grads.append(g2.sum(axis=(0, 2)))
    return grads


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: ``(..., C, H, W) -> (..., C)``."""
    if x.ndim not in (3, 4):
        raise DimensionError(f"global_avg_pool expects rank 3 (or batched 4), got {x.shape}")
    return record("gap", [x], x.data.mean(axis=(-2, -1)))


@register_rule("gap")
def _gap_grad(node, g):
    (x,) = node.saved["inputs"]
    hw = x.shape[-1] * x.shape[-2]
    return (np.broadcast_to(g[..., None, None] / hw, x.shape).copy(),)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each channel of ``(..., C, H, W)`` by ``s[..., C]``."""
    if s.shape != x.shape[:-2]:
        raise DimensionError(f"scale_channels: {s.shape} does not match channels of {x.shape}")
    return record("scale_channels", [x, s], x.data * s.data[..., None, None])


@register_rule("scale_channels")
def _scale_channels_grad(node, g):
    x, s = node.saved["inputs"]
    return g * s[..., None, None], (g * x).sum(axis=(-2, -1))


# -------------------------------------------------------------- verification


def finite_diff_check(f: Callable[..., Tensor], xs, eps: float = 1e-5,
                      max_coords: int | None = None, seed: int = 0,
                      floor: float | None = None) -> float:
    """Worst relative error between backward() and central differences.

    ``xs`` is one array/Tensor or a sequence of them; ``f`` takes the same
    number of Tensors and returns a scalar Tensor.  The relative error per
    coordinate uses the denominator ``max(|a|, |b|, floor)``.  The default
    floor is ``1e-6`` of the largest analytic derivative (at least 1e-8):
    central differences cannot resolve derivatives that small, e.g. ones
    that are exactly zero, from roundoff.  With
    ``max_coords`` only a seeded random subset of coordinates is probed per
    input.
    """
    single = isinstance(xs, (np.ndarray, Tensor))
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
              for x in ([xs] if single else xs)]
    with Tape() as tape:
        vs = [tape.variable(a) for a in arrays]
        loss = f(*vs)
    grads = backward(tape, loss)
    analytic = [grads[v.node_id].data for v in vs]
    if floor is None:
        scale = max((float(np.abs(g).max()) for g in analytic if g.size), default=0.0)
        floor = max(1e-8, 1e-6 * scale)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for idx, a in enumerate(arrays):
        coords = np.arange(a.size)
        if max_coords is not None and a.size > max_coords:
            coords = np.sort(rng.choice(a.size, size=max_coords, replace=False))
        for flat in coords:
            vals = []
            for sign in (1.0, -1.0):
                pert = [x.copy() for x in arrays]
                pert[idx].reshape(-1)[flat] += sign * eps
                vals.append(f(*[Tensor(p) for p in pert]).item())
            numeric = (vals[0] - vals[1]) / (2.0 * eps)
            exact = analytic[idx].reshape(-1)[flat]
            denom = max(abs(numeric), abs(exact), floor)
            worst = max(worst, abs(numeric - exact) / denom)
    return worst
