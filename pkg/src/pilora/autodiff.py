"""Dense float64 tensors with a flat reverse-mode tape.

Every op appends one record to the active :class:`Graph` when at least one
input requires a gradient. ``backward`` walks that record list in reverse
append order, which is already a topological order, so each node is visited
exactly once.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from pilora.exceptions import ShapeError

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_local = threading.local()


class Tensor:
    """A dense array of 64-bit floats that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_graph", "_index")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._graph: Graph | None = None
        self._index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._graph is None

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all of it routes through the recorded ops below
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("kind", "inputs", "output", "backward")

    def __init__(self, kind: str, inputs: Sequence[Tensor], output: Tensor, backward: Callable):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Graph:
    """Append-only record of operations; use as a context manager.

    One graph serves one forward pass; leaving the ``with`` block releases the
    tape, so call :func:`backward` inside it. Outside any block, ops record onto
    an implicit graph that lives until :func:`reset_graph`.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.visits = 0
        self.released = False

    def __enter__(self) -> "Graph":
        stack = _graph_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _graph_stack().pop()
        self.release()

    def release(self) -> None:
        self.records = []
        self.released = True

    def __len__(self) -> int:
        return len(self.records)

    def record(self, kind: str, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        output._graph = self
        output._index = len(self.records)
        self.records.append(_Record(kind, inputs, output, backward))


def _graph_stack() -> list[Graph]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def reset_graph() -> None:
    """Drop the implicit graph used outside ``with Graph()`` blocks."""
    g = getattr(_local, "implicit", None)
    if g is not None:
        g.release()
        _local.implicit = None


def current_graph() -> Graph:
    stack = _graph_stack()
    if stack:
        return stack[-1]
    g = getattr(_local, "implicit", None)
    if g is None:
        g = _local.implicit = Graph()
    return g


def _emit(kind: str, inputs: Sequence[Tensor], value: np.ndarray, backward: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        current_graph().record(kind, inputs, out, backward)
    return out


def _broadcast_check(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    """Only leading singleton (or missing) dimensions may broadcast."""
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    n = max(len(sa), len(sb))
    pa = (1,) * (n - len(sa)) + sa
    pb = (1,) * (n - len(sb)) + sb
    lead_a = lead_b = True
    out = []
    for x, y in zip(pa, pb):
        lead_a = lead_a and x == 1
        lead_b = lead_b and y == 1
        if x == y or (x == 1 and lead_a) or (y == 1 and lead_b):
            out.append(max(x, y))
        else:
            raise ShapeError(f"{kind}: shapes {sa} and {sb} do not conform")
    return tuple(out)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("add", a, b)

    def back(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _emit("add", (a, b), a.data + b.data, back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data

    def back(g):
        return (
            _unbroadcast(g * bd, a.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, b.shape) if b.requires_grad else None,
        )

    return _emit("mul", (a, b), ad * bd, back)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    c = float(c)
    return _emit("scale", (x,), x.data * c, lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_SQRT_2_OVER_PI * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def back(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 0.134145 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _emit("gelu", (x,), out, back)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis. ``-inf`` entries act as masks."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), y, back)


def layernorm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine parameters)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _emit("layernorm", (x,), y, back)


# ---------------------------------------------------------------- structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with either equal batch dims or a 2-D right operand."""
    sa, sb = a.shape, b.shape
    if len(sa) < 2 or len(sb) < 2 or sa[-1] != sb[-2]:
        raise ShapeError(f"matmul: shapes {sa} and {sb} do not conform")
    if len(sb) > 2 and sa[:-2] != sb[:-2]:
        raise ShapeError(f"matmul: batch shapes {sa} and {sb} differ")
    ad, bd = a.data, b.data

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, sa[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit("matmul", (a, b), ad @ bd, back)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from None
    return _emit("reshape", (x,), out, lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inv),))


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a 0-d tensor."""
    src = x.shape
    return _emit("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, src).copy(),))


def embed(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``; gradient scatters back with accumulation."""
    ids = np.asarray(ids, dtype=np.int64)
    n = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ShapeError(f"embed: ids out of range for table of shape {weight.shape}")

    def back(g):
        gw = np.zeros(weight.shape)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _emit("embed", (weight,), weight.data[ids], back)


def cross_entropy(logits: Tensor, targets, ignore_index: int = -1) -> Tensor:
    """Mean token cross-entropy over positions whose target != ``ignore_index``.

    ``logits`` has shape ``(..., V)`` and ``targets`` the leading shape.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross-entropy: logits {logits.shape} vs targets {targets.shape}")
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    keep = t != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross-entropy: no target positions")
    if t[keep].max(initial=0) >= V or t[keep].min(initial=0) < 0:
        raise ShapeError(f"cross-entropy: target id out of range for {V} classes")
    z = flat - flat.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.nonzero(keep)[0]
    nll = logsum[rows] - z[rows, t[rows]]
    loss = nll.sum() / count

    def back(g):
        p = np.exp(z - logsum[:, None])
        p[rows, t[rows]] -= 1.0
        p[~keep] = 0.0
        return ((g / count) * p.reshape(logits.shape),)

    return _emit("cross-entropy", (logits,), np.asarray(loss), back)


_KINDS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale-by-scalar": scale,
    "softmax": softmax,
    "layernorm": layernorm,
    "gelu": gelu,
    "embed-lookup": embed,
    "cross-entropy": cross_entropy,
}


def op_apply(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch by op name, e.g. ``op_apply("matmul", a, b)``."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {sorted(_KINDS)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> int:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns the number of graph nodes visited.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    graph = loss._graph
    if graph is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
        return 0
    if graph.released:
        raise RuntimeError("backward: the graph was released; call backward inside its `with Graph()` block")
    grads: dict[int, np.ndarray] = {loss._index: np.ones_like(loss.data)}
    visits = 0
    records = graph.records
    for idx in range(loss._index, -1, -1):
        rec = records[idx]
        visits += 1
        g = grads.pop(idx, None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if not t.requires_grad or gi is None:
                continue
            if t._graph is graph:
                prev = grads.get(t._index)
                grads[t._index] = gi if prev is None else prev + gi
            else:
                _accumulate(t, gi)
    graph.visits += visits
    return visits


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64)
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad = leaf.grad + g


# ---------------------------------------------------------------- checking


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    max_coords: int | None = 64,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` rebuilds the graph from the current ``params`` on every call.
    At most ``max_coords`` coordinates per parameter are sampled.
    """
    if not h > 0:
        raise ValueError(f"finite_diff_check: step h must be > 0, got {h}")
    params = list(params)
    for p in params:
        p.zero_grad()
    with Graph():
        backward(loss_fn())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            with Graph():
                up = loss_fn().item()
            flat[i] = orig - h
            with Graph():
                down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            err = abs(analytic.reshape(-1)[i] - numeric) / (abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
