"""Dense arrays with tape-based reverse-mode differentiation.

Only the primitives a small GPT2-style transformer needs are provided:
matmul, add, mul, row softmax, layer norm, gelu, embedding gather,
cross-entropy with logits, last-axis slice/concat and scalar reductions.
Everything else is composed from these.

Operations are recorded on the innermost active :class:`Graph`::

    with Graph() as g:
        loss = cross_entropy(matmul(x, w), targets)
    grads = g.backward(loss)

Outside a graph the same functions evaluate eagerly and record nothing.
Broadcasting is limited to leading batch dimensions: an operand whose
shape is a suffix of the other's shape is repeated over the extra leading
axes. Any other mismatch raises :class:`ShapeError`.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "GraphError",
    "Tensor",
    "Graph",
    "as_tensor",
    "matmul",
    "add",
    "mul",
    "softmax",
    "layer_norm",
    "gelu",
    "embedding",
    "cross_entropy",
    "slice_last",
    "concat_last",
    "sum_all",
    "mean_all",
    "check_gradients",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""

    def __init__(self, primitive: str, *shapes, detail: str = ""):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{primitive}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_graph")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._graph: Graph | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other, self.dtype), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# graph / tape


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _active_graph() -> Graph | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class Graph:
    """Ordered tape of primitive applications.

    A graph is single-owner: it is entered by one thread, recorded once and
    differentiated once.
    """

    records: list[_Record] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> Graph:
        if self.consumed:
            raise GraphError("graph already differentiated; record a new one")
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ops(self) -> list[str]:
        return [r.op for r in self.records]

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Propagate d(loss) through the tape.

        Gradients are accumulated into ``.grad`` of every leaf tensor with
        ``requires_grad``; the returned mapping is keyed by ``id(leaf)``.
        """
        if self.consumed:
            raise GraphError("backward already run on this graph")
        if loss._graph is not self or not self.records:
            raise GraphError("backward called before forward: loss was not recorded on this graph")
        if loss.data.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g_out = grads.pop(id(rec.output), None)
            if g_out is None:
                continue
            in_grads = rec.backward(g_out)
            for t, g in zip(rec.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                if t._graph is None:
                    leaves[id(t)] = t
                prev = grads.get(id(t))
                grads[id(t)] = g if prev is None else prev + g
        out = {}
        for key, leaf in leaves.items():
            g = grads[key].astype(leaf.dtype, copy=False)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            out[key] = leaf.grad
        self.consumed = True
        self.records.clear()
        return out


def _emit(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward) -> Tensor:
    out = Tensor(data)
    graph = _active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._graph = graph
        graph.records.append(_Record(op, tuple(inputs), out, backward))
    return out


def _leading_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(op, sa, sb, detail="only leading batch dimensions may broadcast")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b, transpose_b: bool = False) -> Tensor:
    """Batched matrix product ``a @ b`` (or ``a @ b^T``) over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2:
        raise ShapeError("matmul", A.shape, B.shape, detail="operands must be at least 2-D")
    Bm = np.swapaxes(B, -1, -2) if transpose_b else B
    if A.shape[-1] != Bm.shape[-2]:
        raise ShapeError("matmul", A.shape, B.shape, detail=f"inner dims {A.shape[-1]} != {Bm.shape[-2]}")
    lead_a, lead_b = A.shape[:-2], Bm.shape[:-2]
    if lead_a and lead_b and lead_a != lead_b:
        raise ShapeError("matmul", A.shape, B.shape, detail="leading batch dims differ")
    flat = A.ndim > 2 and Bm.ndim == 2
    if flat:
        out = (A.reshape(-1, A.shape[-1]) @ Bm).reshape(A.shape[:-1] + (Bm.shape[-1],))
    else:
        out = A @ Bm

    def backward(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ Bm.T).reshape(A.shape)
            if b.requires_grad:
                gbm = A.reshape(-1, A.shape[-1]).T @ g2
                gb = gbm.T if transpose_b else gbm
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(Bm, -1, -2), A.shape)
        if b.requires_grad:
            gbm = np.swapaxes(A, -1, -2) @ g
            gbm = _unbroadcast(gbm, Bm.shape)
            gb = np.swapaxes(gbm, -1, -2) if transpose_b else gbm
        return ga, gb

    return _emit("matmul", (a, b), out, backward)


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _leading_broadcast("add", a.data, b.data)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), out, backward)


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a python scalar (treated as constant)."""
    a = as_tensor(a)
    if np.isscalar(b):
        s = b

        def backward_s(g):
            return (g * s,)

        return _emit("mul", (a,), a.data * a.data.dtype.type(s), backward_s)
    b = as_tensor(b, a.dtype)
    _leading_broadcast("mul", a.data, b.data)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", (a, b), out, backward)


def softmax(x, causal: bool = False) -> Tensor:
    """Softmax over the last axis; ``causal`` zeroes entries above the diagonal."""
    x = as_tensor(x)
    X = x.data
    if causal:
        if X.ndim < 2 or X.shape[-1] != X.shape[-2]:
            raise ShapeError("softmax", X.shape, detail="causal mask needs square trailing dims")
        n = X.shape[-1]
        mask = np.triu(np.ones((n, n), dtype=bool), k=1)
        X = np.where(mask, -np.inf, X)
    m = np.max(X, axis=-1, keepdims=True)
    e = np.exp(X - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), y, backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    X = x.data
    if gain.shape != (X.shape[-1],) or bias.shape != (X.shape[-1],):
        raise ShapeError("layer_norm", X.shape, gain.shape, bias.shape)
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def backward(g):
        n = X.shape[-1]
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, n).sum(axis=0)
        return gx, ggain, gbias

    return _emit("layer_norm", (x, gain, bias), out, backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_grad(X: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    X2 = X * X
    if t is None:
        t = np.tanh(_GELU_C * X * (1.0 + 0.044715 * X2))
    du = _GELU_C * (1.0 + 3 * 0.044715 * X2)
    return 0.5 * (1.0 + t) + 0.5 * X * (1.0 - t * t) * du


def gelu(x) -> Tensor:
    """GPT2 tanh-approximate GELU."""
    x = as_tensor(x)
    X = x.data
    t = np.tanh(_GELU_C * X * (1.0 + 0.044715 * (X * X)))
    out = 0.5 * X * (1.0 + t)

    def backward(g):
        return (g * _gelu_grad(X, t),)

    return _emit("gelu", (x,), out, backward)


def embedding(weight, ids) -> Tensor:
    weight = as_tensor(weight)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError("embedding", weight.shape, ids.shape,
                         detail=f"id out of range [0, {weight.shape[0]})")
    out = weight.data[ids]

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _emit("embedding", (weight,), out, backward)


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    L = logits.data
    targets = np.asarray(targets)
    if targets.shape != L.shape[:-1]:
        raise ShapeError("cross_entropy", L.shape, targets.shape)
    flat = L.reshape(-1, L.shape[-1])
    t = targets.reshape(-1)
    m = flat.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(flat - m).sum(axis=1))
    nll = lse - flat[np.arange(t.size), t]
    out = np.asarray(nll.mean(), dtype=L.dtype)

    def backward(g):
        p = np.exp(flat - lse[:, None])
        p[np.arange(t.size), t] -= 1.0
        return ((p * (g / t.size)).reshape(L.shape),)

    return _emit("cross_entropy", (logits,), out, backward)


def slice_last(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    n = x.shape[-1]
    if not 0 <= start < stop <= n:
        raise ShapeError("slice", x.shape, detail=f"range [{start}, {stop}) outside last dim {n}")
    out = x.data[..., start:stop]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return _emit("slice", (x,), out, backward)


def concat_last(xs: Sequence) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    lead = xs[0].shape[:-1]
    for t in xs[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError("concat", *(t.shape for t in xs))
    out = np.concatenate([t.data for t in xs], axis=-1)
    bounds = np.cumsum([0] + [t.shape[-1] for t in xs])

    def backward(g):
        return [g[..., bounds[i]:bounds[i + 1]] for i in range(len(xs))]

    return _emit("concat", tuple(xs), out, backward)


def sum_all(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype), backward)


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _emit("mean", (x,), np.asarray(x.data.mean(), dtype=x.dtype), backward)


# ---------------------------------------------------------------------------
# finite-difference checking


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    n_samples: int = 20,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` rebuilds the forward pass from ``params`` on every call. Up to
    ``n_samples`` coordinates per parameter are checked; the error for one
    coordinate is ``|a - n| / (|a| + |n| + epsilon)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    for p in params:
        p.grad = None
        p.requires_grad = True
    with Graph() as g:
        loss = loss_fn()
    g.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        k = min(n_samples, flat.size)
        for idx in rng.choice(flat.size, size=k, replace=False):
            orig = flat[idx]
            flat[idx] = orig + epsilon
            up = float(loss_fn().data)
            flat[idx] = orig - epsilon
            down = float(loss_fn().data)
            flat[idx] = orig
            num = (up - down) / (2 * epsilon)
            ana = float(ga.reshape(-1)[idx])
            err = abs(ana - num) / (abs(ana) + abs(num) + epsilon)
            worst = max(worst, err)
    return worst
