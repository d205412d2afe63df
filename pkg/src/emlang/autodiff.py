"""Reverse-mode differentiation on numpy arrays, sized for two small recurrent nets.

Define-by-run: each op returns a ``Tensor`` carrying the forward value and a
closure that routes the output gradient to the op's inputs. The graph is
rebuilt on every forward pass, which keeps sampled-sequence rollouts simple.
Everything is float64; the networks here are tiny, so reproducibility beats
speed.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Mapping

import numpy as np

Array = np.ndarray


class ShapeMismatch(ValueError):
    """An op received operands with incompatible shapes."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes))


class GradientError(RuntimeError):
    """Invalid backward call, or a non-finite gradient reached the optimizer."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Skip graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array, optionally with a gradient slot and a graph edge.

    Leaf tensors with ``requires_grad=True`` are parameters: ``backward``
    accumulates into their ``grad``. Interior nodes keep their gradients in a
    per-call scratch map, so repeated ``backward`` calls on the same graph add
    another full contribution to every parameter.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: Array, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient down to ``shape`` after forward-pass broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every parameter reachable from a scalar loss."""
    if loss.data.size != 1:
        raise GradientError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    # iterative post-order over grad-requiring ancestors
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        nid = id(node)
        if nid in visited:
            continue
        visited.add(nid)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}

    def sink(t: Tensor, delta: Array) -> None:
        if t._backward is None:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += delta
        else:
            cur = grads.get(id(t))
            if cur is None:
                # copy: the same delta array may be routed to several parents
                grads[id(t)] = np.array(delta)
            else:
                cur += delta

    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        else:
            node._backward(g, sink)


# ---------------------------------------------------------------------------
# ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatch("add", a.data.shape, b.data.shape) from None

    def bw(g, sink):
        sink(a, _unbroadcast(g, a.data.shape))
        sink(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeMismatch("mul", a.data.shape, b.data.shape)
    data = a.data * b.data

    def bw(g, sink):
        sink(a, g * b.data)
        sink(b, g * a.data)

    return _node(data, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    data = a.data * c

    def bw(g, sink):
        sink(a, g * c)

    return _node(data, (a,), bw)


def neg(a) -> Tensor:
    return scale(a, -1.0)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch("matmul", a.data.shape, b.data.shape)
    data = a.data @ b.data

    def bw(g, sink):
        sink(a, g @ b.data.T)
        sink(b, a.data.T @ g)

    return _node(data, (a, b), bw)


def affine(x, w, b) -> Tensor:
    """Rows-of-x affine map: ``x @ w + b`` with a fused backward."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or x.data.shape[1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch("affine", x.data.shape, w.data.shape, b.data.shape)
    data = x.data @ w.data + b.data

    def bw(g, sink):
        sink(x, g @ w.data.T)
        sink(w, x.data.T @ g)
        sink(b, g.sum(axis=0))

    return _node(data, (x, w, b), bw)


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeMismatch("dot", a.data.shape, b.data.shape)
    data = np.asarray(a.data @ b.data)

    def bw(g, sink):
        sink(a, g * b.data)
        sink(b, g * a.data)

    return _node(data, (a, b), bw)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        data = 1.0 / (1.0 + np.exp(-x.data))

    def bw(g, sink):
        sink(x, g * data * (1.0 - data))

    return _node(data, (x,), bw)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    data = np.tanh(x.data)

    def bw(g, sink):
        sink(x, g * (1.0 - data * data))

    return _node(data, (x,), bw)


def log(x) -> Tensor:
    x = as_tensor(x)
    data = np.log(x.data)

    def bw(g, sink):
        sink(x, g / x.data)

    return _node(data, (x,), bw)


def softmax(x) -> Tensor:
    """Row-wise softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)

    def bw(g, sink):
        inner = (g * data).sum(axis=-1, keepdims=True)
        sink(x, data * (g - inner))

    return _node(data, (x,), bw)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g, sink):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            sink(t, piece)

    return _node(data, tuple(tensors), bw)


def slice_cols(x, lo: int, hi: int) -> Tensor:
    x = as_tensor(x)
    data = x.data[..., lo:hi]

    def bw(g, sink):
        full = np.zeros_like(x.data)
        full[..., lo:hi] = g
        sink(x, full)

    return _node(data, (x,), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def bw(g, sink):
        sink(x, g.reshape(x.data.shape))

    return _node(data, (x,), bw)


def sum_rows(x) -> Tensor:
    """Sum over the last axis."""
    x = as_tensor(x)
    data = x.data.sum(axis=-1)

    def bw(g, sink):
        sink(x, np.broadcast_to(g[..., None], x.data.shape))

    return _node(data, (x,), bw)


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    data = np.asarray(x.data.sum())

    def bw(g, sink):
        sink(x, np.broadcast_to(g, x.data.shape))

    return _node(data, (x,), bw)


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    data = np.asarray(x.data.mean())
    n = x.data.size

    def bw(g, sink):
        sink(x, np.broadcast_to(g / n, x.data.shape))

    return _node(data, (x,), bw)


def gather_rows(x, idx) -> Tensor:
    """Pick one column per row: ``out[b] = x[b, idx[b]]``."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(x.data.shape[0])
    data = x.data[rows, idx]

    def bw(g, sink):
        full = np.zeros_like(x.data)
        full[rows, idx] = g
        sink(x, full)

    return _node(data, (x,), bw)


def entropy_rows(p) -> Tensor:
    """Shannon entropy (nats) of each row of a probability matrix."""
    p = as_tensor(p)
    logp = np.log(p.data)
    data = -(p.data * logp).sum(axis=-1)

    def bw(g, sink):
        sink(p, -g[..., None] * (logp + 1.0))

    return _node(data, (p,), bw)


def candidate_scores(q, u) -> Tensor:
    """Batched dot products: ``out[b, c] = q[b] . u[b, c]``."""
    q, u = as_tensor(q), as_tensor(u)
    if q.data.ndim != 2 or u.data.ndim != 3 or q.data.shape != (u.data.shape[0], u.data.shape[2]):
        raise ShapeMismatch("candidate_scores", q.data.shape, u.data.shape)
    data = (u.data @ q.data[:, :, None])[:, :, 0]

    def bw(g, sink):
        sink(q, (g[:, None, :] @ u.data)[:, 0, :])
        sink(u, g[:, :, None] * q.data[:, None, :])

    return _node(data, (q, u), bw)


#: parameter names one LSTM cell expects, per gate: input, forget, candidate, output
LSTM_GATE_NAMES = tuple(
    f"{kind}_{gate}" for gate in ("i", "f", "g", "o") for kind in ("wx", "wh", "b")
)


def lstm_step(x, h, c, w: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """One LSTM cell update composed from the primitive ops.

    ``w`` maps the names in ``LSTM_GATE_NAMES`` to tensors: per gate a
    ``wx_*`` input matrix, a ``wh_*`` recurrent matrix and a ``b_*`` bias.
    Returns the new hidden and cell state.
    """
    gi = sigmoid(add(affine(x, w["wx_i"], w["b_i"]), matmul(h, w["wh_i"])))
    gf = sigmoid(add(affine(x, w["wx_f"], w["b_f"]), matmul(h, w["wh_f"])))
    gg = tanh(add(affine(x, w["wx_g"], w["b_g"]), matmul(h, w["wh_g"])))
    go = sigmoid(add(affine(x, w["wx_o"], w["b_o"]), matmul(h, w["wh_o"])))
    c2 = add(mul(gf, c), mul(gi, gg))
    h2 = mul(go, tanh(c2))
    return h2, c2


# ---------------------------------------------------------------------------
# parameters and Adam


class ParameterSet:
    """Named parameter tensors plus their Adam moment state and step counter."""

    def __init__(self, params: dict[str, Tensor]):
        for t in params.values():
            t.requires_grad = True
        self.params = dict(params)
        self.moment1 = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.moment2 = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.step_count = 0

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def arrays(self) -> dict[str, Array]:
        return {k: t.data for k, t in self.params.items()}


def adam_step(pset: ParameterSet, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update on every parameter with a populated gradient.

    Gradients are left in place; callers zero them after stepping.
    """
    pset.step_count += 1
    t = pset.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in pset.params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter '{name}'")
        m = pset.moment1[name]
        v = pset.moment2[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# checkpoint IO (bit-exact round trip)


def save_arrays(path, arrays: Mapping[str, Array]) -> None:
    """Write a name -> array map as an uncompressed .npz archive."""
    np.savez(path, **{k: np.asarray(v) for k, v in arrays.items()})


def load_arrays(path) -> dict[str, Array]:
    with np.load(path) as f:
        return {k: f[k] for k in f.files}
