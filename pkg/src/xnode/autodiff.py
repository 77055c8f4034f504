"""Dense float64 tensors with reverse-mode autodiff, plus SGD and Adam.

Every op records its parents and a closure that pushes the output gradient
back to them. ``Tensor.backward`` walks the recorded graph once in reverse
topological order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _op: str = "leaf"):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = _op
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; recursion would overflow on long training graphs
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)
    if needs:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(a.data @ b.data, (a, b), "matmul",
                 lambda g: (g @ b.data.T, a.data.T @ g))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope)
    return _make(x.data * scale, (x,), "leaky_relu", lambda g: (g * scale,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != len(ref) or any(
            t.shape[d] != ref[d] for d in range(len(ref)) if d != axis % len(ref)
        ):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes "
                             f"{[t.shape for t in tensors]}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat",
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]``; repeated indices accumulate in the backward pass."""
    index = np.asarray(index)
    if index.dtype == bool:
        index = np.flatnonzero(index)

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), "rows", back)


def segment_sum(x: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``n_segments`` buckets given by ``segments``."""
    out = np.zeros((n_segments,) + x.shape[1:])
    np.add.at(out, segments, x.data)
    return _make(out, (x,), "segment_sum", lambda g: (g[segments],))


def segment_softmax(scores: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Softmax of a column of edge scores, normalized within each segment."""
    s = scores.data
    peak = np.full((n_segments,) + s.shape[1:], -np.inf)
    np.maximum.at(peak, segments, s)
    ex = np.exp(s - peak[segments])
    denom = np.zeros_like(peak)
    np.add.at(denom, segments, ex)
    p = ex / denom[segments]

    def back(g):
        dot = np.zeros_like(peak)
        np.add.at(dot, segments, g * p)
        return (p * (g - dot[segments]),)

    return _make(p, (scores,), "segment_softmax", back)


def aggregate(adj: sp.spmatrix, x: Tensor) -> Tensor:
    """Sparse neighbor aggregation ``adj @ x``; ``adj`` is a constant."""
    if adj.shape[1] != x.shape[0]:
        raise ShapeError(f"aggregate: adjacency {adj.shape} vs features {x.shape}")
    adj = sp.csr_matrix(adj)
    adj_t = adj.T.tocsr()
    return _make(np.asarray(adj @ x.data), (x,), "aggregate",
                 lambda g: (np.asarray(adj_t @ g),))


def sum_all(x: Tensor) -> Tensor:
    return _make(np.array(x.data.sum()), (x,), "sum", lambda g: (np.full_like(x.data, g),))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    nll = logsumexp - z[np.arange(n), labels]

    def back(g):
        p = softmax(logits.data)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _make(np.array(nll.mean()), (logits,), "cross_entropy", back)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Squared error summed over the feature axis, averaged over rows."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    n = a.shape[0] if a.data.ndim > 1 else 1
    diff = a.data - b.data
    return _make(np.array((diff ** 2).sum() / n), (a, b), "mse",
                 lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n))


def init_uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class MissingGradientError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    lr: float
    step: int = 0
    moments: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


class SGD:
    def __init__(self, params: Iterable[Tensor], lr: float = 0.01):
        self.params = list(params)
        self.state = OptimizerState(lr=lr)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = _collect(self.params)
        for p, g in zip(self.params, grads):
            p.data = p.data - self.state.lr * g
        self.state.step += 1


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.state = OptimizerState(
            lr=lr, moments=[(np.zeros_like(p.data), np.zeros_like(p.data)) for p in self.params])

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = _collect(self.params)
        b1, b2 = self.betas
        self.state.step += 1
        t = self.state.step
        for i, (p, g) in enumerate(zip(self.params, grads)):
            m, v = self.state.moments[i]
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.state.moments[i] = (m, v)
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.data = p.data - self.state.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _collect(params: list[Tensor]) -> list[np.ndarray]:
    missing = [i for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise MissingGradientError(
            f"{len(missing)} parameter(s) have no gradient (indices {missing[:5]}); "
            "call backward() before step()")
    return [p.grad for p in params]


def graph_nbytes(root: Tensor) -> int:
    """Bytes held by every tensor reachable from ``root`` (data plus gradient)."""
    return sum(2 * t.data.nbytes for t in _topological_order(root))
