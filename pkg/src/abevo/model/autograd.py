"""Reverse-mode automatic differentiation over numpy arrays.

Only the operations the encoder needs are provided. Several of them (layer norm, softmax,
cross-entropy) are fused with hand-written backward rules for speed; ``gradient_check``
in :mod:`abevo.model.gradcheck` verifies every one of them against finite differences.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior node: its gradient is no longer needed
                    node.grad = None
        # leaves keep .grad; release the graph
        for node in topo:
            node._backward = None
            node._parents = ()

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_wrap(other, self), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def _wrap(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.data.dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))
    return _node(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))
    return _node(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), lambda g: _acc(a, g * c))


def sum_all(a: Tensor) -> Tensor:
    return _node(np.asarray(a.data.sum()), (a,), lambda g: _acc(a, np.broadcast_to(g, a.shape).copy()))


_GELU_K = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_K * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * _GELU_K * (1.0 + 3 * 0.044715 * x2)
        _acc(x, g * d)
    return _node(out, (x,), backward)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return _node(x.data * keep, (x,), lambda g: _acc(x, g * keep))


# --- shape -----------------------------------------------------------------

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: _acc(a, g.reshape(a.shape)))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: _acc(a, g.transpose(inv)))


# --- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                _acc(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                _acc(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
    return _node(out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)

    def backward(g):
        flat = ids.ravel()
        onehot = np.zeros((weight.shape[0], flat.size), dtype=g.dtype)
        onehot[flat, np.arange(flat.size)] = 1.0
        _acc(weight, onehot @ g.reshape(-1, weight.shape[1]))
    return _node(weight.data[ids], (weight,), backward)


def gather_rows(x: Tensor, index: tuple[np.ndarray, ...]) -> Tensor:
    """``x.data[index]`` for an advanced index over the leading axes."""
    lead = x.shape[:len(index)]
    flat = np.ravel_multi_index(index, lead)
    unique = len(np.unique(flat)) == len(flat)

    def backward(g):
        gx = np.zeros_like(x.data)
        if unique:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        _acc(x, gx)
    return _node(x.data[index], (x,), backward)


def layer_norm(x: Tensor, w: Tensor, b: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * w.data + b.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        _acc(w, (g * xhat).sum(axis=lead))
        _acc(b, g.sum(axis=lead))
        if x.requires_grad:
            gh = g * w.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            _acc(x, gx)
    return _node(out, (x, w, b), backward)


def masked_softmax(x: Tensor, keep: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; entries where ``keep`` is False get probability exactly 0."""
    s = x.data if keep is None else x.data + np.where(keep, 0.0, -np.inf).astype(x.data.dtype)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _acc(x, p * (g - (g * p).sum(axis=-1, keepdims=True)))
    return _node(p, (x,), backward)


def weighted_mean_tokens(x: Tensor, weights: np.ndarray) -> Tensor:
    """``out[b] = sum_t weights[b, t] * x[b, t]`` for ``x`` of shape (B, T, d)."""
    w = np.asarray(weights, dtype=x.data.dtype)
    out = np.einsum("bt,btd->bd", w, x.data)
    return _node(out, (x,), lambda g: _acc(x, w[:, :, None] * g[:, None, :]))


# --- losses ----------------------------------------------------------------

def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """``sum_i weights[i] * -log softmax(logits[i])[targets[i]]`` for logits of shape (N, V)."""
    targets = np.asarray(targets, dtype=np.int64)
    w = np.asarray(weights, dtype=logits.data.dtype)
    logp = log_softmax_np(logits.data)
    rows = np.arange(len(targets))
    loss = -(w * logp[rows, targets]).sum()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        _acc(logits, grad * (w * g)[:, None])
    return _node(np.asarray(loss), (logits,), backward)


def bce_with_logits(logits: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """``sum_i weights[i] * BCE(sigmoid(logits[i]), labels[i])`` in the overflow-safe form."""
    z = logits.data
    y = np.asarray(labels, dtype=z.dtype)
    w = np.asarray(weights, dtype=z.dtype)
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = (w * per).sum()

    def backward(g):
        _acc(logits, (sigmoid_np(z) - y) * w * g)
    return _node(np.asarray(loss), (logits,), backward)


def sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
