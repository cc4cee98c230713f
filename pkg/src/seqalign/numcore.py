"""Dense float64 arrays with reverse-mode differentiation.

A :class:`Node` wraps a numpy array and remembers how it was produced.
Calling :meth:`Node.backward` on a scalar walks the recorded graph in
reverse topological order and accumulates gradients into every node that
requires them.  All primitives act on the trailing axes, so a leading batch
axis is carried through for free.
"""
from __future__ import annotations

import hashlib
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_grad_enabled = True


@contextmanager
def no_grad():
    """Evaluate without recording operations (inference, pseudo-labels)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate external input as a finite 2-D float64 array."""
    arr = np.array(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name}: expected 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains NaN or Inf")
    return arr


class Node:
    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.array(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.name = name
        self._parents: tuple[Node, ...] = ()
        self._backward = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self) -> Node:
        return swap_last(self)

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def backward(self, grad=None):
        if grad is None:
            if self.value.size != 1:
                raise ContractError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.value)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                node.grad = g
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            else:
                node.grad = node.grad + g

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
        if isinstance(other, Node):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _topo_order(root: Node) -> list[Node]:
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


def constant(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def parameter(x, name: str | None = None) -> Node:
    return Node(x, requires_grad=True, name=name)


def _result(value, parents, backward) -> Node:
    out = Node.__new__(Node)
    out.value = value
    out.name = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out.grad = None
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    a, b = constant(a), constant(b)
    return _result(a.value + b.value, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    a, b = constant(a), constant(b)
    return _result(a.value - b.value, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Node:
    a, b = constant(a), constant(b)
    return _result(a.value * b.value, (a, b),
                   lambda g: (unbroadcast(g * b.value, a.shape),
                              unbroadcast(g * a.value, b.shape)))


def reciprocal(a: Node) -> Node:
    y = 1.0 / a.value
    return _result(y, (a,), lambda g: (-g * y * y,))


def exp(a: Node) -> Node:
    y = np.exp(a.value)
    return _result(y, (a,), lambda g: (g * y,))


def log(a: Node) -> Node:
    return _result(np.log(a.value), (a,), lambda g: (g / a.value,))


def clip(a: Node, lo: float, hi: float) -> Node:
    """Clamp values; gradient passes only where the input was inside [lo, hi]."""
    inside = (a.value >= lo) & (a.value <= hi)
    return _result(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def gelu(a: Node) -> Node:
    """GELU, tanh approximation."""
    x = a.value
    y = 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))
    return _result(y, (a,), lambda g: (g * _gelu_grad(x),))


# ---------------------------------------------------------------- structural

def matmul(a, b) -> Node:
    a, b = constant(a), constant(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise DimensionError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.value @ b.value, (a, b), backward)


def swap_last(a: Node) -> Node:
    return _result(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def transpose(a: Node, axes: Sequence[int]) -> Node:
    inv = np.argsort(axes)
    return _result(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Node, shape) -> Node:
    src = a.shape
    return _result(a.value.reshape(shape), (a,), lambda g: (g.reshape(src),))


def getitem(a: Node, idx) -> Node:
    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.value[idx], (a,), backward)


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = [constant(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([n.value for n in nodes], axis=axis), nodes,
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def sum_(a: Node, axis=None, keepdims: bool = False) -> Node:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    count = a.value.size if axis is None else a.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def straight_through(hard: np.ndarray, soft: Node) -> Node:
    """Forward value ``hard``; gradient flows into ``soft`` unchanged."""
    return _result(np.array(hard, dtype=np.float64), (soft,), lambda g: (g,))


# ---------------------------------------------------------------- row ops

def softmax_rows(x: Node) -> Node:
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax_rows(x: Node) -> Node:
    z = x.value - x.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _result(y, (x,), backward)


def l2_normalize_rows(x: Node, eps: float = 1e-12) -> Node:
    """Scale rows to unit norm; rows shorter than ``eps`` are divided by ``eps``."""
    norm = np.sqrt((x.value * x.value).sum(axis=-1, keepdims=True))
    small = norm < eps
    denom = np.where(small, eps, norm)
    y = x.value / denom

    def backward(g):
        proj = np.where(small, 0.0, (g * y).sum(axis=-1, keepdims=True))
        return ((g - y * proj) / denom,)

    return _result(y, (x,), backward)


def layernorm(x: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
    mu = x.value.mean(axis=-1, keepdims=True)
    var = x.value.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv
    y = xhat * gamma.value + beta.value

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.value
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, unbroadcast(g * xhat, gamma.shape), unbroadcast(g, beta.shape)

    return _result(y, (x, gamma, beta), backward)


def cross_entropy_rows(logits: Node, targets) -> Node:
    """Mean over rows of ``-log softmax(logits)[row, target]``."""
    targets = np.asarray(targets, dtype=np.int64)
    logp = log_softmax_rows(logits)
    rows = np.arange(logits.shape[0])
    return -mean(logp[rows, targets])


# ---------------------------------------------------------------- gradcheck

def gradcheck_report(f: Callable[[], Node], leaves: dict[str, Node] | Sequence[Node],
                     step: float = 1e-5) -> dict[str, float]:
    """Per-leaf max relative error between backward() and central differences.

    ``f`` is re-evaluated after perturbing leaf values in place, so it must
    be deterministic (fixed random draws) and read the leaves at call time.
    """
    if not isinstance(leaves, dict):
        leaves = {(leaf.name or f"leaf{i}"): leaf for i, leaf in enumerate(leaves)}
    for leaf in leaves.values():
        leaf.grad = np.zeros_like(leaf.value)
    out = f()
    if out.value.size != 1:
        raise ContractError(f"gradcheck needs a scalar function, got shape {out.shape}")
    out.backward()
    report = {}
    with no_grad():
        for name, leaf in leaves.items():
            analytic = leaf.grad.copy()
            flat = leaf.value.reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2 * step)
                err = abs(analytic.reshape(-1)[i] - num) / max(1.0, abs(num))
                worst = max(worst, err)
            report[name] = worst
    return report


def gradcheck(f: Callable[[], Node], leaves, step: float = 1e-5) -> float:
    """Max relative error |analytic - numeric| / max(1, |numeric|) over all leaf entries."""
    report = gradcheck_report(f, leaves, step)
    return max(report.values()) if report else 0.0


# ---------------------------------------------------------------- randomness

class Rng:
    """Counter-based (Philox) generator keyed by ``(seed, stream)``.

    Child streams are derived by name, never by consuming draws from the
    parent, so adding a consumer cannot perturb any other stream.
    """

    def __init__(self, seed: int, stream: str = "root"):
        self.seed = int(seed)
        self.stream = stream
        digest = hashlib.sha256(f"{self.seed}\x00{stream}".encode()).digest()
        key = np.frombuffer(digest[:16], dtype="<u8")
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream!r})"

    def child(self, name) -> Rng:
        return Rng(self.seed, f"{self.stream}/{name}")

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return self.generator.uniform(low, high, size)

    def normal(self, size=None, scale: float = 1.0):
        return self.generator.normal(0.0, scale, size)

    def gumbel(self, size):
        u = self.generator.random(size)
        u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)
        return -np.log(-np.log(u))

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def dirichlet(self, alpha) -> np.ndarray:
        return self.generator.dirichlet(alpha)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.generator.choice(n, size=size, replace=replace)
