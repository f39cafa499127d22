"""Reverse-mode autodiff over float64 numpy arrays.

A Tensor wraps an ndarray and, while gradients are enabled, records a
vector-Jacobian closure linking it to its parents. backward() walks the
recorded graph in reverse topological order. The only contract is that
analytic gradients match central finite differences; grad_check() is the
tool that enforces it.

Tensors are treated as immutable once created. Graph recording and
backward are single-threaded per loss; independent forward passes with
separate graphs are safe to run concurrently.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Shape mismatch in a tensor operation."""


class EvaluationError(RuntimeError):
    """Non-finite value where a finite one is required."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference-only forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise EvaluationError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- graph plumbing ----------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], vjp) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = False
        if _grad_enabled and any(p._tracked() for p in parents):
            out._parents = parents
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        return out

    def _tracked(self) -> bool:
        return self.requires_grad or self._vjp is not None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or node._vjp is None:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p._vjp is not None and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}

        def deposit(t: Tensor, g: np.ndarray) -> None:
            if t._vjp is not None:
                acc = grads.get(id(t))
                grads[id(t)] = g if acc is None else acc + g
            elif t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g

        if self._vjp is None:
            deposit(self, grads[id(self)])
            return
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is not None:
                    deposit(p, pg)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'yes' if self._tracked() else 'no'})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ops -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._from_op(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor._from_op(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return Tensor._from_op(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return Tensor._from_op(out, (a, b), vjp)


def texp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def tlog(a) -> Tensor:
    a = _wrap(a)
    out = np.log(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = _wrap(a)
    out = np.maximum(a.data, 0.0)
    return Tensor._from_op(out, (a,), lambda g: (g * (a.data > 0.0),))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside [lo, hi]."""
    a = _wrap(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor._from_op(out, (a,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    """Elementwise min; gradient follows the smaller branch (a on ties)."""
    a, b = _wrap(a), _wrap(b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def vjp(g):
        return (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        )

    return Tensor._from_op(out, (a, b), vjp)


# -- reductions / reshapes -------------------------------------------------


def tsum(a, axis=None) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), vjp)


def tmean(a, axis=None) -> Tensor:
    a = _wrap(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)
    return Tensor._from_op(out, (a,), lambda g: (np.transpose(g, inv),))


def select_position(a, t: int) -> Tensor:
    """Pick index t along axis 1: (B, N, d) -> (B, d)."""
    a = _wrap(a)
    out = a.data[:, t, :].copy()

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, t, :] = g
        return (full,)

    return Tensor._from_op(out, (a,), vjp)


# -- linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product: both 2-D, or stacked with identical leading dims."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.ndim != b.ndim or (a.ndim > 2 and a.data.shape[:-2] != b.data.shape[:-2]):
        raise DimensionError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g

    return Tensor._from_op(out, (a, b), vjp)


def masked_softmax(logits, mask: np.ndarray | None = None, causal: bool = False) -> Tensor:
    """Row softmax over the last axis with hard-masked entries pinned to 0.

    Masked logits are set to -inf before the row-max subtraction, so masked
    columns can neither shift the stabilizer nor receive probability mass.
    With causal=True a lower-triangular mask over the last two axes is used;
    those must then be square.
    """
    x = _wrap(logits)
    T = x.data.shape[-1]
    if causal or mask is not None:
        if x.data.shape[-2] != T:
            raise DimensionError(f"masked softmax needs square trailing dims, got {x.shape}")
    if causal:
        mask = np.tril(np.ones((T, T), dtype=bool))
    if mask is not None:
        masked = np.where(mask, x.data, -np.inf)
    else:
        masked = x.data
    shifted = masked - masked.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Tensor._from_op(out, (x,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.data.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm over an empty last dimension")
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm affine params must have shape ({d},), "
            f"got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        return dx, dgain, dbias

    return Tensor._from_op(out, (x, gain, bias), vjp)


# -- parameters ------------------------------------------------------------


class Parameters:
    """Ordered registry of named trainable tensors.

    `version` increments on every in-place update so cached packed views
    (the compiled-backend weight blocks) know when to refresh.
    """

    def __init__(self):
        self._store: dict[str, Tensor] = {}
        self.version = 0

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._store:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(data, requires_grad=True, name=name)
        t.zero_grad()
        self._store[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._store[name]

    def __contains__(self, name: str) -> bool:
        return name in self._store

    def __iter__(self):
        return iter(self._store.values())

    def __len__(self) -> int:
        return len(self._store)

    def names(self) -> list[str]:
        return list(self._store.keys())

    def items(self):
        return self._store.items()

    def zero_grad(self) -> None:
        for t in self._store.values():
            t.zero_grad()

    def bump(self) -> None:
        self.version += 1

    def count(self) -> int:
        return sum(t.data.size for t in self._store.values())

    def norms(self) -> dict[str, float]:
        return {k: float(np.linalg.norm(v.data)) for k, v in self._store.items()}


# -- gradient checking -----------------------------------------------------


def grad_check(
    f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5
) -> float:
    """Max over parameter entries of |analytic - central diff| / max(1, |analytic|)."""
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    if out.data.size != 1 or not np.isfinite(out.data).all():
        raise EvaluationError("grad_check needs a finite scalar objective")
    out.backward()
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                hi = float(f().data)
                flat[i] = orig - h
                lo = float(f().data)
                flat[i] = orig
                if not (np.isfinite(hi) and np.isfinite(lo)):
                    raise EvaluationError("non-finite objective during finite differences")
                numeric = (hi - lo) / (2.0 * h)
                err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
                if err > worst:
                    worst = err
    return worst


def assert_finite(arr: np.ndarray, what: str, diagnostics: dict | None = None) -> None:
    if not np.all(np.isfinite(arr)):
        detail = ""
        if diagnostics:
            detail = "; param norms: " + ", ".join(
                f"{k}={v:.3e}" for k, v in diagnostics.items()
            )
        raise EvaluationError(f"non-finite values in {what}{detail}")
