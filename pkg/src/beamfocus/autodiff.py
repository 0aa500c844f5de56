"""Minimal reverse-mode autodiff over float64 numpy arrays.

A small tape: each Tensor records its parents and a per-parent gradient
closure.  Coverage is exactly what the policy networks and PPO losses
need (dense linear algebra, ReLU, exp/log, softmax, clipping); everything
runs in double precision so finite-difference checks are meaningful.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce *grad* back to *shape* after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents")

    def __init__(self, data, requires_grad: bool = False, parents=()):
        self.data = np.asarray(data, dtype=float)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in parents)
        self._parents = parents if self.requires_grad else ()

    @property
    def shape(self):
        return self.data.shape

    # -- graph plumbing ---------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=float)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:  # leaf
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, fn in node._parents:
                if not parent.requires_grad:
                    continue
                contribution = fn(g)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + contribution
                else:
                    grads[id(parent)] = contribution

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data + other.data, parents=(
            (self, lambda g: _unbroadcast(g, self.data.shape)),
            (other, lambda g: _unbroadcast(g, other.data.shape)),
        ))
        return out

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, parents=((self, lambda g: -g),))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor(a.data * b.data, parents=(
            (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
        ))

    __rmul__ = __mul__

    def __pow__(self, exponent: float):
        e = float(exponent)
        return Tensor(self.data**e, parents=(
            (self, lambda g: g * e * self.data ** (e - 1.0)),
        ))

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
            raise ShapeMismatch(f"matmul {a.data.shape} @ {b.data.shape}")

        def grad_a(g):
            bt = np.swapaxes(b.data, -1, -2) if b.data.ndim > 1 else b.data[None, :]
            return _unbroadcast(g @ bt if b.data.ndim > 1 else np.outer(g, b.data), a.data.shape)

        def grad_b(g):
            at = np.swapaxes(a.data, -1, -2) if a.data.ndim > 1 else a.data[:, None]
            return _unbroadcast(at @ g if a.data.ndim > 1 else at @ g[None, :], b.data.shape)

        return Tensor(a.data @ b.data, parents=((a, grad_a), (b, grad_b)))

    # -- elementwise --------------------------------------------------------
    def relu(self):
        mask = self.data > 0.0
        return Tensor(np.where(mask, self.data, 0.0), parents=((self, lambda g: g * mask),))

    def exp(self):
        out_data = np.exp(self.data)
        return Tensor(out_data, parents=((self, lambda g: g * out_data),))

    def log(self):
        return Tensor(np.log(self.data), parents=((self, lambda g: g / self.data),))

    def clip(self, lo: float, hi: float):
        inside = (self.data > lo) & (self.data < hi)
        return Tensor(np.clip(self.data, lo, hi), parents=((self, lambda g: g * inside),))

    def swapaxes(self, a: int, b: int):
        return Tensor(np.swapaxes(self.data, a, b),
                      parents=((self, lambda g: np.swapaxes(g, a, b)),))

    def reshape(self, *shape):
        old = self.data.shape
        return Tensor(self.data.reshape(*shape),
                      parents=((self, lambda g: g.reshape(old)),))

    # -- reductions -----------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def grad(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, self.data.shape).copy()

        return Tensor(out_data, parents=((self, grad),))

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    return Tensor(np.where(take_a, a.data, b.data), parents=(
        (a, lambda g: _unbroadcast(g * take_a, a.data.shape)),
        (b, lambda g: _unbroadcast(g * ~take_a, b.data.shape)),
    ))


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return s * (g - (g * s).sum(axis=axis, keepdims=True))

    return Tensor(s, parents=((t, grad),))


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    m = t.data.max(axis=axis, keepdims=True)
    z = t.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def grad(g):
        return g - soft * g.sum(axis=axis, keepdims=True)

    return Tensor(out, parents=((t, grad),))


def select_rows(t: Tensor, index: np.ndarray) -> Tensor:
    """Pick one column per row of a 2-D tensor: out[i] = t[i, index[i]]."""
    index = np.asarray(index, dtype=int)
    if t.data.ndim != 2 or index.shape != (t.data.shape[0],):
        raise ShapeMismatch(f"select_rows on {t.data.shape} with index {index.shape}")
    rows = np.arange(t.data.shape[0])

    def grad(g):
        full = np.zeros_like(t.data)
        full[rows, index] = g
        return full

    return Tensor(t.data[rows, index], parents=((t, grad),))


def finite_difference_gradients(fn, params: list[Tensor], step: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of scalar fn() w.r.t. each param tensor."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = fn()
            flat[i] = keep - step
            down = fn()
            flat[i] = keep
            gflat[i] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads
