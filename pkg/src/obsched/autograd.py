"""Minimal reverse-mode automatic differentiation over numpy arrays.

Deliberately small: exactly the operations the schedule encoder and its
heads need, each with a hand-written vector-Jacobian product.  The LSTM
cell is a single fused op so a whole encoding pass costs a handful of
numpy calls per node instead of dozens of tape entries.

All values are float64.  Gradients accumulate into ``Tensor.grad``;
``backward`` walks the tape once in reverse topological order.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

__all__ = ["Tensor", "no_grad", "backward"]

_grad_enabled = [True]


@contextmanager
def no_grad():
    """Disable tape recording (forward values only)."""
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


class Tensor:
    """A numpy array plus its place on the tape."""

    __slots__ = ("value", "grad", "parents", "vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        if _grad_enabled[-1]:
            self.parents = parents
            self.vjp = vjp
        else:
            self.parents = ()
            self.vjp = None

    def zero_grad(self):
        self.grad = None

    def add_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    # convenience constructors -------------------------------------------

    @staticmethod
    def param(value) -> "Tensor":
        return Tensor(np.array(value, dtype=np.float64))

    @staticmethod
    def const(value) -> "Tensor":
        return Tensor(value)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into .grad for every reachable tensor."""
    if loss.value.size != 1:
        raise ValueError("backward expects a scalar loss")
    if not np.isfinite(loss.value):
        raise FloatingPointError("non-finite loss")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.add_grad(np.ones_like(loss.value))
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.vjp(node.grad)):
            if g is not None:
                parent.add_grad(g)


# --- operations -------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w.T + b for x of shape (n,) or (k, n); w is (m, n), b is (m,)."""
    out = x.value @ w.value.T + b.value

    def vjp(g):
        if x.value.ndim == 1:
            return (g @ w.value, np.outer(g, x.value), g)
        return (g @ w.value, g.T @ x.value, g.sum(axis=0))

    return Tensor(out, (x, w, b), vjp)


def relu(x: Tensor) -> Tensor:
    m = x.value > 0.0

    def vjp(g):
        return (g * m,)

    return Tensor(np.where(m, x.value, 0.0), (x,), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return (g, g)

    return Tensor(a.value + b.value, (a, b), vjp)


def scale(a: Tensor, k: float) -> Tensor:
    def vjp(g):
        return (g * k,)

    return Tensor(a.value * k, (a,), vjp)


def add_n(tensors: list[Tensor]) -> Tensor:
    out = tensors[0].value.copy()
    for t in tensors[1:]:
        out += t.value

    def vjp(g):
        return tuple(g for _ in tensors)

    return Tensor(out, tuple(tensors), vjp)


def slice1d(x: Tensor, lo: int, hi: int) -> Tensor:
    def vjp(g):
        full = np.zeros_like(x.value)
        full[lo:hi] = g
        return (full,)

    return Tensor(x.value[lo:hi], (x,), vjp)


def stack_rows(tensors: list[Tensor]) -> Tensor:
    """Stack 1-D tensors into an (n, d) matrix."""

    def vjp(g):
        return tuple(g[i] for i in range(len(tensors)))

    return Tensor(np.stack([t.value for t in tensors]), tuple(tensors), vjp)


def stack0(tensors: list[Tensor]) -> Tensor:
    """Stack scalars into a 1-D vector."""

    def vjp(g):
        return tuple(np.asarray(g[i]) for i in range(len(tensors)))

    return Tensor(np.array([float(t.value) for t in tensors]), tuple(tensors), vjp)


def concat1d(a: Tensor, b: Tensor) -> Tensor:
    na = a.value.size

    def vjp(g):
        return (g[:na], g[na:])

    return Tensor(np.concatenate([a.value, b.value]), (a, b), vjp)


def squeeze_col(x: Tensor) -> Tensor:
    """(n, 1) matrix to an (n,) vector."""

    def vjp(g):
        return (g[:, None],)

    return Tensor(x.value[:, 0], (x,), vjp)


def gather1(x: Tensor, idx: int) -> Tensor:
    def vjp(g):
        full = np.zeros_like(x.value)
        full[idx] = g
        return (full,)

    return Tensor(x.value[idx], (x,), vjp)


def reshape_scalar(x: Tensor) -> Tensor:
    """(1,)-shaped to a scalar view."""

    def vjp(g):
        return (np.reshape(g, x.value.shape),)

    return Tensor(x.value.reshape(()), (x,), vjp)


def log_softmax(x: Tensor) -> Tensor:
    m = float(np.max(x.value))
    z = x.value - m
    lse = np.log(np.sum(np.exp(z)))
    out = z - lse
    sm = np.exp(out)

    def vjp(g):
        return (g - sm * np.sum(g),)

    return Tensor(out, (x,), vjp)


def square(x: Tensor) -> Tensor:
    def vjp(g):
        return (2.0 * g * x.value,)

    return Tensor(x.value * x.value, (x,), vjp)


def mean1d(x: Tensor) -> Tensor:
    n = x.value.size

    def vjp(g):
        return (np.full_like(x.value, float(g) / n),)

    return Tensor(x.value.mean(), (x,), vjp)


def sub_const(x: Tensor, c: np.ndarray) -> Tensor:
    def vjp(g):
        return (g,)

    return Tensor(x.value - c, (x,), vjp)


def weighted_sum(x: Tensor, w: np.ndarray) -> Tensor:
    """Dot with a constant weight vector."""

    def vjp(g):
        return (float(g) * w,)

    return Tensor(float(x.value @ w), (x,), vjp)


def lstm_cell(x: np.ndarray, hc: Tensor, wx: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    """One LSTM step on a summed parent state.

    ``x`` is the (constant) input embedding, ``hc`` the concatenated
    [h; c] parent-state sum of length 2H.  Gate order in the packed
    weight matrices: input, forget, output, cell.  Returns [h'; c'].
    """
    hsz = hc.value.size // 2
    h_in = hc.value[:hsz]
    c_in = hc.value[hsz:]
    z = wx.value @ x + wh.value @ h_in + b.value
    zi, zf, zo, zg = (z[k * hsz : (k + 1) * hsz] for k in range(4))
    i = 1.0 / (1.0 + np.exp(-zi))
    f = 1.0 / (1.0 + np.exp(-zf))
    o = 1.0 / (1.0 + np.exp(-zo))
    g = np.tanh(zg)
    c = f * c_in + i * g
    tc = np.tanh(c)
    h = o * tc

    def vjp(grad):
        gh = grad[:hsz]
        gc = grad[hsz:] + gh * o * (1.0 - tc * tc)
        go = gh * tc
        dz = np.concatenate(
            [
                gc * g * i * (1.0 - i),
                gc * c_in * f * (1.0 - f),
                go * o * (1.0 - o),
                gc * i * (1.0 - g * g),
            ]
        )
        dh_in = wh.value.T @ dz
        dc_in = gc * f
        return (
            np.concatenate([dh_in, dc_in]),
            np.outer(dz, x),
            np.outer(dz, h_in),
            dz,
        )

    return Tensor(np.concatenate([h, c]), (hc, wx, wh, b), vjp)
