"""Minimal reverse-mode autodiff over numpy arrays.

Every op accepts either plain arrays or Var nodes. With plain arrays it
returns a plain array and builds no tape, so inference and gradient code
share one implementation of the forward math.
"""

from __future__ import annotations

import numpy as np

from . import numerics


class Var:
    """A tape node: value, accumulated gradient, and the local backward rule."""

    __slots__ = ("data", "grad", "parents", "vjp")

    def __init__(self, data, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return self.data.shape


def val(x) -> np.ndarray:
    return x.data if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def is_var(x) -> bool:
    return isinstance(x, Var)


def _any_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(root: Var) -> None:
    """Accumulate gradients of `root` (summed to a scalar) into its ancestors."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if not isinstance(node, Var) or id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            order.append(node)
        else:
            stack.append((node, True))
            for p in node.parents:
                if isinstance(p, Var) and id(p) not in seen:
                    stack.append((p, False))
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.vjp(node.grad)):
            if isinstance(parent, Var) and g is not None:
                parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def add(a, b):
    out = val(a) + val(b)
    if not _any_var(a, b):
        return out

    def vjp(g):
        ga = _unbroadcast(g, val(a).shape) if is_var(a) else None
        gb = _unbroadcast(g, val(b).shape) if is_var(b) else None
        return ga, gb

    return Var(out, (a, b), vjp)


def sub(a, b):
    out = val(a) - val(b)
    if not _any_var(a, b):
        return out

    def vjp(g):
        ga = _unbroadcast(g, val(a).shape) if is_var(a) else None
        gb = _unbroadcast(-g, val(b).shape) if is_var(b) else None
        return ga, gb

    return Var(out, (a, b), vjp)


def mul(a, b):
    av, bv = val(a), val(b)
    out = av * bv
    if not _any_var(a, b):
        return out

    def vjp(g):
        ga = _unbroadcast(g * bv, av.shape) if is_var(a) else None
        gb = _unbroadcast(g * av, bv.shape) if is_var(b) else None
        return ga, gb

    return Var(out, (a, b), vjp)


def matmul(a, b):
    av, bv = val(a), val(b)
    out = numerics.matmul(av, bv)
    if not _any_var(a, b):
        return out
    stacked_by_flat = av.ndim > 2 and bv.ndim == 2

    def vjp(g):
        ga = gb = None
        if is_var(a):
            ga = numerics.matmul(g, bv.T) if stacked_by_flat else _unbroadcast(
                np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape
            )
        if is_var(b):
            if stacked_by_flat:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb

    return Var(out, (a, b), vjp)


def square(a):
    av = val(a)
    out = av * av
    if not is_var(a):
        return out
    return Var(out, (a,), lambda g: (2.0 * av * g,))


def gelu(a):
    av = val(a)
    out = numerics.gelu(av)
    if not is_var(a):
        return out
    deriv = numerics.gelu_grad(av)
    return Var(out, (a,), lambda g: (deriv * g,))


def softplus(a):
    av = val(a)
    out = np.logaddexp(0.0, av)
    if not is_var(a):
        return out
    # sigmoid via the tanh identity, stable for large |x|
    sig = 0.5 * (1.0 + np.tanh(0.5 * av))
    return Var(out, (a,), lambda g: (sig * g,))


def softmax_rows(a):
    y = numerics.softmax_rows(val(a))
    if not is_var(a):
        return y

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return Var(y, (a,), vjp)


def normalize_rows(a, eps: float = 1e-5):
    av = val(a)
    mean = av.mean(axis=-1, keepdims=True)
    var = np.mean((av - mean) ** 2, axis=-1, keepdims=True)
    std = np.sqrt(var + eps)
    y = (av - mean) / std
    if not is_var(a):
        return y

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = np.mean(g * y, axis=-1, keepdims=True)
        return ((g - gm - y * gy) / std,)

    return Var(y, (a,), vjp)


def concat_cols(parts):
    vals = [val(p) for p in parts]
    out = np.concatenate(vals, axis=-1)
    if not _any_var(*parts):
        return out
    widths = [v.shape[-1] for v in vals]

    def vjp(g):
        grads = []
        start = 0
        for p, w in zip(parts, widths):
            grads.append(g[..., start : start + w] if is_var(p) else None)
            start += w
        return tuple(grads)

    return Var(out, tuple(parts), vjp)


def concat_rows(parts):
    vals = [val(p) for p in parts]
    out = np.concatenate(vals, axis=-2)
    if not _any_var(*parts):
        return out
    heights = [v.shape[-2] for v in vals]

    def vjp(g):
        grads = []
        start = 0
        for p, h in zip(parts, heights):
            grads.append(g[..., start : start + h, :] if is_var(p) else None)
            start += h
        return tuple(grads)

    return Var(out, tuple(parts), vjp)


def swap_last(a):
    av = val(a)
    out = np.swapaxes(av, -1, -2)
    if not is_var(a):
        return out
    return Var(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def take_token(a, index: int):
    """Select one token row: (..., N, d) -> (..., d)."""
    av = val(a)
    out = av[..., index, :]
    if not is_var(a):
        return out

    def vjp(g):
        full = np.zeros_like(av)
        full[..., index, :] = g
        return (full,)

    return Var(out, (a,), vjp)


def reshape(a, shape):
    av = val(a)
    out = av.reshape(shape)
    if not is_var(a):
        return out
    orig = av.shape
    return Var(out, (a,), lambda g: (g.reshape(orig),))


def moveaxis(a, source: int, destination: int):
    av = val(a)
    out = np.moveaxis(av, source, destination)
    if not is_var(a):
        return out
    return Var(out, (a,), lambda g: (np.moveaxis(g, destination, source),))


def stack0(parts):
    """Stack along a new leading axis."""
    vals = [val(p) for p in parts]
    out = np.stack(vals, axis=0)
    if not _any_var(*parts):
        return out

    def vjp(g):
        return tuple(g[i] if is_var(p) else None for i, p in enumerate(parts))

    return Var(out, tuple(parts), vjp)


def expand_batch(a):
    """Prepend a singleton batch axis."""
    av = val(a)
    out = av[None]
    if not is_var(a):
        return out
    return Var(out, (a,), lambda g: (g[0],))


def take_batch0(a):
    """Drop a singleton batch axis."""
    av = val(a)
    if av.shape[0] != 1:
        raise ValueError(f"take_batch0 needs batch size 1, got {av.shape[0]}")
    out = av[0]
    if not is_var(a):
        return out
    return Var(out, (a,), lambda g: (g[None],))


def sum_all(a):
    av = val(a)
    out = np.asarray(av.sum())
    if not is_var(a):
        return out
    return Var(out, (a,), lambda g: (np.broadcast_to(g, av.shape).copy(),))


def scale(a, c: float):
    av = val(a)
    out = av * c
    if not is_var(a):
        return out
    return Var(out, (a,), lambda g: (g * c,))


def cross_entropy_mean(logits, labels):
    """Mean cross-entropy of (S, C) logits against integer labels."""
    z = val(logits)
    labels = np.asarray(labels)
    n = z.shape[0]
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.sum(np.exp(z - zmax), axis=-1))
    picked = z[np.arange(n), labels]
    out = np.asarray((lse - picked).mean())
    if not is_var(logits):
        return out

    def vjp(g):
        p = numerics.softmax_rows(z)
        p[np.arange(n), labels] -= 1.0
        return (p * (float(g) / n),)

    return Var(out, (logits,), vjp)
