"""Dense float64 arrays with reverse-mode differentiation on an explicit tape.

The engine is define-by-run: every operation appends a record to the tape of
the arrays it consumes, so records are in topological order by construction.
A tape belongs to one training step; parameters are re-bound to a fresh tape
each step via :meth:`Tape.watch`.

Broadcasting is numpy-style but limited to what the models need: shapes are
right-aligned and size-1 (or missing leading) axes expand. Gradients are
summed back over the expanded axes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

# When enabled, every op asserts its output is finite. Off by default because
# it is a per-op scan; tests and the gradcheck command turn it on.
CHECK_FINITE = False


class Array:
    """A dense float64 value, optionally bound to a differentiation tape.

    ``node_id`` is None for constants; tape-bound arrays get an id from the
    tape that created (or watched) them.
    """

    __slots__ = ("values", "tape", "node_id")

    def __init__(self, values, tape: "Tape | None" = None, node_id: int | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __repr__(self) -> str:
        tag = "const" if self.node_id is None else f"node {self.node_id}"
        return f"Array(shape={self.values.shape}, {tag})"


class Tape:
    """Ordered record of operations plus a gradient buffer per node."""

    def __init__(self):
        self._records: list[tuple[int, list[tuple[int, Callable]]]] = []
        self._grads: dict[int, np.ndarray] = {}
        self._count = 0
        self._swept = False

    def _next_id(self) -> int:
        self._count += 1
        return self._count

    def watch(self, arr: Array) -> Array:
        """Bind ``arr`` to this tape as a leaf (re-binding is allowed)."""
        arr.tape = self
        arr.node_id = self._next_id()
        return arr

    def backward(self, loss: Array) -> None:
        """Reverse sweep from a scalar loss; fills the gradient buffer.

        The tape is single-use: call :meth:`reset` before sweeping again.
        """
        if loss.tape is not self or loss.node_id is None:
            raise ValueError("loss is not bound to this tape")
        if loss.values.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.values.shape}")
        if self._swept:
            raise RuntimeError("tape already swept; reset() before reuse")
        self._swept = True
        self._grads[loss.node_id] = np.ones_like(loss.values)
        for out_id, entries in reversed(self._records):
            g = self._grads.get(out_id)
            if g is None:
                continue
            for in_id, fn in entries:
                contrib = fn(g)
                prev = self._grads.get(in_id)
                self._grads[in_id] = contrib if prev is None else prev + contrib

    def grad(self, arr: Array) -> np.ndarray:
        """Gradient of the last loss w.r.t. ``arr`` (zeros if unreached)."""
        if arr.node_id is None:
            raise ValueError("constants carry no gradient")
        g = self._grads.get(arr.node_id)
        if g is None:
            return np.zeros_like(arr.values)
        return np.broadcast_to(g, arr.values.shape).astype(np.float64, copy=False)

    def reset(self) -> None:
        self._grads.clear()
        self._swept = False


def as_array(x) -> Array:
    return x if isinstance(x, Array) else Array(x)


def _common_tape(arrays: Sequence[Array]) -> Tape | None:
    tape = None
    for a in arrays:
        if a.node_id is None:
            continue
        if tape is None:
            tape = a.tape
        elif a.tape is not tape:
            raise ValueError("operands belong to different tapes")
    return tape


def _emit(values: np.ndarray, inputs: Sequence[Array], grad_fns: Sequence[Callable | None]) -> Array:
    """Create the output array and record input adjoint functions."""
    if CHECK_FINITE and not np.all(np.isfinite(values)):
        raise FloatingPointError("non-finite values in forward pass")
    tape = _common_tape(inputs)
    if tape is None:
        return Array(values)
    out = Array(values, tape, tape._next_id())
    entries = [
        (a.node_id, fn)
        for a, fn in zip(inputs, grad_fns)
        if a.node_id is not None and fn is not None
    ]
    tape._records.append((out.node_id, entries))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` back down to ``shape`` after broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(sa: tuple[int, ...], sb: tuple[int, ...]) -> None:
    for da, db in zip(reversed(sa), reversed(sb)):
        if da != db and da != 1 and db != 1:
            raise ValueError(f"shapes {sa} and {sb} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _check_broadcast(a.shape, b.shape)
    return _emit(
        a.values + b.values,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _check_broadcast(a.shape, b.shape)
    return _emit(
        a.values - b.values,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Array:
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = as_array(a), as_array(b)
    _check_broadcast(a.shape, b.shape)
    return _emit(
        a.values * b.values,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.values, a.shape),
            lambda g: _unbroadcast(g * a.values, b.shape),
        ),
    )


hadamard = mul


def scale(a, c: float) -> Array:
    """Multiply by a python constant (not differentiated through)."""
    a = as_array(a)
    c = float(c)
    return _emit(a.values * c, (a,), (lambda g: g * c,))


def absolute(a) -> Array:
    a = as_array(a)
    sgn = np.sign(a.values)  # sign(0) = 0: subgradient at the kink
    return _emit(np.abs(a.values), (a,), (lambda g: g * sgn,))


def pow_const(a, p: float) -> Array:
    """Elementwise a**p for constant p (a must stay in the domain of p)."""
    a = as_array(a)
    vals = a.values**p
    return _emit(vals, (a,), (lambda g: g * p * a.values ** (p - 1.0),))


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b) -> Array:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_array(a), as_array(b)
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")

    def swap(x):
        return np.swapaxes(x, -1, -2)

    return _emit(
        a.values @ b.values,
        (a, b),
        (
            lambda g: _unbroadcast(g @ swap(b.values), a.shape),
            lambda g: _unbroadcast(swap(a.values) @ g, b.shape),
        ),
    )


def transpose(a, axes: tuple[int, ...]) -> Array:
    a = as_array(a)
    inverse = tuple(np.argsort(axes))
    return _emit(
        np.transpose(a.values, axes), (a,), (lambda g: np.transpose(g, inverse),)
    )


def reshape(a, shape: tuple[int, ...]) -> Array:
    a = as_array(a)
    orig = a.values.shape
    return _emit(np.reshape(a.values, shape), (a,), (lambda g: np.reshape(g, orig),))


def concat(arrays: Sequence, axis: int) -> Array:
    """Concatenate along ``axis``; backward splits by the recorded offsets."""
    arrs = [as_array(x) for x in arrays]
    ref = list(arrs[0].shape)
    for x in arrs[1:]:
        other = list(x.shape)
        if len(other) != len(ref) or any(
            o != r for i, (o, r) in enumerate(zip(other, ref)) if i != axis % len(ref)
        ):
            raise ValueError(f"concat shapes incompatible: {arrs[0].shape} vs {x.shape}")
    sizes = [x.shape[axis] for x in arrs]
    offsets = np.cumsum([0] + sizes)

    def make_fn(i):
        lo, hi = offsets[i], offsets[i + 1]

        def fn(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return fn

    values = np.concatenate([x.values for x in arrs], axis=axis)
    return _emit(values, arrs, [make_fn(i) for i in range(len(arrs))])


def reduce_sum(a, axis: int | None = None, keepdims: bool = False) -> Array:
    a = as_array(a)
    shape = a.values.shape

    def fn(g):
        if axis is None:
            return np.broadcast_to(g, shape)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, shape)

    return _emit(np.sum(a.values, axis=axis, keepdims=keepdims), (a,), (fn,))


def mean(a) -> Array:
    a = as_array(a)
    return scale(reduce_sum(a), 1.0 / a.values.size)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a) -> Array:
    a = as_array(a)
    mask = a.values > 0.0  # subgradient 0 at x = 0
    return _emit(np.where(mask, a.values, 0.0), (a,), (lambda g: g * mask,))


def sigmoid(a) -> Array:
    a = as_array(a)
    out = np.empty_like(a.values)
    pos = a.values >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.values[pos]))
    ex = np.exp(a.values[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit(out, (a,), (lambda g: g * out * (1.0 - out),))


def softmax(a, axis: int = -1) -> Array:
    """Max-stabilized softmax; slices along ``axis`` sum to 1."""
    a = as_array(a)
    shifted = a.values - np.max(a.values, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def fn(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return out * (g - dot)

    return _emit(out, (a,), (fn,))


# ---------------------------------------------------------------------------
# parameters and optimization


class Parameter:
    """A named trainable array plus its Adam moment buffers."""

    def __init__(self, name: str, values):
        self.name = name
        self.array = Array(np.array(values, dtype=np.float64))
        self.m = np.zeros_like(self.array.values)
        self.v = np.zeros_like(self.array.values)
        self.step = 0

    @property
    def values(self) -> np.ndarray:
        return self.array.values

    def bind(self, tape: Tape) -> Array:
        return tape.watch(self.array)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.array.values.shape})"


def adam_step(
    params: Sequence[Parameter],
    grads: Sequence[np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place. Step counters increment
    even for zero gradients."""
    for p, g in zip(params, grads):
        if g.shape != p.array.values.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{p.name!r} shape {p.array.values.shape}"
            )
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1**p.step)
        v_hat = p.v / (1.0 - beta2**p.step)
        p.array.values -= lr * m_hat / (np.sqrt(v_hat) + eps)


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function, entry by entry.

    Independent of the tape: ``f`` is called on plain numpy arrays.
    """
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g
