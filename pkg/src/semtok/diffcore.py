"""Minimal tape-based reverse-mode differentiation on numpy arrays.

Operations executed while a :class:`Graph` is active (``with Graph() as g:``)
are appended to its tape whenever at least one input requires a gradient.
Outside a graph the same functions are plain numpy computations, which is
what inference uses.

Only the primitives the transformer, token selection and channel stages
need are provided. Broadcasting is limited to numpy's rules with the
gradient summed back onto the operand shape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
LN_EPS = 1e-5

_GELU_C = np.sqrt(2.0 / np.pi)


class ShapeError(ValueError):
    """Operand shapes do not fit a primitive."""


class GraphError(RuntimeError):
    """Invalid use of a recorded graph (e.g. backward before forward)."""


class Value:
    """An array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Value):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)


@dataclass
class Node:
    op: str
    inputs: tuple[Value, ...]
    output: Value
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _active() -> Graph | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Evaluate without recording, even inside an active graph."""
    if not hasattr(_local, "stack"):
        _local.stack = []
    _local.stack.append(None)
    try:
        yield
    finally:
        _local.stack.pop()


class Graph:
    """Tape of primitive applications, replayed in reverse by :meth:`backward`."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> Graph:
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, op, inputs, output, backward) -> None:
        self.nodes.append(Node(op, tuple(inputs), output, backward))
        self._produced.add(id(output))

    def backward(self, output: Value, seed=None) -> dict[Value, np.ndarray]:
        """Propagate ``seed`` (default ones) from ``output`` back through the tape.

        Leaf values with ``requires_grad`` get their ``.grad`` accumulated;
        the returned map holds the gradient contributed by this call.
        """
        if not self.nodes or id(output) not in self._produced:
            raise GraphError("backward called on a value this graph never produced")
        seed = np.ones_like(output.data) if seed is None else np.asarray(seed, dtype=DTYPE)
        if isinstance(seed, Value):
            seed = seed.data
        if seed.shape != output.shape:
            raise ShapeError(f"backward: seed shape {seed.shape} != output shape {output.shape}")

        grads: dict[int, np.ndarray] = {id(output): seed}
        leaves: dict[int, Value] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in self._produced:
                    leaves[key] = inp

        result = {}
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
            result[leaf] = g
        return result


def _wrap(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _emit(op: str, inputs: Sequence[Value], data: np.ndarray, backward) -> Value:
    out = Value(data)
    if any(v.requires_grad for v in inputs):
        graph = _active()
        if graph is not None:
            out.requires_grad = True
            graph.record(op, inputs, out, backward)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"{op}: non-finite output")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Value, b: Value) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# elementwise --------------------------------------------------------------


def add(a, b) -> Value:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a, b)
    return _emit(
        "add",
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Value:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a, b)
    return _emit(
        "sub",
        (a, b),
        a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Value:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a, b)
    return _emit(
        "mul",
        (a, b),
        a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def power(a, exponent: float) -> Value:
    a = _wrap(a)
    return _emit(
        "power",
        (a,),
        a.data**exponent,
        lambda g: (g * exponent * a.data ** (exponent - 1.0),),
    )


def relu(a) -> Value:
    a = _wrap(a)
    active = a.data > 0  # subgradient 0 at exactly 0
    return _emit("relu", (a,), np.where(active, a.data, 0.0), lambda g: (g * active,))


def absolute(a) -> Value:
    a = _wrap(a)
    return _emit("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def sigmoid(a) -> Value:
    a = _wrap(a)
    s = np.empty_like(a.data)
    pos = a.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    s[~pos] = e / (1.0 + e)
    return _emit("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def gelu(a) -> Value:
    """GELU, tanh approximation."""
    a = _wrap(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _emit("gelu", (a,), out, back)


# linear algebra and reductions -------------------------------------------


def matmul(a, b) -> Value:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims {a.shape[:-2]} vs {b.shape[:-2]}") from None

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            # shared weight matrix: fold the batch dims into one product
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _emit("matmul", (a, b), a.data @ b.data, back)


def sum(a, axis=None, keepdims: bool = False) -> Value:  # noqa: A001
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", (a,), out, back)


def mean(a, axis=None, keepdims: bool = False) -> Value:
    a = _wrap(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(a, axis: int = -1) -> Value:
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return _emit(
        "softmax",
        (a,),
        p,
        lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),),
    )


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> Value:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}, {beta.shape} for width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", (x, gamma, beta), out, back)


def cross_entropy(logits, labels) -> Value:
    """Mean negative log-likelihood of integer ``labels`` under row-softmax ``logits``."""
    logits = _wrap(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(labels.size)
    out = -logp[rows, labels].mean()

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / labels.size,)

    return _emit("cross_entropy", (logits,), np.asarray(out), back)


# structural ---------------------------------------------------------------


def concat(values: Sequence, axis: int = -2) -> Value:
    """Concatenate along ``axis`` (rows by default)."""
    values = [_wrap(v) for v in values]
    try:
        out = np.concatenate([v.data for v in values], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    sizes = np.cumsum([v.shape[axis] for v in values])[:-1]
    return _emit("concat", values, out, lambda g: np.split(g, sizes, axis=axis))


def reshape(a, shape) -> Value:
    a = _wrap(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Value:
    a = _wrap(a)
    inverse = np.argsort(axes)
    return _emit("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inverse),))


def take(a, indices, axis: int = -2) -> Value:
    """Gather entries along ``axis`` (integer index array, repeats allowed)."""
    a = _wrap(a)
    indices = np.asarray(indices, dtype=np.int64)
    n = a.shape[axis]
    if indices.size and (indices.min() < -n or indices.max() >= n):
        raise ShapeError(f"take: index out of range for axis of size {n}")

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(np.moveaxis(full, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _emit("take", (a,), np.take(a.data, indices, axis=axis), back)


def take_rows(a, indices) -> Value:
    """Per-sample row gather: ``a`` is (B, m, d), ``indices`` is (B, k)."""
    a = _wrap(a)
    indices = np.asarray(indices, dtype=np.int64)
    if a.ndim != 3 or indices.ndim != 2 or indices.shape[0] != a.shape[0]:
        raise ShapeError(f"take_rows: data {a.shape}, indices {indices.shape}")
    batch = np.arange(a.shape[0])[:, None]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (batch, indices), g)
        return (full,)

    return _emit("take_rows", (a,), a.data[batch, indices], back)


# verification --------------------------------------------------------------


@dataclass(frozen=True)
class GradCheck:
    max_rel_error: float
    passed: bool
    message: str = ""


def finite_difference_check(
    fn: Callable[..., Value],
    point,
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheck:
    """Compare reverse-mode gradients of scalar ``fn(*point)`` with central differences.

    The per-coordinate error is ``|analytic - numeric| / max(1, |numeric|)``.
    ``point`` is a Value or a sequence of Values; their data are perturbed in
    place and restored.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = [point] if isinstance(point, Value) else list(point)
    saved_flags = [p.requires_grad for p in params]
    saved_grads = [p.grad for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    try:
        try:
            with Graph() as graph:
                out = fn(*params)
            if out.data.size != 1:
                raise ShapeError(f"finite_difference_check: fn returned shape {out.shape}")
            if out.requires_grad:
                graph.backward(out)
        except FloatingPointError as exc:
            return GradCheck(float("inf"), False, str(exc))
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]

        def evaluate() -> float:
            return float(fn(*params).data)

        worst = 0.0
        for p, a_grad in zip(params, analytic):
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                try:
                    flat[i] = orig + step
                    f_plus = evaluate()
                    flat[i] = orig - step
                    f_minus = evaluate()
                except FloatingPointError as exc:
                    return GradCheck(float("inf"), False, str(exc))
                finally:
                    flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                if not np.isfinite(numeric):
                    return GradCheck(float("inf"), False, f"non-finite difference at {p.name}[{i}]")
                err = abs(a_grad.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
        return GradCheck(worst, worst < tolerance)
    finally:
        for p, flag, g in zip(params, saved_flags, saved_grads):
            p.requires_grad = flag
            p.grad = g
