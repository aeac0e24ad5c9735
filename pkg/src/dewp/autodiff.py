"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are appended to it
together with a vector-Jacobian closure.  :func:`backward` walks the tape
once in reverse and writes ``grad`` on every grad-enabled leaf.  Outside a
tape the same functions simply compute values, which is how inference and
finite-difference probes run.

Broadcasting is deliberately narrow.  Elementwise ops require equal shapes
(or a Python scalar operand); bias addition goes through :func:`add_bias`,
which names the axis explicitly.  :func:`matmul` accepts matching leading
batch dimensions, or a plain 2-d operand on either side that is shared
across the batch.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "conv1d",
    "relu",
    "softmax_rows",
    "add_bias",
    "sum_all",
    "mean_all",
    "reshape",
    "transpose",
    "concat",
    "take",
    "embedding",
]

_state = threading.local()


def _contiguous(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr if arr.flags.c_contiguous else arr.copy()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A float64 array that can participate in differentiation.

    ``grad_enabled`` marks a leaf whose gradient should be written by
    :func:`backward`.  Tensors produced by recorded operations carry a
    reference to their tape node instead.
    """

    __slots__ = ("data", "grad_enabled", "grad", "_node")

    def __init__(self, data, grad_enabled: bool = False):
        self.data = _contiguous(data)
        self.grad_enabled = grad_enabled
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", grad_enabled=True" if self.grad_enabled else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "vjp", "tape")

    def __init__(self, out, inputs, vjp, tape):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.tape = tape


class Tape:
    """Append-only record of the operations executed inside its context.

    >>> x = Tensor([1.0, 2.0], grad_enabled=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(x * x)
    >>> backward(loss, tape)
    >>> x.grad
    array([2., 4.])
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _tracked(t: Tensor) -> bool:
    return t.grad_enabled or t._node is not None


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(_tracked(t) for t in inputs):
        node = _Node(out, inputs, vjp, tape)
        out._node = node
        tape.nodes.append(node)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on the grad-enabled leaves that ``loss`` depends on.

    Gradients are overwritten on every call, never accumulated.  Leaves
    that appear on the tape but receive no gradient get zeros.
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None or node.tape is not tape:
        raise ContractError("loss was not produced on the given tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not _tracked(t):
                continue
            key = id(t)
            if t._node is None:
                leaves[key] = t
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    for node in tape.nodes:
        for t in node.inputs:
            if t.grad_enabled and t._node is None and id(t) not in leaves:
                t.grad = np.zeros_like(t.data)
    for key, t in leaves.items():
        if t.grad_enabled:
            t.grad = _contiguous(grads[key]).reshape(t.shape)


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ----------------------------------------------------------------------
# elementwise


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _emit(a.data + float(b), (a,), lambda g: (g,))
    _check_same_shape("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _emit(a.data - float(b), (a,), lambda g: (g,))
    _check_same_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same_shape("mul", a, b)
    A, B = a.data, b.data
    return _emit(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit(a.data * s, (a,), lambda g: (g * s,))


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, shifted by the row maximum."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit(s, (x,), vjp)


def add_bias(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Add a 1-d ``b`` along ``axis`` of ``x``."""
    axis = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise DimensionError(
            f"add_bias: bias shape {b.shape} does not match axis {axis} of {x.shape}"
        )
    view = [1] * x.ndim
    view[axis] = b.shape[0]
    others = tuple(i for i in range(x.ndim) if i != axis)

    def vjp(g):
        return g, g.sum(axis=others)

    return _emit(x.data + b.data.reshape(view), (x, b), vjp)


# ----------------------------------------------------------------------
# reductions and shape plumbing


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _emit(
        np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape),)
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(
        x.data.transpose(axes),
        (x,),
        lambda g: (g.transpose(inverse),),
    )


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat along axis {axis}: shapes {shapes}") from exc
    return _emit(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    axis = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit(x.data[index], (x,), vjp)


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup ``table[indices]``; output shape ``indices.shape + (width,)``."""
    idx = np.asarray(indices, dtype=np.intp)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractError(f"embedding index outside [0, {n})")

    def vjp(g):
        full = np.zeros(table.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(table.data[idx], (table,), vjp)


# ----------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {A.shape} by {B.shape}")
    if A.ndim > 2 and B.ndim > 2 and A.shape[:-2] != B.shape[:-2]:
        raise DimensionError(f"matmul: batch dims of {A.shape} and {B.shape} differ")

    def vjp(g):
        if A.ndim == 2 and B.ndim > 2:
            m, k = A.shape
            g2 = np.moveaxis(g, -2, 0).reshape(m, -1)
            b2 = np.moveaxis(B, -2, 0).reshape(k, -1)
            return g2 @ b2.T, np.swapaxes(A, 0, 1) @ g
        if B.ndim == 2 and A.ndim > 2:
            k, n = B.shape
            ga = g @ B.T
            gb = A.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
        return g @ np.swapaxes(B, -1, -2), np.swapaxes(A, -1, -2) @ g

    return _emit(A @ B, (a, b), vjp)


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1, length-preserving 1-d cross-correlation.

    ``x`` has shape ``(..., c_in, L)`` and ``kernels`` ``(c_out, c_in, k)``
    with odd ``k``; the input is zero-padded by ``(k - 1) // 2`` per side.
    """
    X, W = x.data, kernels.data
    if W.ndim != 3:
        raise DimensionError(f"conv1d: kernels must be 3-d, got {W.shape}")
    c_out, c_in, k = W.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d: kernel size must be odd, got {k}")
    if X.ndim < 2 or X.shape[-2] != c_in:
        raise DimensionError(f"conv1d: input {X.shape} does not match kernels {W.shape}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv1d: bias {bias.shape} does not match kernels {W.shape}")

    L = X.shape[-1]
    p = (k - 1) // 2
    lead = X.shape[:-2]
    xp = np.pad(X, [(0, 0)] * (X.ndim - 1) + [(p, p)])
    cols = np.stack([xp[..., j : j + L] for j in range(k)], axis=-2)
    cols = cols.reshape(*lead, c_in * k, L)
    W2 = W.reshape(c_out, c_in * k)
    out = W2 @ cols
    if bias is not None:
        out = out + bias.data[:, None]

    def vjp(g):
        g2 = np.moveaxis(g, -2, 0).reshape(c_out, -1)
        c2 = np.moveaxis(cols, -2, 0).reshape(c_in * k, -1)
        gw = (g2 @ c2.T).reshape(c_out, c_in, k)
        gcols = (W2.T @ g).reshape(*lead, c_in, k, L)
        gxp = np.zeros(xp.shape)
        for j in range(k):
            gxp[..., j : j + L] += gcols[..., j, :]
        gx = gxp[..., p : p + L]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return _emit(out, inputs, vjp)


# ----------------------------------------------------------------------
# verification


def grad_check(
    f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5, seed: int = 0
) -> float:
    """Largest scaled gap between analytic and central-difference gradients.

    The output of ``f`` is contracted with a fixed random projection so that
    every output coordinate contributes; the discrepancy per input
    coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if step <= 0:
        raise ContractError("grad_check step must be positive")
    base = np.array(x.data, dtype=np.float64)
    probe = Tensor(base.copy(), grad_enabled=True)
    with Tape() as tape:
        y = f(probe)
        proj = np.random.default_rng(seed).standard_normal(y.shape)
        loss = sum_all(mul(y, Tensor(proj)))
    backward(loss, tape)
    analytic = probe.grad.ravel()

    def value(arr):
        return float(np.sum(f(Tensor(arr)).data * proj))

    worst = 0.0
    for i in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus.flat[i] += step
        minus.flat[i] -= step
        numeric = (value(plus) - value(minus)) / (2.0 * step)
        gap = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, gap)
    return worst
