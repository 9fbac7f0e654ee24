"""Minimal reverse-mode autodiff over dense float64 arrays.

Big enough to train small MLP velocity fields and differentiate a clipped
policy-gradient surrogate; nothing more. Arrays are row-major numpy float64,
broadcasting is restricted to leading batch dimensions, and gradients flow
through an explicit tape that is consumed by a single backward pass.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "add",
    "sub",
    "mul",
    "matmul",
    "tanh",
    "silu",
    "exp",
    "log",
    "square",
    "affine",
    "concat_last",
    "reduce_sum",
    "reduce_mean",
    "minimum",
    "clip",
    "take_rows",
    "zero_gradients",
    "adamw_step",
]


def _as_array(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64)


class Tensor:
    """A dense float64 array, optionally tracked by the active tape."""

    __slots__ = ("values", "grad", "watched", "_tape")

    def __init__(self, values, watched: bool = False):
        self.values = _as_array(values)
        self.watched = watched
        self.grad = np.zeros_like(self.values) if watched else None
        self._tape = None  # tape that created this tensor, if any

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, watched={self.watched})"

    # Operator sugar; constants are wrapped on the fly.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


class Parameter(Tensor):
    """Trainable tensor with gradient and AdamW moment slots."""

    __slots__ = ("name", "m", "v", "step")

    def __init__(self, values, name: str = ""):
        super().__init__(values, watched=True)
        self.name = name
        self.m = np.zeros_like(self.values)
        self.v = np.zeros_like(self.values)
        self.step = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.values.shape})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _TapeNode:
    """One recorded op: output, inputs, and the rule mapping d(out) to d(inputs)."""

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Records ops in forward order; that order is a topological order of the DAG.

    Usage:
        with Tape() as tape:
            loss = ...
        tape.backward(loss)

    backward() walks the node list once in reverse and accumulates d(loss)
    into the .grad of every watched leaf (Parameters and explicitly watched
    inputs). The tape is consumed afterwards.
    """

    _active: "Tape | None" = None

    def __init__(self):
        self.nodes: list[_TapeNode] | None = []

    def __enter__(self):
        if Tape._active is not None:
            raise RuntimeError("nested tapes are not supported")
        Tape._active = self
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._active = None
        return False

    def _record(self, node: _TapeNode):
        self.nodes.append(node)
        node.output._tape = self

    def backward(self, loss: Tensor) -> None:
        if self.nodes is None:
            raise RuntimeError("tape already consumed by a previous backward")
        if loss.values.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.values.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not produced under this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            for inp, g_in in zip(node.inputs, node.backward(g_out)):
                if g_in is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g_in
                else:
                    grads[key] = g_in
                if inp.watched and inp._tape is not self:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            leaf.grad += grads[key]
        self.nodes = None  # consumed


def _emit(op: str, inputs: tuple[Tensor, ...], values: np.ndarray, backward) -> Tensor:
    out = Tensor(values)
    tape = Tape._active
    if tape is not None:
        tape._record(_TapeNode(op, inputs, out, backward))
    return out


def _check_leading_broadcast(op: str, sa: tuple, sb: tuple) -> tuple:
    """Allow broadcasting only over leading (batch) axes; trailing dims must match."""
    try:
        out = np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ValueError(f"{op}: shapes {sa} and {sb} do not broadcast") from None
    for s in (sa, sb):
        trimmed = list(s)
        while trimmed and trimmed[0] == 1:
            trimmed.pop(0)
        if tuple(trimmed) != out[len(out) - len(trimmed):]:
            raise ValueError(f"{op}: shapes {sa} and {sb} broadcast on a non-leading axis")
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over axes introduced or expanded by leading-batch broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# forward ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast("add", a.values.shape, b.values.shape)
    out = a.values + b.values

    def backward(g):
        return _unbroadcast(g, a.values.shape), _unbroadcast(g, b.values.shape)

    return _emit("add", (a, b), out, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast("sub", a.values.shape, b.values.shape)
    out = a.values - b.values

    def backward(g):
        return _unbroadcast(g, a.values.shape), _unbroadcast(-g, b.values.shape)

    return _emit("sub", (a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast("mul", a.values.shape, b.values.shape)
    out = a.values * b.values
    av, bv = a.values, b.values

    def backward(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _emit("mul", (a, b), out, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError(
            f"matmul expects 2-D operands, got {a.values.shape} and {b.values.shape}"
        )
    if a.values.shape[1] != b.values.shape[0]:
        raise ValueError(
            f"matmul inner dimensions differ: {a.values.shape} @ {b.values.shape}"
        )
    out = a.values @ b.values
    av, bv = a.values, b.values

    def backward(g):
        return g @ bv.T, av.T @ g

    return _emit("matmul", (a, b), out, backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _emit("tanh", (a,), out, backward)


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.values))
    out = a.values * sig

    def backward(g):
        return (g * sig * (1.0 + a.values * (1.0 - sig)),)

    return _emit("silu", (a,), out, backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("exp overflowed to a non-finite value")

    def backward(g):
        return (g * out,)

    return _emit("exp", (a,), out, backward)


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0.0):
        raise ValueError("log requires strictly positive inputs")
    out = np.log(a.values)
    av = a.values

    def backward(g):
        return (g / av,)

    return _emit("log", (a,), out, backward)


def square(a: Tensor) -> Tensor:
    out = a.values * a.values
    av = a.values

    def backward(g):
        return (g * (2.0 * av),)

    return _emit("square", (a,), out, backward)


def affine(a: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """scale * a + shift with python-scalar coefficients."""
    out = scale * a.values + shift

    def backward(g):
        return (g * scale,)

    return _emit("affine", (a,), out, backward)


def concat_last(tensors: list[Tensor]) -> Tensor:
    if not tensors:
        raise ValueError("concat_last of an empty list")
    lead = tensors[0].values.shape[:-1]
    for t in tensors[1:]:
        if t.values.shape[:-1] != lead:
            raise ValueError(
                f"concat_last leading shapes differ: {tensors[0].values.shape} vs {t.values.shape}"
            )
    out = np.concatenate([t.values for t in tensors], axis=-1)
    widths = [t.values.shape[-1] for t in tensors]

    def backward(g):
        pieces, start = [], 0
        for w in widths:
            pieces.append(g[..., start:start + w])
            start += w
        return tuple(pieces)

    return _emit("concat_last", tuple(tensors), out, backward)


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis not in (None, -1):
        raise ValueError("reduce_sum supports axis=None (all) or axis=-1 (last)")
    out = a.values.sum(axis=axis)
    shape = a.values.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(g[..., None], shape).copy(),)

    return _emit("reduce_sum", (a,), out, backward)


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis not in (None, -1):
        raise ValueError("reduce_mean supports axis=None (all) or axis=-1 (last)")
    out = a.values.mean(axis=axis)
    shape = a.values.shape
    n = a.values.size if axis is None else shape[-1]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        return (np.broadcast_to(g[..., None] / n, shape).copy(),)

    return _emit("reduce_mean", (a,), out, backward)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties route the gradient to the first argument."""
    _check_leading_broadcast("minimum", a.values.shape, b.values.shape)
    take_a = a.values <= b.values
    out = np.where(take_a, a.values, b.values)

    def backward(g):
        return (
            _unbroadcast(g * take_a, a.values.shape),
            _unbroadcast(g * ~take_a, b.values.shape),
        )

    return _emit("minimum", (a, b), out, backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes inside the interval (inclusive)."""
    out = np.clip(a.values, lo, hi)
    inside = (a.values >= lo) & (a.values <= hi)

    def backward(g):
        return (g * inside,)

    return _emit("clip", (a,), out, backward)


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup out[i] = table[indices[i]]; backward scatter-adds."""
    idx = np.asarray(indices)
    if idx.ndim != 1:
        raise ValueError(f"take_rows expects 1-D indices, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.values.shape[0]):
        raise IndexError(
            f"take_rows index out of range for table with {table.values.shape[0]} rows"
        )
    out = table.values[idx]

    def backward(g):
        acc = np.zeros_like(table.values)
        np.add.at(acc, idx, g)
        return (acc,)

    return _emit("take_rows", (table,), out, backward)


# ---------------------------------------------------------------------------
# parameter updates


def zero_gradients(params) -> None:
    for p in params:
        p.grad[...] = 0.0


def adamw_step(
    params,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """Decoupled-weight-decay Adam: p -= lr * (mhat / (sqrt(vhat) + eps) + wd * p)."""
    if lr <= 0.0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    for p in params:
        p.step += 1
        g = p.grad
        p.m = b1 * p.m + (1.0 - b1) * g
        p.v = b2 * p.v + (1.0 - b2) * (g * g)
        mhat = p.m / (1.0 - b1 ** p.step)
        vhat = p.v / (1.0 - b2 ** p.step)
        p.values -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p.values)
