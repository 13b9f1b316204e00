"""Dense float64 tensors with taped reverse-mode differentiation.

Everything is backed by numpy arrays in row-major order. Operations record
onto the innermost active ``GradientTape`` (define-by-run); ``backward``
replays the tape once in reverse and returns a gradient map keyed by tensor
identity. Reductions run in numpy's sequential row-major order, so results
are bit-reproducible for a fixed seed and thread count.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A dense float64 array, optionally marked as a trainable parameter.

    Construction from external data rejects NaN/Inf. Tensors are immutable
    by convention after creation; in-place mutation of ``data`` is reserved
    for the optimizer, which owns parameter updates.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor input contains NaN or Inf")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        grad = " grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad}{tag})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("divide by a scalar; tensor/tensor division is not a primitive")
        return mul(self, _as_tensor(1.0 / float(other)))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape and reduction sugar --------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def take(self, indices, axis: int = 0) -> "Tensor":
        return take(self, indices, axis=axis)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _result(arr: np.ndarray) -> Tensor:
    """Wrap an op result without the external-input finiteness check."""
    t = Tensor.__new__(Tensor)
    t.data = arr if arr.dtype == np.float64 else arr.astype(np.float64)
    t.requires_grad = False
    t.name = None
    return t


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_TAPE_STACK: list["GradientTape"] = []

# A vjp maps the output cotangent to one cotangent per input (None = no flow).
_Vjp = Callable[[np.ndarray], tuple]


class GradientTape:
    """Ordered record of primitive operations with their saved inputs.

    Use as a context manager around forward computation. Ops are recorded
    only while a tape is active and only when at least one input is tracked
    (a parameter, or itself produced on this tape). Replaying backward
    visits each recorded op exactly once.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], _Vjp]] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "GradientTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def num_records(self) -> int:
        return len(self._records)


def _push(out: Tensor, inputs: tuple[Tensor, ...], vjp: _Vjp) -> Tensor:
    if _TAPE_STACK:
        tape = _TAPE_STACK[-1]
        if any(tape.tracks(t) for t in inputs):
            tape._records.append((out, inputs, vjp))
            tape._tracked.add(id(out))
    return out


def backward(loss: Tensor, tape: GradientTape) -> dict[Tensor, np.ndarray]:
    """Reverse-replay ``tape`` from ``loss`` and return the gradient map.

    The map holds one entry per ``requires_grad`` tensor that appears on the
    tape; parameters not reachable from ``loss`` map to exact zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    cotangents: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    grads: dict[Tensor, np.ndarray] = {}
    # accumulation always allocates (acc + gi), so aliasing vjp outputs is safe
    for out, inputs, vjp in reversed(tape._records):
        g = cotangents.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            if gi is None:
                continue
            if t.requires_grad:
                acc = grads.get(t)
                grads[t] = gi if acc is None else acc + gi
            elif id(t) in tape._tracked:
                acc = cotangents.get(id(t))
                cotangents[id(t)] = gi if acc is None else acc + gi
    for _, inputs, _ in tape._records:
        for t in inputs:
            if t.requires_grad and t not in grads:
                grads[t] = np.zeros_like(t.data)
    return grads


# ---------------------------------------------------------------------------
# Broadcasting helpers
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from e


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = _result(a.data + b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _push(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = _result(a.data - b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _push(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = _result(a.data * b.data)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _push(out, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the last two axes, with numpy batch broadcasting."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    out = _result(a.data @ b.data)

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _push(out, (a, b), vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact erf-based GELU."""
    e = erf(x.data * _INV_SQRT2)
    out = _result(0.5 * x.data * (1.0 + e))

    def vjp(g):
        local = 0.5 * (1.0 + e) + x.data * np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * local,)

    return _push(out, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    out = _result(np.maximum(x.data, 0.0))

    def vjp(g):
        return (g * (x.data > 0.0),)

    return _push(out, (x,), vjp)


def sqrt(x: Tensor) -> Tensor:
    """Elementwise square root; caller keeps inputs away from zero."""
    r = np.sqrt(x.data)
    out = _result(r)

    def vjp(g):
        return (g / (2.0 * r),)

    return _push(out, (x,), vjp)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, shift-invariant via row-max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = _result(s)

    def vjp(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - inner),)

    return _push(out, (x,), vjp)


def log_softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    ls = shifted - lse
    out = _result(ls)

    def vjp(g):
        return (g - np.exp(ls) * g.sum(axis=-1, keepdims=True),)

    return _push(out, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(
            f"layer_norm affine params must have shape {x.shape[-1:]}, "
            f"got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = _result(xhat * gain.data + bias.data)
    n = x.shape[-1]

    def vjp(g):
        gh = g * gain.data
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = (gh * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gh - m1 - xhat * m2)
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if lead else g * xhat
        gbias = g.sum(axis=lead) if lead else g.copy()
        return gx, ggain.reshape(n), gbias.reshape(n)

    return _push(out, (x, gain, bias), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on the last axis: ``x @ weight (+ bias)``."""
    y = matmul(x, weight)
    if bias is not None:
        y = add(y, bias)
    return y


# ---------------------------------------------------------------------------
# Shape, selection, and reduction primitives
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _result(np.ascontiguousarray(x.data).reshape(shape))

    def vjp(g):
        return (g.reshape(x.shape),)

    return _push(out, (x,), vjp)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; with ``axes=None`` swap the last two."""
    if axes is None:
        if x.ndim < 2:
            raise DimensionError("default transpose needs at least 2 dimensions")
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _result(np.transpose(x.data, axes))

    def vjp(g):
        return (np.transpose(g, inv),)

    return _push(out, (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    rank = tensors[0].ndim
    ax = axis % rank
    for t in tensors[1:]:
        if t.ndim != rank:
            raise DimensionError("concat operands must share rank")
        for d in range(rank):
            if d != ax and t.shape[d] != tensors[0].shape[d]:
                raise DimensionError(
                    f"concat: extents differ off the concat axis, "
                    f"{tensors[0].shape} vs {t.shape}"
                )
    out = _result(np.concatenate([t.data for t in tensors], axis=ax))
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=ax))

    return _push(out, tuple(tensors), vjp)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along one axis; duplicate indices scatter-add in the vjp."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError("take expects a 1-D index vector")
    out = _result(np.take(x.data, idx, axis=axis))

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _push(out, (x,), vjp)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        arr = np.broadcast_to(x.data, shape)
    except ValueError as e:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from e
    out = _result(np.ascontiguousarray(arr))

    def vjp(g):
        return (_unbroadcast(g, x.shape),)

    return _push(out, (x,), vjp)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True with ``value`` (no gradient there)."""
    m = np.asarray(mask, dtype=bool)
    if np.broadcast_shapes(x.shape, m.shape) != x.shape:
        raise DimensionError(f"mask of shape {m.shape} does not broadcast into {x.shape}")
    out = _result(np.where(m, value, x.data))

    def vjp(g):
        return (np.where(m, 0.0, g),)

    return _push(out, (x,), vjp)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = _result(x.data.sum(axis=axes, keepdims=keepdims))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _push(out, (x,), vjp)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = _result(x.data.mean(axis=axes, keepdims=keepdims))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _push(out, (x,), vjp)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements; operands must match in shape."""
    if a.shape != b.shape:
        raise DimensionError(f"mse operands must match, got {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = _result(np.asarray((diff * diff).mean()))
    n = a.size

    def vjp(g):
        core = (2.0 / n) * diff * g
        return core, -core

    return _push(out, (a, b), vjp)


def constant(data, name: str | None = None) -> Tensor:
    """A tensor that never receives gradient (detached input)."""
    return Tensor(data, requires_grad=False, name=name)
