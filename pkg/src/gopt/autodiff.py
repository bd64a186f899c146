"""Dense float64 tensors with tape-based reverse-mode differentiation.

Deliberately small: exactly the primitives a few-layer Transformer encoder or
LSTM needs, all in 64-bit, all backed by numpy. Differentiable operations are
recorded, in execution order, on the tape installed by :func:`tape_scope`;
:func:`backward` replays the record back to front and fills ``grad`` on every
``requires_grad`` tensor that contributed to the loss. Outside a tape scope
the same functions run recording-free, which is what inference uses.

Broadcasting follows numpy where the model needs it (bias rows, batched
matmul against shared weights); gradients of broadcast operands are reduced
back to the operand's shape. There is no GPU path and no graph rewriting.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

Array = np.ndarray

# Large negative score used to exclude keys from attention; finite so that
# max-subtraction inside softmax never produces NaN, yet exp() underflows to
# an exact 0.0.
MASK_FILL_VALUE = -1e30


class Tensor:
    """A dense float64 array plus the bookkeeping reverse-mode AD needs.

    ``grad``, when populated, always has the same shape as ``data``. Tensors
    are cheap wrappers: operations return fresh tensors and never mutate
    their inputs. Handing a tensor to another thread is safe as long as only
    one thread mutates it (the optimizer does, during training).
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data: Array = arr
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self._tape: "Tape | None" = None

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
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operators cover the scalar/elementwise cases the model code uses.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -float(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not supported; divide by a scalar")
        return div_scalar(self, float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Wrap ``data`` (anything numpy accepts) as a float64 tensor."""
    return Tensor(data, requires_grad=requires_grad)


class _TapeEntry:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Execution-ordered record of differentiable operations.

    Replaying the record in reverse propagates adjoints from a scalar loss to
    every ``requires_grad`` tensor reachable from it. ``backward`` rewrites
    gradients from scratch on every call, so calling it twice on the same
    tape state yields bit-identical results.
    """

    def __init__(self):
        self._entries: list[_TapeEntry] = []

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: Tensor) -> None:
        if loss._tape is not self:
            raise ContractError("loss was not produced on this tape")
        if loss.data.size != 1:
            raise ContractError(f"loss must be a scalar, got shape {loss.shape}")

        pending: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
        owners: dict[int, Tensor] = {id(loss): loss}
        for entry in reversed(self._entries):
            out_adj = pending.pop(id(entry.output), None)
            if out_adj is None:
                continue  # this op did not feed the loss
            entry.output.grad = out_adj
            owners.pop(id(entry.output), None)
            for t, g in zip(entry.inputs, entry.backward_fn(out_adj)):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                prev = pending.get(key)
                pending[key] = g if prev is None else prev + g
                owners[key] = t
        # Whatever is left was never produced by a recorded op: the leaves.
        for key, adj in pending.items():
            owners[key].grad = adj


_ACTIVE_TAPE: Tape | None = None


@contextlib.contextmanager
def tape_scope():
    """Install a fresh tape; ops inside the block are recorded onto it."""
    global _ACTIVE_TAPE
    previous = _ACTIVE_TAPE
    _ACTIVE_TAPE = Tape()
    try:
        yield _ACTIVE_TAPE
    finally:
        _ACTIVE_TAPE = previous


def backward(loss: Tensor) -> None:
    """Fill ``grad`` on every ``requires_grad`` tensor the loss depends on."""
    if loss._tape is None:
        raise ContractError("loss was not recorded on a tape (use tape_scope)")
    loss._tape.backward(loss)


def _emit(data: Array, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._entries.append(_TapeEntry(out, inputs, backward_fn))
    else:
        out.requires_grad = False
        out._tape = None
    return out


def _sum_to_shape(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and scalar ops


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def back(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

    return _emit(data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def back(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(-g, b.shape)

    return _emit(data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def back(g):
        return _sum_to_shape(g * b.data, a.shape), _sum_to_shape(g * a.data, b.shape)

    return _emit(data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def shift(a: Tensor, c: float) -> Tensor:
    return _emit(a.data + c, (a,), lambda g: (g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def div_scalar(a: Tensor, c: float) -> Tensor:
    if c == 0.0:
        raise ContractError("division by zero scalar")
    return _emit(a.data / c, (a,), lambda g: (g / c,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul needs at least 2-d operands, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}"
        )
    data = np.matmul(a.data, b.data)

    def back(g):
        ga = _sum_to_shape(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        gb = _sum_to_shape(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _emit(data, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 dims, got shape {a.shape}")
    return _emit(a.data.swapaxes(-1, -2), (a,), lambda g: (g.swapaxes(-1, -2),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"permute axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    original = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {original} to {shape}") from exc
    return _emit(data, (a,), lambda g: (g.reshape(original),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from exc
    return _emit(data, (a,), lambda g: (_sum_to_shape(g, a.shape),))


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def back(g):
        return (g * (a.data > 0.0),)

    return _emit(data, (a,), back)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def back(g):
        return (g * (1.0 - data * data),)

    return _emit(data, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def back(g):
        return (g * data * (1.0 - data),)

    return _emit(data, (a,), back)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max-subtraction.

    Each output row is nonnegative and sums to 1 to within accumulated
    rounding (well under 1e-12 for the row lengths used here).
    """
    x = a.data
    if not np.isfinite(x).all():
        raise NumericError("softmax input contains NaN or Inf")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - inner),)

    return _emit(data, (a,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1] if x.ndim else 0
    if d < 2:
        raise DimensionError(f"layer_norm needs a last dimension of at least 2, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + bias.data

    def back(g):
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gain.data
        gx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, gg, gb

    return _emit(data, (x, gain, bias), back)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return a
    keep = rng.random(a.shape) >= p
    factor = keep / (1.0 - p)
    return _emit(a.data * factor, (a,), lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# structural ops


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("concat of an empty tensor list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _emit(data, tuple(tensors), back)


def stack(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("stack of an empty tensor list")
    data = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.ascontiguousarray(s) for s in np.moveaxis(g, axis, 0))

    return _emit(data, tuple(tensors), back)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    dim = a.shape[axis]
    if not (0 <= start <= stop <= dim):
        raise DimensionError(f"slice [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    index = tuple(slice(None) if i != axis else slice(start, stop) for i in range(a.ndim))
    data = np.ascontiguousarray(a.data[index])

    def back(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _emit(data, (a,), back)


def select_index(a: Tensor, axis: int, index: int) -> Tensor:
    """Take one index along ``axis``, dropping that axis."""
    dim = a.shape[axis]
    if not (0 <= index < dim):
        raise DimensionError(f"index {index} out of range for axis {axis} of {a.shape}")
    data = np.ascontiguousarray(np.take(a.data, index, axis=axis))

    def back(g):
        full = np.zeros_like(a.data)
        sel = tuple(slice(None) if i != axis else index for i in range(a.ndim))
        full[sel] = g
        return (full,)

    return _emit(data, (a,), back)


def select_positions(a: Tensor, positions: np.ndarray) -> Tensor:
    """Per-row gather: for a (B, T, ...) tensor pick position[b] from row b."""
    if a.ndim < 2:
        raise DimensionError(f"select_positions needs at least 2 dims, got {a.shape}")
    positions = np.asarray(positions, dtype=np.int64)
    batch, length = a.shape[0], a.shape[1]
    if positions.shape != (batch,):
        raise DimensionError(f"positions must have shape ({batch},), got {positions.shape}")
    if positions.size and (positions.min() < 0 or positions.max() >= length):
        raise DimensionError(f"positions out of range [0, {length}) for shape {a.shape}")
    rows = np.arange(batch)
    data = np.ascontiguousarray(a.data[rows, positions])

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, positions), g)
        return (full,)

    return _emit(data, (a,), back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: output shape is ids.shape + (row_width,)."""
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-d, got shape {table.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise DimensionError(f"embedding index out of range for table with {rows} rows")
    data = table.data[ids]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _emit(data, (table,), back)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())

    def back(g):
        return (np.full(a.shape, g[()], dtype=np.float64),)

    return _emit(data, (a,), back)


def mean_all(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ContractError("mean of an empty tensor")
    n = a.size
    data = np.asarray(a.data.sum() / n)

    def back(g):
        return (np.full(a.shape, g[()] / n, dtype=np.float64),)

    return _emit(data, (a,), back)


def _broadcast_mask(mask: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    try:
        return np.broadcast_to(mask, shape)
    except ValueError as exc:
        raise DimensionError(f"mask shape {mask.shape} does not broadcast to {shape}") from exc


def masked_sum(a: Tensor, mask: np.ndarray) -> Tensor:
    """Sum of the elements where mask is True; masked-out entries contribute
    nothing to the value or the gradient."""
    m = _broadcast_mask(mask, a.shape)
    data = np.asarray(np.where(m, a.data, 0.0).sum())

    def back(g):
        return (np.where(m, g[()], 0.0),)

    return _emit(data, (a,), back)


def masked_mean(a: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over the elements where mask is True."""
    m = _broadcast_mask(mask, a.shape)
    count = int(m.sum())
    if count == 0:
        raise ContractError("masked_mean: mask selects no elements")
    data = np.asarray(np.where(m, a.data, 0.0).sum() / count)

    def back(g):
        return (np.where(m, g[()] / count, 0.0),)

    return _emit(data, (a,), back)


# ---------------------------------------------------------------------------
# gradient checking


def numeric_gradient(loss_fn: Callable[[], Tensor], t: Tensor, step: float = 1e-4) -> Array:
    """Central finite differences of ``loss_fn()`` wrt every element of ``t``.

    ``loss_fn`` must rebuild the computation from current tensor contents;
    it is evaluated without any tape installed.
    """
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        up = loss_fn().item()
        flat[i] = saved - step
        down = loss_fn().item()
        flat[i] = saved
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def check_gradients(
    loss_fn: Callable[[], Tensor],
    named_tensors: dict[str, Tensor],
    step: float = 1e-4,
    rtol: float = 1e-3,
    atol: float = 1e-8,
) -> list[str]:
    """Compare tape gradients against finite differences.

    Returns a list of human-readable failure descriptions (empty when all
    parameters pass). A component fails when
    ``|analytic - numeric| > atol + rtol * max(|analytic|, |numeric|)``.
    """
    with tape_scope():
        loss = loss_fn()
        backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in named_tensors.items()
    }
    failures: list[str] = []
    for name, t in named_tensors.items():
        numeric = numeric_gradient(loss_fn, t, step=step)
        a, n = analytic[name], numeric
        err = np.abs(a - n)
        tol = atol + rtol * np.maximum(np.abs(a), np.abs(n))
        bad = err > tol
        if bad.any():
            worst = np.unravel_index(np.argmax(err - tol), err.shape)
            failures.append(
                f"{name}{list(worst)}: analytic={a[worst]:.6e} numeric={n[worst]:.6e} "
                f"abs_err={err[worst]:.3e}"
            )
    return failures


def math_isfinite(t: Tensor) -> bool:
    """True when every element of the tensor is finite."""
    return bool(np.isfinite(t.data).all())


__all__ = [
    "MASK_FILL_VALUE",
    "Tensor",
    "Tape",
    "tensor",
    "tape_scope",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "shift",
    "scale",
    "div_scalar",
    "matmul",
    "transpose",
    "permute",
    "reshape",
    "broadcast_to",
    "relu",
    "tanh",
    "sigmoid",
    "softmax_rows",
    "layer_norm",
    "dropout",
    "concat",
    "stack",
    "slice_axis",
    "select_index",
    "select_positions",
    "embedding",
    "sum_all",
    "mean_all",
    "masked_sum",
    "masked_mean",
    "numeric_gradient",
    "check_gradients",
    "math_isfinite",
]
