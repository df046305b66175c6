"""
Forward ops with their backward rules

Each op computes its output with numpy, checks it is finite and, when any
input requires a gradient, records a Node whose closure maps the output
gradient to one gradient per input (None for constants).
"""

from __future__ import annotations

import math
from typing import Any, Callable, Sequence

import numpy as np

from numcore.tensor import Node, Tensor, current_graph, grad_enabled
from utils.errors import DimensionError, IntegrityError, NumericError, UsageError

# Additive mask for inadmissible attention entries
MASK_VALUE = -1e9

Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, backward: Backward) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{kind} produced non-finite values")
    needs_grad = grad_enabled() and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs_grad)
    if needs_grad:
        current_graph().record(Node(kind, tuple(inputs), result, backward))
    return result


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``"""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(kind: str, *shapes: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as e:
        raise DimensionError(f"{kind}: shapes {shapes} do not broadcast") from e


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (leading axes broadcast)"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    x, y = a.data, b.data

    def backward(g: np.ndarray):
        ga = unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", (a, b), x @ y, backward)


def _parse_einsum(spec: str) -> tuple[str, str, str]:
    try:
        lhs, out = spec.replace(" ", "").split("->")
        left, right = lhs.split(",")
    except ValueError as e:
        raise UsageError(f"einsum spec must look like 'ab,bc->ac', got {spec!r}") from e
    for name, sub in (("left", left), ("right", right), ("output", out)):
        if len(set(sub)) != len(sub):
            raise UsageError(f"einsum {name} operand repeats an index: {spec!r}")
    for idx in left:
        if idx not in right and idx not in out:
            raise UsageError(f"einsum index {idx!r} must appear in the other operand or the output")
    for idx in right:
        if idx not in left and idx not in out:
            raise UsageError(f"einsum index {idx!r} must appear in the other operand or the output")
    return left, right, out


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand Einstein summation"""
    a, b = as_tensor(a), as_tensor(b)
    left, right, out = _parse_einsum(spec)
    try:
        result = np.einsum(spec, a.data, b.data, optimize=True)
    except ValueError as e:
        raise DimensionError(f"einsum {spec!r}: {a.shape} and {b.shape} do not conform") from e
    x, y = a.data, b.data

    def backward(g: np.ndarray):
        ga = np.einsum(f"{out},{right}->{left}", g, y, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out},{left}->{right}", g, x, optimize=True) if b.requires_grad else None
        return ga, gb

    return _emit("einsum", (a, b), np.asarray(result), backward)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Dot product along the last axis (leading axes broadcast)"""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1:] != b.shape[-1:]:
        raise DimensionError(f"dot: last axes differ, {a.shape} vs {b.shape}")
    _broadcast_shape("dot", a.shape, b.shape)
    x, y = a.data, b.data

    def backward(g: np.ndarray):
        ge = g[..., None]
        ga = unbroadcast(ge * y, x.shape) if a.requires_grad else None
        gb = unbroadcast(ge * x, y.shape) if b.requires_grad else None
        return ga, gb

    return _emit("dot", (a, b), np.sum(x * y, axis=-1), backward)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g: np.ndarray):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return _emit("add", (a, b), a.data + b.data, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g: np.ndarray):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return _emit("sub", (a, b), a.data - b.data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    x, y = a.data, b.data

    def backward(g: np.ndarray):
        ga = unbroadcast(g * y, x.shape) if a.requires_grad else None
        gb = unbroadcast(g * x, y.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", (a, b), x * y, backward)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scalar_mul", (a,), a.data * c, lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    active = a.data > 0
    return _emit("relu", (a,), np.where(active, a.data, 0.0), lambda g: (g * active,))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    # tanh form is stable for large |x| and gives exactly 0.5 at 0
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) without the underflow of composing log and sigmoid"""
    a = as_tensor(a)
    x = a.data
    out = -np.logaddexp(0.0, -x)

    def backward(g: np.ndarray):
        return (g * 0.5 * (np.tanh(-0.5 * x) + 1.0),)

    return _emit("log_sigmoid", (a,), out, backward)


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _emit("log", (a,), out, lambda g: (g / x,))


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or when p == 0"""
    a = as_tensor(a)
    if not train or p <= 0.0:
        return a
    if rng is None:
        raise UsageError("dropout in train mode needs a random generator")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _emit("dropout", (a,), a.data * keep, lambda g: (g * keep,))


def squared_error(a: Tensor, b: Tensor) -> Tensor:
    """Squared euclidean distance along the last axis"""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("squared_error", a.shape, b.shape)
    diff = a.data - b.data

    def backward(g: np.ndarray):
        gd = 2.0 * g[..., None] * diff
        ga = unbroadcast(gd, a.shape) if a.requires_grad else None
        gb = unbroadcast(-gd, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("squared_error", (a, b), np.sum(diff * diff, axis=-1), backward)


# ---------------------------------------------------------------------------
# Reductions and normalisation
# ---------------------------------------------------------------------------

def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def total(a: Tensor, axis: int | None = None) -> Tensor:
    """Sum over one axis, or over everything when axis is None"""
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return _emit("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = _norm_axis(axis, a.ndim)

    def backward(g: np.ndarray):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _emit("sum", (a,), a.data.sum(axis=ax), backward)


def mean(a: Tensor, axis: int) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    n = a.shape[ax]
    if n == 0:
        raise DimensionError("mean over an empty axis")
    shape = a.shape

    def backward(g: np.ndarray):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, shape).copy(),)

    return _emit("mean", (a,), a.data.mean(axis=ax), backward)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis

    ``mask`` (broadcastable, True = admissible) is applied additively with
    MASK_VALUE before exponentiation. Inadmissible entries come out exactly 0
    and a row with no admissible entry is all zeros.
    """
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        admissible = np.broadcast_to(np.asarray(mask, dtype=bool), _broadcast_shape("softmax", x.shape, np.shape(mask)))
        if admissible.shape != x.shape:
            raise DimensionError(f"softmax: mask {np.shape(mask)} widens input {x.shape}")
        x = x + np.where(admissible, 0.0, MASK_VALUE)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    if mask is not None:
        out = np.where(admissible, out, 0.0)

    def backward(g: np.ndarray):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _emit("softmax", (a,), out, backward)


def layer_norm(a: Tensor, eps: float) -> Tensor:
    """(x - mean) / sqrt(var + eps) over the last axis; scale and bias are separate ops"""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g: np.ndarray):
        g_mean = g.mean(axis=-1, keepdims=True)
        gx_mean = np.mean(g * xhat, axis=-1, keepdims=True)
        return (inv_std * (g - g_mean - xhat * gx_mean),)

    return _emit("layer_norm", (a,), xhat, backward)


# ---------------------------------------------------------------------------
# Shape and indexing
# ---------------------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along the last axis"""
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise UsageError("concat of an empty list")
    if axis not in (-1, parts[0].ndim - 1):
        raise UsageError("concat only supports the last axis")
    lead = parts[0].shape[:-1]
    for t in parts[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(f"concat: leading shapes differ, {parts[0].shape} vs {t.shape}")
    splits = np.cumsum([t.shape[-1] for t in parts])[:-1]

    def backward(g: np.ndarray):
        return tuple(np.split(g, splits, axis=-1))

    return _emit("concat", parts, np.concatenate([t.data for t in parts], axis=-1), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from e
    original = a.shape
    return _emit("reshape", (a,), out, lambda g: (g.reshape(original),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inverse),))


def _check_indices(indices: np.ndarray, size: int, what: str) -> np.ndarray:
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise UsageError(f"{what} indices must be integers, got {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise IntegrityError(f"{what} index out of range [0, {size}): min {idx.min()}, max {idx.max()}")
    return idx


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup; the backward pass scatter-adds output gradients into the table"""
    table = as_tensor(table)
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-d, got {table.shape}")
    idx = _check_indices(indices, table.shape[0], "embedding")
    rows, width = table.shape

    def backward(g: np.ndarray):
        grad = np.zeros((rows, width))
        np.add.at(grad, idx.reshape(-1), g.reshape(-1, width))
        return (grad,)

    return _emit("embedding", (table,), table.data[idx], backward)


def _flat_bins(idx: np.ndarray, size: int) -> np.ndarray:
    """Flat bin number for every entry of idx: (leading position, index value)"""
    lead = int(np.prod(idx.shape[:-1], dtype=np.int64))
    offsets = np.arange(lead, dtype=np.int64)[:, None] * size
    return (offsets + idx.reshape(lead, -1)).reshape(-1)


def gather_last(a: Tensor, indices: np.ndarray) -> Tensor:
    """out[..., j] = a[..., indices[..., j]]; indices broadcast over leading axes"""
    a = as_tensor(a)
    idx = _check_indices(indices, a.shape[-1], "gather")
    target = _broadcast_shape("gather", a.shape[:-1], idx.shape[:-1]) + idx.shape[-1:]
    if target[:-1] != a.shape[:-1]:
        raise DimensionError(f"gather: indices {idx.shape} widen input {a.shape}")
    idx = np.broadcast_to(idx, target)
    size = a.shape[-1]
    shape = a.shape

    def backward(g: np.ndarray):
        bins = _flat_bins(idx, size)
        grad = np.bincount(bins, weights=g.reshape(-1), minlength=int(np.prod(shape)))
        return (grad.reshape(shape),)

    return _emit("gather", (a,), np.take_along_axis(a.data, idx, axis=-1), backward)


def scatter_last(a: Tensor, indices: np.ndarray, size: int) -> Tensor:
    """out[..., r] = sum of a[..., j] over j with indices[..., j] == r

    The transpose of gather_last: it buckets attention weights by relative
    index so value-side encodings can be read from the table directly.
    """
    a = as_tensor(a)
    idx = _check_indices(indices, size, "scatter")
    idx = np.broadcast_to(idx, _broadcast_shape("scatter", a.shape, idx.shape))
    if idx.shape != a.shape:
        raise DimensionError(f"scatter: indices {idx.shape} widen input {a.shape}")
    out_shape = a.shape[:-1] + (size,)
    bins = _flat_bins(idx, size)
    out = np.bincount(bins, weights=a.data.reshape(-1), minlength=int(np.prod(out_shape)))

    def backward(g: np.ndarray):
        return (np.take_along_axis(g, idx, axis=-1),)

    return _emit("scatter", (a,), out.reshape(out_shape), backward)


def frobenius_sq(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of squared entries over a list of tensors"""
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        return Tensor(0.0)
    value = math.fsum(float(np.sum(t.data * t.data)) for t in parts)

    def backward(g: np.ndarray):
        return tuple(2.0 * g * t.data for t in parts)

    return _emit("frobenius_sq", parts, np.asarray(value), backward)


def forward_op(kind: str, inputs: Sequence[Any], **kwargs: Any) -> Tensor:
    """Dispatch an op by name"""
    try:
        fn = OPS[kind]
    except KeyError as e:
        raise UsageError(f"unknown op kind {kind!r}; known: {sorted(OPS)}") from e
    if kind == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "einsum": einsum,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar_mul": scalar_mul,
    "concat": concat,
    "relu": relu,
    "sigmoid": sigmoid,
    "log_sigmoid": log_sigmoid,
    "softmax": softmax,
    "mean": mean,
    "sum": total,
    "embedding": embedding,
    "layer_norm": layer_norm,
    "dot": dot,
    "squared_error": squared_error,
    "log": log,
    "dropout": dropout,
    "reshape": reshape,
    "transpose": transpose,
    "gather": gather_last,
    "scatter": scatter_last,
}
