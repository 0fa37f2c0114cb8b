"""Define-by-run reverse-mode automatic differentiation over numpy arrays.

Operations record themselves on the innermost active :class:`Tape` whenever
at least one input requires a gradient. Outside a tape everything is a plain
forward evaluation.

    >>> x = Tensor(np.array(3.0), requires_grad=True)
    >>> with Tape() as tape:
    ...     y = x * x
    >>> tape.backward(y)[x]
    array(6.)

Elementwise operations follow numpy broadcasting; the gradient is summed back
to the operand shape.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    dtype = property(lambda self: self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    vjp: Callable


class Tape:
    """Ordered record of differentiable operations (one per training step)."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()

    def leaves(self) -> list[Tensor]:
        produced = {id(r.out) for r in self.records}
        seen, out = set(), []
        for r in self.records:
            for t in r.inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out

    def backward(self, output: Tensor) -> "Gradients":
        return backward(self, output)


class Gradients(dict):
    """Mapping from leaf tensors (by identity) to gradient arrays."""

    def __getitem__(self, t: Tensor):
        return super().__getitem__(id(t))

    def get(self, t: Tensor, default=None):
        return super().get(id(t), default)


def backward(tape: Tape, output: Tensor) -> Gradients:
    """Reverse sweep; sets ``.grad`` on every tracked leaf and returns them.

    Leaves recorded on the tape that do not influence ``output`` get zeros.
    """
    if output.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result = Gradients()
    for leaf in tape.leaves():
        g = grads.get(id(leaf))
        leaf.grad = np.zeros_like(leaf.data) if g is None else g.astype(leaf.data.dtype, copy=False)
        dict.__setitem__(result, id(leaf), leaf.grad)
    if output.requires_grad and not tape.records:
        output.grad = np.ones_like(output.data)
        dict.__setitem__(result, id(output), output.grad)
    return result


# ---------------------------------------------------------------------------
# helpers


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None and np.isscalar(x) else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out_data, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    stack = _tape_stack()
    track = bool(stack) and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        stack[-1].records.append(_Record(out, tuple(inputs), vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shapes(a, b, "add")
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shapes(a, b, "sub")
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shapes(a, b, "mul")
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shapes(a, b, "div")
    out = a.data / b.data
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g / (2 * out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1 - out * out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1 + t)

    def vjp(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return _record(out, (a,), vjp)


def where(mask, a, b) -> Tensor:
    """Select with a constant boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        np.where(mask, a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(mask, g, 0), a.shape),
            _unbroadcast(np.where(mask, 0, g), b.shape),
        ),
    )


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _record(out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    # contiguous output keeps downstream batched matmuls on the fast path
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    inv = None if axes is None else np.argsort(axes)
    return _record(out, (a,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _record(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ts = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in ts]
    return concat(ts, axis=axis)


def slice_(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g) if _is_advanced(idx) else full.__setitem__(idx, g)
        return (full,)

    return _record(out, (a,), vjp)


def _is_advanced(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def pad_to(a, shape, fill: float = 0.0) -> Tensor:
    """Place ``a`` in the leading corner of a ``fill``-valued array."""
    a = as_tensor(a)
    out = np.full(shape, fill, dtype=a.data.dtype)
    region = tuple(slice(0, n) for n in a.shape)
    out[region] = a.data
    return _record(out, (a,), lambda g: (g[region],))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), vjp)


def einsum(subscripts: str, *operands) -> Tensor:
    """Explicit-output einsum; every operand index must appear elsewhere."""
    ts = [as_tensor(t) for t in operands]
    lhs, rhs = subscripts.replace(" ", "").split("->")
    ins = lhs.split(",")
    if len(ins) != len(ts):
        raise ValueError(f"einsum: {len(ins)} subscripts for {len(ts)} operands")
    for i, s in enumerate(ins):
        others = set(rhs).union(*(ins[j] for j in range(len(ins)) if j != i))
        if not set(s) <= others or len(set(s)) != len(s):
            raise ValueError(f"einsum: unsupported subscripts {subscripts!r}")
    try:
        out = np.einsum(subscripts, *(t.data for t in ts), optimize=len(ts) > 2)
    except ValueError as e:
        raise ValueError(f"einsum: {e} (shapes {[t.shape for t in ts]})") from None

    def vjp(g):
        grads = []
        for i, t in enumerate(ts):
            if not t.requires_grad:
                grads.append(None)
                continue
            spec = ",".join([rhs] + [ins[j] for j in range(len(ts)) if j != i]) + "->" + ins[i]
            args = [g] + [ts[j].data for j in range(len(ts)) if j != i]
            grads.append(np.einsum(spec, *args, optimize=len(args) > 2))
        return grads

    return _record(out, ts, vjp)


def bilinear(a, b, table: np.ndarray) -> Tensor:
    """``y_k = sum_ij a_i b_j table_ijk`` contracting the FIRST axis of ``a`` and ``b``.

    Evaluated as ``sum_j b_j L(a)_jk`` with ``L(a)_jk = sum_i a_i table_ijk``,
    which avoids materializing the full outer product.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"bilinear: operand shapes differ, {a.shape} and {b.shape}")
    n, m = table.shape[0], table.shape[2]
    if a.shape[0] != n or table.shape[1] != n:
        raise ValueError(f"bilinear: table of shape {table.shape} does not match operands {a.shape}")
    t = np.asarray(table, dtype=a.dtype)
    rest = a.shape[1:]
    a2, b2 = a.data.reshape(n, -1), b.data.reshape(n, -1)
    left = (np.ascontiguousarray(t.transpose(1, 2, 0)).reshape(n * m, n) @ a2).reshape(n, m, -1)
    out = np.einsum("jr,jkr->kr", b2, left).reshape((m,) + rest)

    def vjp(g):
        g2 = g.reshape(m, -1)
        ga = gb = None
        if a.requires_grad:
            right = (np.ascontiguousarray(t.transpose(0, 2, 1)).reshape(n * m, n) @ b2).reshape(n, m, -1)
            ga = np.einsum("kr,ikr->ir", g2, right).reshape(a.shape)
        if b.requires_grad:
            gb = np.einsum("kr,jkr->jr", g2, left).reshape(b.shape)
        return ga, gb

    return _record(out, (a, b), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), vjp)


def gather(a, indices, axis: int = 0) -> Tensor:
    """``a`` indexed by an integer array along ``axis``; duplicates accumulate."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim > 1 and axis != 0:
        raise ValueError("gather: multi-dimensional indices are only supported on axis 0")
    out = np.take(a.data, idx, axis=axis)

    def vjp(g):
        return (_scatter(g, idx, a.shape[axis], axis),)

    return _record(out, (a,), vjp)


def _scatter(src: np.ndarray, idx: np.ndarray, size: int, axis: int) -> np.ndarray:
    axis = axis % src.ndim if idx.ndim == 1 else axis
    moved = np.moveaxis(src, axis, 0) if idx.ndim == 1 else src
    flat_idx = idx.reshape(-1)
    rest = moved.shape[idx.ndim:] if idx.ndim > 1 else moved.shape[1:]
    vals = moved.reshape((flat_idx.size,) + rest)
    # one-hot matmul is deterministic and much faster than np.add.at
    onehot = np.zeros((size, flat_idx.size), dtype=src.dtype)
    onehot[flat_idx, np.arange(flat_idx.size)] = 1
    out = (onehot @ vals.reshape(flat_idx.size, -1)).reshape((size,) + rest)
    return np.moveaxis(out, 0, axis) if idx.ndim == 1 else out


def scatter_add(src, indices, size: int, axis: int = 0) -> Tensor:
    """Sum slices of ``src`` into ``size`` slots along ``axis``; adjoint of gather."""
    src = as_tensor(src)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or src.shape[axis] != idx.size:
        raise ValueError(f"scatter_add: indices of shape {idx.shape} do not match {src.shape} on axis {axis}")
    out = _scatter(src.data, idx, size, axis)
    return _record(out, (src,), lambda g: (np.take(g, idx, axis=axis),))


# ---------------------------------------------------------------------------
# checking


@dataclass
class GradcheckReport:
    max_rel_error: float
    per_input: list[float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-6,
    tolerance: float = 1e-5,
    floor: float = 1e-8,
) -> GradcheckReport:
    """Compare reverse-mode gradients with central differences (float64).

    The deviation per input is ``max|g_ad - g_fd| / max(max|g_ad|, max|g_fd|, floor)``
    and 0 when both gradients vanish. The floor keeps rounding noise in the
    differences from counting as a full error when the true gradient is zero
    (for example biases that only shift softmax logits).
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(x.copy(), requires_grad=True) for x in arrays]
    with Tape() as tape:
        out = f(*leaves)
    if out.data.size != 1:
        raise ValueError(f"gradcheck needs a scalar function, got shape {out.shape}")
    if out.requires_grad:
        tape.backward(out)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    errors = []
    for i, x in enumerate(arrays):
        numeric = np.zeros_like(x)
        flat = numeric.reshape(-1)
        for j in range(x.size):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i].reshape(-1)[j] += step
            minus[i].reshape(-1)[j] -= step
            fp = float(f(*[Tensor(a) for a in plus]).data)
            fm = float(f(*[Tensor(a) for a in minus]).data)
            flat[j] = (fp - fm) / (2 * step)
        scale = max(np.abs(analytic[i]).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        diff = np.abs(analytic[i] - numeric).max(initial=0.0)
        errors.append(0.0 if scale == 0.0 else float(diff / max(scale, floor)))
    return GradcheckReport(max(errors, default=0.0), errors, tolerance)
