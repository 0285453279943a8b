"""Dense tensors with tape-based reverse-mode differentiation.

Operations are recorded onto the innermost active :class:`Tape` only when at
least one input requires a gradient; outside a tape everything runs as plain
numpy. Broadcasting follows numpy semantics and the backward rules reduce
gradients back onto the original operand shapes.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

DEFAULT_DTYPE = np.float32

_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """A non-finite value was produced."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _debug_enabled() -> bool:
    return getattr(_local, "debug", False)


@contextmanager
def detect_nonfinite(enabled: bool = True):
    """Check every op output for NaN/Inf while the context is active."""
    prev = _debug_enabled()
    _local.debug = enabled
    try:
        yield
    finally:
        _local.debug = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
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
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ``backward`` may be called once per tape.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._done = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, out: Tensor, parents, backward) -> None:
        out._tape = self
        self.nodes.append(_Node(out, parents, backward))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf."""
        if self._done:
            raise TapeError("backward already ran on this tape; record a new one")
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape (detached graph)")
        self._done = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if p._tape is not self:
                    leaves[key] = p

        result = {}
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = g.astype(leaf.dtype, copy=False)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            result[leaf] = leaf.grad
        self.nodes.clear()
        return result


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# op plumbing


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _make(data: np.ndarray, parents: Sequence, backward: Callable) -> Tensor:
    out = Tensor(data)
    if _debug_enabled() and not np.all(np.isfinite(out.data)):
        raise NumericError(f"non-finite values produced by {backward.__qualname__.split('.')[0]}")
    stack = _tape_stack()
    if stack and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        out.requires_grad = True
        stack[-1]._record(out, tuple(parents), backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "add")

    def add_backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), add_backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "sub")

    def sub_backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), sub_backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "mul")

    def mul_backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), mul_backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def div_backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), div_backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2 * g * a.data,))


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from None

    def matmul_backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(np.matmul(a.data, b.data), (a, b), matmul_backward)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)

    def sum_backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), sum_backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def flip(a: Tensor, axis: int) -> Tensor:
    return _make(np.flip(a.data, axis), (a,), lambda g: (np.flip(g, axis),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def getitem_backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), getitem_backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def concat_backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, concat_backward)


def pad_axis(a: Tensor, axis: int, before: int, after: int = 0) -> Tensor:
    """Zero-pad one axis."""
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    n = a.shape[axis]

    def pad_backward(g):
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(before, before + n)
        return (g[tuple(sl)],)

    return _make(np.pad(a.data, widths), (a,), pad_backward)


def take_rows(table: Tensor, indices) -> Tensor:
    """Embedding lookup: ``table[indices]`` along the first axis."""
    indices = np.asarray(indices)

    def take_backward(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, indices, g)
        return (full,)

    return _make(table.data[indices], (table,), take_backward)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise NumericError("exp overflowed")
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return _make(s, (a,), lambda g: (g * s * (1 - s),))


def softplus(a: Tensor) -> Tensor:
    return _make(np.logaddexp(0, a.data).astype(a.dtype), (a,), lambda g: (g * expit(a.data),))


def silu(a: Tensor) -> Tensor:
    s = expit(a.data)
    return _make(a.data * s, (a,), lambda g: (g * s * (1 + a.data * (1 - s)),))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))

    def gelu_backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, (a,), gelu_backward)


PHI1_SERIES_BELOW = 1e-4


def phi1_array(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z with a 3-term series near zero."""
    small = np.abs(z) < PHI1_SERIES_BELOW
    if not small.any():
        return np.expm1(z) / z
    safe = np.where(small, 1.0, z)
    out = np.expm1(safe) / safe
    zs = z[small]
    out[small] = 1.0 + zs * (0.5 + zs / 6)
    return out.astype(z.dtype, copy=False)


def _phi1_grad(z: np.ndarray, value: np.ndarray) -> np.ndarray:
    # d/dz phi1 = (exp(z) - phi1(z)) / z; cancellation below 1e-2 so use 5 terms there
    small = np.abs(z) < 1e-2
    if not small.any():
        return (np.exp(z) - value) / z
    safe = np.where(small, 1.0, z)
    out = (np.exp(safe) - np.where(small, 1.0, value)) / safe
    zs = z[small]
    out[small] = 0.5 + zs * (1 / 3 + zs * (1 / 8 + zs * (1 / 30 + zs / 144)))
    return out.astype(z.dtype, copy=False)


def phi1(a: Tensor) -> Tensor:
    out = phi1_array(a.data)
    return _make(out, (a,), lambda g: (g * _phi1_grad(a.data, out),))


# ---------------------------------------------------------------------------
# normalisation


def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    y = softmax_array(a.data, axis)

    def softmax_backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), softmax_backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def log_softmax_backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), log_softmax_backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain over the last axis."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if x.shape[-1] != gain.shape[-1] or gain.ndim != 1:
        raise DimensionError(f"rms_norm gain {gain.shape} does not match last extent of {x.shape}")
    xd = x.data
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    n = xd * r

    def rms_norm_backward(g):
        dn = g * gain.data
        dx = r * (dn - n * (dn * n).mean(axis=-1, keepdims=True))
        dgain = (g * n).reshape(-1, gain.shape[0]).sum(axis=0)
        return dx, dgain

    return _make(n * gain.data, (x, gain), rms_norm_backward)


# ---------------------------------------------------------------------------
# linear recurrence


def scan_chunked_array(a: np.ndarray, b: np.ndarray, chunk_len: int, axis: int = 0) -> np.ndarray:
    """h_t = a_t * h_{t-1} + b_t along ``axis`` with h_{-1} = 0.

    Chunks are scanned locally in parallel, chunk-final states are carried
    serially, then each chunk is corrected with its incoming carry.
    """
    if chunk_len < 1:
        raise ValueError("chunk_len must be >= 1")
    a, b = np.broadcast_arrays(a, b)
    a = np.ascontiguousarray(np.moveaxis(a, axis, 0))
    b = np.ascontiguousarray(np.moveaxis(b, axis, 0))
    length = a.shape[0]
    rest = a.shape[1:]
    dtype = np.result_type(a, b)
    c = min(chunk_len, max(length, 1))
    n_chunks = -(-length // c)
    padded = n_chunks * c
    if padded != length:
        fill = [(0, padded - length)] + [(0, 0)] * len(rest)
        a = np.pad(a, fill, constant_values=1)
        b = np.pad(b, fill)
    a = a.reshape((n_chunks, c) + rest)
    b = b.reshape((n_chunks, c) + rest)

    local = np.empty((n_chunks, c) + rest, dtype=dtype)
    decay = np.empty_like(local)
    local[:, 0] = b[:, 0]
    decay[:, 0] = a[:, 0]
    for i in range(1, c):
        np.multiply(a[:, i], local[:, i - 1], out=local[:, i])
        local[:, i] += b[:, i]
        np.multiply(a[:, i], decay[:, i - 1], out=decay[:, i])

    h = np.empty_like(local)
    carry = np.zeros(rest, dtype=dtype)
    for k in range(n_chunks):
        h[k] = local[k] + decay[k] * carry
        carry = h[k, c - 1]
    h = h.reshape((padded,) + rest)[:length]
    return np.moveaxis(h, 0, axis)


def shift_forward(x: np.ndarray, axis: int) -> np.ndarray:
    """``out[t] = x[t-1]`` along ``axis`` with a zero first slice."""
    out = np.zeros_like(x)
    src = [slice(None)] * x.ndim
    dst = [slice(None)] * x.ndim
    src[axis] = slice(0, -1)
    dst[axis] = slice(1, None)
    out[tuple(dst)] = x[tuple(src)]
    return out


def reverse_scan_array(a: np.ndarray, g: np.ndarray, chunk_len: int, axis: int = 0) -> np.ndarray:
    """Adjoint of the recurrence: ``lam_t = g_t + a_{t+1} * lam_{t+1}``."""
    axis = axis % a.ndim
    a_next_rev = shift_forward(np.flip(a, axis), axis)
    return np.flip(scan_chunked_array(a_next_rev, np.flip(g, axis), chunk_len, axis), axis)


def default_chunk(length: int) -> int:
    return max(1, int(round(np.sqrt(length))))


def linear_scan(a: Tensor, b: Tensor, axis: int = 0, chunk_len: int | None = None) -> Tensor:
    """Differentiable first-order linear recurrence along ``axis``.

    The backward pass is itself a reversed scan of the same kind.
    """
    if a.shape != b.shape:
        raise DimensionError(f"linear_scan operands differ: {a.shape} vs {b.shape}")
    axis = axis % a.ndim
    length = a.shape[axis]
    c = chunk_len or default_chunk(length)
    h = scan_chunked_array(a.data, b.data, c, axis)

    def linear_scan_backward(g):
        adj = reverse_scan_array(a.data, g, c, axis)
        return adj * shift_forward(h, axis), adj

    return _make(h, (a, b), linear_scan_backward)


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-4,
    max_per_input: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps the tensors in ``inputs`` to a scalar. Inputs should be
    float64. With ``max_per_input`` set, that many coordinates per input are
    sampled instead of checking every element.
    """
    inputs = list(inputs)
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    if out.data.size != 1:
        raise TapeError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
    tape.backward(out)
    rng = rng or np.random.default_rng(0)

    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_per_input is not None and flat.size > max_per_input:
            coords = rng.choice(flat.size, size=max_per_input, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(fn(*inputs).data)
            flat[i] = orig - h
            f_minus = float(fn(*inputs).data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def parameters_like(arrays: Iterable[np.ndarray], dtype=np.float64) -> list[Tensor]:
    return [Tensor(np.array(x, dtype=dtype), requires_grad=True) for x in arrays]
