"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array.  Operations executed while a
:class:`Tape` is active, and with at least one input that requires a
gradient, are appended to that tape together with whatever they need for
their backward pass.  :func:`backward` then walks the tape in reverse.

Gradient rules live in :data:`GRAD_RULES`, keyed by op name, so a single rule
can be swapped out (the gradcheck tests do this to prove the checker notices).

Mixer tensors are laid out channels x tokens (``d x N``), optionally with a
leading batch axis (``B x d x N``).
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from scipy.special import erf, expit

from .errors import DimensionError, NumericError, ParameterError, UsageError

DEFAULT_DTYPE = np.float64
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {where}")
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_record")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype != np.float32:
                arr = arr.astype(DEFAULT_DTYPE, copy=False)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = _check_finite(arr, name or "tensor construction")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._record: _Record | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> dict[Tensor, np.ndarray]:
        return backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    ctx: dict[str, Any]
    tape: "Tape"
    index: int


@dataclass
class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; a tape belongs to the thread that entered it.
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _emit(op: str, inputs: tuple[Tensor, ...], value: np.ndarray, **ctx) -> Tensor:
    result = Tensor.__new__(Tensor)
    result.data = _check_finite(value, op)
    result.grad = None
    result.name = None
    result._record = None
    tape = active_tape()
    result.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    if result.requires_grad:
        rec = _Record(op, inputs, result, ctx, tape, len(tape.records))
        tape.records.append(rec)
        result._record = rec
    return result


GradRule = Callable[[dict, tuple, np.ndarray], tuple]
GRAD_RULES: dict[str, GradRule] = {}


def grad_rule(name: str):
    def register(fn: GradRule) -> GradRule:
        GRAD_RULES[name] = fn
        return fn

    return register


def backward(output: Tensor) -> dict[Tensor, np.ndarray]:
    """Back-propagate from a scalar ``output``.

    Leaf tensors with ``requires_grad`` have their ``.grad`` accumulated
    (added to any existing value).  Returns a mapping from each reached leaf
    to the gradient contributed by this call.
    """
    if output.size != 1:
        raise UsageError(f"backward needs a scalar output, got shape {output.shape}")
    rec = output._record
    if rec is None:
        raise UsageError("output was not produced under an active tape")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    for r in reversed(rec.tape.records[: rec.index + 1]):
        g = grads.pop(id(r.output), None)
        if g is None:
            continue
        in_grads = GRAD_RULES[r.op](r.ctx, tuple(t.data for t in r.inputs), g)
        for t, gi in zip(r.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._record is None:
                key = id(t)
                if key in leaves:
                    leaves[key] = (t, leaves[key][1] + gi)
                else:
                    leaves[key] = (t, gi)
            else:
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
    result = {}
    for t, g in leaves.values():
        t.grad = g.copy() if t.grad is None else t.grad + g
        result[t] = g
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", (a, b), a.data + b.data)


@grad_rule("add")
def _add_grad(ctx, xs, g):
    return _unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("sub", (a, b), a.data - b.data)


@grad_rule("sub")
def _sub_grad(ctx, xs, g):
    return _unbroadcast(g, xs[0].shape), -_unbroadcast(g, xs[1].shape)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("mul", (a, b), a.data * b.data)


@grad_rule("mul")
def _mul_grad(ctx, xs, g):
    a, b = xs
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("div", (a, b), a.data / b.data)


@grad_rule("div")
def _div_grad(ctx, xs, g):
    a, b = xs
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", (a,), -a.data)


@grad_rule("neg")
def _neg_grad(ctx, xs, g):
    return (-g,)


# ---------------------------------------------------------------------------
# linear algebra


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; a leading batch axis is allowed on either side."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim > 3 or b.ndim > 3:
        raise DimensionError(f"matmul expects 2-D or 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    return _emit("matmul", (a, b), np.matmul(a.data, b.data))


@grad_rule("matmul")
def _matmul_grad(ctx, xs, g):
    a, b = xs
    da = _unbroadcast(np.matmul(g, _swap(b)), a.shape)
    db = _unbroadcast(np.matmul(_swap(a), g), b.shape)
    return da, db


def block_matmul(w, x) -> Tensor:
    """Multiply ``x`` by the block-diagonal matrix ``diag(w[0], ..., w[g-1])``.

    ``w`` has shape ``(g, m, k)``; ``x`` has shape ``(..., g*k, N)`` and its
    rows are split into ``g`` contiguous groups of ``k``.  The result has
    shape ``(..., g*m, N)``.  The block-diagonal matrix is never formed.
    """
    w, x = as_tensor(w), as_tensor(x)
    if w.ndim != 3:
        raise DimensionError(f"block weights must be (groups, rows, cols), got {w.shape}")
    g, m, k = w.shape
    if x.ndim not in (2, 3) or x.shape[-2] != g * k:
        raise DimensionError(f"input {x.shape} does not match {g} blocks of width {k}")
    lead, n = x.shape[:-2], x.shape[-1]
    xg = x.data.reshape(*lead, g, k, n)
    out = np.matmul(w.data, xg).reshape(*lead, g * m, n)
    return _emit("block_matmul", (w, x), out)


@grad_rule("block_matmul")
def _block_matmul_grad(ctx, xs, g_out):
    w, x = xs
    g, m, k = w.shape
    lead, n = x.shape[:-2], x.shape[-1]
    gg = g_out.reshape(*lead, g, m, n)
    xg = x.reshape(*lead, g, k, n)
    dx = np.matmul(_swap(w), gg).reshape(x.shape)
    dw = np.matmul(gg, _swap(xg))
    if dw.ndim == 4:
        dw = dw.sum(axis=0)
    return dw, dx


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    return _emit("transpose", (x,), _swap(x.data))


@grad_rule("transpose")
def _transpose_grad(ctx, xs, g):
    return (_swap(g),)


def permute(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    return _emit("permute", (x,), np.transpose(x.data, axes), axes=axes)


@grad_rule("permute")
def _permute_grad(ctx, xs, g):
    return (np.transpose(g, np.argsort(ctx["axes"])),)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _emit("reshape", (x,), out)


@grad_rule("reshape")
def _reshape_grad(ctx, xs, g):
    return (g.reshape(xs[0].shape),)


def take(x, index, axis: int) -> Tensor:
    """Select entries along ``axis`` by integer ``index`` (gather)."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    return _emit("take", (x,), np.take(x.data, index, axis=axis), index=index, axis=axis)


@grad_rule("take")
def _take_grad(ctx, xs, g):
    axis = ctx["axis"] % xs[0].ndim
    dx = np.zeros_like(xs[0])
    np.add.at(np.moveaxis(dx, axis, 0), ctx["index"], np.moveaxis(g, axis, 0))
    return (dx,)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return _emit("sum", (x,), np.sum(x.data, axis=axis, keepdims=keepdims), axis=axis, keepdims=keepdims)


@grad_rule("sum")
def _sum_grad(ctx, xs, g):
    axis, shape = ctx["axis"], xs[0].shape
    if axis is not None and not ctx["keepdims"]:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / float(count))


# ---------------------------------------------------------------------------
# nonlinearities


def gelu(x) -> Tensor:
    """Exact GELU, ``0.5 * x * (1 + erf(x / sqrt(2)))``."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    return _emit("gelu", (x,), x.data * cdf, cdf=cdf)


@grad_rule("gelu")
def _gelu_grad(ctx, xs, g):
    x = xs[0]
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (g * (ctx["cdf"] + x * pdf),)


def identity(x) -> Tensor:
    return as_tensor(x)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return _emit("sigmoid", (x,), out, out=out)


@grad_rule("sigmoid")
def _sigmoid_grad(ctx, xs, g):
    s = ctx["out"]
    return (g * s * (1.0 - s),)


def softmax_rows(m, tau: float = 1.0) -> Tensor:
    """Row-wise softmax of ``m / tau`` (over the last axis), max-shifted."""
    if not tau > 0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    m = as_tensor(m)
    z = m.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return _emit("softmax_rows", (m,), out, out=out, tau=tau)


@grad_rule("softmax_rows")
def _softmax_rows_grad(ctx, xs, g):
    s = ctx["out"]
    return ((g - (g * s).sum(axis=-1, keepdims=True)) * s / ctx["tau"],)


def layer_norm(x, axis: int = -2, eps: float = 1e-6) -> Tensor:
    """Center and scale ``x`` to unit variance along ``axis`` (no affine part)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv
    return _emit("layer_norm", (x,), xhat, xhat=xhat, inv=inv, axis=axis)


@grad_rule("layer_norm")
def _layer_norm_grad(ctx, xs, g):
    xhat, inv, axis = ctx["xhat"], ctx["inv"], ctx["axis"]
    gm = g.mean(axis=axis, keepdims=True)
    gx = (g * xhat).mean(axis=axis, keepdims=True)
    return (inv * (g - gm - xhat * gx),)


def cross_entropy(logits, labels, smoothing: float = 0.0) -> Tensor:
    """Mean label-smoothed cross-entropy of ``(B, C)`` logits against integer labels."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (batch, classes), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    b, c = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"expected {b} labels, got shape {labels.shape}")
    if not 0.0 <= smoothing < 1.0:
        raise ParameterError(f"label smoothing must be in [0, 1), got {smoothing}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    target = np.full((b, c), smoothing / c)
    target[np.arange(b), labels] += 1.0 - smoothing
    loss = -(target * logp).sum() / b
    return _emit("cross_entropy", (logits,), np.asarray(loss), prob=np.exp(logp), target=target)


@grad_rule("cross_entropy")
def _cross_entropy_grad(ctx, xs, g):
    b = xs[0].shape[0]
    return (g * (ctx["prob"] - ctx["target"]) / b,)


# ---------------------------------------------------------------------------
# verification oracle


def finite_diff_grad(f: Callable[[], Any], theta: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of the scalar ``f()`` with respect to ``theta``.

    ``theta.data`` is perturbed in place, one coordinate at a time, and
    restored afterwards.
    """
    if not eps > 0:
        raise ParameterError(f"finite-difference step must be positive, got {eps}")
    data = theta.data
    out = np.empty(data.shape, dtype=np.float64)
    for i in np.ndindex(data.shape):
        orig = data[i]
        data[i] = orig + eps
        fp = float(as_tensor(f()).data)
        data[i] = orig - eps
        fm = float(as_tensor(f()).data)
        data[i] = orig
        out[i] = (fp - fm) / (2.0 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference scaled by the larger of the two max magnitudes."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)
