"""Minimal dense-array engine with reverse-mode automatic differentiation.

All values are float64. A module-global dynamic tape records every operation
whose inputs require gradients; ``backward`` replays it in reverse. The tape
is rebuilt each training step, which keeps per-step masking changes trivial.

Single-threaded by design within a training step. Forward evaluation with no
gradient recording (all inputs ``requires_grad=False``) touches no shared
state and is safe to run concurrently on disjoint inputs.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "TapeError",
    "tensor",
    "zeros",
    "ones",
    "matmul",
    "add",
    "multiply",
    "reshape",
    "transpose",
    "take_rows",
    "mean",
    "tsum",
    "gelu",
    "sigmoid",
    "log",
    "clip",
    "softmax",
    "layer_norm",
    "concat",
    "broadcast_rows",
    "backward",
    "grad_check",
    "no_grad",
    "set_finite_checks",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible, before any data is touched."""


class TapeError(RuntimeError):
    """Raised on tape misuse: backward on a non-scalar, an empty tape, or a stale loss."""


# Debug-only NaN/Inf guard on forward outputs; cheap but off by default.
_CHECK_FINITE = False


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = enabled


class Tensor:
    """Shape-carrying f64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tape_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape_id: int | None = None

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
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, multiply(_wrap(other), _wrap(-1.0)))

    def __rsub__(self, other):
        return add(_wrap(other), multiply(self, _wrap(-1.0)))

    def __mul__(self, other):
        return multiply(self, _wrap(other))

    def __rmul__(self, other):
        return multiply(_wrap(other), self)

    def __neg__(self):
        return multiply(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# tape


class _Record:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


# Execution order is already topological, so reverse iteration is the
# reverse-topological sweep backward needs.
_tape: list[_Record] = []
_recording = True


class no_grad:
    """Context manager that suppresses tape recording entirely."""

    def __enter__(self):
        global _recording
        self._prev = _recording
        _recording = False
        return self

    def __exit__(self, *exc):
        global _recording
        _recording = self._prev
        return False


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    needs = _recording and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out._tape_id = len(_tape)
        _tape.append(_Record(out, inputs, vjp))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Consumes the tape: a second backward without a fresh forward raises.
    """
    global _tape
    if loss.data.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not _tape:
        raise TapeError("tape is empty; run a forward pass before backward")
    if loss._tape_id is None or loss._tape_id >= len(_tape) or _tape[loss._tape_id].out is not loss:
        raise TapeError("loss was not recorded on the current tape (stale tensor?)")

    tape, _tape = _tape, []
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape[: loss._tape_id + 1]):
        g = rec.out.grad
        if g is None:
            continue
        for inp, contrib in zip(rec.inputs, rec.vjp(g)):
            if contrib is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = contrib
            else:
                inp.grad = inp.grad + contrib


def clear_tape() -> None:
    """Drop all recorded operations (used between steps on error paths)."""
    _tape.clear()


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(out, (a, b), vjp)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"multiply: shapes {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(out, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim>=2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        da = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        db = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return da, db

    return _emit(out, (a, b), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None

    def vjp(g):
        return (g.reshape(a.shape),)

    return _emit(out.copy(), (a,), vjp)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for ndim {a.ndim}")
    inv = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _emit(np.transpose(a.data, axes).copy(), (a,), vjp)


def take_rows(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select rows along ``axis`` (patch selection / embedding lookup)."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"take_rows: index array must be 1-D, got shape {idx.shape}")
    if axis < 0 or axis >= a.ndim:
        raise ShapeError(f"take_rows: axis {axis} out of range for shape {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise ShapeError(f"take_rows: index out of bounds for axis {axis} of shape {a.shape}")
    out = np.take(a.data, idx, axis=axis)

    def vjp(g):
        da = np.zeros_like(a.data)
        np.add.at(da, (slice(None),) * axis + (idx,), g)
        return (da,)

    return _emit(out, (a,), vjp)


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _emit(np.asarray(out), (a,), vjp)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    a = _wrap(a)
    n = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    return _emit(np.asarray(out), (a,), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation gelu; smooth everywhere."""
    a = _wrap(a)
    x = a.data
    x2 = x * x
    u = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _emit(out, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    a = _wrap(a)
    s = 1.0 / (1.0 + np.exp(-a.data))

    def vjp(g):
        return (g * s * (1.0 - s),)

    return _emit(s, (a,), vjp)


def log(a: Tensor) -> Tensor:
    a = _wrap(a)

    def vjp(g):
        return (g / a.data,)

    return _emit(np.log(a.data), (a,), vjp)


def sqrt(a: Tensor) -> Tensor:
    a = _wrap(a)
    s = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / s,)

    return _emit(s, (a,), vjp)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through the interior."""
    a = _wrap(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def vjp(g):
        return (g * inside,)

    return _emit(out, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _wrap(a)
    if a.ndim == 0:
        raise ShapeError("softmax on a scalar")
    x = a.data
    y = np.exp(x - x.max(axis=axis, keepdims=True))
    y /= y.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _emit(y, (a,), vjp)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis to zero mean, unit variance, then affine."""
    a, gain, bias = _wrap(a), _wrap(gain), _wrap(bias)
    if eps <= 0:
        raise ValueError("layer_norm: eps must be > 0")
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    out = gain.data * xhat + bias.data

    def vjp(g):
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gain.data
        dx = ivar * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _emit(out, (a, gain, bias), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of zero tensors")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _emit(out, tuple(ts), vjp)


def broadcast_rows(v: Tensor, n: int) -> Tensor:
    """Tile a d-vector into an (n, d) matrix (mask-token expansion)."""
    v = _wrap(v)
    if v.ndim != 1:
        raise ShapeError(f"broadcast_rows expects a vector, got shape {v.shape}")

    def vjp(g):
        return (g.sum(axis=0),)

    return _emit(np.broadcast_to(v.data, (n, v.shape[0])).copy(), (v,), vjp)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict:
    """Compare analytic gradients of ``f()`` against central finite differences.

    ``f`` must be a deterministic scalar-valued closure over ``params``.
    ``sample`` limits the number of coordinates checked per parameter (all
    coordinates when None). Returns a report with per-parameter max relative
    error and an overall pass flag.
    """
    if not (1e-7 <= h <= 1e-3):
        raise ValueError(f"grad_check: h={h} outside [1e-7, 1e-3]")
    clear_tape()
    v1 = f()
    v2 = f()
    if v1.data.tobytes() != v2.data.tobytes():
        raise TapeError("grad_check: f is not deterministic (two forwards disagree)")
    clear_tape()
    for p in params.values():
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    if rng is None:
        rng = np.random.default_rng(0)
    errors: dict[str, float] = {}
    for k, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if sample is not None and sample < n:
            coords = rng.choice(n, size=sample, replace=False)
        else:
            coords = np.arange(n)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            clear_tape()
            fp = f().item()
            flat[c] = orig - h
            clear_tape()
            fm = f().item()
            flat[c] = orig
            num = (fp - fm) / (2.0 * h)
            ana = analytic[k].reshape(-1)[c]
            rel = abs(ana - num) / max(abs(ana), abs(num), 1.0)
            worst = max(worst, rel)
        errors[k] = worst
    clear_tape()
    max_err = max(errors.values()) if errors else 0.0
    return {"per_param": errors, "max_rel_err": max_err, "tol": tol, "passed": max_err < tol}
