"""Dense-tensor arithmetic with reverse-mode differentiation.

The engine records a dynamic graph: every op that touches a tensor with
``requires_grad`` stores its parents and a backward closure on the output.
``backward`` replays the recorded ops in reverse execution order (creation
sequence numbers double as the tape), visiting each node exactly once, so
gradient accumulation is deterministic for a fixed forward order.

Shapes are strict by design: the only broadcasting allowed is scalar ops
and suffix-aligned bias adds (``(..., d) + (d,)`` and friends). Everything
else is a ``DimensionError``. Tensors hold float32 by default; float64 is
used for gradient checking and DSP verification.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import DimensionError, InputError, NumericError

_SEQ = itertools.count()
_GRAD_ENABLED = True
_DEBUG_CHECKS = True


def set_debug_checks(flag: bool) -> bool:
    """Toggle the after-every-op NaN/Inf check; returns the previous value."""
    global _DEBUG_CHECKS
    previous = _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(flag)
    return previous


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _coerce(data, dtype) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A dense row-major float array plus optional gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = _coerce(data, dtype)
        if any(extent <= 0 for extent in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = next(_SEQ)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})"

    # Operator sugar; scalars are Python numbers, never silently-broadcast arrays.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


def constant(data, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype, name=name)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _DEBUG_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")


def _same_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise DimensionError(
                f"mixed dtypes {dt} and {t.data.dtype}; cast explicitly before combining"
            )
    return dt


def _make(out_data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(t: Tensor, seed: np.ndarray | None = None) -> None:
    """Propagate gradients from ``t`` back to every reachable parameter."""
    if not t.requires_grad:
        raise InputError("backward() called on a tensor with no recorded graph")
    if seed is None:
        if t.data.size != 1:
            raise DimensionError("backward() without a seed needs a scalar output")
        seed = np.ones_like(t.data)
    nodes: list[Tensor] = []
    seen = {id(t)}
    stack = [t]
    while stack:
        node = stack.pop()
        nodes.append(node)
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    nodes.sort(key=lambda n: n._seq, reverse=True)
    t.grad = np.array(seed, dtype=t.data.dtype, copy=True)
    for node in nodes:
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise / shape ops
# ---------------------------------------------------------------------------


def _is_scalar_operand(x) -> bool:
    return isinstance(x, (int, float)) or (isinstance(x, Tensor) and x.data.ndim == 0)


def add(a: Tensor, b) -> Tensor:
    if _is_scalar_operand(b) and not isinstance(b, Tensor):
        out_data = a.data + a.data.dtype.type(b)

        def bw_scalar(g):
            _accumulate(a, g)

        return _make(out_data, (a,), bw_scalar, "add")
    if not isinstance(b, Tensor):
        raise DimensionError("add expects a Tensor or a Python scalar")
    _same_dtype(a, b)
    if a.shape == b.shape:
        def bw_same(g):
            _accumulate(a, g)
            _accumulate(b, g)

        return _make(a.data + b.data, (a, b), bw_same, "add")
    if b.data.ndim == 0:
        def bw_rhs_scalar(g):
            _accumulate(a, g)
            _accumulate(b, g.sum())

        return _make(a.data + b.data, (a, b), bw_rhs_scalar, "add")
    if b.data.ndim < a.data.ndim and a.shape[a.data.ndim - b.data.ndim:] == b.shape:
        lead = tuple(range(a.data.ndim - b.data.ndim))

        def bw_bias(g):
            _accumulate(a, g)
            _accumulate(b, g.sum(axis=lead))

        return _make(a.data + b.data, (a, b), bw_bias, "add")
    raise DimensionError(f"add shapes {a.shape} and {b.shape} are not compatible")


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        return add(a, neg(b))
    return add(a, -b)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), bw, "neg")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        if not isinstance(b, (int, float)):
            raise DimensionError("mul expects a Tensor or a Python scalar")
        c = a.data.dtype.type(b)

        def bw_scalar(g):
            _accumulate(a, g * c)

        return _make(a.data * c, (a,), bw_scalar, "mul")
    _same_dtype(a, b)
    if a.shape == b.shape:
        def bw_same(g):
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)

        return _make(a.data * b.data, (a, b), bw_same, "mul")
    if b.data.ndim == 0:
        def bw_rhs_scalar(g):
            _accumulate(a, g * b.data)
            _accumulate(b, (g * a.data).sum())

        return _make(a.data * b.data, (a, b), bw_rhs_scalar, "mul")
    raise DimensionError(f"mul shapes {a.shape} and {b.shape} must match (or rhs scalar)")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supported rank pairs: 1x2, 2x1, 2x2, 3x2, 3x3.

    3-D operands carry a leading batch axis; a 2-D right operand against a
    3-D left one is the shared-weights case and its gradient sums over the
    batch.
    """
    if not isinstance(b, Tensor):
        raise DimensionError("matmul expects Tensor operands")
    _same_dtype(a, b)
    ad, bd = a.data, b.data
    ra, rb = ad.ndim, bd.ndim
    ok = (
        (ra == 1 and rb == 2 and ad.shape[0] == bd.shape[0])
        or (ra == 2 and rb == 1 and ad.shape[1] == bd.shape[0])
        or (ra == 2 and rb == 2 and ad.shape[1] == bd.shape[0])
        or (ra == 3 and rb == 2 and ad.shape[2] == bd.shape[0])
        or (ra == 3 and rb == 3 and ad.shape[0] == bd.shape[0] and ad.shape[2] == bd.shape[1])
    )
    if not ok:
        raise DimensionError(f"matmul cannot combine shapes {ad.shape} and {bd.shape}")
    out_data = ad @ bd

    def bw(g):
        if ra == 1 and rb == 2:
            _accumulate(a, g @ bd.T)
            _accumulate(b, np.outer(ad, g))
        elif ra == 2 and rb == 1:
            _accumulate(a, np.outer(g, bd))
            _accumulate(b, ad.T @ g)
        elif ra == 2 and rb == 2:
            _accumulate(a, g @ bd.T)
            _accumulate(b, ad.T @ g)
        elif ra == 3 and rb == 2:
            _accumulate(a, g @ bd.T)
            _accumulate(b, np.tensordot(ad, g, axes=([0, 1], [0, 1])))
        else:
            _accumulate(a, g @ bd.transpose(0, 2, 1))
            _accumulate(b, ad.transpose(0, 2, 1) @ g)

    return _make(out_data, (a, b), bw, "matmul")


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        if a.data.ndim != 2:
            raise DimensionError("transpose without axes is defined for rank-2 tensors")
        axes = (1, 0)
    if sorted(axes) != list(range(a.data.ndim)):
        raise DimensionError(f"invalid transpose axes {axes} for rank {a.data.ndim}")
    inverse = tuple(np.argsort(axes))

    def bw(g):
        _accumulate(a, g.transpose(inverse))

    return _make(a.data.transpose(axes).copy(), (a,), bw, "transpose")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if shape.count(-1) > 1:
        raise DimensionError(f"at most one inferred extent allowed, got {shape}")
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        if known == 0 or a.data.size % known:
            raise DimensionError(f"cannot reshape {a.shape} to {shape}")
        shape = tuple(a.data.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    original = a.shape

    def bw(g):
        _accumulate(a, g.reshape(original))

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    _same_dtype(*tensors)
    rank = tensors[0].data.ndim
    if not -rank <= axis < rank:
        raise DimensionError(f"concat axis {axis} invalid for rank {rank}")
    axis %= rank
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _accumulate(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("stack needs at least one tensor")
    _same_dtype(*tensors)
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise DimensionError("stack requires identical shapes")

    def bw(g):
        for i, t in enumerate(tensors):
            _accumulate(t, np.take(g, i, axis=axis))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw, "stack")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        _accumulate(a, g * mask)

    return _make(np.where(mask, a.data, 0), (a,), bw, "relu")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bw(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bw, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def bw(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw, "sigmoid")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    if _DEBUG_CHECKS and np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    out_data = np.log(a.data)

    def bw(g):
        _accumulate(a, g / a.data)

    return _make(out_data, (a,), bw, "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    if not lo < hi:
        raise InputError(f"clip bounds must satisfy lo < hi, got {lo}, {hi}")
    mask = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _accumulate(a, g * mask)

    return _make(np.clip(a.data, lo, hi), (a,), bw, "clip")


# ---------------------------------------------------------------------------
# reductions and normalizers
# ---------------------------------------------------------------------------


def _check_axis(a: Tensor, axis: int) -> int:
    rank = a.data.ndim
    if rank == 0 or not -rank <= axis < rank:
        raise DimensionError(f"axis {axis} invalid for shape {a.shape}")
    return axis % rank


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        def bw_all(g):
            _accumulate(a, np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=False))

        return _make(a.data.sum(), (a,), bw_all, "sum")
    ax = _check_axis(a, axis)

    def bw(g):
        _accumulate(a, np.broadcast_to(np.expand_dims(g, ax), a.shape))

    return _make(a.data.sum(axis=ax), (a,), bw, "sum")


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.data.size

        def bw_all(g):
            _accumulate(a, np.broadcast_to(g / n, a.shape).astype(a.data.dtype, copy=False))

        return _make(a.data.mean(), (a,), bw_all, "mean")
    ax = _check_axis(a, axis)
    n = a.shape[ax]

    def bw(g):
        _accumulate(a, np.broadcast_to(np.expand_dims(g / n, ax), a.shape))

    return _make(a.data.mean(axis=ax), (a,), bw, "mean")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = _check_axis(a, axis)
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        inner = (g * out_data).sum(axis=ax, keepdims=True)
        _accumulate(a, out_data * (g - inner))

    return _make(out_data, (a,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis (population variance), then scale/shift."""
    if eps <= 0:
        raise InputError("layer_norm eps must be positive")
    d = x.shape[-1] if x.data.ndim else 0
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}"
        )
    _same_dtype(x, gamma, beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        _accumulate(beta, g.sum(axis=lead))
        _accumulate(gamma, (g * xhat).sum(axis=lead))
        dxhat = g * gamma.data
        term = dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, inv * term)

    return _make(out_data, (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    checked: int
    max_rel_err: float
    worst_index: int
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def worst(self) -> GradCheckEntry | None:
        return max(self.entries, key=lambda e: e.max_rel_err, default=None)

    def summary(self) -> str:
        w = self.worst
        if w is None:
            return "grad check: no parameters"
        return (
            f"grad check over {len(self.entries)} tensors: max rel err "
            f"{self.max_rel_err:.3e} at {w.name}[{w.worst_index}] "
            f"(analytic {w.analytic:.6e}, numeric {w.numeric:.6e})"
        )


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    rel_floor: float = 1e-3,
    samples_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare recorded gradients of the scalar ``f()`` against central
    finite differences ``(f(p+h) - f(p-h)) / 2h``.

    ``f`` must rebuild its graph from the current parameter data on every
    call. Relative error uses a guarded denominator
    ``max(|analytic|, |numeric|, rel_floor)`` so near-zero gradients are
    held to an absolute tolerance of ``rel_floor * tol`` instead of
    exploding. Requires float64 parameters.
    """
    for p in params.values():
        if p.data.dtype != np.float64:
            raise InputError("grad_check requires float64 parameters")
    zero_grads(params.values())
    loss = f()
    if loss.data.size != 1:
        raise DimensionError("grad_check target must be scalar")
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite loss in grad_check")
    backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    if rng is None:
        rng = np.random.default_rng(0)
    report = GradCheckReport()
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise InputError(f"parameter {name!r} is not contiguous; cannot perturb in place")
        ana = analytic[name].reshape(-1)
        if samples_per_param is None or flat.size <= samples_per_param:
            indices = range(flat.size)
        else:
            indices = sorted(rng.choice(flat.size, size=samples_per_param, replace=False))
        worst = GradCheckEntry(name, 0, 0.0, -1, 0.0, 0.0)
        for i in indices:
            original = flat[i]
            with no_grad():
                flat[i] = original + h
                up = f().item()
                flat[i] = original - h
                down = f().item()
            flat[i] = original
            numeric = (up - down) / (2.0 * h)
            rel = abs(ana[i] - numeric) / max(abs(ana[i]), abs(numeric), rel_floor)
            worst.checked += 1
            if rel >= worst.max_rel_err:
                worst.max_rel_err = rel
                worst.worst_index = int(i)
                worst.analytic = float(ana[i])
                worst.numeric = float(numeric)
        report.entries.append(worst)
    return report
