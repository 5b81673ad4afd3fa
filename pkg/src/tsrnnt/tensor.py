"""Dense float tensors with a reverse-mode gradient tape.

Every differentiable operation returns a new :class:`Tensor`. When at least
one input requires a gradient, the operation is appended to the active
:class:`Tape` together with a closure that maps the output gradient to input
gradients. :meth:`Tape.backward` walks the records in reverse order.

Broadcasting is deliberately narrow: operands of a binary op must have the
same shape, or one of them is a scalar, or one of them is a 1-D vector whose
length equals the other's last dimension. Anything else raises
:class:`DimensionError`.

Forward matrix products go through ``np.einsum`` rather than BLAS so every
output row depends only on its own input row. This makes causal encoders
bit-exact under truncation of the input.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DEFAULT_DTYPE = np.float64

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = [Tape()]
    return stack


def current_tape() -> "Tape":
    """Return the innermost active tape of the calling thread."""
    return _tape_stack()[-1]


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable recording for the enclosed block."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tape:
    """Ordered record of differentiable operations.

    Records are appended in execution order, so an op's inputs always precede
    it. A tape may be differentiated once; :meth:`reset` clears it for reuse.
    """

    def __init__(self):
        self.records: list[tuple["Tensor", tuple, Callable]] = []
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out: "Tensor", parents: tuple, backward_fn: Callable) -> None:
        if self.consumed:
            raise ContractError("tape already differentiated; call reset() before recording")
        out._tape = self
        out._node = len(self.records)
        self.records.append((out, parents, backward_fn))

    def reset(self) -> None:
        for out, _, _ in self.records:
            out._tape = None
            out._node = None
        self.records = []
        self.consumed = False

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1 or loss.data.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is None:
            # constant loss: nothing upstream requires a gradient
            return
        if loss._tape is not self:
            raise ContractError("loss was recorded on a different tape")
        if self.consumed:
            raise ContractError("backward called twice on the same tape without reset()")
        self.consumed = True
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, fn in reversed(self.records[: loss._node + 1]):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            out.grad = g
            for parent, pg in zip(parents, fn(g)):
                if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                    continue
                if parent._tape is self:
                    prev = pending.get(id(parent))
                    pending[id(parent)] = pg if prev is None else prev + pg
                else:
                    parent._accumulate(pg)


class Tensor:
    """N-dimensional float array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            floaty = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
            dtype = data.dtype if floaty else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._node: int | None = None
        self.name = name

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match tensor shape {self.shape}")
        self.grad = g.copy() if self.grad is None else self.grad + g

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})\n{self.data!r}"

    def __len__(self):
        return len(self.data)

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DEFAULT_DTYPE), requires_grad=True, name=name)


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    needs = is_grad_enabled() and any(isinstance(p, Tensor) and p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        current_tape().record(out, parents, backward_fn)
    return out


def _check_finite(arr: np.ndarray, op: str) -> None:
    if np.isnan(arr).any():
        raise NumericError(f"{op}: NaN in input")


# -- broadcasting rules ---------------------------------------------------

def _binary_kind(a: np.ndarray, b: np.ndarray, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "b_scalar"
    if a.ndim == 0:
        return "a_scalar"
    if b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]:
        return "b_row"
    if a.ndim == 1 and b.ndim >= 2 and b.shape[-1] == a.shape[0]:
        return "a_row"
    raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str, side: str) -> np.ndarray:
    if kind == "same":
        return g
    if kind == f"{side}_scalar":
        return np.asarray(g.sum())
    if kind == f"{side}_row":
        return g.reshape(-1, g.shape[-1]).sum(axis=0)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _binary_kind(a.data, b.data, "add")

    def bw(g):
        return _reduce_to(g, kind, "a"), _reduce_to(g, kind, "b")

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _binary_kind(a.data, b.data, "sub")

    def bw(g):
        return _reduce_to(g, kind, "a"), _reduce_to(-g, kind, "b")

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product."""
    a, b = as_tensor(a), as_tensor(b)
    kind = _binary_kind(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _reduce_to(g * bd, kind, "a"), _reduce_to(g * ad, kind, "b")

    return _make(ad * bd, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product.

    ``a`` is ``(..., M, K)`` (or ``(K,)``) and ``b`` is either a ``(K, N)``
    weight matrix or a stack ``(..., K, N)`` with the same leading dims as
    ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if b.ndim == 2 and a.ndim >= 1:
        if ad.shape[-1] != bd.shape[0]:
            raise DimensionError(f"matmul: inner dimensions differ for shapes {ad.shape} and {bd.shape}")
        out = np.einsum("...k,kn->...n", np.ascontiguousarray(ad), np.ascontiguousarray(bd))

        def bw(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return _make(out, (a, b), bw)
    if a.ndim == b.ndim and a.ndim >= 3:
        if ad.shape[:-2] != bd.shape[:-2] or ad.shape[-1] != bd.shape[-2]:
            raise DimensionError(f"matmul: incompatible batched shapes {ad.shape} and {bd.shape}")
        out = np.einsum("...mk,...kn->...mn", np.ascontiguousarray(ad), np.ascontiguousarray(bd))

        def bw(g):
            ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), bw)
    raise DimensionError(f"matmul: unsupported shapes {ad.shape} and {bd.shape}")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore"):
        out = np.log(ad)
    _check_finite(out, "log")
    return _make(out, (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data, "logsumexp")
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(a.data - m), axis=axis, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out_k = np.log(s) + m
        # rows that are entirely -inf get zero weight
        w = np.where(np.isfinite(out_k), np.exp(a.data - out_k), 0.0)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * w,)

    return _make(out, (a,), bw)


def logaddexp(a, b) -> Tensor:
    """Elementwise ``log(exp(a) + exp(b))`` for same-shape operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"logaddexp: shapes {a.shape} and {b.shape} differ")
    _check_finite(a.data, "logaddexp")
    _check_finite(b.data, "logaddexp")
    out = np.logaddexp(a.data, b.data)
    finite = np.isfinite(out)
    safe = np.where(finite, out, 0.0)
    wa = np.where(finite, np.exp(a.data - safe), 0.0)
    wb = np.where(finite, np.exp(b.data - safe), 0.0)
    return _make(out, (a, b), lambda g: (g * wa, g * wb))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data, "softmax")
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def softmax_rows(x) -> Tensor:
    """Row-wise softmax of a matrix, stabilised by subtracting each row's max."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data, "log_softmax")
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, (a,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gamma``/``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        return gx, (flat * xhat.reshape(-1, d)).sum(axis=0), flat.sum(axis=0)

    return _make(out, (x, gamma, beta), bw)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat of an empty list")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if i != ax):
            raise DimensionError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), bw)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                   for t in ts], axis=axis)


def index(a, idx) -> Tensor:
    """Slicing / integer-array selection with scatter-add backward."""
    a = as_tensor(a)
    src, dtype = a.shape, a.data.dtype

    def bw(g):
        full = np.zeros(src, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.data[idx]), (a,), bw)


def embedding(weight, ids) -> Tensor:
    """Row lookup ``weight[ids]``; ids must be valid row indices."""
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ContractError(f"embedding: token id out of range [0, {weight.shape[0]})")
    return index(weight, ids)


def outer_add(a, b) -> Tensor:
    """``out[..., t, u, :] = a[..., t, :] + b[..., u, :]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"outer_add: shapes {a.shape} and {b.shape} are incompatible")
    out = a.data[..., :, None, :] + b.data[..., None, :, :]
    return _make(out, (a, b), lambda g: (g.sum(axis=-2), g.sum(axis=-3)))


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant (no gradient there)."""
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    keep = ~mask
    return _make(np.where(mask, value, a.data), (a,), lambda g: (g * keep,))


def backward(loss: Tensor) -> None:
    """Differentiate ``loss`` on the tape that recorded it."""
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        return
    loss._tape.backward(loss)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Compare tape gradients of ``f`` with central finite differences.

    ``f`` is a zero-argument callable returning a scalar tensor computed from
    ``params``. Returns the maximum over all coordinates of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    for p in params:
        if p.data.dtype != np.float64:
            raise ContractError("grad_check requires float64 parameters")
    zero_grad(params)
    with Tape() as tape:
        loss = f()
        if not np.isfinite(loss.data).all():
            raise NumericError("grad_check: objective is not finite")
        tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    zero_grad(params)

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            for i in np.ndindex(p.shape):
                orig = p.data[i]
                p.data[i] = orig + eps
                fp = float(f().data)
                p.data[i] = orig - eps
                fm = float(f().data)
                p.data[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError("grad_check: objective is not finite under perturbation")
                num = (fp - fm) / (2.0 * eps)
                err = abs(ga[i] - num) / max(1.0, abs(ga[i]), abs(num))
                worst = max(worst, err)
    return worst
