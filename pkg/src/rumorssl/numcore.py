"""Dense float64 tensors with tape-based reverse-mode differentiation.

Each :class:`Tensor` produced by an operation remembers its parents and a
closure that maps the output adjoint to parent adjoints, so the tensor itself
is the tape node.  :func:`backward` walks the tape in reverse topological
order, accumulating adjoints additively into zero-initialized buffers.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "DimensionError",
    "DegenerateInputError",
    "NonFiniteError",
    "ContractError",
    "tensor",
    "parameter",
    "no_grad",
    "matmul",
    "spmm",
    "relu",
    "softplus",
    "exp",
    "log",
    "power",
    "clip",
    "tsum",
    "mean",
    "concat",
    "take",
    "take_rows",
    "where_rows",
    "normalize_rows",
    "cosine_similarity",
    "logsumexp",
    "softmax_cross_entropy",
    "backward",
    "grad_check",
    "grad_check_params",
]


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    pass


class DegenerateInputError(ContractError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


class Tensor:
    """A float64 array that may participate in differentiation.

    ``op`` names the primitive that produced the tensor ("leaf" for inputs).
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward_fn

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
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_state = threading.local()


@contextmanager
def no_grad():
    """Record no tape inside the block (per thread)."""
    prev = getattr(_state, "disabled", False)
    _state.disabled = True
    try:
        yield
    finally:
        _state.disabled = prev


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], fn) -> Tensor:
    needs = not getattr(_state, "disabled", False) and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward_fn=fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _make(out, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data
    return _make(
        out, "mul", (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.data == 0):
        raise DegenerateInputError("division by zero")
    out = 1.0 / a.data
    return _make(out, "reciprocal", (a,), lambda g: (-g * out * out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^z), evaluated as max(z, 0) + log1p(e^{-|z|})."""
    z = a.data
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return _make(out, "softplus", (a,), lambda g: (g * _sigmoid(z),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError below
        out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DegenerateInputError("log of non-positive value")
    x = a.data
    return _make(np.log(x), "log", (a,), lambda g: (g / x,))


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    x = a.data
    if exponent != int(exponent) and np.any(x < 0):
        raise DegenerateInputError("fractional power of negative value")
    out = x**exponent
    return _make(out, "power", (a,), lambda g: (g * exponent * x ** (exponent - 1.0),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the adjoint passes through only where no clamping happened."""
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), "clip", (a,), lambda g: (g * inside,))


# ----------------------------------------------------------------- reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, "sum", (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if a.size == 0:
        raise ContractError("mean of empty tensor")
    n = a.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# ------------------------------------------------------------------ structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        return (
            g @ bd.T if a.requires_grad else None,
            ad.T @ g if b.requires_grad else None,
        )

    return _make(ad @ bd, "matmul", (a, b), fn)


def spmm(m: sp.spmatrix, b: Tensor) -> Tensor:
    """Constant sparse matrix times a dense tensor."""
    if m.shape[1] != b.shape[0]:
        raise DimensionError(f"spmm shape mismatch: {m.shape} x {b.shape}")
    out = np.asarray(m @ b.data)
    return _make(out, "spmm", (b,), lambda g: (np.asarray(m.T @ g),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        return _make(a.data.T, "transpose", (a,), lambda g: (g.T,))
    inverse = np.argsort(axes)
    return _make(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, "concat", tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(a: Tensor, flat_index) -> Tensor:
    """Gather entries of the flattened tensor; result is 1-D."""
    idx = np.asarray(flat_index, dtype=np.int64)
    shape = a.shape

    def fn(g):
        full = np.zeros(int(np.prod(shape)))
        np.add.at(full, idx, g)
        return (full.reshape(shape),)

    return _make(a.data.reshape(-1)[idx], "take", (a,), fn)


def take_rows(a: Tensor, rows) -> Tensor:
    idx = np.asarray(rows, dtype=np.int64)
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], "take_rows", (a,), fn)


def where_rows(mask, a: Tensor, b: Tensor) -> Tensor:
    """Rows of ``a`` with masked rows replaced by the single row vector ``b``."""
    mask = np.asarray(mask, dtype=bool)
    a, b = _lift(a), _lift(b)
    if b.shape != (a.shape[1],):
        raise DimensionError(f"replacement row {b.shape} does not fit rows of {a.shape}")
    out = a.data.copy()
    out[mask] = b.data
    keep = ~mask[:, None]
    return _make(out, "where_rows", (a, b), lambda g: (g * keep, g[mask].sum(axis=0)))


def normalize_rows(a: Tensor) -> Tensor:
    """Scale every row to unit L2 norm; zero rows are an error."""
    x = a.data
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    if np.any(norms == 0):
        raise DegenerateInputError("cannot normalize a zero-norm row")
    y = x / norms

    def fn(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norms,)

    return _make(y, "normalize_rows", (a,), fn)


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """u.v / (|u||v|) for two vectors, clamped into [-1, 1]."""
    u, v = _lift(u), _lift(v)
    if u.shape != v.shape or u.ndim != 1:
        raise DimensionError(f"cosine_similarity needs equal 1-D shapes, got {u.shape} and {v.shape}")
    nu, nv = np.linalg.norm(u.data), np.linalg.norm(v.data)
    if nu == 0 or nv == 0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    c = float(u.data @ v.data) / (nu * nv)
    ud, vd = u.data, v.data

    def fn(g):
        gu = (vd / (nu * nv) - c * ud / nu**2) * g
        gv = (ud / (nu * nv) - c * vd / nv**2) * g
        return gu, gv

    return _make(np.clip(c, -1.0, 1.0), "cosine_similarity", (u, v), fn)


def logsumexp(a: Tensor, axis: int = -1, where=None) -> Tensor:
    """Stable log-sum-exp along ``axis``, optionally over entries where ``where`` is True."""
    x = a.data
    mask = np.ones_like(x, dtype=bool) if where is None else np.broadcast_to(np.asarray(where, bool), x.shape)
    if not mask.any(axis=axis).all():
        raise ContractError("logsumexp over an empty set")
    xm = np.where(mask, x, -np.inf)
    m = xm.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(x - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    w = e / s

    def fn(g):
        return (np.expand_dims(g, axis) * w,)

    return _make(out, "logsumexp", (a,), fn)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax at the label index."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-D, got {logits.shape}")
    n, c = logits.shape
    if n == 0:
        raise ContractError("empty batch")
    if labels.shape != (n,):
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ContractError(f"labels must lie in [0, {c})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=1)) + m[:, 0]
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))

    def fn(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _make(np.array(loss), "softmax_cross_entropy", (logits,), fn)


# ------------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaf gradients are accumulated into any existing ``.grad`` so several
    backward calls sum; call :meth:`Tensor.zero_grad` between steps.
    Returns a mapping from each reached leaf to its gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaves: dict[Tensor, np.ndarray] = {}
    if not loss.requires_grad:
        return leaves
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + pg
            else:
                adj[key] = np.array(pg, dtype=np.float64)
    return leaves


# -------------------------------------------------------------- gradient check


def _rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> float:
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float((diff / denom).max()) if diff.size else 0.0


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-6,
    floor: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> float:
    """Worst relative error between the analytic gradient of ``f`` at ``x`` and
    central finite differences.

    The error per coordinate is ``|a - n| / max(|a| + |n|, floor)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError("eps must lie in [1e-7, 1e-3]")
    x0 = np.array(x.data, dtype=np.float64)
    probe = Tensor(x0.copy(), requires_grad=True)
    loss = f(probe)
    backward(loss)
    analytic = np.zeros(x0.size) if probe.grad is None else probe.grad.reshape(-1)
    idx = np.arange(x0.size) if coords is None else np.asarray(list(coords), dtype=np.int64)
    numeric = np.empty(len(idx))
    for k, i in enumerate(idx):
        xp = x0.copy().reshape(-1)
        xp[i] += eps
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        xp[i] -= 2 * eps
        fm = f(Tensor(xp.reshape(x0.shape))).item()
        numeric[k] = (fp - fm) / (2 * eps)
    return _rel_err(analytic[idx], numeric, floor)


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    floor: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Finite-difference check of ``loss_fn`` against every tensor in ``params``.

    Parameters are perturbed in place and restored.  ``max_coords`` bounds the
    coordinates probed per tensor (sampled with ``rng``).
    """
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1).copy()
        flat = p.data.reshape(-1)
        idx = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            idx = (rng or np.random.default_rng(0)).choice(p.size, max_coords, replace=False)
        numeric = np.empty(len(idx))
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss_fn().item()
            flat[i] = orig - eps
            fm = loss_fn().item()
            flat[i] = orig
            numeric[k] = (fp - fm) / (2 * eps)
        worst = max(worst, _rel_err(analytic[idx], numeric, floor))
        p.zero_grad()
    return worst
