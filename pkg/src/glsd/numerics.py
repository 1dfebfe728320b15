"""Float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps an immutable ``float64`` array. Operations on tensors
that require gradients are recorded on the innermost active :class:`Tape`
(one per thread); :meth:`Tape.backward` then walks the recorded nodes in
reverse order exactly once.

Values produced outside any tape, or from inputs that do not require
gradients, are constants. That is how stop-gradient is expressed: the teacher
branch simply runs without a tape.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "NonFiniteError",
    "Tensor",
    "Tape",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "take",
    "sum",
    "mean",
    "exp",
    "log",
    "relu",
    "gelu",
    "softmax",
    "layer_norm",
    "l2_normalize",
    "gather_rows",
    "cross_entropy",
    "wn_linear",
    "backward",
    "no_grad",
    "numerical_gradient",
    "gradient_check",
]

LOG_CLAMP = 1e-12
_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {where}")


def _frozen(arr) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.flags.writeable:
        out = out.view()
        out.flags.writeable = False
    return out


class Tensor:
    """Immutable float64 array, optionally tracked by a tape.

    ``grad`` is the gradient accumulator; it only exists on leaves created
    with ``requires_grad=True`` and starts at zero.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = _frozen(data)
        _check_finite(arr, name or "Tensor()")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros(arr.shape) if requires_grad else None
        self.name = name
        self._tape: Tape | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Records primitive operations for one reverse pass.

    Use as a context manager; operations executed inside the ``with`` block
    on gradient-requiring inputs are appended in execution order, which is a
    topological order by construction.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []
        self._closed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: tuple, grad_fn: Callable) -> Tensor:
        out.requires_grad = True
        out._tape = self
        out._node = len(self.nodes)
        self.nodes.append((out, parents, grad_fn))
        return out

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

        Returns a mapping from leaf tensor to the gradient contributed by
        this pass. Calling twice on the same tape is an error.
        """
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise ValueError("backward requires a scalar loss tensor")
        if loss._tape is not self or loss._node is None:
            raise ValueError("loss is detached from this tape")
        if self._closed:
            raise RuntimeError("tape already consumed by a backward pass")
        self._closed = True

        adj: list[np.ndarray | None] = [None] * len(self.nodes)
        adj[loss._node] = np.ones(loss.shape)
        leaf_grads: dict[Tensor, np.ndarray] = {}
        for idx in range(loss._node, -1, -1):
            g = adj[idx]
            if g is None:
                continue
            adj[idx] = None
            _, parents, grad_fn = self.nodes[idx]
            parent_grads = grad_fn(g)
            for parent, pg in zip(parents, parent_grads):
                if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                    continue
                if parent._node is not None and parent._tape is self:
                    j = parent._node
                    adj[j] = pg if adj[j] is None else adj[j] + pg
                elif parent._node is None:
                    prev = leaf_grads.get(parent)
                    leaf_grads[parent] = pg if prev is None else prev + pg
        for leaf, g in leaf_grads.items():
            _check_finite(g, f"gradient of {leaf.name or 'leaf'}")
            leaf.grad = leaf.grad + g
        return leaf_grads


_local = threading.local()


def _stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


class no_grad:
    """Context manager that suspends recording on this thread."""

    def __enter__(self):
        self._saved = list(_stack())
        _stack().clear()
        return self

    def __exit__(self, *exc):
        _stack()[:] = self._saved


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


def _make(value: np.ndarray, parents: tuple, grad_fn: Callable, op: str) -> Tensor:
    _check_finite(value, op)
    out = Tensor.__new__(Tensor)
    out.data = _frozen(value)
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._tape = None
    out._node = None
    tape = _active()
    if tape is not None and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        tape.record(out, parents, grad_fn)
    return out


def _val(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


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
# elementwise


def add(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _make(
        av + bv,
        (a, b),
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _make(
        av - bv,
        (a, b),
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _make(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    out = av / bv

    def grad_fn(g):
        ga = g / bv
        return _unbroadcast(ga, av.shape), _unbroadcast(-ga * out, bv.shape)

    return _make(out, (a, b), grad_fn, "div")


def neg(a) -> Tensor:
    return _make(-_val(a), (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    out = np.exp(_val(a))
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a, clamp: float = 0.0) -> Tensor:
    """Natural log; with ``clamp > 0`` inputs are floored at ``clamp`` first."""
    av = _val(a)
    if clamp > 0:
        safe = np.maximum(av, clamp)
        live = av > clamp
        return _make(np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0.0),), "log")
    return _make(np.log(av), (a,), lambda g: (g / av,), "log")


def relu(a) -> Tensor:
    av = _val(a)
    return _make(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0),), "relu")


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    av = _val(a)
    cdf = 0.5 * (1.0 + erf(av / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * av * av)
    return _make(av * cdf, (a,), lambda g: (g * (cdf + av * pdf),), "gelu")


# ---------------------------------------------------------------------------
# shape and linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading dimensions."""
    av, bv = _val(a), _val(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _make(av @ bv, (a, b), grad_fn, "matmul")


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    return _make(np.swapaxes(_val(a), -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    av = _val(a)
    return _make(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),), "reshape")


def take(a, index) -> Tensor:
    """Basic (slice/int) indexing; gradient scatters back into zeros."""
    av = _val(a)

    def grad_fn(g):
        full = np.zeros(av.shape)
        full[index] = g
        return (full,)

    return _make(av[index], (a,), grad_fn, "take")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    av = _val(a)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _make(np.sum(av, axis=axis, keepdims=keepdims), (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    av = _val(a)
    count = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, av.shape).copy(),)

    return _make(np.mean(av, axis=axis, keepdims=keepdims), (a,), grad_fn, "mean")


def gather_rows(a, index) -> Tensor:
    """Select rows along the second-to-last axis.

    ``a`` has shape ``(..., K, I)`` and ``index`` integer shape ``(..., M)``
    with matching leading dimensions; the result is ``(..., M, I)``. Repeated
    indices accumulate their gradients.
    """
    av = _val(a)
    idx = np.asarray(index)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("gather_rows index must be integer")
    if idx.size and (idx.min() < 0 or idx.max() >= av.shape[-2]):
        raise IndexError("gather_rows index out of range")
    out = np.take_along_axis(av, idx[..., None], axis=-2)

    def grad_fn(g):
        onehot = (idx[..., :, None] == np.arange(av.shape[-2])).astype(np.float64)
        return (np.swapaxes(onehot, -1, -2) @ g,)

    return _make(out, (a,), grad_fn, "gather_rows")


# ---------------------------------------------------------------------------
# fused primitives


def softmax(x, temperature: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``x / temperature``."""
    if not temperature > 0:
        raise ValueError("softmax temperature must be positive")
    xv = _val(x) / temperature
    shifted = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner) / temperature,)

    return _make(out, (x,), grad_fn, "softmax")


def layer_norm(x, weight, bias, eps: float = 1e-6) -> Tensor:
    xv, wv, bv = _val(x), _val(weight), _val(bias)
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = xv.shape[-1]

    def grad_fn(g):
        gw = _unbroadcast(g * xhat, wv.shape)
        gb = _unbroadcast(g, bv.shape)
        gx_hat = g * wv
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, gw, gb

    return _make(xhat * wv + bv, (x, weight, bias), grad_fn, "layer_norm")


def l2_normalize(x, eps: float = 0.0) -> Tensor:
    """Scale every row (last axis) to unit Euclidean norm.

    Rows whose norm is not above ``eps`` raise ``ValueError``.
    """
    xv = _val(x)
    norm = np.sqrt((xv * xv).sum(axis=-1, keepdims=True))
    if (norm <= eps).any():
        raise ValueError("cannot L2-normalize a zero-norm row")
    out = xv / norm

    def grad_fn(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _make(out, (x,), grad_fn, "l2_normalize")


def cross_entropy(p, q) -> Tensor:
    """Row-wise ``-sum_i p_i log max(q_i, 1e-12)`` over the last axis.

    ``p`` is treated as a constant target; only ``q`` receives gradient.
    """
    pv, qv = _val(p), _val(q)
    if pv.shape[-1] != qv.shape[-1]:
        raise ValueError(f"support mismatch: {pv.shape[-1]} vs {qv.shape[-1]}")
    safe = np.maximum(qv, LOG_CLAMP)
    live = qv > LOG_CLAMP
    out = -(pv * np.log(safe)).sum(axis=-1)

    def grad_fn(g):
        gq = np.where(live, -pv / safe, 0.0) * g[..., None]
        return None, _unbroadcast(gq, qv.shape)

    return _make(out, (p, q), grad_fn, "cross_entropy")


def wn_linear(x, v) -> Tensor:
    """Linear map onto unit-norm prototype rows: ``x @ normalize(v).T``."""
    return matmul(x, transpose(l2_normalize(v)))


# ---------------------------------------------------------------------------
# finite-difference checking


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, index, step: float = 1e-5) -> float:
    """Central difference of ``f`` w.r.t. ``arr[index]`` (``arr`` is perturbed in place)."""
    orig = arr[index]
    arr[index] = orig + step
    hi = f()
    arr[index] = orig - step
    lo = f()
    arr[index] = orig
    return (hi - lo) / (2.0 * step)


def gradient_check(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    n_coords: int = 10,
    step: float = 1e-5,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> tuple[float, list[tuple[str, tuple, float, float]]]:
    """Compare tape gradients with central differences at random coordinates.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``. Returns the maximum
    relative error and the per-coordinate records ``(name, index, a, n)``.
    """
    rng = rng or np.random.default_rng(0)
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    with Tape() as tape:
        leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in work.items()}
        loss = loss_fn(leaves)
    tape.backward(loss)
    analytic = {k: t.grad for k, t in leaves.items()}

    def value() -> float:
        with no_grad():
            return loss_fn({k: Tensor(v) for k, v in work.items()}).item()

    names = list(work)
    sizes = np.array([work[k].size for k in names], dtype=float)
    records = []
    worst = 0.0
    for _ in range(n_coords):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        index = np.unravel_index(rng.integers(work[name].size), work[name].shape)
        num = numerical_gradient(value, work[name], index, step)
        ana = float(analytic[name][index])
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
        records.append((name, tuple(int(i) for i in index), ana, num))
    return worst, records
