"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Operations record themselves onto the active :class:`Tape` only when a tape
is open (``with Tape() as tape:``) and at least one input requires a
gradient.  Outside a tape every op is a plain numpy computation, which is
what inference and finite-difference probing use.

Shapes never broadcast implicitly.  The two exceptions are a bias vector
added (or multiplied) over the last dimension, and non-differentiable numpy
constants added with :func:`add_const`.  Everything else must match exactly.
"""

from __future__ import annotations

import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

DTYPE = np.float64

# finite-output assertion after every op; off by default (costly)
DEBUG = os.environ.get("EWPF_DEBUG", "") not in ("", "0")

_local = threading.local()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_recorded")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._recorded = False

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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("tensor / tensor is not supported; divide by a float")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


class Parameter(Tensor):
    """A named trainable tensor."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as ops execute, so the list is topologically ordered
    by construction.  ``backward`` walks it once in reverse.
    """

    def __init__(self):
        self.nodes: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients accumulate; callers zero them between optimisation steps.
    Only leaves (tensors not produced by a recorded op) keep a ``.grad``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = active_tape()
    if tape is None or not loss._recorded:
        raise ContractError("loss was not produced on a recording tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for inputs, out, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, ig in zip(inputs, fn(g)):
            if ig is None or not inp.requires_grad:
                continue
            if inp._recorded:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = ig if prev is None else prev + ig
            elif inp.grad is None:
                inp.grad = np.array(ig, dtype=DTYPE)
            else:
                inp.grad += ig


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    if DEBUG:
        assert np.all(np.isfinite(data)), "non-finite value produced by forward op"
    tape = active_tape()
    if tape is not None:
        for t in inputs:
            if t.requires_grad:
                out = Tensor.__new__(Tensor)
                out.data = data
                out.requires_grad = True
                out.grad = None
                out._recorded = True
                tape.nodes.append((inputs, out, fn))
                return out
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._recorded = False
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _bias_reduce(g: np.ndarray, n: int) -> np.ndarray:
    return g.reshape(-1, n).sum(axis=0)


def _pair_kind(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "bias_b"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "bias_a"
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        if np.ndim(b) == 0:
            return shift(as_tensor(a), float(b))
        b = Tensor(b)
    a = as_tensor(a)
    kind = _pair_kind(a, b, "add")
    out = a.data + b.data
    if kind == "same":
        return _result(out, (a, b), lambda g: (g, g))
    if kind == "bias_b":
        n = b.shape[0]
        return _result(out, (a, b), lambda g: (g, _bias_reduce(g, n)))
    n = a.shape[0]
    return _result(out, (a, b), lambda g: (_bias_reduce(g, n), g))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return shift(as_tensor(a), -float(b))
    return add(a, neg(as_tensor(b)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def shift(a: Tensor, c: float) -> Tensor:
    return _result(a.data + c, (a,), lambda g: (g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def add_const(a: Tensor, const: np.ndarray) -> Tensor:
    """``a + const`` for a numpy constant broadcastable to ``a.shape``."""
    out = a.data + const
    if out.shape != a.shape:
        raise DimensionError(f"add_const: constant {np.shape(const)} would reshape {a.shape}")
    return _result(out, (a,), lambda g: (g,))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        if np.ndim(b) == 0:
            return scale(as_tensor(a), float(b))
        b = Tensor(b)
    a = as_tensor(a)
    kind = _pair_kind(a, b, "mul")
    ad, bd = a.data, b.data
    out = ad * bd
    if kind == "same":
        return _result(out, (a, b), lambda g: (g * bd, g * ad))
    if kind == "bias_b":
        n = b.shape[0]
        return _result(out, (a, b), lambda g: (g * bd, _bias_reduce(g * ad, n)))
    n = a.shape[0]
    return _result(out, (a, b), lambda g: (_bias_reduce(g * bd, n), g * ad))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a 2-D matrix applied to every row of ``a`` (equivalent to
    flattening the leading axes of ``a``), or has exactly the same leading
    axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        out = ad @ bd
        k, n = bd.shape

        def fn(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n) if b.requires_grad else None
            return ga, gb

        return _result(out, (a, b), fn)
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul leading dimensions differ: {a.shape} @ {b.shape}")
    out = ad @ bd

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), fn)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _result(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def transpose(a: Tensor) -> Tensor:
    return swapaxes(a, -1, -2)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def expand(a: Tensor, leading: Sequence[int]) -> Tensor:
    """Repeat ``a`` over new leading axes (e.g. a shared token over a batch)."""
    leading = tuple(leading)
    out = np.broadcast_to(a.data, leading + a.shape).copy()
    axes = tuple(range(len(leading)))
    return _result(out, (a,), lambda g: (g.sum(axis=axes),))


def getitem(a: Tensor, index) -> Tensor:
    """Basic (int/slice) indexing; fancy indexing is rejected."""
    idx = index if isinstance(index, tuple) else (index,)
    for i in idx:
        if not (isinstance(i, (int, np.integer, slice)) or i is Ellipsis):
            raise ContractError(f"only basic indexing is supported, got {type(i).__name__}")
    out = a.data[index]
    shape = a.shape

    def fn(g):
        ga = np.zeros(shape, dtype=DTYPE)
        ga[index] = g
        return (ga,)

    return _result(np.array(out, dtype=DTYPE), (a,), fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _result(
        out, tensors, lambda g: tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis))
    )


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    if axis is None:
        return _result(np.array([a.data.sum()]), (a,), lambda g: (np.full(shape, g[0]),))
    out = a.data.sum(axis=axis)
    return _result(out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def relu(x: Tensor) -> Tensor:
    gate = x.data > 0
    return _result(np.where(gate, x.data, 0.0), (x,), lambda g: (g * gate,))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form avoids overflow in exp for large |x|
    s = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1.0 - t * t),))


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (x,), fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each last-axis slice to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({d},) for input {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def fn(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, _bias_reduce(g * xhat, d), _bias_reduce(g, d)

    return _result(out, (x, gain, bias), fn)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p); identity at inference."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p) * (1.0 / (1.0 - p))
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=DTYPE))


def _as_param_list(params) -> list[Tensor]:
    if hasattr(params, "values") and callable(params.values):
        return list(params.values())
    return list(params)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    n_samples: int = 50,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` recomputes a scalar loss from the current values of ``params`` and
    must be deterministic (dropout off).  When the parameters hold more than
    ``n_samples`` entries a random subset is probed; otherwise all are.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"finite-difference eps must lie in [1e-7, 1e-3], got {eps}")
    tensors = _as_param_list(params)
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = f()
    backward(loss, tape)

    entries = [(ti, j) for ti, t in enumerate(tensors) for j in range(t.size)]
    if len(entries) > n_samples:
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(entries), size=n_samples, replace=False)
        entries = [entries[i] for i in sorted(picks)]

    worst = 0.0
    for ti, j in entries:
        t = tensors[ti]
        flat = t.data.reshape(-1)
        analytic = 0.0 if t.grad is None else float(t.grad.reshape(-1)[j])
        orig = flat[j]
        flat[j] = orig + eps
        up = f().item()
        flat[j] = orig - eps
        down = f().item()
        flat[j] = orig
        numeric = (up - down) / (2.0 * eps)
        rel = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-12)
        worst = max(worst, rel)
    return worst
