"""Dense float64 tensors with reverse-mode autodiff.

Everything downstream (the teacher, the explainers, the distillation
targets) runs on this substrate: immutable-by-convention `Tensor` values,
a small fixed op set with hand-written backward rules, a `GradTape`
parameter registry, seeded `Rng` streams, and a central-difference
gradient checker.

All arithmetic is 64-bit; there is no mixed precision anywhere.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "Rng",
    "no_grad",
    "backward",
    "softmax_scaled",
    "logit_transform",
    "expit_transform",
    "grad_check",
    "EPS_PROB",
]

# Probabilities are clamped to [EPS_PROB, 1 - EPS_PROB] before any log /
# logit so saturated sigmoids cannot produce infinities.
EPS_PROB = 1e-6

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure-value evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus (optionally) its place in a computation graph.

    `data` is always a C-contiguous float64 ndarray; `grad` is filled in
    by `backward`. Tensors are treated as immutable values: ops return new
    tensors, and sharing them across threads for reading is safe.
    """

    __slots__ = ("data", "grad", "_parents", "_backward")

    # keep numpy from hijacking `ndarray <op> Tensor`; defer to our reflected ops
    __array_ufunc__ = None

    def __init__(self, data, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # -- arithmetic ----------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward_fn) -> Tensor:
    if not _grad_enabled:
        return Tensor(data)
    return Tensor(data, _parents=parents, _backward=backward_fn)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce `grad` back to `shape` by summing over broadcast axes."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ops ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def back(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data / b.data

    def back(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), back)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log requires strictly positive input; clamp first")
    out_data = np.log(a.data)

    def back(g):
        _accumulate(a, g / a.data)

    return _make(out_data, (a,), back)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def back(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), back)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def back(g):
        _accumulate(a, g * 0.5 / out_data)

    return _make(out_data, (a,), back)


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out_data = _sigmoid_values(a.data)

    def back(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), back)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def back(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), back)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def back(g):
        _accumulate(a, g * (a.data > 0.0))

    return _make(out_data, (a,), back)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is passed through only inside the bounds."""
    a = _as_tensor(a)
    out_data = np.clip(a.data, lo, hi)

    def back(g):
        mask = (a.data > lo) & (a.data < hi)
        _accumulate(a, g * mask)

    return _make(out_data, (a,), back)


# -- reductions and linear algebra --------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(out_data, (a,), back)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape) / count)

    return _make(out_data, (a,), back)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def back(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(out_data, (a, b), back)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.ascontiguousarray(a.data.T)

    def back(g):
        _accumulate(a, g.T)

    return _make(out_data, (a,), back)


def stack_rows(rows: "Iterable[Tensor]") -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    rows = [_as_tensor(r) for r in rows]
    if not rows:
        raise ValueError("stack_rows needs at least one row")
    out_data = np.stack([r.data for r in rows])

    def back(g):
        for i, r in enumerate(rows):
            _accumulate(r, g[i])

    return _make(out_data, tuple(rows), back)


def gather_rows(table, ids) -> Tensor:
    """Row lookup `table[ids]`; the backward pass scatter-adds into the table."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.intp)
    out_data = table.data[ids]

    def back(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids, g)
        _accumulate(table, acc)

    return _make(out_data, (table,), back)


# -- fused neural-net ops ------------------------------------------------


def softmax_scaled(scores, d: int):
    """Softmax of `scores / sqrt(d)` over the last axis.

    Numerically stable (max-subtracted before exponentiation). Accepts a
    plain sequence/ndarray and returns an ndarray, or a `Tensor` for graph
    recording. Rows sum to 1 and every entry lies in (0, 1].
    """
    if d < 1:
        raise ValueError(f"scale dimension must be >= 1, got {d}")
    if isinstance(scores, Tensor):
        return _softmax_scaled_op(scores, d)
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("softmax_scaled requires at least one score")
    if not np.all(np.isfinite(arr)):
        raise ValueError("softmax_scaled requires finite scores")
    return _softmax_values(arr, d)


def _softmax_values(arr: np.ndarray, d: int) -> np.ndarray:
    z = arr / math.sqrt(d)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_scaled_op(scores: Tensor, d: int) -> Tensor:
    if not np.all(np.isfinite(scores.data)):
        raise ValueError("softmax_scaled requires finite scores")
    out_data = _softmax_values(scores.data, d)
    inv_sqrt_d = 1.0 / math.sqrt(d)

    def back(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        _accumulate(scores, out_data * (g - dot) * inv_sqrt_d)

    return _make(out_data, (scores,), back)


def conv1d_same(x, kernel, bias) -> Tensor:
    """1-d convolution over positions with zero same-padding.

    x: (L, c_in), kernel: (k, c_in, c_out), bias: (c_out,) -> (L, c_out).
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    length, c_in = x.shape
    k, kc_in, c_out = kernel.shape
    if kc_in != c_in:
        raise ValueError(f"kernel channels {kc_in} do not match input {c_in}")
    pad_l = (k - 1) // 2
    pad_r = k - 1 - pad_l
    xp = np.pad(x.data, ((pad_l, pad_r), (0, 0)))
    out_data = np.broadcast_to(bias.data, (length, c_out)).copy()
    for delta in range(k):
        out_data += xp[delta:delta + length] @ kernel.data[delta]

    def back(g):
        _accumulate(bias, g.sum(axis=0))
        dk = np.empty_like(kernel.data)
        dxp = np.zeros_like(xp)
        for delta in range(k):
            dk[delta] = xp[delta:delta + length].T @ g
            dxp[delta:delta + length] += g @ kernel.data[delta].T
        _accumulate(kernel, dk)
        _accumulate(x, dxp[pad_l:pad_l + length])

    return _make(out_data, (x, kernel, bias), back)


def global_max_pool(x) -> Tensor:
    """Max over positions: (L, c) -> (c,). Ties route gradient to the first max."""
    x = _as_tensor(x)
    idx = np.argmax(x.data, axis=0)
    cols = np.arange(x.shape[1])
    out_data = x.data[idx, cols]

    def back(g):
        acc = np.zeros_like(x.data)
        acc[idx, cols] = g
        _accumulate(x, acc)

    return _make(out_data, (x,), back)


def layer_norm(x, gamma, bias, eps: float = 1e-5) -> Tensor:
    """Per-row layer normalisation with learned scale and shift."""
    x, gamma, bias = _as_tensor(x), _as_tensor(gamma), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + bias.data

    def back(g):
        _accumulate(gamma, (g * xhat).sum(axis=0) if g.ndim == 2 else g * xhat)
        _accumulate(bias, g.sum(axis=0) if g.ndim == 2 else g)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, inv * (dxhat - m1 - xhat * m2))

    return _make(out_data, (x, gamma, bias), back)


# -- backward pass -------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss, accumulating into `.grad`."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise ValueError("backward on a non-finite loss")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


class GradTape:
    """Named-parameter registry for a recorded computation.

    Single-owner: one tape per training loop, never shared across threads.
    After `backward` every registered parameter carries a gradient of its
    own shape (zeros when the loss does not depend on it).
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def param(self, name: str, data) -> Tensor:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(data)
        self.params[name] = t
        return t

    def watch(self, name: str, t: Tensor) -> Tensor:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        self.params[name] = t
        return t

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def backward(self, loss: Tensor) -> None:
        backward(loss)
        for t in self.params.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)

    def gradients(self) -> dict[str, np.ndarray]:
        return {name: t.grad for name, t in self.params.items()}


# -- deterministic randomness ---------------------------------------------


class Rng:
    """Seeded PCG64 stream (via numpy SeedSequence).

    The same (seed, key-path) pair yields an identical value stream on
    every platform, which is what makes initialisation, prior sampling,
    and batch shuffling reproducible byte for byte.
    """

    def __init__(self, seed: int, _keys: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._keys = _keys
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((self.seed,) + _keys))
        )

    def child(self, key: int) -> "Rng":
        """Independent derived stream; children never share draws with the parent."""
        return Rng(self.seed, self._keys + (int(key),))

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return self._gen.uniform(low, high, size=size)

    def normal(self, size=None, scale: float = 1.0):
        return self._gen.normal(0.0, scale, size=size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


# -- scalar transforms ------------------------------------------------------


def logit_transform(p, temperature: float):
    """Temperature-scaled log-odds `T * ln(p / (1 - p))`.

    Probabilities are clamped to [1e-6, 1 - 1e-6] first so saturated
    inputs stay finite. Monotone in p, antisymmetric about p = 0.5.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    p = np.clip(np.asarray(p, dtype=np.float64), EPS_PROB, 1.0 - EPS_PROB)
    out = temperature * np.log(p / (1.0 - p))
    return float(out) if out.ndim == 0 else out


def expit_transform(q, temperature: float):
    """Inverse of `logit_transform`: `1 / (1 + exp(-q / T))`, always in (0, 1)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    q = np.asarray(q, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise ValueError("expit_transform requires finite input")
    out = _sigmoid_values(q / temperature)
    return float(out) if out.ndim == 0 else out


def grad_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    step: float = 1e-4,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` maps a dict of named tensors to a scalar Tensor and must be a pure
    function of those tensors (fix any sampled inputs before calling).
    The error for each entry is |analytic - fd| / max(1, |analytic|).
    """
    arrays = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = GradTape()
    tensors = {k: tape.param(k, v) for k, v in arrays.items()}
    loss = f(tensors)
    if not np.isfinite(loss.data).all():
        raise ValueError("grad_check: non-finite loss at the base point")
    tape.backward(loss)
    analytic = {k: t.grad.copy() for k, t in tape.params.items()}

    def evaluate(current: dict[str, np.ndarray]) -> float:
        with no_grad():
            value = f({k: Tensor(v) for k, v in current.items()}).item()
        if not math.isfinite(value):
            raise ValueError("grad_check: non-finite loss at a probe point")
        return value

    worst = 0.0
    for name, base in arrays.items():
        flat = base.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = evaluate(arrays)
            flat[i] = orig - step
            lo = evaluate(arrays)
            flat[i] = orig
            fd = (hi - lo) / (2.0 * step)
            err = abs(grad_flat[i] - fd) / max(1.0, abs(grad_flat[i]))
            if err > worst:
                worst = err
    return worst
