"""Dense float arrays with reverse-mode automatic differentiation.

Arrays are immutable once produced by an op. Every op computes its forward
value eagerly with numpy and, when a GradientTape is active, records a
backward closure on it. Training state is float32; the same ops run in
float64 when fed float64 inputs, which is what the finite-difference
oracles use.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from ifm.errors import ContractError, DimensionError, NumericError

_ACTIVE_TAPE: "GradientTape | None" = None

# When enabled, every op output is checked for NaN/Inf. Off by default for
# speed; flipped on by tests and the selftest suite.
_FINITE_CHECKS = False


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf validation. Returns the previous setting."""
    global _FINITE_CHECKS
    previous = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return previous


class Array:
    """A dense float array, the unit of all model state.

    Attributes:
        data: row-major numpy ndarray, float32 (or float64 for oracles).
        requires_grad: leaf flag; backward() fills .grad for such leaves.
        grad: gradient buffer, populated by GradientTape.gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "_needs")

    def __init__(self, data, requires_grad: bool = False):
        if type(data) is not np.ndarray:
            data = np.asarray(data)
        if data.dtype != np.float32 and data.dtype != np.float64:
            data = data.astype(np.float32)
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        # True if this node or any ancestor requires a gradient; lets the
        # tape skip recording constant subgraphs.
        self._needs = self.requires_grad

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Array":
        return Array(self.data)

    def __repr__(self) -> str:
        return f"Array(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; the named functions below do the work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        return multiply(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def parameter(data) -> Array:
    """A trainable leaf."""
    return Array(data, requires_grad=True)


class GradientTape:
    """Records ops in execution order; replays them in reverse for grads.

    Usage:
        with GradientTape() as tape:
            loss = ...
        grads = tape.gradients(loss)
    """

    def __init__(self):
        self._records: list[tuple[Array, tuple[Array, ...], Callable]] = []
        self._outer: GradientTape | None = None

    def __enter__(self) -> "GradientTape":
        global _ACTIVE_TAPE
        self._outer = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._outer
        return False

    def record(self, out: Array, parents: tuple[Array, ...], backward: Callable) -> None:
        self._records.append((out, parents, backward))

    def __len__(self) -> int:
        return len(self._records)

    def gradients(self, root: Array) -> dict[int, np.ndarray]:
        """Backpropagate from a scalar root through every recorded op.

        Returns a map id(array) -> gradient ndarray, and additionally sets
        .grad on every requires_grad leaf reached (accumulating if a grad
        is already present). Gradients accumulate additively across fan-out.
        """
        if root.size != 1:
            raise ContractError(f"backward root must be scalar-shaped, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        holders: dict[int, Array] = {id(root): root}
        for out, parents, backward in reversed(self._records):
            gout = grads.get(id(out))
            if gout is None:
                continue
            pgrads = backward(gout)
            for parent, pg in zip(parents, pgrads):
                if pg is None or not parent._needs:
                    continue
                key = id(parent)
                have = grads.get(key)
                grads[key] = pg if have is None else have + pg
                holders[key] = parent
        for key, holder in holders.items():
            if holder.requires_grad:
                g = grads[key]
                holder.grad = g if holder.grad is None else holder.grad + g
        return grads


def backward(root: Array, tape: GradientTape) -> dict[int, np.ndarray]:
    """Functional alias for tape.gradients(root)."""
    return tape.gradients(root)


def _as_array(x) -> Array:
    return x if type(x) is Array else Array(x)


def _make(data: np.ndarray, parents: tuple[Array, ...], backward: Callable) -> Array:
    out = Array.__new__(Array)
    out.data = data
    out.requires_grad = False
    out.grad = None
    needs = False
    for p in parents:
        if p._needs:
            needs = True
            break
    out._needs = needs
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError("op produced a non-finite value")
    if needs and _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.record(out, parents, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# elementwise and linear-algebra primitives
# --------------------------------------------------------------------------


def add(a, b) -> Array:
    a, b = _as_array(a), _as_array(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from e

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bwd)


def subtract(a, b) -> Array:
    a, b = _as_array(a), _as_array(b)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise DimensionError(f"subtract: shapes {a.shape} and {b.shape} do not broadcast") from e

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bwd)


def multiply(a, b) -> Array:
    a, b = _as_array(a), _as_array(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise DimensionError(f"multiply: shapes {a.shape} and {b.shape} do not broadcast") from e

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bwd)


def scale(a, s: float) -> Array:
    a = _as_array(a)
    s = float(s)
    out = a.data * np.asarray(s, dtype=a.dtype)

    def bwd(g):
        return (g * s,)

    return _make(out, (a,), bwd)


def matmul(a, b) -> Array:
    """Matrix product with batched leading dims. Operands must be >= 2-D."""
    a, b = _as_array(a), _as_array(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bwd)


def reshape(a, shape) -> Array:
    a = _as_array(a)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), bwd)


def transpose(a, axes: Sequence[int]) -> Array:
    a = _as_array(a)
    axes = tuple(axes)
    out = a.data.transpose(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))

    def bwd(g):
        return (g.transpose(inverse),)

    return _make(out, (a,), bwd)


def concat(parts: Sequence[Array], axis: int = 0) -> Array:
    parts = [_as_array(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(parts))
        )

    return _make(out, tuple(parts), bwd)


def split(a, sizes: Sequence[int], axis: int = 0) -> list[Array]:
    a = _as_array(a)
    if sum(sizes) != a.shape[axis]:
        raise DimensionError(f"split sizes {sizes} do not cover axis {axis} of {a.shape}")
    pieces = []
    start = 0
    for n in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + n)
        piece_data = np.ascontiguousarray(a.data[tuple(idx)])
        sl = tuple(idx)

        def bwd(g, sl=sl):
            full = np.zeros_like(a.data)
            full[sl] = g
            return (full,)

        pieces.append(_make(piece_data, (a,), bwd))
        start += n
    return pieces


def gather_rows(a, index) -> Array:
    """Select rows along axis 0; backward scatter-adds."""
    a = _as_array(a)
    index = np.asarray(index, dtype=np.int64)
    out = a.data[index]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), bwd)


def add_rows(a, rows, index) -> Array:
    """Return a + scatter(rows at index); used for per-row injections."""
    a, rows = _as_array(a), _as_array(rows)
    index = np.asarray(index, dtype=np.int64)
    out = a.data.copy()
    np.add.at(out, index, rows.data)

    def bwd(g):
        return g, g[index]

    return _make(out, (a, rows), bwd)


def embedding(table, ids) -> Array:
    """Row lookup into a (vocab, dim) table."""
    table = _as_array(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids] if ids.size else np.zeros((0, table.shape[1]), dtype=table.dtype)

    def bwd(g):
        full = np.zeros_like(table.data)
        if ids.size:
            np.add.at(full, ids, g)
        return (full,)

    return _make(out, (table,), bwd)


# --------------------------------------------------------------------------
# nonlinearities and normalization
# --------------------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Array:
    """tanh-approximate GELU."""
    a = _as_array(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * (x2 * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + (3 * 0.044715) * x2)
        dx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * dx,)

    return _make(out.astype(x.dtype), (a,), bwd)


def softmax(a) -> Array:
    """Softmax over the last axis, numerically stabilized."""
    a = _as_array(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _make(p.astype(a.dtype), (a,), bwd)


def masked_softmax(a, mask: np.ndarray) -> Array:
    """Softmax over the last axis restricted to mask==True positions.

    Excluded positions contribute an exact 0 to both the numerator and the
    normalizer (their score is replaced by -inf, and exp(-inf) underflows
    to a hard zero), so their inputs cannot influence the output even at
    the bit level. Every row must have at least one allowed position.
    """
    a = _as_array(a)
    if mask.dtype != np.bool_:
        mask = np.asarray(mask, dtype=bool)
    masked = np.where(mask, a.data, a.dtype.type(-np.inf))
    with np.errstate(invalid="ignore"):
        z = masked - masked.max(axis=-1, keepdims=True)
        e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _make(p, (a,), bwd)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Array:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = _as_array(a), _as_array(gain), _as_array(bias)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    norm = (x - mu) * inv
    out = gain.data * norm + bias.data

    def bwd(g):
        gn = g * gain.data
        dx = inv * (gn - gn.mean(axis=-1, keepdims=True) - norm * (gn * norm).mean(axis=-1, keepdims=True))
        sum_axes = tuple(range(g.ndim - 1))
        ggain = (g * norm).sum(axis=sum_axes)
        gbias = g.sum(axis=sum_axes)
        return dx.astype(x.dtype), _unbroadcast(ggain, gain.shape), _unbroadcast(gbias, bias.shape)

    return _make(out.astype(x.dtype), (a, gain, bias), bwd)


# --------------------------------------------------------------------------
# reductions and losses
# --------------------------------------------------------------------------


def reduce_sum(a) -> Array:
    a = _as_array(a)
    out = a.data.sum(dtype=a.dtype).reshape(())

    def bwd(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(out, (a,), bwd)


def reduce_mean(a) -> Array:
    a = _as_array(a)
    n = a.size
    out = (a.data.sum(dtype=np.float64) / n).astype(a.dtype).reshape(())

    def bwd(g):
        return (np.broadcast_to(g / n, a.shape).astype(a.dtype),)

    return _make(out, (a,), bwd)


def mse(pred, target) -> Array:
    """Mean squared error over all elements."""
    pred, target = _as_array(pred), _as_array(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff.astype(np.float64) ** 2).mean(), dtype=pred.dtype).reshape(())

    def bwd(g):
        base = (2.0 / n) * diff * g
        return base.astype(pred.dtype), (-base).astype(pred.dtype)

    return _make(out, (pred, target), bwd)


def cross_entropy_logits(logits, targets) -> Array:
    """Per-row cross entropy: (N, V) logits, (N,) integer targets -> (N,)."""
    logits = _as_array(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise DimensionError(f"cross entropy wants (N,V) and (N,), got {logits.shape}, {targets.shape}")
    vocab = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"cross entropy target outside vocab of size {vocab}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    sums = e.sum(axis=-1, keepdims=True)
    probs = e / sums
    rows = np.arange(targets.shape[0])
    losses = (np.log(sums[:, 0]) - z[rows, targets]).astype(logits.dtype)

    def bwd(g):
        grad = probs * g[:, None]
        grad[rows, targets] -= g
        return (grad.astype(logits.dtype),)

    return _make(losses, (logits,), bwd)


def weighted_sum(values, weights: np.ndarray) -> Array:
    """Dot a vector of values with constant weights -> scalar."""
    values = _as_array(values)
    weights = np.asarray(weights, dtype=values.dtype)
    if weights.shape != values.shape:
        raise DimensionError(f"weighted_sum shapes differ: {values.shape} vs {weights.shape}")
    out = np.asarray(float(values.data.astype(np.float64) @ weights.astype(np.float64)), dtype=values.dtype).reshape(())

    def bwd(g):
        return (g * weights,)

    return _make(out, (values,), bwd)
