"""Minimal reverse-mode differentiation over dense numpy arrays.

Operations are recorded only while a :class:`Tape` is active::

    with Tape() as tape:
        loss = mse(model(x), target)
    grads = backward(loss)

Outside a tape every primitive is a plain numpy computation, which is what
inference and sampling use.  Broadcasting is deliberately absent: operands
must have equal shapes, except that a 0-d array may be combined with any
array.  The few places where a bias must be spread over a batch have their
own primitives (``affine``, ``conv2d``, ``add_channel_bias``).
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import math

import numpy as np

from .errors import NumericalError, ShapeError, TapeError

__all__ = [
    "Array", "Tape", "backward", "grad_check", "no_tape",
    "add", "sub", "mul", "neg", "matmul", "affine", "conv2d", "relu", "silu",
    "mean", "sum", "mse", "softmax", "log_softmax", "embedding_lookup",
    "reshape", "avg_pool2", "upsample2", "add_channel_bias", "pick",
]

_ids = itertools.count()
_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Array:
    """Dense real array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "id", "_tape", "__weakref__")
    __array_priority__ = 100  # make ndarray + Array dispatch to Array

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.id = next(_ids)
        self._tape: Tape | None = None

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
        return float(self.data)

    def detach(self) -> "Array":
        return Array(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Array(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    out: Array
    inputs: tuple[Array, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered log of the primitive operations executed while active.

    Records are appended in execution order, so every record's inputs were
    produced by earlier records (or are leaves).  A tape supports exactly one
    backward pass.
    """

    records: list[_Record] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def is_topological(self) -> bool:
        seen: set[int] = set()
        produced = {r.out.id for r in self.records}
        for r in self.records:
            for x in r.inputs:
                if x.id in produced and x.id not in seen:
                    return False
            seen.add(r.out.id)
        return True


class no_tape:
    """Suspend recording inside a ``with`` block."""

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(None)

    def __exit__(self, *exc):
        _local.stack.pop()


def _as_array(x, like: Array | None = None) -> Array:
    if isinstance(x, Array):
        return x
    dtype = like.dtype if like is not None else None
    return Array(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, inputs: tuple[Array, ...], back, op: str) -> Array:
    tape = _active_tape()
    out = Array(data)
    if tape is None or not any(x.requires_grad for x in inputs):
        return out
    for x in inputs:
        if x._tape is not None and x._tape is not tape:
            raise TapeError(f"{op}: operand was recorded on a different tape")
    out.requires_grad = True
    out._tape = tape
    tape.records.append(_Record(out, inputs, back, op))
    return out


def _sum64(x: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    return np.sum(x, axis=axis, dtype=np.float64, keepdims=keepdims).astype(x.dtype)


def backward(loss: Array) -> dict[Array, np.ndarray]:
    """Propagate d(loss)/d(node) through the tape that produced ``loss``.

    Leaf arrays with ``requires_grad`` accumulate into ``.grad``; intermediate
    nodes get their gradient assigned.  Returns ``{leaf: grad}``.
    """
    if not isinstance(loss, Array):
        raise TypeError("loss must be an Array")
    if loss.size != 1 or loss.ndim != 0:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss is detached: it was not computed under an active Tape")
    if tape.consumed:
        raise TapeError("backward already ran on this tape; record a new one")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    leaves: dict[int, Array] = {}
    for rec in reversed(tape.records):
        g = grads.pop(rec.out.id, None)
        if g is None:
            continue
        rec.out.grad = g
        for x, gx in zip(rec.inputs, rec.backward(g)):
            if gx is None or not x.requires_grad:
                continue
            if gx.shape != x.shape:
                raise ShapeError(f"{rec.op}: gradient shape {gx.shape} != operand shape {x.shape}")
            if x.id in grads:
                grads[x.id] = grads[x.id] + gx
            else:
                grads[x.id] = gx
            if x._tape is None:
                leaves[x.id] = x
    tape.records.clear()

    out: dict[Array, np.ndarray] = {}
    for i, leaf in leaves.items():
        g = grads[i].astype(leaf.dtype, copy=False)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    return out


# ---------------------------------------------------------------------------
# primitives

def _check_same(op: str, a: Array, b: Array) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, x: Array) -> np.ndarray:
    if x.ndim == 0 and g.ndim != 0:
        return np.asarray(_sum64(g))
    return g


def add(a, b) -> Array:
    a = _as_array(a, b if isinstance(b, Array) else None)
    b = _as_array(b, a)
    _check_same("add", a, b)

    def back(g):
        return _unbroadcast(g, a), _unbroadcast(g, b)

    return _result(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Array:
    a = _as_array(a, b if isinstance(b, Array) else None)
    b = _as_array(b, a)
    _check_same("sub", a, b)

    def back(g):
        return _unbroadcast(g, a), _unbroadcast(-g, b)

    return _result(a.data - b.data, (a, b), back, "sub")


def neg(a: Array) -> Array:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Array:
    a = _as_array(a, b if isinstance(b, Array) else None)
    b = _as_array(b, a)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, a), _unbroadcast(g * ad, b)

    return _result(ad * bd, (a, b), back, "mul")


def matmul(a: Array, b: Array) -> Array:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, (a, b), back, "matmul")


def affine(x: Array, w: Array, b: Array) -> Array:
    """``x @ w + b`` with ``x`` (B, in), ``w`` (in, out), ``b`` (out,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: shape mismatch {x.shape} @ {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"affine: bias shape {b.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data

    def back(g):
        return g @ wd.T, xd.T @ g, _sum64(g, axis=0)

    return _result(xd @ wd + b.data, (x, w, b), back, "affine")


def conv2d(x: Array, w: Array, b: Array | None = None) -> Array:
    """Stride-1 convolution with zero padding that preserves H and W.

    ``x`` is (B, C, H, W), ``w`` is (O, C, k, k) with odd ``k``, ``b`` is (O,).
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: shape mismatch input {x.shape} vs weight {w.shape}")
    O, C, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {w.shape}")
    if b is not None and b.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {b.shape} vs weight {w.shape}")
    B, _, H, W = x.shape
    p = kh // 2
    Hp, Wp = H + 2 * p, W + 2 * p
    # Images are laid out back to back on the padded grid so that every
    # kernel offset is one contiguous slice; border outputs are discarded.
    n = B * Hp * Wp
    margin = p * Wp + p
    offsets = [margin + (i - p) * Wp + (j - p) for i in range(kh) for j in range(kw)]
    flat = np.zeros((C, n + 2 * margin), dtype=x.dtype)
    flat[:, margin:margin + n].reshape(C, B, Hp, Wp)[:, :, p:p + H, p:p + W] = x.data.transpose(1, 0, 2, 3)
    cols = np.empty((C, kh * kw, n), dtype=x.dtype)
    for k, off in enumerate(offsets):
        cols[:, k] = flat[:, off:off + n]
    del flat
    cols = cols.reshape(C * kh * kw, n)
    wm = w.data.reshape(O, -1)
    out = (cols.T @ wm.T).T  # tall-skinny GEMM orientation is much faster in BLAS
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(O, B, Hp, Wp)[:, :, p:p + H, p:p + W].transpose(1, 0, 2, 3)

    def back(g):
        gp = np.zeros((O, B, Hp, Wp), dtype=g.dtype)
        gp[:, :, p:p + H, p:p + W] = g.transpose(1, 0, 2, 3)
        g2 = gp.reshape(O, n)
        dw = (cols @ g2.T).T.reshape(w.shape)
        dcols = (wm.T @ g2).reshape(C, kh * kw, n)
        dflat = np.zeros((C, n + 2 * margin), dtype=x.dtype)
        for k, off in enumerate(offsets):
            dflat[:, off:off + n] += dcols[:, k]
        dx = dflat[:, margin:margin + n].reshape(C, B, Hp, Wp)[:, :, p:p + H, p:p + W].transpose(1, 0, 2, 3)
        if b is None:
            return dx, dw
        return dx, dw, _sum64(g2, axis=1)

    inputs = (x, w) if b is None else (x, w, b)
    if _active_tape() is None:
        del cols  # no backward will need it
    return _result(out, inputs, back, "conv2d")


def relu(x: Array) -> Array:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def silu(x: Array) -> Array:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))

    def back(g):
        return (g * (sig * (1 + xd * (1 - sig)))).astype(x.dtype),

    return _result(xd * sig, (x,), back, "silu")


def sum(x: Array) -> Array:  # noqa: A001 - mirrors numpy naming
    def back(g):
        return np.full(x.shape, g, dtype=x.dtype),

    return _result(np.asarray(_sum64(x.data)), (x,), back, "sum")


def mean(x: Array) -> Array:
    if x.size == 0:
        raise ShapeError("mean: empty array")
    n = x.size

    def back(g):
        return np.full(x.shape, g / n, dtype=x.dtype),

    return _result(np.asarray(np.mean(x.data, dtype=np.float64), dtype=x.dtype), (x,), back, "mean")


def mse(a: Array, b: Array) -> Array:
    """Mean of squared differences over all entries."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    val = np.asarray(np.mean(np.square(diff, dtype=np.float64)), dtype=a.dtype)

    def back(g):
        d = (2.0 / n) * g * diff
        return d.astype(a.dtype), (-d).astype(b.dtype)

    return _result(val, (a, b), back, "mse")


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Array) -> Array:
    """Softmax along the last axis."""
    s = _softmax_np(x.data)

    def back(g):
        return s * (g - np.sum(g * s, axis=-1, keepdims=True)),

    return _result(s, (x,), back, "softmax")


def log_softmax(x: Array) -> Array:
    """Log-softmax along the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    out = z - lse

    def back(g):
        return g - np.exp(out) * np.sum(g, axis=-1, keepdims=True),

    return _result(out, (x,), back, "log_softmax")


def embedding_lookup(table: Array, idx) -> Array:
    """Rows of ``table`` (N, E) selected by integer ``idx`` (B,)."""
    idx = np.asarray(idx)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if idx.ndim != 1 or idx.dtype.kind not in "iu":
        raise ShapeError(f"embedding_lookup: indices must be 1-D integers, got {idx.shape} {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: index out of range for table {table.shape}")

    def back(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g)
        return dt,

    return _result(table.data[idx], (table,), back, "embedding_lookup")


def reshape(x: Array, shape: tuple[int, ...]) -> Array:
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def avg_pool2(x: Array) -> Array:
    """2x2 average pooling of (B, C, H, W) with even H, W."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2: spatial dims must be even, got {x.shape}")
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def back(g):
        return np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3),

    return _result(out, (x,), back, "avg_pool2")


def upsample2(x: Array) -> Array:
    """Nearest-neighbour 2x upsampling of (B, C, H, W)."""
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def back(g):
        return g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),

    return _result(out, (x,), back, "upsample2")


def add_channel_bias(x: Array, v: Array) -> Array:
    """``x[b, c, :, :] + v[b, c]`` for ``x`` (B, C, H, W) and ``v`` (B, C)."""
    if x.ndim != 4 or v.shape != x.shape[:2]:
        raise ShapeError(f"add_channel_bias: shape mismatch {x.shape} vs {v.shape}")

    def back(g):
        return g, _sum64(g, axis=(2, 3))

    return _result(x.data + v.data[:, :, None, None], (x, v), back, "add_channel_bias")


def pick(x: Array, idx) -> Array:
    """``x[b, idx[b]]`` for ``x`` (B, K)."""
    idx = np.asarray(idx)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"pick: shape mismatch {x.shape} vs indices {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise IndexError(f"pick: index out of range for {x.shape}")
    rows = np.arange(x.shape[0])

    def back(g):
        d = np.zeros_like(x.data)
        d[rows, idx] = g
        return d,

    return _result(x.data[rows, idx], (x,), back, "pick")


# ---------------------------------------------------------------------------
# verification

def grad_check(
    f: Callable[[], Array],
    params: Sequence[Array],
    epsilon: float = 1e-6,
    floor: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    stencil: int = 3,
) -> float:
    """Worst relative error between backprop and central differences.

    ``f`` rebuilds a scalar from ``params`` each time it is called.  The
    relative error at a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    With ``max_coords`` only that many randomly chosen coordinates per
    parameter are probed.  ``stencil=5`` uses the fourth-order central
    formula, which tolerates a larger ``epsilon`` and so suffers far less
    rounding noise when the function value is large next to its gradient.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if stencil == 3:
        offsets, weights = (1, -1), (0.5, -0.5)
    elif stencil == 5:
        offsets, weights = (2, 1, -1, -2), (-1 / 12, 8 / 12, -8 / 12, 1 / 12)
    else:
        raise ValueError("stencil must be 3 or 5")
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
        p.grad = None
    with Tape():
        loss = f()
    base = float(loss.data)
    if not np.isfinite(base):
        raise NumericalError(f"non-finite loss {base} at the unperturbed point")
    backward(loss)

    worst = 0.0
    for k, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for i in coords:
            old = flat[i]
            values = []
            with no_tape():
                for m in offsets:
                    flat[i] = old + m * epsilon
                    values.append(float(f().data))
            flat[i] = old
            if not np.all(np.isfinite(values)):
                raise NumericalError(f"non-finite value probing parameter {k} coordinate {int(i)}")
            num = math.fsum(w * v for w, v in zip(weights, values)) / epsilon
            a = float(analytic.reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
