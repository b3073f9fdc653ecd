"""Dense tensors with a reverse-mode gradient tape.

A ``Tensor`` wraps a contiguous row-major numpy array (float32 or float64)
and is treated as immutable once built; optimizers may mutate ``.data`` in
place between steps, never between a forward pass and its backward pass.

Gradients are recorded on an explicit :class:`GradTape`. While a tape is
active (as a context manager), every primitive appends an entry holding its
inputs, its output and a vector-Jacobian rule. ``GradTape.backward`` replays
the entries in reverse execution order, which is a valid topological order,
so each node is visited exactly once and gradients accumulate additively at
fan-out points.

Only the primitives the model needs are implemented; this is not a general
autodiff system. Tapes are confined to a single thread; tensors may be
shared read-only across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "GradTape",
    "GradCheckReport",
    "record",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "transpose",
    "reshape",
    "row_softmax",
    "layer_norm",
    "gelu",
    "take_rows",
    "tile_rows",
    "put_rows",
    "merge_rows",
    "slice_cols",
    "pad_cols",
    "slice_rows",
    "gather_pairs",
    "mean_axis",
    "sum_all",
    "cross_entropy_logits",
    "grad_check",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Contiguous row-major dense array of float32 or float64 scalars."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"

    # arithmetic sugar; constants are allowed on either side
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @staticmethod
    def zeros(shape, dtype=np.float32) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype))

    @staticmethod
    def ones(shape, dtype=np.float32) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype))


# ---------------------------------------------------------------------------
# Tape machinery
# ---------------------------------------------------------------------------

_TAPE_STACK: list["GradTape"] = []


class GradTape:
    """Ordered record of primitive applications for one reverse sweep.

    Each entry stores (output, inputs, rule) where ``rule(grad_out)`` returns
    one gradient array (or None) per input.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._entries)

    def backward(self, loss: Tensor, seed=None) -> dict[Tensor, np.ndarray]:
        """Run the reverse sweep from ``loss`` and return gradients.

        Returns accumulated gradients keyed by tensor identity for every
        leaf the sweep reaches (tensors that are not the output of any
        recorded op); intermediate gradients and recorded activations are
        released as soon as they are consumed, so peak memory stays near
        the forward pass's. The sweep consumes the tape: record ops anew
        before calling backward again. ``seed`` defaults to ones.
        """
        grads: dict[Tensor, np.ndarray] = {}
        owned: set[int] = set()  # tensors whose stored array is a private accumulator
        if seed is None:
            seed = np.ones(loss.shape, dtype=loss.dtype)
        grads[loss] = np.asarray(seed, dtype=loss.dtype)
        entries = self._entries
        self._entries = []
        for i in range(len(entries) - 1, -1, -1):
            out, inputs, rule = entries[i]
            entries[i] = None  # free the closure and its captured activations
            g_out = grads.pop(out, None)  # this entry is out's sole producer
            if g_out is None:
                continue
            for inp, g_in in zip(inputs, rule(g_out)):
                if g_in is None:
                    continue
                acc = grads.get(inp)
                if acc is None:
                    # stored arrays may be views into other gradients, so
                    # only mutate once we own a private copy
                    grads[inp] = g_in
                elif id(inp) in owned:
                    acc += g_in
                else:
                    grads[inp] = acc + g_in
                    owned.add(id(inp))
        return grads


def record(out: Tensor, inputs: tuple[Tensor, ...], rule) -> Tensor:
    """Append a primitive application to the active tape, if any.

    Exposed so callers (and tests) can register custom primitives.
    """
    if _TAPE_STACK:
        _TAPE_STACK[-1]._entries.append((out, inputs, rule))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b``; stacked matmul for equal leading dims.

    Backward rules: dA = dC @ B^T, dB = A^T @ dC.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.ndim != b.ndim or (a.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul leading dims differ: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    a_data, b_data = a.data, b.data

    def rule(g):
        return (
            np.matmul(g, b_data.swapaxes(-1, -2)),
            np.matmul(a_data.swapaxes(-1, -2), g),
        )

    return record(out, (a, b), rule)


def _as_const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def add(a, b) -> Tensor:
    """Elementwise sum with broadcasting; non-Tensor operands are constants."""
    out = Tensor(_as_const(a) + _as_const(b))
    tensors = tuple(t for t in (a, b) if isinstance(t, Tensor))
    shapes = tuple(t.shape for t in tensors)

    def rule(g):
        return tuple(_unbroadcast(g, s) for s in shapes)

    return record(out, tensors, rule)


def sub(a, b) -> Tensor:
    return add(a, scale(b, -1.0) if isinstance(b, Tensor) else -_as_const(b))


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting; non-Tensor operands are constants."""
    a_data, b_data = _as_const(a), _as_const(b)
    out = Tensor(a_data * b_data)
    tensors = []
    sides = []
    if isinstance(a, Tensor):
        tensors.append(a)
        sides.append(b_data)
    if isinstance(b, Tensor):
        tensors.append(b)
        sides.append(a_data)
    shapes = tuple(t.shape for t in tensors)

    def rule(g):
        return tuple(_unbroadcast(g * other, s) for other, s in zip(sides, shapes))

    return record(out, tuple(tensors), rule)


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s)
    return record(out, (a,), lambda g: (g * s,))


def transpose(a: Tensor, axes: tuple) -> Tensor:
    out = Tensor(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))
    return record(out, (a,), lambda g: (g.transpose(inverse),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    out = Tensor(a.data.reshape(shape))
    return record(out, (a,), lambda g: (g.reshape(old),))


def row_softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction for stability.

    Raises NumericError on non-finite input; output rows live on the simplex.
    """
    if not np.isfinite(x.data).all():
        raise NumericError("row_softmax input contains NaN or Inf")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def rule(g):
        dot = (p * g).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return record(out, (x,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (biased), then
    apply the elementwise affine ``gamma * y + beta``."""
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    y = centered * inv_std
    out = Tensor(gamma.data * y + beta.data)
    g_data = gamma.data

    def rule(g):
        d_beta = _unbroadcast(g, beta.shape)
        d_gamma = _unbroadcast(g * y, gamma.shape)
        gy = g * g_data
        d_x = inv_std * (
            gy
            - gy.mean(axis=-1, keepdims=True)
            - y * (gy * y).mean(axis=-1, keepdims=True)
        )
        return (d_x, d_gamma, d_beta)

    return record(out, (x, gamma, beta), rule)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    cdf = erf(x.data * _INV_SQRT2)
    cdf += 1.0
    cdf *= 0.5
    out = Tensor(x.data * cdf)
    x_data = x.data

    def rule(g):
        grad = x_data * x_data
        grad *= -0.5
        np.exp(grad, out=grad)
        grad *= _INV_SQRT2PI
        grad *= x_data
        grad += cdf
        grad *= g
        return (grad,)

    return record(out, (x,), rule)


def take_rows(x: Tensor, idx: np.ndarray, assume_unique: bool = False) -> Tensor:
    """Select rows along the first axis; backward scatter-adds.

    ``assume_unique`` lets the backward use plain fancy assignment instead
    of the much slower np.add.at; only pass it for duplicate-free indices.
    """
    out = Tensor(x.data[idx])
    shape = x.shape
    dtype = x.dtype

    def rule(g):
        gx = np.zeros(shape, dtype=dtype)
        if assume_unique:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return record(out, (x,), rule)


def tile_rows(x: Tensor, reps: int) -> Tensor:
    """Stack ``reps`` copies of the rows; backward sums the copies."""
    n = x.shape[0]
    out = Tensor(np.tile(x.data, (reps,) + (1,) * (x.ndim - 1)))

    def rule(g):
        return (g.reshape((reps, n) + g.shape[1:]).sum(axis=0),)

    return record(out, (x,), rule)


def put_rows(x: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Scatter rows into a zero matrix of ``n_rows`` rows (indices unique)."""
    out_data = np.zeros((n_rows,) + x.shape[1:], dtype=x.dtype)
    out_data[idx] = x.data
    out = Tensor(out_data)
    return record(out, (x,), lambda g: (g[idx],))


def merge_rows(parts: list[Tensor], indices: list[np.ndarray], n_rows: int, width: int | None = None) -> Tensor:
    """Assemble disjoint row groups (covering all ``n_rows``) into one matrix.

    Parts narrower than ``width`` land left-aligned with a zero tail, which
    is how sliced out-projections pad back to full width without a separate
    pad-and-accumulate pass. Backward hands each part its row/column block.
    """
    dtype = parts[0].dtype
    if width is None:
        width = parts[0].shape[1]
    padded = any(p.shape[1] != width for p in parts)
    out_data = np.zeros((n_rows, width), dtype=dtype) if padded else np.empty((n_rows, width), dtype=dtype)
    for part, idx in zip(parts, indices):
        out_data[idx, : part.shape[1]] = part.data
    out = Tensor(out_data)
    widths = [p.shape[1] for p in parts]

    def rule(g):
        return tuple(
            np.ascontiguousarray(g[idx, :w]) for idx, w in zip(indices, widths)
        )

    return record(out, tuple(parts), rule)


def slice_cols(x: Tensor, d: int) -> Tensor:
    """First ``d`` entries of the last axis (a copy, per the storage model)."""
    n = x.shape[-1]
    out = Tensor(x.data[..., :d].copy())

    def rule(g):
        gx = np.zeros(g.shape[:-1] + (n,), dtype=g.dtype)
        gx[..., :d] = g
        return (gx,)

    return record(out, (x,), rule)


def pad_cols(x: Tensor, n: int) -> Tensor:
    """Zero-pad the last axis out to length ``n``."""
    d = x.shape[-1]
    out_data = np.zeros(x.shape[:-1] + (n,), dtype=x.dtype)
    out_data[..., :d] = x.data
    out = Tensor(out_data)
    return record(out, (x,), lambda g: (g[..., :d],))


def slice_rows(w: Tensor, d: int) -> Tensor:
    """First ``d`` rows of a matrix; backward zero-pads the remaining rows."""
    shape = w.shape
    out = Tensor(w.data[:d].copy())

    def rule(g):
        gw = np.zeros(shape, dtype=g.dtype)
        gw[:d] = g
        return (gw,)

    return record(out, (w,), rule)


def gather_pairs(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick ``x[rows[i], cols[i]]`` for each i; backward scatter-adds."""
    out = Tensor(x.data[rows, cols])
    shape = x.shape
    dtype = x.dtype

    def rule(g):
        gx = np.zeros(shape, dtype=dtype)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return record(out, (x,), rule)


def mean_axis(x: Tensor, axis: int) -> Tensor:
    out = Tensor(x.data.mean(axis=axis))
    n = x.shape[axis]

    def rule(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return record(out, (x,), rule)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    shape, dtype = x.shape, x.dtype

    def rule(g):
        return (np.broadcast_to(g, shape).astype(dtype, copy=True),)

    return record(out, (x,), rule)


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row logits."""
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    rows = np.arange(z.shape[0])
    nll = lse[:, 0] - z[rows, labels]
    out = Tensor(np.asarray(nll.mean(), dtype=logits.dtype))
    probs = np.exp(z - lse)

    def rule(g):
        gz = probs.copy()
        gz[rows, labels] -= 1.0
        gz *= g / z.shape[0]
        return (gz,)

    return record(out, (logits,), rule)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of comparing tape gradients against central differences.

    ``max_rel_error`` maps parameter names to their worst relative error;
    ``failures`` lists (name, index, analytic, numeric, rel_error) for every
    entry whose error exceeded the tolerance.
    """

    passed: bool
    tol: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    failures: list[tuple] = field(default_factory=list)

    def __str__(self):
        lines = [f"grad_check {'PASSED' if self.passed else 'FAILED'} (tol={self.tol:g})"]
        for name, err in sorted(self.max_rel_error.items()):
            lines.append(f"  {name}: max rel err {err:.3e}")
        for name, idx, a, n, rel in self.failures[:20]:
            lines.append(f"  FAIL {name}{list(idx)}: analytic={a:.6e} numeric={n:.6e} rel={rel:.3e}")
        if len(self.failures) > 20:
            lines.append(f"  ... {len(self.failures) - 20} more failures")
        return "\n".join(lines)


def _rel_error(a: float, n: float) -> float:
    denom = max(abs(a), abs(n))
    if denom < 1e-6:
        return abs(a - n)  # both tiny: compare absolutely
    return abs(a - n) / denom


def grad_check(fn, params: dict[str, Tensor], tol: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` against central finite differences.

    ``fn`` must return a scalar Tensor computed from the (double precision)
    ``params``; each parameter entry is perturbed in place by ``step``.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ConfigError(f"grad_check requires float64 parameters, {name} is {p.dtype}")

    with GradTape() as tape:
        loss = fn()
    if loss.shape != ():
        raise ShapeError(f"grad_check needs a scalar loss, got shape {loss.shape}")
    grads = tape.backward(loss)

    report = GradCheckReport(passed=True, tol=tol)
    for name, p in params.items():
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros(p.shape)
        worst = 0.0
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            f_plus = fn().item()
            flat[k] = orig - step
            f_minus = fn().item()
            flat[k] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic.reshape(-1)[k])
            rel = _rel_error(a, numeric)
            worst = max(worst, rel)
            if rel > tol:
                idx = np.unravel_index(k, p.shape) if p.shape else ()
                report.failures.append((name, idx, a, numeric, rel))
                report.passed = False
        report.max_rel_error[name] = worst
    return report
