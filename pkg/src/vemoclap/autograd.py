"""Dense-tensor numeric core with reverse-mode automatic differentiation.

Just enough machinery to express and train the fusion classifier: 2-D
matmul, softmax, layer norm, dropout, temporal pooling, concatenation and
a handful of pointwise/reduction ops. Values are float32 by default;
float64 is supported so gradient verification can run at full precision.

Execution model
---------------
Ops run eagerly on numpy arrays. When a :class:`Graph` in TRAINING mode is
active (entered as a context manager), every op whose inputs require
gradients appends a tape entry; :meth:`Graph.backward` then walks the tape
in exact reverse execution order and accumulates gradients into
``Tensor.grad``. With no active graph, or in INFERENCE mode, nothing is
recorded and no gradient buffers are allocated.

NaN/Inf anywhere is a hard error at op boundaries: tensors are validated
at construction and every op validates its output, so divergence surfaces
at the op that produced it.

A Graph and its tensors belong to one thread for the duration of a
forward/backward pass; independent graphs may run on separate threads.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .rng import SplitMix64

_SUPPORTED_DTYPES = (np.float32, np.float64)

# Finite stand-in for -inf in attention masking; exp(-1e9) underflows to
# exactly 0 after max-subtraction, so masked rows carry zero weight.
MASK_BIAS = 1.0e9


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(ValueError):
    """A NaN or Inf appeared at an op boundary."""


class DegenerateInputError(ValueError):
    """Structurally valid input with no usable content (e.g. all rows masked)."""


class GraphUsageError(RuntimeError):
    """Graph/backward API used outside its contract."""


class Mode(Enum):
    TRAINING = "training"
    INFERENCE = "inference"


def _ensure_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value in {where}")


class Tensor:
    """Dense row-major float array, optionally carrying a gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _SUPPORTED_DTYPES:
                dtype = data.dtype
            else:
                dtype = np.float32
        elif np.dtype(dtype).type not in _SUPPORTED_DTYPES:
            raise TypeError(f"unsupported dtype {dtype}; use float32 or float64")
        arr = np.array(data, dtype=dtype, copy=True)
        _ensure_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # Thin operator sugar over the functional ops.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass
class _TapeEntry:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]


_ACTIVE = threading.local()


def active_graph() -> Optional["Graph"]:
    return getattr(_ACTIVE, "graph", None)


class Graph:
    """Ordered tape of executed ops; context manager activating recording.

    TRAINING mode records every op whose inputs require gradients;
    INFERENCE mode records nothing (and dropout becomes the identity).
    """

    def __init__(self, mode: Mode = Mode.TRAINING):
        self.mode = mode
        self._tape: list[_TapeEntry] = []
        self._outer: Optional[Graph] = None

    def __enter__(self) -> "Graph":
        self._outer = active_graph()
        _ACTIVE.graph = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE.graph = self._outer
        self._outer = None

    def __len__(self) -> int:
        return len(self._tape)

    def backward(self, loss: Tensor) -> None:
        """Populate .grad on every requires_grad tensor reachable from loss.

        Walks the tape in exact reverse execution order. Repeated calls
        accumulate into existing gradients.
        """
        if self.mode is not Mode.TRAINING:
            raise GraphUsageError("backward requires a TRAINING-mode graph")
        if loss.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise GraphUsageError("loss does not depend on any requires_grad tensor recorded here")

        flowing: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for entry in reversed(self._tape):
            g_out = flowing.pop(id(entry.out), None)
            if g_out is None:
                continue
            if entry.out.requires_grad:
                entry.out._accumulate_grad(g_out)
            for t, g_in in zip(entry.inputs, entry.vjp(g_out)):
                if g_in is None:
                    continue
                key = id(t)
                holders[key] = t
                seen = flowing.get(key)
                flowing[key] = g_in if seen is None else seen + g_in
        # Whatever remains was never produced by a tape entry: the leaves.
        for key, g in flowing.items():
            t = holders[key]
            if t.requires_grad:
                t._accumulate_grad(g)


def backward(loss: Tensor, graph: Optional[Graph] = None) -> None:
    """Free-function form of Graph.backward; defaults to the active graph."""
    g = graph or active_graph()
    if g is None:
        raise GraphUsageError("no graph supplied and none is active")
    g.backward(loss)


def _recording() -> Optional[Graph]:
    g = active_graph()
    return g if g is not None and g.mode is Mode.TRAINING else None


def _emit(out_data: np.ndarray, inputs: Sequence[Tensor], vjp, name: str) -> Tensor:
    """Wrap an op result, validating finiteness and recording if needed."""
    _ensure_finite(out_data, name)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = False
    graph = _recording()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph._tape.append(_TapeEntry(out, tuple(inputs), vjp))
    return out


def _same_dtype(*tensors: Tensor):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TypeError(f"mixed dtypes in op: {[str(x.dtype) for x in tensors]}")
    return dt


# ---------------------------------------------------------------------------
# Ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with da = g @ b.T and db = a.T @ g."""
    _same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (g @ bd.T if na else None, ad.T @ g if nb else None)

    return _emit(ad @ bd, (a, b), vjp, "matmul")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {x.shape}")
    return _emit(
        np.ascontiguousarray(x.data.T),
        (x,),
        lambda g: (np.ascontiguousarray(g.T),),
        "transpose",
    )


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias broadcast over rows of 2-D a."""
    _same_dtype(a, b)
    broadcast_bias = a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]
    if not broadcast_bias and a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} + {b.shape}")
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        gb = None
        if nb:
            gb = g.sum(axis=0) if broadcast_bias else g
        return (g if na else None, gb)

    return _emit(a.data + b.data, (a, b), vjp, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} * {b.shape}")
    ad, bd = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (g * bd if na else None, g * ad if nb else None)

    return _emit(ad * bd, (a, b), vjp, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _emit(x.data * c, (x,), lambda g: (g * c,), "scale")


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max-subtraction."""
    xd = x.data
    if xd.ndim < 1:
        raise ShapeError("softmax needs at least one axis")
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _emit(out, (x,), vjp, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per last-axis slice: zero mean, unit variance, then gamma * xhat + beta."""
    _same_dtype(x, gamma, beta)
    c = x.shape[-1] if x.data.ndim else 0
    if c < 1:
        raise ShapeError("layer_norm needs a nonempty last axis")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},), got {gamma.shape} / {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = np.square(xd - mu).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (xd - mu) * inv
    gd = gamma.data
    nx, ng, nb = x.requires_grad, gamma.requires_grad, beta.requires_grad
    lead_axes = tuple(range(xd.ndim - 1))

    def vjp(g):
        grad_x = None
        if nx:
            dxhat = g * gd
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            grad_x = inv * (dxhat - m1 - xhat * m2)
        grad_gamma = (g * xhat).sum(axis=lead_axes) if ng else None
        grad_beta = g.sum(axis=lead_axes) if nb else None
        return (grad_x, grad_gamma, grad_beta)

    return _emit(xhat * gd + beta.data, (x, gamma, beta), vjp, "layer_norm")


def dropout(x: Tensor, p: float, rng: Optional[SplitMix64] = None) -> Tensor:
    """Inverted dropout: active only inside a TRAINING graph, identity otherwise.

    Each element is zeroed independently with probability p and survivors
    are scaled by 1/(1-p), so inference needs no rescaling.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    graph = _recording()
    if graph is None or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout with p > 0 in TRAINING mode requires an rng")
    keep = rng.random(x.shape) >= p
    scaled_mask = keep.astype(x.dtype) / x.dtype.type(1.0 - p)
    return _emit(x.data * scaled_mask, (x,), lambda g: (g * scaled_mask,), "dropout")


def mean_pool(x: Tensor, valid: Optional[np.ndarray] = None) -> Tensor:
    """Mean over the temporal (first) axis of a [t, c] tensor.

    `valid`, when given, is a boolean row mask; the mean runs over the
    unmasked rows only. All rows masked is a degenerate-input error.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"mean_pool needs a [t, c] tensor, got {x.shape}")
    t = x.shape[0]
    if t < 1:
        raise ShapeError("mean_pool needs at least one row")
    if valid is None:
        out = x.data.mean(axis=0)
        weights = np.full((t, 1), 1.0 / t, dtype=x.dtype)
    else:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != (t,):
            raise ShapeError(f"valid mask must have shape ({t},), got {valid.shape}")
        count = int(valid.sum())
        if count == 0:
            raise DegenerateInputError("mean_pool: every row is masked")
        out = x.data[valid].mean(axis=0)
        weights = (valid.astype(x.dtype) / x.dtype.type(count))[:, None]

    return _emit(out, (x,), lambda g: (weights * g[None, :],), "mean_pool")


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Order-preserving concatenation of 1-D tensors."""
    if len(xs) == 0:
        raise ValueError("concat needs a nonempty list")
    _same_dtype(*xs)
    for t in xs:
        if t.data.ndim != 1:
            raise ShapeError(f"concat needs 1-D tensors, got shape {t.shape}")
    sizes = [t.shape[0] for t in xs]
    offsets = np.cumsum([0] + sizes)
    needs = [t.requires_grad for t in xs]

    def vjp(g):
        return tuple(
            g[offsets[i]:offsets[i + 1]] if needs[i] else None for i in range(len(sizes))
        )

    return _emit(np.concatenate([t.data for t in xs]), tuple(xs), vjp, "concat")


def concat_cols(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along columns (used to merge attention heads)."""
    if len(xs) == 0:
        raise ValueError("concat_cols needs a nonempty list")
    _same_dtype(*xs)
    rows = xs[0].shape[0]
    for t in xs:
        if t.data.ndim != 2 or t.shape[0] != rows:
            raise ShapeError(f"concat_cols needs 2-D tensors with {rows} rows, got {t.shape}")
    widths = [t.shape[1] for t in xs]
    offsets = np.cumsum([0] + widths)
    needs = [t.requires_grad for t in xs]

    def vjp(g):
        return tuple(
            g[:, offsets[i]:offsets[i + 1]] if needs[i] else None for i in range(len(widths))
        )

    return _emit(np.concatenate([t.data for t in xs], axis=1), tuple(xs), vjp, "concat_cols")


def stack_rows(xs: Sequence[Tensor]) -> Tensor:
    """Stack equal-length 1-D tensors into a [len(xs), c] tensor."""
    if len(xs) == 0:
        raise ValueError("stack_rows needs a nonempty list")
    _same_dtype(*xs)
    width = xs[0].shape[0]
    for t in xs:
        if t.data.ndim != 1 or t.shape[0] != width:
            raise ShapeError(f"stack_rows needs 1-D tensors of length {width}, got {t.shape}")
    needs = [t.requires_grad for t in xs]

    def vjp(g):
        return tuple(g[i] if needs[i] else None for i in range(len(xs)))

    return _emit(np.stack([t.data for t in xs], axis=0), tuple(xs), vjp, "stack_rows")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a 2-D tensor; backward scatters into zeros."""
    if x.data.ndim != 2:
        raise ShapeError(f"slice_cols needs a 2-D tensor, got {x.shape}")
    if not 0 <= start < stop <= x.shape[1]:
        raise ValueError(f"column range [{start}, {stop}) invalid for shape {x.shape}")
    xd = x.data

    def vjp(g):
        full = np.zeros_like(xd)
        full[:, start:stop] = g
        return (full,)

    return _emit(xd[:, start:stop].copy(), (x,), vjp, "slice_cols")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    old = x.shape
    return _emit(x.data.reshape(shape).copy(), (x,), lambda g: (g.reshape(old),), "reshape")


def log(x: Tensor) -> Tensor:
    """Natural log; log(0) trips the finiteness check at the op boundary."""
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _emit(out, (x,), lambda g: (g / xd,), "log")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor) elementwise; gradient is zero where the floor is active."""
    xd = x.data
    passthrough = (xd > floor).astype(x.dtype)
    return _emit(np.maximum(xd, x.dtype.type(floor)), (x,), lambda g: (g * passthrough,), "clamp_min")


def take_per_row(x: Tensor, cols: Sequence[int]) -> Tensor:
    """out[i] = x[i, cols[i]] for a 2-D tensor; backward scatter-adds."""
    if x.data.ndim != 2:
        raise ShapeError(f"take_per_row needs a 2-D tensor, got {x.shape}")
    idx = np.asarray(cols, dtype=np.int64)
    b, k = x.shape
    if idx.shape != (b,):
        raise ValueError(f"need one column index per row ({b}), got shape {idx.shape}")
    if idx.min(initial=0) < 0 or idx.max(initial=-1) >= k:
        raise ValueError(f"column index out of range [0, {k})")
    rows = np.arange(b)
    xd = x.data

    def vjp(g):
        full = np.zeros_like(xd)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return _emit(xd[rows, idx], (x,), vjp, "take_per_row")


def sum_all(x: Tensor) -> Tensor:
    xd = x.data

    def vjp(g):
        return (np.full(xd.shape, g, dtype=xd.dtype),)

    return _emit(np.asarray(xd.sum(), dtype=x.dtype), (x,), vjp, "sum_all")


def mean_all(x: Tensor) -> Tensor:
    xd = x.data
    inv = 1.0 / xd.size

    def vjp(g):
        return (np.full(xd.shape, g * xd.dtype.type(inv), dtype=xd.dtype),)

    return _emit(np.asarray(xd.mean(), dtype=x.dtype), (x,), vjp, "mean_all")


# ---------------------------------------------------------------------------
# Gradient verification


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    passed: bool
    checked: int
    worst_index: int

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}: max rel err {self.max_rel_err:.3e} over {self.checked} "
            f"entries (tol {self.tol:.1e})"
        )


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-4,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar f against central differences.

    f must be deterministic; this is enforced by running two TRAINING-mode
    forward passes and demanding bitwise-equal outputs (training-mode
    dropout fed from an advancing stream fails this check). The relative
    error per element is |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).

    Two precision notes. Central differences carry O(eps^2) truncation
    error, so a 1e-4 tolerance needs eps around 1e-4 on softmax-heavy
    graphs; a failure that shrinks ~100x when eps drops 10x is oracle
    truncation, not a wrong gradient. And float32 storage quantizes the
    loss at ~1e-7 relative, swamping the tolerance entirely: verify
    float64 tensors (see the tiny-config verification suite).
    """

    def run_forward() -> Tensor:
        with Graph(Mode.TRAINING):
            return f(x)

    y1 = run_forward()
    y2 = run_forward()
    if y1.shape != ():
        raise ShapeError(f"grad_check needs a scalar-valued f, got shape {y1.shape}")
    if not np.array_equal(y1.data, y2.data):
        raise GraphUsageError(
            "f is not deterministic (two forward passes differ); "
            "disable training-mode dropout or fix the rng stream"
        )

    prev_requires, prev_grad = x.requires_grad, x.grad
    x.requires_grad = True
    x.grad = None
    try:
        with Graph(Mode.TRAINING) as g:
            y = f(x)
        g.backward(y)
        if x.grad is None:
            raise GraphUsageError("f does not depend on x; nothing to check")
        g_ad = x.grad.astype(np.float64).ravel()
    finally:
        x.requires_grad = prev_requires
        x.grad = prev_grad

    flat = x.data.ravel()
    g_fd = np.empty(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi_x, hi_y = float(flat[i]), float(run_forward().data)
        flat[i] = orig - eps
        lo_x, lo_y = float(flat[i]), float(run_forward().data)
        flat[i] = orig
        g_fd[i] = (hi_y - lo_y) / (hi_x - lo_x)

    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)
    rel = np.abs(g_ad - g_fd) / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    max_rel = float(rel[worst]) if rel.size else 0.0
    return GradCheckReport(
        max_rel_err=max_rel,
        tol=tol,
        passed=max_rel <= tol,
        checked=int(flat.size),
        worst_index=worst,
    )
