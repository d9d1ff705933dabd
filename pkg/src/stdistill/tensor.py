"""Dense float tensors with reverse-mode automatic differentiation.

The execution model is define-by-run: every primitive records its inputs
and a backward closure on the output tensor, so the chain of recorded
operations (the computation record) is the DAG reachable from a loss.
``backward`` walks that DAG in reverse topological order.

Conventions:
  - forward data is float32 unless the caller passes float64 arrays
    (gradient checking runs the same graph in float64);
  - gradients are accumulated in float64 and rounded to the tensor's
    dtype once backward finishes;
  - no primitive ever mutates an input buffer;
  - every primitive validates that its output is finite.

Stochastic primitives (dropout) draw from a counter-based Philox stream
keyed by ``(seed, site tag)``, so masks do not depend on the order in
which graph nodes are evaluated.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import GradCheckError, MaskError, NonFiniteError, ShapeError

Array = np.ndarray


def _contig(arr: Array) -> Array:
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        return np.ascontiguousarray(arr)
    return arr


def _as_float_array(data, dtype=None) -> Array:
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
    return _contig(arr.astype(dtype, copy=False))


class Tensor:
    """A dense row-major float array participating in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        if any(d <= 0 for d in self.data.shape):
            raise ShapeError(f"dimensions must be positive, got {self.data.shape}")
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], Sequence[Array | None]] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same values cut loose from the graph."""
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar; every arithmetic route goes through the primitives below
    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    def __radd__(self, other):
        return add(_coerce(other, self.dtype), self)

    def __sub__(self, other):
        return subtract(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return subtract(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def constant(data, dtype=None) -> Tensor:
    """A graph constant: frozen values that never receive gradient."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def _check_finite(out: Array, op: str) -> None:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"non-finite value produced by '{op}'")


def _node(out_data: Array, op: str, parents: tuple[Tensor, ...],
          backward: Callable[[Array], Sequence[Array | None]]) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    out._op = op
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _node(out, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _node(out, "subtract", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _node(out, "multiply", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _node(a.data * s, "scale", (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _node(out, "relu", (a,), lambda g: (g * (a.data > 0),))


# ---------------------------------------------------------------------------
# structural primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, with numpy-style stacking on leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g: Array):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, "matmul", (a, b), backward)


def transpose(a: Tensor, axis0: int = -2, axis1: int = -1) -> Tensor:
    out = np.swapaxes(a.data, axis0, axis1)
    return _node(out, "transpose", (a,), lambda g: (np.swapaxes(g, axis0, axis1),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _node(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(tensors)
    if not ts:
        raise ShapeError("concatenate needs at least one tensor")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array):
        pieces = []
        for i in range(len(ts)):
            index = [slice(None)] * g.ndim
            index[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            pieces.append(g[tuple(index)])
        return tuple(pieces)

    return _node(out, "concatenate", ts, backward)


def slice_(a: Tensor, key) -> Tensor:
    """Basic (view-style) slicing; gradient scatters back into place."""
    out = a.data[key]

    def backward(g: Array):
        full = np.zeros(a.shape, dtype=np.float64)
        full[key] = g
        return (full,)

    return _node(_contig(np.asarray(out)), "slice", (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g: Array):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _node(np.asarray(out), "sum", (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims) if axes else a.data.copy()

    def backward(g: Array):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape) / count,)

    return _node(np.asarray(out), "mean", (a,), backward)


def amax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum over one axis; ties share the gradient evenly."""
    axis = axis % a.ndim
    out = a.data.max(axis=axis, keepdims=keepdims)

    def backward(g: Array):
        if not keepdims:
            g = np.expand_dims(g, axis)
        peak = a.data.max(axis=axis, keepdims=True)
        mask = (a.data == peak)
        ties = mask.sum(axis=axis, keepdims=True)
        return (g * mask / ties,)

    return _node(np.asarray(out), "amax", (a,), backward)


# ---------------------------------------------------------------------------
# normalization and probability primitives


def softmax_masked(x: Tensor, mask) -> Tensor:
    """Row-wise (last axis) softmax over valid positions only.

    Masked positions come out exactly 0; each row must keep at least one
    valid position. Stabilized by subtracting the row max over valid
    entries.
    """
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not m.any(axis=-1).all():
        raise MaskError("softmax_masked: a row has no valid position")
    neg = np.where(m, x.data, -np.inf)
    rowmax = neg.max(axis=-1, keepdims=True)
    shifted = np.where(m, x.data - rowmax, 0)
    e = np.exp(shifted) * m
    denom = e.sum(axis=-1, keepdims=True)
    out = (e / denom).astype(x.dtype)

    def backward(g: Array):
        # VJP of softmax; masked entries hold 0 so contribute nothing
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _node(out, "softmax_masked", (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    """Numerically stable log-softmax over the last axis."""
    rowmax = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - rowmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def backward(g: Array):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _node(out, "log_softmax", (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm needs a feature axis of size >= 2, got {d}")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},), "
                         f"got {gamma.shape} and {beta.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = (gamma.data * xhat + beta.data).astype(x.dtype)

    def backward(g: Array):
        dxhat = g * gamma.data
        # standard layer-norm VJP, all in one pass over the row
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        reduce_axes = tuple(range(x.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        return dx, dgamma, dbeta

    return _node(out, "layer_norm", (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# stochastic primitives


def _site_key(seed: int, tag: str) -> np.ndarray:
    digest = hashlib.blake2b(f"{seed}/{tag}".encode(), digest_size=16).digest()
    return np.frombuffer(digest, dtype=np.uint64)


def dropout_mask(shape: tuple[int, ...], p: float, seed: int, tag: str) -> Array:
    """Inverted-dropout keep mask for a named call site.

    Philox is counter-based and keyed by ``(seed, tag)``, so the mask for a
    site is fixed regardless of when it is drawn.
    """
    gen = np.random.Generator(np.random.Philox(key=_site_key(seed, tag)))
    keep = gen.random(shape) >= p
    return keep.astype(np.float32) / np.float32(1.0 - p)


def dropout(x: Tensor, p: float, seed: int, tag: str) -> Tensor:
    """Train-mode dropout. Call sites pass a stable tag for determinism."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return _node(x.data.copy(), "dropout", (x,), lambda g: (g,))
    keep = dropout_mask(x.shape, p, seed, tag).astype(x.dtype)
    return _node(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# composite helpers (built entirely from the primitives above)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    diff = subtract(a, b)
    return mean(multiply(diff, diff))


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Accumulation happens in float64; results are rounded to each tensor's
    dtype. Frozen tensors (requires_grad=False) receive nothing.
    """
    if loss.shape != ():
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))

    acc: dict[int, Array] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = acc.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.astype(node.dtype)
        else:
            node.grad = (node.grad.astype(np.float64) + g).astype(node.dtype)
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if not np.isfinite(pg).all():
                raise NonFiniteError(f"non-finite gradient out of '{node._op}'")
            prev = acc.get(id(parent))
            pg = np.asarray(pg, dtype=np.float64)
            acc[id(parent)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tol: float
    n_checked: int
    worst_index: tuple[int, ...] | None

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"[{status}] {self.name}: max rel err {self.max_rel_error:.3e} "
                f"(tol {self.tol:.1e}, {self.n_checked} elements)")


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3,
               tol: float = 1e-4, name: str = "f") -> GradCheckReport:
    """Compare the analytic gradient of ``f`` at ``x`` to central differences.

    Runs the graph at float64 so the finite-difference oracle is accurate;
    ``f`` must be deterministic (disable dropout). The relative error uses a
    floor of 1e-3 in the denominator so that near-zero entries are compared
    absolutely.
    """
    if not 1e-4 <= h <= 1e-2:
        raise GradCheckError(f"step size h must lie in [1e-4, 1e-2], got {h}")
    base = x.data.astype(np.float64)

    def run(values: Array) -> tuple[float, Tensor]:
        t = Tensor(values.copy(), requires_grad=True, dtype=np.float64)
        out = f(t)
        if out.shape != ():
            raise GradCheckError(f"grad_check target '{name}' must return a scalar")
        return out.item(), t

    y0, _ = run(base)
    y1, _ = run(base)
    if y0 != y1:
        raise GradCheckError(f"'{name}' is not deterministic: {y0!r} != {y1!r}")

    probe = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    backward(f(probe))
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        bump = flat.copy()
        bump[i] += h
        plus, _ = run(bump.reshape(base.shape))
        bump[i] -= 2 * h
        minus, _ = run(bump.reshape(base.shape))
        numeric.reshape(-1)[i] = (plus - minus) / (2 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    rel = np.abs(analytic - numeric) / denom
    worst = int(rel.argmax()) if rel.size else 0
    return GradCheckReport(
        name=name,
        max_rel_error=float(rel.max()) if rel.size else 0.0,
        tol=tol,
        n_checked=int(base.size),
        worst_index=tuple(np.unravel_index(worst, base.shape)) if base.ndim else None,
    )
