"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every operation that touches a tensor requiring gradients records a node
(op name, parent nodes, saved context) on an implicit tape; :func:`grad`
walks the tape in reverse topological order and applies vector-Jacobian
rules looked up by op name. The tape is rebuilt on every forward pass.

float32 is the working precision. float64 can be selected globally (see
:func:`set_default_dtype`) for verification runs that need tight
tolerances. All operations are bit-deterministic for a fixed seed in
single-threaded execution.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "UnsupportedOpError",
    "set_default_dtype",
    "get_default_dtype",
    "set_debug_checks",
    "no_grad",
    "tensor",
    "zeros",
    "ones",
    "full",
    "randn",
    "concat",
    "grad",
    "finite_diff_grad",
    "sigmoid",
    "silu",
    "gelu",
    "clip",
    "log_softmax",
    "cross_entropy",
]

_DTYPE_NAMES = {"f32": np.float32, "f64": np.float64}
_default_dtype = np.float32
_grad_enabled = True
_debug_checks = False
_uid_counter = itertools.count()


class UnsupportedOpError(Exception):
    """A graph node's op has no registered vector-Jacobian rule."""


def set_default_dtype(name: str) -> None:
    """Select the working precision, ``"f32"`` or ``"f64"``."""
    global _default_dtype
    if name not in _DTYPE_NAMES:
        raise ValueError(f"unknown dtype {name!r}, expected 'f32' or 'f64'")
    _default_dtype = _DTYPE_NAMES[name]


def get_default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


def set_debug_checks(enabled: bool) -> None:
    """Enable per-op NaN/Inf assertions (slow, for debugging)."""
    global _debug_checks
    _debug_checks = bool(enabled)


@contextmanager
def no_grad():
    """Context manager disabling graph recording (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    """A dense array plus optional autodiff bookkeeping.

    Tensors are immutable once created except through explicit optimizer
    updates on leaf parameters (which assign ``.data`` in place).
    """

    __slots__ = ("data", "requires_grad", "uid", "_op", "_parents", "_ctx")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.uid = next(_uid_counter)
        self._op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._ctx = None
        if _debug_checks and not np.all(np.isfinite(self.data)):
            raise FloatingPointError("non-finite values in tensor")

    # -- factory for op outputs ------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, parents: tuple["Tensor", ...], ctx) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.uid = next(_uid_counter)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._op = op
            out._parents = parents
            out._ctx = ctx
        else:
            out.requires_grad = False
            out._op = None
            out._parents = ()
            out._ctx = None
        if _debug_checks and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite values produced by op {op!r}")
        return out

    # -- basic introspection ---------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        """Constant view of this tensor's data (cuts the graph)."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.uid = next(_uid_counter)
        t._op = None
        t._parents = ()
        t._ctx = None
        return t

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- coercion ----------------------------------------------------------
    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        other = self._wrap(other)
        return Tensor._from_op(self.data + other.data, "add", (self, other),
                               (self.shape, other.shape))

    __radd__ = __add__

    def __sub__(self, other):
        other = self._wrap(other)
        return Tensor._from_op(self.data - other.data, "sub", (self, other),
                               (self.shape, other.shape))

    def __rsub__(self, other):
        return self._wrap(other).__sub__(self)

    def __neg__(self):
        return Tensor._from_op(-self.data, "neg", (self,), None)

    def __mul__(self, other):
        other = self._wrap(other)
        return Tensor._from_op(self.data * other.data, "mul", (self, other),
                               (self.data, other.data))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._wrap(other)
        return Tensor._from_op(self.data / other.data, "div", (self, other),
                               (self.data, other.data))

    def __rtruediv__(self, other):
        return self._wrap(other).__truediv__(self)

    def __matmul__(self, other):
        other = self._wrap(other)
        return Tensor._from_op(self.data @ other.data, "matmul", (self, other),
                               (self.data, other.data))

    # -- shape ops ---------------------------------------------------------
    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        return Tensor._from_op(np.transpose(self.data, axes), "transpose", (self,), axes)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor._from_op(self.data.reshape(shape), "reshape", (self,), self.shape)

    def broadcast_to(self, shape) -> "Tensor":
        return Tensor._from_op(np.broadcast_to(self.data, shape).copy(), "broadcast",
                               (self,), self.shape)

    def __getitem__(self, key) -> "Tensor":
        if isinstance(key, (np.ndarray, list)) or (
            isinstance(key, tuple) and any(isinstance(k, (np.ndarray, list)) for k in key)
        ):
            raise UnsupportedOpError("advanced indexing is not a supported primitive")
        return Tensor._from_op(self.data[key].copy() if isinstance(self.data[key], np.ndarray)
                               else np.asarray(self.data[key]),
                               "slice", (self,), (self.shape, key))

    # -- reductions ----------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Tensor._from_op(self.data.sum(axis=axis, keepdims=keepdims), "sum",
                               (self,), (self.shape, axis, keepdims))

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Tensor._from_op(self.data.mean(axis=axis, keepdims=keepdims), "mean",
                               (self,), (self.shape, axis, keepdims))

    # -- elementwise nonlinearities -------------------------------------------
    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)
        return Tensor._from_op(out_data, "exp", (self,), out_data)

    def log(self) -> "Tensor":
        return Tensor._from_op(np.log(self.data), "log", (self,), self.data)

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)
        return Tensor._from_op(out_data, "tanh", (self,), out_data)

    def softmax(self, axis: int = -1) -> "Tensor":
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)
        return Tensor._from_op(out_data, "softmax", (self,), (out_data, axis))

    def layer_norm(self, eps: float = 1e-5) -> "Tensor":
        """Normalize over the last axis (no learnable affine)."""
        mu = self.data.mean(axis=-1, keepdims=True)
        var = self.data.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=self.data.dtype))
        xhat = (self.data - mu) * inv
        return Tensor._from_op(xhat.astype(self.data.dtype, copy=False), "layer_norm",
                               (self,), (xhat, inv))

    def masked_fill(self, mask: np.ndarray, value: float) -> "Tensor":
        """Replace entries where ``mask`` is true by a constant."""
        mask = np.asarray(mask, dtype=bool)
        out_data = np.where(mask, np.asarray(value, dtype=self.data.dtype), self.data)
        return Tensor._from_op(out_data.astype(self.data.dtype, copy=False), "masked_fill",
                               (self,), (mask, self.shape))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    return Tensor._from_op(data, "concat", tensors, (sizes, axis))


# ---------------------------------------------------------------------------
# Vector-Jacobian rules, looked up by op name during the reverse sweep.
# Each rule maps (ctx, upstream gradient) to one gradient per parent.
# ---------------------------------------------------------------------------

def _vjp_sum_like(shape, axis, keepdims, g):
    if axis is None:
        full_shape = (1,) * len(shape)
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        full_shape = tuple(1 if i in axes else s for i, s in enumerate(shape))
    if not keepdims:
        g = g.reshape(full_shape)
    return np.ascontiguousarray(np.broadcast_to(g, shape))


def _matmul_vjp(ctx, g):
    a, b = ctx
    if b.ndim == 1:
        # (..., k) @ (k,) -> (...,)
        ga = g[..., None] * b
        gb = _unbroadcast((a * g[..., None]).reshape(-1, a.shape[-1]).sum(axis=0), b.shape)
        return ga, gb
    if a.ndim == 1:
        ga = _unbroadcast((g[..., None, :] * b).sum(axis=-1), a.shape)
        gb = a[:, None] * g[..., None, :]
        return ga, _unbroadcast(gb, b.shape)
    ga = _unbroadcast(g @ b.swapaxes(-1, -2), a.shape)
    gb = _unbroadcast(a.swapaxes(-1, -2) @ g, b.shape)
    return ga, gb


def _slice_vjp(ctx, g):
    shape, key = ctx
    buf = np.zeros(shape, dtype=g.dtype)
    buf[key] += g
    return (buf,)


def _concat_vjp(ctx, g):
    sizes, axis = ctx
    out = []
    start = 0
    for size in sizes:
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(start, start + size)
        out.append(g[tuple(idx)])
        start += size
    return tuple(out)


def _softmax_vjp(ctx, g):
    y, axis = ctx
    dot = (g * y).sum(axis=axis, keepdims=True)
    return ((g - dot) * y,)


def _layer_norm_vjp(ctx, g):
    xhat, inv = ctx
    m1 = g.mean(axis=-1, keepdims=True)
    m2 = (g * xhat).mean(axis=-1, keepdims=True)
    return (inv * (g - m1 - xhat * m2),)


_VJP: dict[str, Callable] = {
    "add": lambda ctx, g: (_unbroadcast(g, ctx[0]), _unbroadcast(g, ctx[1])),
    "sub": lambda ctx, g: (_unbroadcast(g, ctx[0]), _unbroadcast(-g, ctx[1])),
    "neg": lambda ctx, g: (-g,),
    "mul": lambda ctx, g: (_unbroadcast(g * ctx[1], ctx[0].shape),
                           _unbroadcast(g * ctx[0], ctx[1].shape)),
    "div": lambda ctx, g: (_unbroadcast(g / ctx[1], ctx[0].shape),
                           _unbroadcast(-g * ctx[0] / (ctx[1] * ctx[1]), ctx[1].shape)),
    "matmul": _matmul_vjp,
    "transpose": lambda ctx, g: (np.transpose(g, np.argsort(ctx) if ctx is not None else None),),
    "reshape": lambda ctx, g: (g.reshape(ctx),),
    "broadcast": lambda ctx, g: (_unbroadcast(g, ctx),),
    "slice": _slice_vjp,
    "concat": _concat_vjp,
    "sum": lambda ctx, g: (_vjp_sum_like(ctx[0], ctx[1], ctx[2], g),),
    "exp": lambda ctx, g: (g * ctx,),
    "log": lambda ctx, g: (g / ctx,),
    "tanh": lambda ctx, g: (g * (1.0 - ctx * ctx),),
    "softmax": _softmax_vjp,
    "layer_norm": _layer_norm_vjp,
    "masked_fill": lambda ctx, g: (_unbroadcast(np.where(ctx[0], np.zeros((), dtype=g.dtype), g),
                                                ctx[1]),),
}


def _mean_vjp(ctx, g):
    shape, axis, keepdims = ctx
    if axis is None:
        count = int(np.prod(shape)) if shape else 1
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        count = 1
        for a in axes:
            count *= shape[a]
    out = _vjp_sum_like(shape, axis, keepdims, g)
    return (out / np.asarray(count, dtype=out.dtype),)


_VJP["mean"] = _mean_vjp


# ---------------------------------------------------------------------------
# Reverse sweep
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.uid in visited:
            continue
        visited.add(node.uid)
        stack.append((node, True))
        for p in node._parents:
            if p.uid not in visited and (p.requires_grad or p._parents):
                stack.append((p, False))
    return order


def grad(loss: Tensor) -> dict[Tensor, Tensor]:
    """Gradients of a recorded scalar loss w.r.t. every requires_grad leaf.

    Returns a mapping keyed by the leaf tensors themselves (identity
    semantics). Gradients accumulate over all usages of a leaf.
    """
    if loss.data.size != 1:
        raise ValueError(f"grad expects a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    adjoint: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = adjoint.pop(node.uid, None)
        if g is None:
            continue
        if node._op is None:
            if node.requires_grad:
                leaves[node] = g
            continue
        rule = _VJP.get(node._op)
        if rule is None:
            raise UnsupportedOpError(f"no gradient rule for op {node._op!r}")
        for parent, pg in zip(node._parents, rule(node._ctx, g)):
            if pg is None or not (parent.requires_grad or parent._parents):
                continue
            acc = adjoint.get(parent.uid)
            if acc is None:
                adjoint[parent.uid] = pg
            else:
                adjoint[parent.uid] = acc + pg
    return {leaf: Tensor(g, dtype=g.dtype) for leaf, g in leaves.items()}


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector.

    Verification oracle: independent of the tape machinery above.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        fp = float(f(xp))
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {i}")
        out.flat[i] = (fp - fm) / (2.0 * eps)
    return out


# ---------------------------------------------------------------------------
# Constructors
# ---------------------------------------------------------------------------

def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, dtype=dtype)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad, dtype=dtype)


def full(shape, value: float, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=requires_grad, dtype=dtype)


def randn(rng: np.random.Generator, shape, scale: float = 1.0,
          requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad, dtype=dtype)


# ---------------------------------------------------------------------------
# Helpers composed from the primitives above (no new gradient rules needed)
# ---------------------------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    return (x * 0.5).tanh() * 0.5 + 0.5


def silu(x: Tensor) -> Tensor:
    return x * sigmoid(x)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    c = float(np.sqrt(2.0 / np.pi))
    return x * 0.5 * ((c * (x + x * x * x * 0.044715)).tanh() + 1.0)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is zero outside the range."""
    x = x.masked_fill(x.data < lo, lo)
    return x.masked_fill(x.data > hi, hi)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = x - Tensor(x.data.max(axis=axis, keepdims=True), dtype=x.data.dtype)
    return shift - shift.exp().sum(axis=axis, keepdims=True).log()


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer class targets.

    ``logits`` has shape (..., K); ``targets`` holds integer classes with
    shape matching the leading axes.
    """
    targets = np.asarray(targets)
    k = logits.shape[-1]
    onehot = np.eye(k, dtype=logits.data.dtype)[targets.reshape(-1)]
    onehot = onehot.reshape(targets.shape + (k,))
    nll = -(log_softmax(logits) * Tensor(onehot, dtype=logits.data.dtype)).sum(axis=-1)
    return nll.mean()
