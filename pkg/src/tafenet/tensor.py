"""Dense tensors with reverse-mode differentiation.

A `Tensor` wraps a contiguous numpy array. Every differentiable op records its
parents and a closure mapping the output gradient to parent gradients; calling
`backward` on a scalar walks that record in reverse topological order.

Binary elementwise ops require identical shapes. Broadcasting is explicit via
`broadcast_to`, whose adjoint sums over the expanded axes.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from tafenet import _kernels

COSINE_EPS = 1e-8


class ShapeError(ValueError):
    pass


class GradCheckError(FloatingPointError):
    pass


class _State(threading.local):
    def __init__(self):
        self.dtype = np.float32
        self.grad_enabled = True


_state = _State()


def get_dtype() -> type:
    return _state.dtype


def set_precision(bits: int) -> None:
    if bits == 32:
        _state.dtype = np.float32
    elif bits == 64:
        _state.dtype = np.float64
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


@contextlib.contextmanager
def precision(bits: int):
    old = _state.dtype
    set_precision(bits)
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad():
    old = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or _state.dtype, copy=True)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data)
        out.grad = None
        out.name = None
        out.op = op
        needs = _state.grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _not_scalar(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return Tensor._result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scale")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    # derivative at exactly 0 is taken as 0
    return Tensor._result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch by name: ``add``/``mul`` take two tensors, ``relu`` one, ``scale`` a tensor and a float."""
    if kind == "add":
        return add(*operands)
    if kind == "mul":
        return mul(*operands)
    if kind == "relu":
        return relu(*operands)
    if kind == "scale":
        return scale(*operands)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# --- structural ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {old} -> {tuple(shape)}: {exc}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "permute")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")
    return permute(a, (1, 0))


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {shape}") from None
    lead = len(shape) - len(src)
    expanded = tuple(i + lead for i, n in enumerate(src) if n == 1 and shape[i + lead] != 1)

    def back(g):
        g = g.sum(axis=tuple(range(lead)) + expanded, keepdims=True)
        return (g.reshape(src),)

    return Tensor._result(np.array(out), (a,), back, "broadcast")


def sum(a, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._result(np.asarray(out), (a,), back, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis), 1.0 / float(count))


# --- reductions with structure ---------------------------------------------


def log_softmax_rows(z) -> Tensor:
    """Row-wise ``z - logsumexp(z)``, computed with the max shift."""
    z = as_tensor(z)
    if z.ndim != 2:
        raise ShapeError(f"log_softmax_rows expects a matrix, got {z.shape}")
    if z.shape[1] < 1:
        raise ShapeError("log_softmax_rows: empty row")
    zd = z.data
    shift = zd.max(axis=1, keepdims=True)
    lse = shift + np.log(np.exp(zd - shift).sum(axis=1, keepdims=True))
    out = zd - lse
    soft = np.exp(out)
    return Tensor._result(out, (z,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),), "log_softmax")


def cosine_similarity(p, q) -> Tensor:
    """Cosine along the last axis; vectors give a scalar.

    The denominator is floored at ``COSINE_EPS`` so a zero-norm operand
    yields 0 instead of NaN.
    """
    p, q = as_tensor(p), as_tensor(q)
    _same_shape(p, q, "cosine_similarity")
    pd, qd = p.data, q.data
    dot = (pd * qd).sum(axis=-1)
    np_ = np.sqrt((pd * pd).sum(axis=-1))
    nq = np.sqrt((qd * qd).sum(axis=-1))
    raw = np_ * nq
    floored = raw < COSINE_EPS
    denom = np.where(floored, COSINE_EPS, raw)
    cos = dot / denom

    def back(g):
        g = g[..., None]
        d = denom[..., None]
        c = cos[..., None]
        active = ~floored[..., None]
        # d cos/dp = q/denom - cos * p/|p|^2 (second term vanishes on the floor)
        with np.errstate(divide="ignore", invalid="ignore"):
            corr_p = np.where(active, c * pd / np.where(active, np_[..., None] ** 2, 1), 0)
            corr_q = np.where(active, c * qd / np.where(active, nq[..., None] ** 2, 1), 0)
        gp = g * (qd / d - corr_p)
        gq = g * (pd / d - corr_q)
        return gp.astype(pd.dtype), gq.astype(qd.dtype)

    return Tensor._result(np.asarray(cos, dtype=pd.dtype), (p, q), back, "cosine")


def conv2d_same(x, w) -> Tensor:
    """Stride-1 cross-correlation with zero padding that preserves H and W.

    ``x`` is (N, H, W, C_in) or (H, W, C_in); ``w`` is (k, k, C_in, C_out).
    """
    x, w = as_tensor(x), as_tensor(w)
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d_same: bad shapes input {x.shape}, filters {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d_same: input has {x.shape[3]} channels, filters expect {w.shape[2]}")
    if x.dtype != w.dtype:
        raise ShapeError(f"conv2d_same: dtype mismatch {x.dtype} vs {w.dtype}")
    xd, wd = x.data, w.data
    out = _kernels.conv2d_same_forward(xd, wd)

    def back(g):
        g = np.ascontiguousarray(g)
        gx = _kernels.conv2d_same_backward_input(g, wd) if x.requires_grad else None
        gw = _kernels.conv2d_same_backward_filter(xd, g, wd.shape[0]) if w.requires_grad else None
        return gx, gw

    y = Tensor._result(out, (x, w), back, "conv2d")
    return reshape(y, y.shape[1:]) if single else y


# --- backward --------------------------------------------------------------


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
        for parent in reversed(node._parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Fill ``.grad`` of every parameter leaf reachable from the scalar ``loss``.

    Leaf accumulators are reset first, so repeated calls do not accumulate.
    Leaves created with ``requires_grad=False`` keep ``grad = None``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
        if node.requires_grad and not node._parents:
            node.grad = np.zeros_like(node.data)
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=parent.dtype).reshape(parent.shape)
            else:
                parent.grad += g.reshape(parent.shape)
        if node._parents:
            node.grad = None


def gradients(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    backward(loss)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


# --- finite-difference check -----------------------------------------------


def rel_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Largest relative error between backward and central differences.

    ``f`` rebuilds the scalar from the current contents of ``params`` on each
    call. Parameters must be float64.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params:
        if p.dtype != np.float64:
            raise TypeError(f"grad_check requires float64 parameters, got {p.dtype} for {p.name or p.shape}")
    analytic = [g.copy() for g in gradients(f(), params)]
    worst = 0.0
    with no_grad():
        for pi, p in enumerate(params):
            flat = p.data.reshape(-1)
            num = np.empty_like(flat)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                hi = f().item()
                flat[j] = orig - step
                lo = f().item()
                flat[j] = orig
                if not (np.isfinite(hi) and np.isfinite(lo)):
                    label = p.name or f"param[{pi}]"
                    coord = tuple(int(i) for i in np.unravel_index(j, p.shape))
                    raise GradCheckError(f"non-finite value probing {label} at coordinate {coord}")
                num[j] = (hi - lo) / (2 * step)
            worst = max(worst, float(rel_error(analytic[pi].reshape(-1), num).max()))
    return worst
