"""Dense float32 tensors with tape-based reverse-mode autodiff.

Storage is always float32, row-major. Reductions (matmul, softmax, norms)
accumulate in float64 and round once on the way out, so oracle comparisons
stay stable.

Every tensor registers its byte size with the calling thread's
:class:`AllocationMeter` under one of three categories. Kernels that work on
raw numpy buffers account for them through :meth:`AllocationMeter.track`, so a
``measure(Category.SCRATCH)`` scope sees the true working-set of a kernel.
"""

from __future__ import annotations

import builtins
import enum
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

F32 = np.float32
F64 = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class Category(enum.Enum):
    PARAMETER = "parameter"
    ACTIVATION = "activation"
    SCRATCH = "scratch"


# ---------------------------------------------------------------------------
# allocation accounting
# ---------------------------------------------------------------------------


class _Scope:
    __slots__ = ("category", "baseline", "peak")

    def __init__(self, category: Category, baseline: int):
        self.category = category
        self.baseline = baseline
        self.peak = 0


class AllocationMeter:
    """Current/peak byte counters per allocation category."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.current = {c: 0 for c in Category}
        self.peak = {c: 0 for c in Category}
        self._scopes: list[_Scope] = []

    def alloc(self, category: Category, nbytes: int) -> None:
        with self._lock:
            cur = self.current[category] + nbytes
            self.current[category] = cur
            if cur > self.peak[category]:
                self.peak[category] = cur
            for scope in self._scopes:
                if scope.category is category and cur - scope.baseline > scope.peak:
                    scope.peak = cur - scope.baseline

    def free(self, category: Category, nbytes: int) -> None:
        with self._lock:
            self.current[category] -= nbytes

    def reset(self) -> None:
        with self._lock:
            for c in Category:
                self.peak[c] = self.current[c]

    @contextmanager
    def scope(self, category: Category) -> Iterator[_Scope]:
        s = _Scope(category, self.current[category])
        self._scopes.append(s)
        try:
            yield s
        finally:
            self._scopes.remove(s)

    @contextmanager
    def track(self, category: Category, nbytes: int) -> Iterator[None]:
        """Account ``nbytes`` of raw buffer for the duration of the block."""
        self.alloc(category, nbytes)
        try:
            yield
        finally:
            self.free(category, nbytes)

    @contextmanager
    def buffers(self, category: Category, *specs: Tuple[Tuple[int, ...], type]):
        """Allocate accounted numpy work buffers: ``specs`` are (shape, dtype)."""
        arrays = [np.empty(shape, dtype=dtype) for shape, dtype in specs]
        nbytes = builtins.sum(a.nbytes for a in arrays)
        with self.track(category, nbytes):
            yield arrays


_local = threading.local()


def get_meter() -> AllocationMeter:
    m = getattr(_local, "meter", None)
    if m is None:
        m = _local.meter = AllocationMeter()
    return m


@contextmanager
def measure(category: Category = Category.SCRATCH) -> Iterator[_Scope]:
    """Context form of :func:`meter_scope`; read ``.peak`` after the block."""
    with get_meter().scope(category) as s:
        yield s


def meter_scope(category: Category, body: Callable[[], object]) -> int:
    """Run ``body`` and return the peak bytes of ``category`` it allocated."""
    with measure(category) as s:
        body()
    return s.peak


# ---------------------------------------------------------------------------
# grad mode
# ---------------------------------------------------------------------------


def grad_enabled() -> bool:
    return getattr(_local, "grad", True)


@contextmanager
def no_grad() -> Iterator[None]:
    prev = grad_enabled()
    _local.grad = False
    try:
        yield
    finally:
        _local.grad = prev


# ---------------------------------------------------------------------------
# tensor
# ---------------------------------------------------------------------------

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = (
        "data",
        "requires_grad",
        "grad",
        "category",
        "_parents",
        "_backward",
        "_meter",
        "_nbytes",
        "name",
    )

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        category: Category = Category.ACTIVATION,
        name: str = "",
    ):
        arr = np.asarray(data, dtype=F32)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.category = category
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.name = name
        self._meter = get_meter()
        self._nbytes = arr.nbytes
        self._meter.alloc(category, arr.nbytes)

    def __del__(self):
        m = getattr(self, "_meter", None)
        if m is not None:
            m.free(self.category, self._nbytes)

    @classmethod
    def parameter(cls, data, name: str = "") -> "Tensor":
        return cls(data, requires_grad=True, category=Category.PARAMETER, name=name)

    @classmethod
    def zeros(cls, shape, **kw) -> "Tensor":
        return cls(np.zeros(shape, dtype=F32), **kw)

    @property
    def shape(self) -> Tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar()

    def detach(self) -> "Tensor":
        return Tensor(self.data, category=self.category)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)


def _raise_scalar():
    raise DimensionError("item() needs a single-element tensor")


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=F32))


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# backward engine
# ---------------------------------------------------------------------------


def _topo(roots: Sequence[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    for root in roots:
        if id(root) in seen:
            continue
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        g = g.reshape(t.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=F32, copy=True)
    else:
        t.grad += g.astype(F32, copy=False)


def backward_many(seeds: Iterable[Tuple[Tensor, np.ndarray]]) -> None:
    """Reverse pass from several roots at once, each with its own upstream gradient.

    Shared subgraphs are traversed exactly once. Gradients of intermediate
    (non-leaf) tensors are released after use; leaves keep theirs.
    """
    seeds = list(seeds)
    roots = []
    for t, g in seeds:
        if not t.requires_grad:
            raise ValueError("backward root does not require grad")
        g = np.asarray(g)
        if g.shape != t.shape:
            raise DimensionError(f"seed gradient shape {g.shape} != tensor shape {t.shape}")
        if t.grad is None:
            t.grad = np.array(g, dtype=F32, copy=True) if g is not t.data else g
        else:
            t.grad += g.astype(F32, copy=False)
        roots.append(t)
    for node in reversed(_topo(roots)):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for p, g in zip(node._parents, grads):
            if g is not None and p.requires_grad:
                _accumulate(p, g)
        node.grad = None


def backward(root: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Populate ``.grad`` of every leaf reachable from ``root``.

    ``root`` must be a scalar unless an explicit upstream ``grad`` is given.
    """
    if grad is None:
        if root.size != 1:
            raise DimensionError(f"backward() needs a scalar root, got shape {root.shape}")
        grad = np.ones(root.shape, dtype=F32)
    backward_many([(root, grad)])


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with float64 accumulation.

    ``a`` may carry leading batch dims; ``b`` is either 2-D (shared weight) or
    has the same leading dims as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} x {b.shape}")
    a64 = a.data.astype(F64)
    b64 = b.data.astype(F64)
    out = np.matmul(a64, b64).astype(F32)

    def fn(g):
        g64 = g.astype(F64)
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g64, np.swapaxes(b64, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                gb = a64.reshape(-1, a64.shape[-1]).T @ g64.reshape(-1, g64.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(a64, -1, -2), g64)
        return ga, gb

    return _result(out, (a, b), fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as e:
        raise DimensionError(str(e)) from None

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), fn)


def scale(x: Tensor, c: float) -> Tensor:
    c32 = F32(c)
    return _result(x.data * c32, (x,), lambda g: (g * c32,))


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise ``a / b`` (b broadcast)."""
    out = (a.data.astype(F64) / b.data.astype(F64)).astype(F32)

    def fn(g):
        g64 = g.astype(F64)
        b64 = b.data.astype(F64)
        ga = _unbroadcast(g64 / b64, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g64 * a.data / (b64 * b64), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), fn)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data.astype(F64)).astype(F32)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    out = np.log(x.data.astype(F64)).astype(F32)
    return _result(out, (x,), lambda g: (g / x.data,))


def silu(x: Tensor) -> Tensor:
    x64 = x.data.astype(F64)
    sig = 1.0 / (1.0 + np.exp(-x64))
    out = (x64 * sig).astype(F32)
    return _result(out, (x,), lambda g: (g * (sig * (1.0 + x64 * (1.0 - sig))),))


def sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.astype(F64).sum(axis=axis, keepdims=keepdims).astype(F32)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result(np.asarray(out), (x,), fn)


def mean(x: Tensor) -> Tensor:
    return scale(sum(x), 1.0 / max(x.size, 1))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis`` with float64 accumulation."""
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    x64 = x.data.astype(F64)
    e = np.exp(x64 - x64.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        g64 = g.astype(F64)
        return (y * (g64 - (g64 * y).sum(axis=axis, keepdims=True)),)

    return _result(y.astype(F32), (x,), fn)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / rms(x) * weight`` over the last axis."""
    if weight.shape != x.shape[-1:]:
        raise DimensionError(f"rms_norm weight {weight.shape} vs input {x.shape}")
    x64 = x.data.astype(F64)
    w64 = weight.data.astype(F64)
    inv = 1.0 / np.sqrt((x64 * x64).mean(axis=-1, keepdims=True) + eps)
    xhat = x64 * inv
    out = (xhat * w64).astype(F32)

    def fn(g):
        g64 = g.astype(F64)
        gx = gw = None
        if x.requires_grad:
            gh = g64 * w64
            gx = inv * (gh - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if weight.requires_grad:
            gw = (g64 * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, gw

    return _result(out, (x, weight), fn)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise DimensionError("transpose needs rank >= 2")
    out = np.ascontiguousarray(np.swapaxes(x.data, -1, -2))
    return _result(out, (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def fn(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(parts))]

    return _result(out, tuple(parts), fn)


def concat_rows(*parts: Tensor) -> Tensor:
    return concat(parts, axis=0)


def concat_cols(*parts: Tensor) -> Tensor:
    return concat(parts, axis=-1)


def slice(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:  # noqa: A001
    """Contiguous slice ``[start, stop)`` along ``axis``."""
    if x.ndim == 0:
        raise DimensionError("cannot slice a scalar")
    n = x.shape[axis]
    if not (0 <= start <= stop <= n):
        raise IndexError(f"slice [{start}, {stop}) out of range for extent {n}")
    idx = [np.s_[:]] * x.ndim
    idx[axis] = np.s_[start:stop]
    idx = tuple(idx)
    out = np.ascontiguousarray(x.data[idx])

    def fn(g):
        full = np.zeros(x.shape, dtype=F32)
        full[idx] = g
        return (full,)

    return _result(out, (x,), fn)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; gradients scatter-add back into the rows."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding index out of range [0, {n})")
    out = table.data[ids]

    def fn(g):
        full = np.zeros(table.shape, dtype=F64)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _result(out, (table,), fn)


def take_rows(x: Tensor, ids) -> Tensor:
    """Rows of a 2-D activation; same rule as :func:`embedding_lookup`."""
    return embedding_lookup(x, ids)


def scatter_rows(src: Tensor, ids, n_rows: int) -> Tensor:
    """Inverse of :func:`take_rows`: ``out[ids[i]] += src[i]`` into ``n_rows`` rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise IndexError(f"scatter index out of range [0, {n_rows})")
    out = np.zeros((n_rows,) + src.shape[1:], dtype=F64)
    np.add.at(out, ids, src.data)
    return _result(out.astype(F32), (src,), lambda g: (g[ids],))


def where_rows(mask: np.ndarray, x: Tensor) -> Tensor:
    """Zero out entries where ``mask`` is false (mask broadcast against x)."""
    m = np.asarray(mask, dtype=F32)
    return _result(x.data * m, (x,), lambda g: (_unbroadcast(g * m, x.shape),))


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    tot = 0.0
    for p in params:
        if p.grad is not None:
            tot += float((p.grad.astype(F64) ** 2).sum())
    return float(np.sqrt(tot))


TensorLike = Union[Tensor, np.ndarray, float]
