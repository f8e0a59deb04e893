"""Dense float64 tensors with a dynamic reverse-mode tape.

Every op records a closure mapping the output gradient to gradients of its
inputs. The tape is rebuilt on every forward pass, so data-dependent control
flow (variable object counts, early-stopping loops) needs no special casing.
"""
from __future__ import annotations

import contextlib
import hashlib
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad=None):
        backward(self, grad)

    def zero_grad(self):
        self.grad = None

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __matmul__ = lambda a, b: matmul(a, b)
    __rmatmul__ = lambda a, b: matmul(b, a)
    __neg__ = lambda a: neg(a)
    __getitem__ = lambda a, idx: getitem(a, idx)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, fn: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError("non-finite values produced by forward op")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_data(a: np.ndarray, b: np.ndarray, op):
    try:
        return op(a, b)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    out = _broadcast_data(a.data, b.data, np.add)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    out = _broadcast_data(a.data, b.data, np.subtract)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = _broadcast_data(ad, bd, np.multiply)
    return _make(out, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = _broadcast_data(ad, bd, np.divide)
    return _make(out, (a, b), lambda g: (_unbroadcast(g / bd, ad.shape),
                                         _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(x ** p, (a,), lambda g: (g * p * x ** (p - 1),))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dims")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeError(f"matmul shape mismatch {ad.shape} @ {bd.shape}") from exc

    def fn(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
    return _make(out, (a, b), fn)


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)
    return _make(np.asarray(out, dtype=DTYPE), (a,), fn)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def logsumexp(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    x = a.data
    axes = _norm_axes(axis, a.ndim)
    m = x.max(axis=axes, keepdims=True)
    if not np.isfinite(m).all():
        raise NonFiniteError("logsumexp over non-finite values")
    lse = m + np.log(np.exp(x - m).sum(axis=axes, keepdims=True))
    out = lse if keepdims else np.squeeze(lse, axis=axes)
    soft = np.exp(x - lse)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * soft,)
    return _make(np.asarray(out, dtype=DTYPE), (a,), fn)


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse
    soft = np.exp(out)
    return _make(out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------- elementwise

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _make(out, (a,), lambda g: (g / x,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return _make(out, (a,), lambda g: (g * _sigmoid_np(x),))


def elu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    pos = x > 0
    out = np.where(pos, x, np.expm1(np.minimum(x, 0.0)))
    return _make(out, (a,), lambda g: (g * np.where(pos, 1.0, out + 1.0),))


def clamp(a, lo=None, hi=None) -> Tensor:
    """Clip values; the gradient passes only where the input lies inside [lo, hi]."""
    a = as_tensor(a)
    x = a.data
    out = np.clip(x, lo, hi)
    inside = np.ones_like(x, dtype=bool)
    if lo is not None:
        inside &= x >= lo
    if hi is not None:
        inside &= x <= hi
    return _make(out, (a,), lambda g: (g * inside,))


def where(mask, a, b) -> Tensor:
    """Select ``a`` where mask is true, else ``b``. The mask is a constant."""
    a, b = as_tensor(a), as_tensor(b)
    m = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape
    out = np.where(m, a.data, b.data)
    return _make(out, (a, b), lambda g: (_unbroadcast(np.where(m, g, 0.0), sa),
                                         _unbroadcast(np.where(m, 0.0, g), sb)))


# ---------------------------------------------------------------- structure

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {orig} to {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(orig),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.array(a.data[idx], dtype=DTYPE)
    fancy = isinstance(idx, (list, np.ndarray)) or (
        isinstance(idx, tuple) and any(isinstance(i, (list, np.ndarray)) for i in idx))

    def fn(g):
        full = np.zeros(shape)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)
    return _make(out, (a,), fn)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat shape mismatch") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, tuple(ts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError("stack shape mismatch") from exc
    n = len(ts)
    return _make(out, tuple(ts), lambda g: tuple(np.moveaxis(g, axis, 0)[i] for i in range(n)))


def gather(a, idx: np.ndarray, axis: int) -> Tensor:
    """``np.take_along_axis`` with a gradient (duplicates accumulate)."""
    a = as_tensor(a)
    shape = a.shape
    axis = axis % a.ndim
    idx = np.asarray(idx)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def fn(g):
        grids = list(np.ix_(*[np.arange(s) for s in idx.shape]))
        grids[axis] = idx
        full = np.zeros(shape)
        np.add.at(full, tuple(grids), g)
        return (full,)
    return _make(out, (a,), fn)


def scatter_rows(a, idx: np.ndarray, n: int) -> Tensor:
    """Zeros of length ``n`` along axis 0 with ``out[idx] = a``; ``idx`` must be unique."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise ValueError("scatter indices must be unique")
    out = np.zeros((n,) + a.shape[1:])
    out[idx] = a.data
    return _make(out, (a,), lambda g: (g[idx],))


# ---------------------------------------------------------------- backward

def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node that requires grad."""
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != loss.shape:
            raise ShapeError("seed gradient shape mismatch")
    if not loss.requires_grad:
        return

    topo = []
    seen = set()
    stack_ = [(loss, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    grads = {id(loss): grad}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = gp if key not in grads else grads[key] + gp


# ---------------------------------------------------------------- registry

class ParamRegistry:
    """Named learnable tensors, iterated in lexicographic name order."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self.names())

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._entries[n]) for n in self.names()]

    def num_params(self) -> int:
        return sum(t.size for t in self._entries.values())

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (np.zeros_like(t.data) if t.grad is None else t.grad) for n, t in self.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._entries) - set(arrays)
        extra = set(arrays) - set(self._entries)
        if missing or extra:
            raise KeyError(f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for n, t in self._entries.items():
            arr = np.asarray(arrays[n], dtype=DTYPE)
            if arr.shape != t.shape:
                raise ShapeError(f"{n}: expected shape {t.shape}, got {arr.shape}")
            t.data = arr.copy()

    def digest(self) -> str:
        h = hashlib.sha256()
        for n, t in self.items():
            h.update(n.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------- rng

def _key_int(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("rng keys must be non-negative")
        return int(k)
    return zlib.crc32(str(k).encode())


class Rng:
    """Seeded random stream; ``child`` derives independent named substreams."""

    def __init__(self, seed: int, key: tuple = ()):
        self.seed = int(seed)
        self.key = tuple(key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *names) -> "Rng":
        return Rng(self.seed, self.key + tuple(_key_int(n) for n in names))

    def normal(self, size=None, loc=0.0, scale=1.0):
        return self.gen.normal(loc, scale, size)

    def uniform(self, size=None, low=0.0, high=1.0):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)


# ---------------------------------------------------------------- checks

def finite_diff_grad(f: Callable[[], float], params: ParamRegistry, h: float = 1e-5,
                     names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Central differences (f(θ+h) - f(θ-h)) / 2h for every coordinate of the named params."""
    out = {}
    for name in (params.names() if names is None else names):
        t = params[name]
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _checked(f)
            flat[i] = orig - h
            fm = _checked(f)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        out[name] = g
    return out


def finite_diff_directional(f: Callable[[], float], params: ParamRegistry,
                            directions: dict[str, np.ndarray], h: float = 1e-5) -> dict[str, float]:
    """Central-difference directional derivative along ``directions[name]``, one param at a time."""
    out = {}
    for name, v in directions.items():
        t = params[name]
        orig = t.data.copy()
        t.data = orig + h * v
        fp = _checked(f)
        t.data = orig - h * v
        fm = _checked(f)
        t.data = orig
        out[name] = (fp - fm) / (2 * h)
    return out


def _checked(f) -> float:
    with no_grad():
        v = f()
    v = float(v.data) if isinstance(v, Tensor) else float(v)
    if not np.isfinite(v):
        raise NonFiniteError("finite-difference objective is not finite")
    return v
