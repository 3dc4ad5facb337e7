"""Float64 tensors with reverse-mode differentiation.

Every primitive records its parents and a backward closure on a dynamically
built graph; ``Tensor.backward`` walks that graph once in reverse topological
order. All results are checked for NaN/Inf at construction.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class DegenerateRowError(ValueError):
    """Every entry of a softmax row was masked out."""


# graph recording is switched per thread so concurrent no_grad blocks do not interfere
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            else data.astype(np.float64, copy=False)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by '{op}'")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic properties --------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- graph ---------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> list["Tensor"]:
        """Accumulate gradients into every reachable leaf.

        Returns the nodes in the order they were visited (reverse topological).
        """
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        visited = []
        for node in reversed(order):
            g = grads.pop(id(node), None)
            visited.append(node)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        return visited

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar --------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def tensor(x, requires_grad: bool = False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, parents before children."""
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    track = grad_enabled() and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


# -- elementwise arithmetic ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)), "div")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sin(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.sin(ad), (a,), lambda g: (g * np.cos(ad),), "sin")


def cos(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),), "cos")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = 1.0 / (1.0 + np.exp(-ad))
    return _make(ad * s, (a,), lambda g: (g * (s + ad * s * (1.0 - s)),), "silu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(out, (a,), backward, "gelu")


# -- reductions and shape --------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward, "getitem")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in ts]
    return concat(expanded, axis=axis)


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs ≥2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def masked_softmax(logits, additive_mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` of ``logits + additive_mask``.

    The mask is an additive log-weight (0 keeps, -inf removes). Rows whose
    entries are all -inf raise :class:`DegenerateRowError`.
    """
    logits = tensor(logits)
    parents = [logits]
    z = logits.data
    if isinstance(additive_mask, Tensor):
        parents.append(additive_mask)
        z = z + additive_mask.data
    elif additive_mask is not None:
        # constant masks may hold -inf entries, which a Tensor would reject
        mask = np.asarray(additive_mask, dtype=np.float64)
        if np.isnan(mask).any() or np.isposinf(mask).any():
            raise NonFiniteError("NaN or +inf in attention mask")
        z = z + mask
    zmax = z.max(axis=axis, keepdims=True)
    if np.isneginf(zmax).any():
        raise DegenerateRowError("softmax row with every entry masked")
    e = np.exp(z - zmax)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        gz = y * (g - (g * y).sum(axis=axis, keepdims=True))
        grads = [_unbroadcast(gz, logits.shape)]
        if len(parents) == 2:
            grads.append(_unbroadcast(gz, parents[1].shape))
        return tuple(grads)

    return _make(y, parents, backward, "masked_softmax")


def softmax(logits, axis: int = -1) -> Tensor:
    return masked_softmax(logits, None, axis)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (x,), backward, "layer_norm")


def adaptive_norm(x: Tensor, scale, shift, eps: float = 1e-6) -> Tensor:
    """LayerNorm followed by ``(1 + scale)`` and ``shift`` modulation."""
    return layer_norm(x, eps) * (1.0 + tensor(scale)) + shift


def mse(a, b) -> Tensor:
    d = tensor(a) - tensor(b)
    return mean(d * d)


# -- finite-difference validation -------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               coords: Iterable[int] | None = None) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``f`` maps ``x`` to a scalar Tensor; it may also close over other tensors,
    in which case ``x`` is perturbed in place. ``coords`` restricts the check
    to a subset of flat indices.
    """
    if not x.requires_grad:
        raise ValueError("grad_check target must require gradients")
    x.grad = None
    out = f(x)
    if not np.isfinite(out.data).all():
        raise NonFiniteError("f(x) is not finite")
    out.backward()
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)
    if not np.shares_memory(flat, x.data):
        raise ValueError("grad_check target must be contiguous")
    idx = range(x.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"f non-finite near coordinate {i}")
            num = (fp - fm) / (2.0 * h)
            a = analytic[i]
            err = abs(a - num) / (abs(a) + abs(num) + 1e-10)
            worst = max(worst, err)
    x.grad = None
    return worst


# -- deterministic randomness ----------------------------------------------------

class Rng:
    """Seeded PCG64 stream with Box-Muller normals.

    Identical seed and call sequence give identical draws on every platform.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return low + (high - low) * self._gen.random(shape)

    def normal(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1]
        u2 = self._gen.random(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(shape)

    def integers(self, high: int, size=None) -> np.ndarray | int:
        return self._gen.integers(0, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def fork(self, *keys: int) -> "Rng":
        """Independent child stream keyed by ``(seed, *keys)``."""
        ss = np.random.SeedSequence([self.seed, *[int(k) for k in keys]])
        return Rng(int(ss.generate_state(1, dtype=np.uint64)[0]))
