"""Small neural-network building blocks on top of :mod:`dymesh.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as tn
from .tensor import Rng, Tensor


class Module:
    """Parameter container; parameters are discovered by attribute walk."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def param(data) -> Tensor:
    return Tensor(np.ascontiguousarray(data, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True, zero: bool = False):
        bound = 1.0 / np.sqrt(max(d_in, 1))
        w = np.zeros((d_in, d_out)) if zero else rng.uniform((d_in, d_out), -bound, bound)
        self.weight = param(w)
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        y = tn.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: Rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(tn.gelu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., L, D) -> (..., H, L, D/H)."""
    *lead, length, dim = x.shape
    x = x.reshape(*lead, length, heads, dim // heads)
    return x.swapaxes(-2, -3)


def merge_heads(x: Tensor) -> Tensor:
    """(..., H, L, Dh) -> (..., L, H*Dh)."""
    x = x.swapaxes(-2, -3)
    *lead, length, heads, dh = x.shape
    return x.reshape(*lead, length, heads * dh)


def attention_weights(q: Tensor, k: Tensor, mask=None) -> Tensor:
    scale = 1.0 / np.sqrt(q.shape[-1])
    logits = tn.matmul(q, k.swapaxes(-1, -2)) * scale
    return tn.masked_softmax(logits, mask)


def rope_tables(positions: np.ndarray, dim: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    """Cos/sin tables of shape (len(positions), dim) for rotary embedding."""
    if dim % 2:
        raise ValueError("rotary embedding needs an even head dimension")
    inv_freq = base ** (-np.arange(0, dim, 2) / dim)
    angles = np.outer(positions, inv_freq)
    angles = np.repeat(angles, 2, axis=-1)
    return np.cos(angles), np.sin(angles)


def apply_rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive channel pairs of ``x`` (..., L, D) by position."""
    *lead, length, dim = x.shape
    pairs = x.reshape(*lead, length, dim // 2, 2)
    even = pairs[..., 0:1]
    odd = pairs[..., 1:2]
    rotated = tn.concat([-odd, even], axis=-1).reshape(*lead, length, dim)
    return x * cos + rotated * sin


def positional_encode(x, num_freq: int) -> Tensor:
    """Per-coordinate ``[v, sin(2^k pi v), cos(2^k pi v) for k < num_freq]``.

    Output width is ``in_width * (1 + 2 * num_freq)``; channels are grouped
    per input coordinate.
    """
    x = tn.tensor(x)
    if num_freq < 0:
        raise ValueError("num_freq must be non-negative")
    if num_freq == 0:
        return x
    freqs = (2.0 ** np.arange(num_freq)) * np.pi
    scaled = x.reshape(*x.shape, 1) * freqs
    s, c = tn.sin(scaled), tn.cos(scaled)
    sc = tn.stack([s, c], axis=-1).reshape(*x.shape, 2 * num_freq)
    out = tn.concat([x.reshape(*x.shape, 1), sc], axis=-1)
    return out.reshape(*x.shape[:-1], x.shape[-1] * (1 + 2 * num_freq))


def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=-1)
    return emb


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params: list[Tensor], lr: float = 2e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, clip: float | None = 1.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip = clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if self.clip is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > self.clip:
                grads = [g * (self.clip / norm) for g in grads]
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
