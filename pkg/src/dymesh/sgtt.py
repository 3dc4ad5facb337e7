"""Shape-guided text-to-trajectory generator and rectified-flow machinery.

Latents have shape ``(B, num_c, n, c)``. Each block runs chunk-axis attention
(rotary positions over the chunk index), token-axis attention within a chunk,
cross-attention from all tokens to the text embedding, and a feed-forward
layer. Every stage is pre-modulated by timestep-dependent scale/shift and
added back through a gate; the modulation map starts at zero so untrained
blocks are exact identities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .chunking import ChunkedTrajectory, tdgw_blend
from .layers import FeedForward, Linear, Module, apply_rope, param, rope_tables, timestep_embedding
from .mesh import DynamicMeshSequence, TriangleMesh
from .tensor import Rng, Tensor
from .vae import DyMeshVAE, attend, prepare_mesh


class DivergenceError(FloatingPointError):
    pass


@dataclass
class SgttConfig:
    blocks: int = 2
    dim: int = 32
    heads: int = 1
    latent_dim: int = 8
    shape_dim: int = 32
    text_dim: int = 16
    mlp_ratio: int = 4
    steps: int = 64
    guidance: float = 3.0
    drop_prob: float = 0.1
    rope_base: float = 10000.0
    seed: int = 0

    def __post_init__(self):
        if self.blocks < 1 or self.steps < 1 or self.guidance < 0:
            raise ValueError("need blocks >= 1, steps >= 1, guidance >= 0")
        if self.dim % self.heads or (self.dim // self.heads) % 2:
            raise ValueError("dim / heads must be an even integer for rotary embedding")


@dataclass
class FlowCondition:
    shape_features: np.ndarray          # (n, shape_dim) or (B, n, shape_dim)
    text: np.ndarray | None = None      # (L, text_dim) or (B, L, text_dim); None = unconditional


def sample_timestep(u):
    """Map uniform draws to diffusion times via ``1 - 1 / (tan(pi u / 2) + 1)``."""
    u = np.asarray(u, dtype=np.float64)
    return 1.0 - 1.0 / (np.tan(0.5 * np.pi * u) + 1.0)


def timestep_cdf(t):
    """Analytic CDF of :func:`sample_timestep` for uniform input."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    with np.errstate(divide="ignore"):
        return (2.0 / np.pi) * np.arctan2(t, 1.0 - t)


def noisy_latent(z, eps, t):
    z, eps = np.asarray(z, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if z.shape != eps.shape:
        raise ValueError(f"latent {z.shape} and noise {eps.shape} differ")
    t = np.asarray(t, dtype=np.float64)
    t = t.reshape(t.shape + (1,) * (z.ndim - t.ndim)) if t.ndim else t
    return (1.0 - t) * z + t * eps


def cfg_velocity(v_cond, v_uncond, guidance: float):
    if guidance == 1.0:
        return v_cond
    if guidance == 0.0:
        return v_uncond
    return v_uncond + guidance * (v_cond - v_uncond)


class SgttBlock(Module):
    STAGES = ("temporal", "spatial", "cross", "ffn")

    def __init__(self, cfg: SgttConfig, rng: Rng):
        d = cfg.dim
        self.heads = cfg.heads
        self.modulation = Linear(d, 3 * len(self.STAGES) * d, rng, zero=True)
        # key biases only shift whole softmax rows, so they are omitted
        self.t_q, self.t_k, self.t_v = Linear(d, d, rng), Linear(d, d, rng, bias=False), Linear(d, d, rng)
        self.t_out = Linear(d, d, rng)
        self.s_q, self.s_k, self.s_v = Linear(d, d, rng), Linear(d, d, rng, bias=False), Linear(d, d, rng)
        self.s_out = Linear(d, d, rng)
        self.c_q = Linear(d, d, rng)
        self.c_k = Linear(cfg.text_dim, d, rng, bias=False)
        self.c_v = Linear(cfg.text_dim, d, rng)
        self.c_out = Linear(d, d, rng)
        self.ffn = FeedForward(d, cfg.mlp_ratio * d, rng)

    def _mod(self, m: Tensor, stage: int, part: int) -> Tensor:
        d = self.t_out.weight.shape[0]
        k = 3 * stage + part
        return m[..., k * d:(k + 1) * d]

    def disable_stage(self, name: str) -> None:
        """Zero the gate of one stage so it no longer touches the residual stream."""
        d = self.t_out.weight.shape[0]
        k = 3 * self.STAGES.index(name) + 2
        self.modulation.weight.data[:, k * d:(k + 1) * d] = 0.0
        self.modulation.bias.data[k * d:(k + 1) * d] = 0.0

    def _self_attn(self, h: Tensor, proj: tuple[Linear, Linear, Linear], out: Linear, rope=None) -> Tensor:
        q, k, v = (p(h) for p in proj)
        if rope is not None:
            cos, sin = rope
            q, k = _rope_heads(q, cos, sin, self.heads), _rope_heads(k, cos, sin, self.heads)
        return out(attend(q, k, v, self.heads))

    def __call__(self, x: Tensor, cond: Tensor, text: Tensor, rope) -> Tensor:
        b, c, n, d = x.shape
        m = self.modulation(tn.silu(cond)).reshape(b, 1, 1, -1)

        def stage(i, fn):
            h = tn.adaptive_norm(x, self._mod(m, i, 0), self._mod(m, i, 1))
            return x + self._mod(m, i, 2) * fn(h)

        # chunk axis: (B, n, C, D) so attention mixes chunks of the same token
        x = stage(0, lambda h: self._self_attn(h.swapaxes(1, 2), (self.t_q, self.t_k, self.t_v), self.t_out, rope).swapaxes(1, 2))
        x = stage(1, lambda h: self._self_attn(h, (self.s_q, self.s_k, self.s_v), self.s_out))

        def cross(h):
            q = self.c_q(h.reshape(b, c * n, d))
            out = attend(q, self.c_k(text), self.c_v(text), self.heads)
            return self.c_out(out).reshape(b, c, n, d)

        x = stage(2, cross)
        x = stage(3, self.ffn)
        return x


def _rope_heads(x: Tensor, cos: np.ndarray, sin: np.ndarray, heads: int) -> Tensor:
    if heads == 1:
        return apply_rope(x, cos, sin)
    *lead, length, d = x.shape
    xh = x.reshape(*lead, length, heads, d // heads).swapaxes(-2, -3)
    xh = apply_rope(xh, cos, sin)
    return xh.swapaxes(-2, -3).reshape(*lead, length, d)


class SGTT(Module):
    def __init__(self, cfg: SgttConfig = SgttConfig(), rng: Rng | None = None):
        rng = rng or Rng(cfg.seed)
        self.cfg = cfg
        d = cfg.dim
        self.latent_in = Linear(cfg.latent_dim, d, rng)
        self.shape_in = Linear(cfg.shape_dim, d, rng)
        self.time_fc1 = Linear(d, d, rng)
        self.time_fc2 = Linear(d, d, rng)
        self.null_text = param(rng.normal((1, cfg.text_dim)) * 0.02)
        self.blocks = [SgttBlock(cfg, rng) for _ in range(cfg.blocks)]
        self.out_proj = Linear(d, cfg.latent_dim, rng, zero=True)

    def embed(self, z, shape_features) -> Tensor:
        z = tn.tensor(z)
        s = self.shape_in(shape_features)
        s = s.reshape(s.shape[0], 1, *s.shape[1:]) if s.ndim == 3 else s
        return self.latent_in(z) + s

    def time_condition(self, t: np.ndarray) -> Tensor:
        emb = timestep_embedding(t, self.cfg.dim)
        return self.time_fc2(tn.silu(self.time_fc1(emb)))

    def text_tokens(self, text, batch: int, drop: np.ndarray | None = None) -> Tensor:
        if text is None:
            return self.null_text.reshape(1, 1, -1) * np.ones((batch, 1, 1))
        text = np.asarray(text, dtype=np.float64)
        if text.ndim == 2:
            text = np.broadcast_to(text, (batch,) + text.shape)
        if drop is None or not drop.any():
            return tn.tensor(text)
        keep = (~drop).astype(np.float64).reshape(-1, 1, 1)
        # all-null tokens attend identically to a single null token
        return tn.tensor(text * keep) + self.null_text.reshape(1, 1, -1) * (1.0 - keep)

    def __call__(self, z, t, shape_features, text=None, drop: np.ndarray | None = None) -> Tensor:
        """Predicted velocity with the latent's shape."""
        z = tn.tensor(z)
        squeeze = z.ndim == 3
        if squeeze:
            z = z.reshape(1, *z.shape)
            if text is not None and np.ndim(text) == 2:
                text = np.asarray(text)[None]
        b, c = z.shape[0], z.shape[1]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (b,))
        x = self.embed(z, shape_features)
        cond = self.time_condition(t)
        tokens = self.text_tokens(text, b, drop)
        rope = rope_tables(np.arange(c), self.cfg.dim // self.cfg.heads, self.cfg.rope_base)
        for block in self.blocks:
            x = block(x, cond, tokens, rope)
        v = self.out_proj(tn.layer_norm(x))
        return v.reshape(*v.shape[1:]) if squeeze else v

    def block_stack(self, z, t, shape_features, text=None) -> tuple[Tensor, Tensor]:
        """Residual stream before and after the blocks (for identity checks)."""
        z = tn.tensor(z)
        if z.ndim == 3:
            z = z.reshape(1, *z.shape)
        b, c = z.shape[0], z.shape[1]
        x0 = self.embed(z, shape_features)
        cond = self.time_condition(np.broadcast_to(np.asarray(t, float).reshape(-1), (b,)))
        tokens = self.text_tokens(text, b)
        rope = rope_tables(np.arange(c), self.cfg.dim // self.cfg.heads, self.cfg.rope_base)
        x = x0
        for block in self.blocks:
            x = block(x, cond, tokens, rope)
        return x0, x


def rf_loss(model, z, cond: FlowCondition, rng: Rng, drop_prob: float | None = None) -> Tensor:
    """Rectified-flow loss: MSE between predicted velocity and ``z - eps``.

    ``z`` is ``(C, n, c)`` or a batch ``(B, C, n, c)``. Text conditioning is
    replaced by the null embedding with probability ``drop_prob``.
    """
    z = np.asarray(z, dtype=np.float64)
    batched = z.ndim == 4
    zb = z if batched else z[None]
    b = zb.shape[0]
    t = sample_timestep(rng.uniform(b))
    eps = rng.normal(zb.shape)
    zt = noisy_latent(zb, eps, t)
    if drop_prob is None:
        drop_prob = getattr(getattr(model, "cfg", None), "drop_prob", 0.0)
    drop = rng.uniform(b) < drop_prob
    text = cond.text
    if text is not None and np.ndim(text) == 2:
        text = np.broadcast_to(text, (b,) + np.shape(text))
    if text is None:
        pred = model(zt, t, cond.shape_features, None)
    else:
        pred = model(zt, t, cond.shape_features, text, drop=drop)
    return tn.mse(pred, zb - eps)


def _velocity(model, z, t, shape_features, text) -> np.ndarray:
    out = model(z, t, shape_features, text)
    return np.asarray(getattr(out, "data", out), dtype=np.float64)


def guided_velocity(model, z, t, cond: FlowCondition, guidance: float) -> np.ndarray:
    if cond.text is None or guidance == 0.0:
        return _velocity(model, z, t, cond.shape_features, None)
    v_cond = _velocity(model, z, t, cond.shape_features, cond.text)
    if guidance == 1.0:
        return v_cond
    v_uncond = _velocity(model, z, t, cond.shape_features, None)
    return cfg_velocity(v_cond, v_uncond, guidance)


def euler_sample(model, cond: FlowCondition, shape: tuple[int, ...], steps: int = 64,
                 guidance: float = 3.0, rng: Rng | None = None, noise: np.ndarray | None = None) -> np.ndarray:
    """Integrate from pure noise at t=1 to t=0 with ``z <- z + dt * v``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if noise is None:
        if rng is None:
            raise ValueError("need an Rng or explicit noise")
        noise = rng.normal(shape)
    z = np.array(noise, dtype=np.float64)
    dt = 1.0 / steps
    with tn.no_grad():
        for k in range(steps):
            t = 1.0 - k * dt
            z = z + dt * guided_velocity(model, z, t, cond, guidance)
            if not np.isfinite(z).all():
                raise DivergenceError(f"sampler diverged at step {k} (t={t:.4f})")
    return z


def generate_animation(mesh: TriangleMesh, text, n_frames: int, vae: DyMeshVAE, flow: SGTT,
                       rng: Rng, steps: int | None = None, guidance: float | None = None,
                       orientation: str = "prose-decay") -> DynamicMeshSequence:
    """Animate a static mesh: sample chunk latents, decode, blend, add frame 0."""
    if n_frames < 1:
        raise ValueError("need at least one frame")
    vcfg = vae.cfg
    if flow.cfg.shape_dim != vcfg.hidden_dim or flow.cfg.latent_dim != vcfg.latent_dim:
        raise ValueError("flow model dimensions do not match the VAE")
    inputs = prepare_mesh(mesh, vcfg)
    with tn.no_grad():
        encoded, _, _ = vae.encode(inputs)
    num_c = vcfg.chunk.num_chunks(n_frames)
    shape = (num_c, len(inputs.fps_indices), vcfg.latent_dim)
    cond = FlowCondition(encoded.sampled_features.data, text)
    z = euler_sample(flow, cond, shape,
                     steps if steps is not None else flow.cfg.steps,
                     guidance if guidance is not None else flow.cfg.guidance, rng)
    with tn.no_grad():
        chunks = vae.decode(encoded.sampled_features, z, encoded.vertex_features)
    offsets = tdgw_blend(ChunkedTrajectory.from_features(chunks.data, vcfg.chunk, n_frames), orientation)
    return DynamicMeshSequence(mesh.faces, mesh.vertices[None] + offsets)

