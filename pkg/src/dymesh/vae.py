"""Chunked dynamic-mesh VAE with topology-aware vertex encoding.

Encoder: positional encoding of frame-0 positions and trajectory chunks,
optional vertex-normal injection, power-law topology-aware (PLTA) attention
over the mesh, farthest point sampling, and one synchronized cross-attention
whose map (computed from vertex features) is reused for the trajectory stream.
Decoder: synchronized self-attention blocks over the sampled tokens followed
by a cross-attention readout queried by every vertex.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .chunking import ChunkConfig, ChunkedTrajectory, split_chunks, tdgw_blend
from .layers import FeedForward, Linear, Module, merge_heads, positional_encode, split_heads
from .mesh import DynamicMeshSequence, TriangleMesh, decompose_trajectory, vertex_normals
from .tensor import Rng, Tensor
from .topology import hop_bands, one_hop, weighted_adjacency

PLACEMENTS = ("none", "enc1", "enc2", "enc3")


class CapacityError(ValueError):
    pass


@dataclass
class VaeConfig:
    hidden_dim: int = 32
    latent_dim: int = 8
    plta_layers: int = 2
    plta_steps: int = 4
    decay: float = 0.5
    mask_floor: float = 1e-8
    vertex_freqs: int = 8
    traj_freqs: int = 10
    fps_ratio: float = 0.125
    decoder_blocks: int = 8
    kl_weight: float = 1e-6
    normal_placement: str = "enc2"
    normal_dim: int = 8
    heads: int = 1
    chunk_stride: int = 16
    chunk_length: int = 24
    max_vertices: int = 8192
    norm: str = "pre"
    seed: int = 0

    def __post_init__(self):
        if self.normal_placement not in PLACEMENTS:
            raise ValueError(f"normal_placement must be one of {PLACEMENTS}")
        if self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by heads")
        ChunkConfig(self.chunk_stride, self.chunk_length)

    @property
    def chunk(self) -> ChunkConfig:
        return ChunkConfig(self.chunk_stride, self.chunk_length)

    def sample_count(self, n_vertices: int) -> int:
        return max(1, min(n_vertices, int(np.floor(n_vertices * self.fps_ratio))))


def fps(points: np.ndarray, n: int) -> np.ndarray:
    """Greedy farthest point sampling seeded at index 0; ties go to the lowest index."""
    points = np.asarray(points, dtype=np.float64)
    total = len(points)
    if not 1 <= n <= total:
        raise ValueError(f"cannot sample {n} of {total} points")
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = 0
    dist = np.linalg.norm(points - points[0], axis=1)
    taken = np.zeros(total, dtype=bool)
    taken[0] = True
    for k in range(1, n):
        # already-chosen points are excluded so identical points still yield distinct indices
        cand = np.where(taken, -1.0, dist)
        nxt = int(np.argmax(cand))
        chosen[k] = nxt
        taken[nxt] = True
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


@dataclass
class MeshInputs:
    """Per-mesh constants consumed by the encoder."""

    vertices: np.ndarray      # (N, 3) frame-0 positions
    normals: np.ndarray       # (N, 3)
    mask: np.ndarray          # (N, N) additive log(Adj + eps)
    fps_indices: np.ndarray   # (n,)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)


def prepare_mesh(mesh: TriangleMesh, cfg: VaeConfig) -> MeshInputs:
    if mesh.n_vertices > cfg.max_vertices:
        raise CapacityError(f"mesh has {mesh.n_vertices} vertices; limit is {cfg.max_vertices}")
    adj = weighted_adjacency(hop_bands(one_hop(mesh), cfg.plta_steps), cfg.decay)
    return MeshInputs(
        vertices=mesh.vertices.copy(),
        normals=vertex_normals(mesh),
        mask=adj.log_mask(cfg.mask_floor),
        fps_indices=fps(mesh.vertices, cfg.sample_count(mesh.n_vertices)),
    )


def _norm(x: Tensor, cfg_norm: str) -> Tensor:
    return tn.layer_norm(x) if cfg_norm == "pre" else x


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int, mask=None) -> Tensor:
    """Multi-head scaled dot-product attention over the last two axes."""
    if heads == 1:
        w = tn.masked_softmax(tn.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(q.shape[-1])), mask)
        return tn.matmul(w, v)
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    w = tn.masked_softmax(tn.matmul(qh, kh.swapaxes(-1, -2)) * (1.0 / np.sqrt(qh.shape[-1])), mask)
    return merge_heads(tn.matmul(w, vh))


class PltaAttention(Module):
    """Self-attention over mesh vertices with an additive topology mask.

    ``out = softmax(q k^T / sqrt(d_k) + log(Adj + eps)) v + x``, where q, k, v
    are projections of the (optionally pre-normalized) input.
    """

    def __init__(self, width: int, key_dim: int, rng: Rng, heads: int = 1, norm: str = "pre"):
        self.q = Linear(width, key_dim, rng)
        self.k = Linear(width, key_dim, rng, bias=False)
        self.v = Linear(width, width, rng)
        self.heads = heads if width % heads == 0 and key_dim % heads == 0 else 1
        self.norm = norm

    def value(self, x: Tensor) -> Tensor:
        return self.v(_norm(x, self.norm))

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        h = _norm(x, self.norm)
        return attend(self.q(h), self.k(h), self.v(h), self.heads, mask) + x


class SyncEncoder(Module):
    """Cross-attention from sampled vertices to all vertices, shared across streams."""

    def __init__(self, dim: int, rng: Rng, heads: int = 1, norm: str = "pre"):
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng)
        self.v_traj = Linear(dim, dim, rng)
        self.heads = heads
        self.norm = norm
        self._map_computations = 0
        self._map_applications = 0
        self._last_map: Tensor | None = None

    def attention_map(self, sampled: Tensor, vertices: Tensor) -> Tensor:
        q = self.q(_norm(sampled, self.norm))
        k = self.k(_norm(vertices, self.norm))
        self._map_computations += 1
        if self.heads > 1:
            q, k = split_heads(q, self.heads), split_heads(k, self.heads)
        a = tn.masked_softmax(tn.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(q.shape[-1])))
        self._last_map = a
        return a

    def apply(self, a: Tensor, values: Tensor) -> Tensor:
        self._map_applications += 1
        if self.heads > 1:
            return merge_heads(tn.matmul(a, split_heads(values, self.heads)))
        return tn.matmul(a, values)

    def __call__(self, sampled: Tensor, vertices: Tensor, traj: Tensor | None,
                 fps_indices: np.ndarray) -> tuple[Tensor, Tensor | None]:
        a = self.attention_map(sampled, vertices)
        sampled = self.apply(a, self.v(_norm(vertices, self.norm))) + sampled
        if traj is None:
            return sampled, None
        traj_n = self.apply(a, self.v_traj(_norm(traj, self.norm))) + traj[..., fps_indices, :]
        return sampled, traj_n


class SyncBlock(Module):
    """Self-attention map from vertex tokens applied to both vertex and latent streams."""

    def __init__(self, dim: int, rng: Rng, heads: int = 1, norm: str = "pre"):
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng)
        self.v_latent = Linear(dim, dim, rng)
        self.ffn = FeedForward(dim, 2 * dim, rng)
        self.ffn_latent = FeedForward(dim, 2 * dim, rng)
        self.heads = heads
        self.norm = norm
        self._map_computations = 0

    def __call__(self, feats: Tensor, latent: Tensor) -> tuple[Tensor, Tensor]:
        h = _norm(feats, self.norm)
        q, k = self.q(h), self.k(h)
        if self.heads > 1:
            q, k = split_heads(q, self.heads), split_heads(k, self.heads)
        a = tn.masked_softmax(tn.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(q.shape[-1])))
        self._map_computations += 1

        def mix(values):
            if self.heads > 1:
                return merge_heads(tn.matmul(a, split_heads(values, self.heads)))
            return tn.matmul(a, values)

        feats = feats + mix(self.v(h))
        latent = latent + mix(self.v_latent(_norm(latent, self.norm)))
        feats = feats + self.ffn(_norm(feats, self.norm))
        latent = latent + self.ffn_latent(_norm(latent, self.norm))
        return feats, latent


@dataclass
class EncodedMesh:
    vertex_features: Tensor      # (N, d)
    sampled_features: Tensor     # (n, d)
    fps_indices: np.ndarray


@dataclass
class LatentPacket:
    mu: Tensor                   # (num_c, n, c)
    log_sigma: Tensor
    z: Tensor
    paired_features: Tensor      # (n, d)

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma.data)


def kl_divergence(mu: Tensor, log_sigma: Tensor) -> Tensor:
    """Mean over elements of KL(N(mu, sigma^2) || N(0, 1))."""
    sigma2 = tn.exp(log_sigma * 2.0)
    return tn.mean((mu * mu + sigma2 - 1.0 - log_sigma * 2.0) * 0.5)


def vae_loss(recon: Tensor, target, kl: Tensor | float, eta: float = 1e-6) -> Tensor:
    """Mean squared chunk error plus ``eta`` times the KL term."""
    target = target.features() if isinstance(target, ChunkedTrajectory) else target
    target = tn.tensor(target)
    if recon.shape != target.shape:
        raise ValueError(f"reconstruction shape {recon.shape} != target shape {target.shape}")
    return tn.mse(recon, target) + tn.tensor(kl) * eta


class DyMeshVAE(Module):
    def __init__(self, cfg: VaeConfig = VaeConfig(), rng: Rng | None = None):
        rng = rng or Rng(cfg.seed)
        self.cfg = cfg
        d, c = cfg.hidden_dim, cfg.latent_dim
        place = cfg.normal_placement
        coord_in = 6 if place == "enc1" else 3
        self.coord_proj = Linear(coord_in * (1 + 2 * cfg.vertex_freqs), d, rng)
        self.normal_proj = Linear(3, cfg.normal_dim, rng) if place in ("enc2", "enc3") else None
        plta_width = d + cfg.normal_dim if place == "enc2" else d
        self.plta = [PltaAttention(plta_width, d, rng, cfg.heads, cfg.norm) for _ in range(cfg.plta_layers)]
        out_width = plta_width + (cfg.normal_dim if place == "enc3" else 0)
        self.vertex_out = Linear(out_width, d, rng)
        self.traj_proj = Linear(cfg.chunk_length * 3 * (1 + 2 * cfg.traj_freqs), d, rng)
        self.sync = SyncEncoder(d, rng, cfg.heads, cfg.norm)
        self.mu_head = Linear(d, c, rng)
        self.log_sigma_head = Linear(d, c, rng)
        self.latent_in = Linear(c, d, rng)
        self.blocks = [SyncBlock(d, rng, cfg.heads, cfg.norm) for _ in range(cfg.decoder_blocks)]
        self.cross_q = Linear(d, d, rng)
        self.cross_k = Linear(d, d, rng, bias=False)
        self.cross_v = Linear(d, d, rng)
        self.out_ffn = FeedForward(d, 2 * d, rng)
        self.out_proj = Linear(d, cfg.chunk_length * 3, rng, zero=True)

    # -- encoder ---------------------------------------------------------------
    def inject_normals(self, coord_feat: Tensor, normals: np.ndarray) -> Tensor:
        """Concatenate projected normals onto vertex features (enc2/enc3)."""
        if self.normal_proj is None:
            return coord_feat
        return tn.concat([coord_feat, self.normal_proj(normals)], axis=-1)

    def encode_vertices(self, inputs: MeshInputs) -> Tensor:
        place = self.cfg.normal_placement
        coords = inputs.vertices
        if place == "enc1":
            coords = np.concatenate([coords, inputs.normals], axis=-1)
        x = self.coord_proj(positional_encode(coords, self.cfg.vertex_freqs))
        if place == "enc2":
            x = self.inject_normals(x, inputs.normals)
        for layer in self.plta:
            x = layer(x, inputs.mask)
        if place == "enc3":
            x = self.inject_normals(x, inputs.normals)
        return self.vertex_out(x)

    def embed_trajectory(self, chunk_features) -> Tensor:
        return self.traj_proj(positional_encode(chunk_features, self.cfg.traj_freqs))

    def encode(self, inputs: MeshInputs, chunk_features=None, rng: Rng | None = None,
               sample: bool = True) -> tuple[EncodedMesh, LatentPacket | None, Tensor | None]:
        """Encode one mesh and (optionally) its chunk features ``(num_c, N, L_C*3)``.

        With ``sample=False`` the latent is the posterior mean.
        """
        v0 = self.encode_vertices(inputs)
        idx = inputs.fps_indices
        sampled = v0[idx]
        traj = None if chunk_features is None else self.embed_trajectory(chunk_features)
        sampled, traj_n = self.sync(sampled, v0, traj, idx)
        encoded = EncodedMesh(v0, sampled, idx)
        if traj_n is None:
            return encoded, None, None
        mu = self.mu_head(traj_n)
        log_sigma = self.log_sigma_head(traj_n)
        if sample:
            if rng is None:
                raise ValueError("sampling the latent requires an Rng")
            z = mu + tn.exp(log_sigma) * rng.normal(mu.shape)
        else:
            z = mu
        return encoded, LatentPacket(mu, log_sigma, z, sampled), kl_divergence(mu, log_sigma)

    # -- decoder ---------------------------------------------------------------
    def decode(self, sampled: Tensor, z, vertex_features: Tensor) -> Tensor:
        """Latents ``(num_c, n, c)`` -> chunk offsets ``(num_c, N, L_C*3)``."""
        cfg = self.cfg
        latent = self.latent_in(z)
        feats = sampled
        for block in self.blocks:
            feats, latent = block(feats, latent)
        q = self.cross_q(_norm(vertex_features, cfg.norm))
        k = self.cross_k(_norm(feats, cfg.norm))
        v = self.cross_v(_norm(latent, cfg.norm))
        h = attend(q, k, v, cfg.heads) + vertex_features
        h = h + self.out_ffn(_norm(h, cfg.norm))
        return self.out_proj(_norm(h, cfg.norm))

    def loss(self, inputs: MeshInputs, chunk_features: np.ndarray, rng: Rng,
             sample: bool = True) -> tuple[Tensor, dict[str, float]]:
        encoded, packet, kl = self.encode(inputs, chunk_features, rng, sample)
        recon = self.decode(packet.paired_features, packet.z, encoded.vertex_features)
        loss = vae_loss(recon, chunk_features, kl, self.cfg.kl_weight)
        return loss, {"loss": loss.item(), "kl": kl.item()}


# -- sequence-level helpers ------------------------------------------------------

@dataclass
class TrainingItem:
    inputs: MeshInputs
    chunks: ChunkedTrajectory
    sequence: DynamicMeshSequence


def make_item(seq: DynamicMeshSequence, cfg: VaeConfig) -> TrainingItem:
    traj = decompose_trajectory(seq)
    return TrainingItem(prepare_mesh(seq.mesh(0), cfg), split_chunks(traj, cfg.chunk), seq)


def reconstruct(model: DyMeshVAE, seq: DynamicMeshSequence, orientation: str = "prose-decay",
                item: TrainingItem | None = None) -> DynamicMeshSequence:
    """Encode with the posterior mean, decode, blend chunks and add frame 0 back."""
    item = item or make_item(seq, model.cfg)
    with tn.no_grad():
        encoded, packet, _ = model.encode(item.inputs, item.chunks.features(), sample=False)
        recon = model.decode(packet.paired_features, packet.z, encoded.vertex_features)
    chunked = ChunkedTrajectory.from_features(recon.data, model.cfg.chunk, seq.n_frames)
    offsets = tdgw_blend(chunked, orientation)
    return DynamicMeshSequence(seq.faces, seq.frames[0][None] + offsets, seq.caption)
