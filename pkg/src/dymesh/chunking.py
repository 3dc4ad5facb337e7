"""Overlapping chunk segmentation of relative trajectories and TDGW reassembly."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mesh import RelativeTrajectory

ORIENTATIONS = ("prose-decay", "as-written", "hard")


class ChunkConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ChunkConfig:
    stride: int = 16     # L_S
    length: int = 24     # L_C, includes the overlap

    def __post_init__(self):
        if not (0 < self.stride <= self.length):
            raise ChunkConfigError(f"need 0 < stride <= length, got {self.stride}, {self.length}")
        if self.length > 2 * self.stride:
            # chunk 1 would start before frame 0
            raise ChunkConfigError("overlap longer than the stride is not supported")

    @property
    def overlap(self) -> int:
        return self.length - self.stride

    def num_chunks(self, n_frames: int) -> int:
        return math.ceil(n_frames / self.stride)


@dataclass
class ChunkedTrajectory:
    chunks: np.ndarray       # (num_c, L_C, N, 3)
    config: ChunkConfig
    n_frames: int

    @property
    def num_chunks(self) -> int:
        return self.chunks.shape[0]

    def features(self) -> np.ndarray:
        """Per-vertex chunk features ``(num_c, N, L_C*3)``."""
        c, lc, n, _ = self.chunks.shape
        return self.chunks.transpose(0, 2, 1, 3).reshape(c, n, lc * 3)

    @staticmethod
    def from_features(features: np.ndarray, config: ChunkConfig, n_frames: int) -> "ChunkedTrajectory":
        c, n, width = features.shape
        lc = width // 3
        if lc != config.length:
            raise ValueError(f"feature width {width} does not match chunk length {config.length}")
        return ChunkedTrajectory(features.reshape(c, n, lc, 3).transpose(0, 2, 1, 3), config, n_frames)


def _offsets(traj) -> np.ndarray:
    return traj.offsets if isinstance(traj, RelativeTrajectory) else np.asarray(traj, dtype=np.float64)


def split_chunks(traj, cfg: ChunkConfig = ChunkConfig()) -> ChunkedTrajectory:
    """Slice ``(T, N, 3)`` offsets into overlapping chunks.

    The tail is padded by repeating the last frame up to a multiple of the
    stride; chunk 0 is prefixed with ``overlap`` zero frames.
    """
    v = _offsets(traj)
    t = v.shape[0]
    if t < 1:
        raise ValueError("trajectory needs at least one frame")
    ls, lc, lo = cfg.stride, cfg.length, cfg.overlap
    num_c = cfg.num_chunks(t)
    padded = num_c * ls
    if padded > t:
        v = np.concatenate([v, np.repeat(v[-1:], padded - t, axis=0)])
    chunks = np.empty((num_c, lc) + v.shape[1:])
    chunks[0, :lo] = 0.0
    chunks[0, lo:] = v[:ls]
    for i in range(1, num_c):
        chunks[i] = v[(i + 1) * ls - lc:(i + 1) * ls]
    return ChunkedTrajectory(chunks, cfg, t)


def blend_weight(t: int, overlap: int, orientation: str = "prose-decay") -> float:
    """Weight given to the preceding chunk at overlap step ``t``."""
    if orientation == "prose-decay":
        return (overlap - t) / (overlap + 1)
    if orientation == "as-written":
        return (t + 1) / (overlap + 1)
    if orientation == "hard":
        return 1.0
    raise ValueError(f"unknown orientation {orientation!r}; expected one of {ORIENTATIONS}")


def tdgw_blend(chunked: ChunkedTrajectory, orientation: str = "prose-decay") -> np.ndarray:
    """Reassemble chunks into ``(T, N, 3)`` offsets, cross-fading each overlap."""
    cfg = chunked.config
    ls, lc, lo = cfg.stride, cfg.length, cfg.overlap
    ch = chunked.chunks
    if ch.ndim != 4 or ch.shape[1] != lc:
        raise ValueError(f"chunk array {ch.shape} inconsistent with chunk length {lc}")
    num_c = ch.shape[0]
    out = np.empty((num_c * ls,) + ch.shape[2:])
    out[:ls] = ch[0, lo:]
    for i in range(1, num_c):
        start = i * ls
        out[start:start + ls] = ch[i, lo:]
        for t in range(lo):
            w = blend_weight(t, lo, orientation)
            out[start - lo + t] = w * ch[i - 1, lc - lo + t] + (1.0 - w) * ch[i, t]
    return out[:chunked.n_frames]


def continuity_score(traj, cfg: ChunkConfig = ChunkConfig()) -> np.ndarray:
    """Largest jump at each chunk boundary, relative to the median frame step."""
    v = _offsets(traj)
    t = v.shape[0]
    if t < 2:
        raise ValueError("continuity needs at least two frames")
    step = np.linalg.norm(np.diff(v, axis=0), axis=-1)       # (T-1, N)
    boundaries = np.arange(cfg.stride, t, cfg.stride)
    jumps = step[boundaries - 1].max(axis=-1) if len(boundaries) else np.zeros(0)
    med = float(np.median(step))
    if med == 0.0:
        return np.where(jumps > 0, np.inf, 0.0)
    return jumps / med
