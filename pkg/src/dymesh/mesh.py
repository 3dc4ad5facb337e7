"""Triangle meshes, dynamic mesh sequences and their basic geometry."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class MeshError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise IndexError(f"face index out of range for {len(self.vertices)} vertices")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)


@dataclass
class DynamicMeshSequence:
    """Static faces ``(M, 3)`` with per-frame positions ``(T, N, 3)``."""

    faces: np.ndarray
    frames: np.ndarray
    caption: str | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim == 2:
            self.frames = self.frames[None]
        if self.frames.ndim != 3 or self.frames.shape[-1] != 3:
            raise MeshError(f"frames must be (T, N, 3), got {self.frames.shape}")
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        n = self.frames.shape[1]
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= n):
            raise IndexError(f"face index out of range for {n} vertices")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.frames.shape[1]

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def mesh(self, t: int = 0) -> TriangleMesh:
        return TriangleMesh(self.frames[t], self.faces)

    def reversed(self) -> "DynamicMeshSequence":
        return DynamicMeshSequence(self.faces, self.frames[::-1].copy(), self.caption)

    @classmethod
    def static(cls, mesh: TriangleMesh, n_frames: int) -> "DynamicMeshSequence":
        return cls(mesh.faces, np.repeat(mesh.vertices[None], n_frames, axis=0))


@dataclass
class RelativeTrajectory:
    """Frame-0 positions plus per-frame offsets; ``frames = initial + offsets``."""

    initial: np.ndarray          # (N, 3)
    offsets: np.ndarray          # (T, N, 3)
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    @property
    def n_frames(self) -> int:
        return self.offsets.shape[0]

    def flat(self) -> np.ndarray:
        """Offsets laid out per vertex as ``(N, T*3)``."""
        t, n, _ = self.offsets.shape
        return self.offsets.transpose(1, 0, 2).reshape(n, t * 3)

    def recompose(self, caption: str | None = None) -> DynamicMeshSequence:
        return DynamicMeshSequence(self.faces, self.initial[None] + self.offsets, caption)


def merge_duplicate_vertices(mesh: TriangleMesh, tol: float = 1e-8) -> tuple[TriangleMesh, np.ndarray]:
    """Merge vertices within ``tol`` of each other.

    Returns the new mesh and ``remap`` with ``remap[old] = new``. The lowest
    original index of each cluster survives; faces left with fewer than three
    distinct indices are dropped.
    """
    remap, keep = _merge_rows(mesh.vertices[None], tol)
    return _apply_merge(mesh.vertices, mesh.faces, remap, keep)


def merge_duplicate_sequence(seq: DynamicMeshSequence, tol: float = 1e-8) -> tuple[DynamicMeshSequence, np.ndarray]:
    """Merge vertices that coincide (within ``tol``) in every frame."""
    remap, keep = _merge_rows(seq.frames, tol)
    faces = _remap_faces(seq.faces, remap)
    return DynamicMeshSequence(faces, seq.frames[:, keep], seq.caption), remap


def _merge_rows(frames: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    n = frames.shape[1]
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    parent = np.arange(n)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    pairs = cKDTree(frames[0]).query_pairs(tol, output_type="ndarray")
    if len(pairs) and frames.shape[0] > 1:
        d = np.linalg.norm(frames[:, pairs[:, 0]] - frames[:, pairs[:, 1]], axis=-1)
        pairs = pairs[(d <= tol).all(axis=0)]
    for i, j in pairs:
        ri, rj = find(i), find(j)
        if ri != rj:
            # lowest index is the representative
            parent[max(ri, rj)] = min(ri, rj)
    roots = np.array([find(i) for i in range(n)])
    keep = np.flatnonzero(roots == np.arange(n))
    new_index = np.full(n, -1, dtype=np.int64)
    new_index[keep] = np.arange(len(keep))
    return new_index[roots], keep


def _remap_faces(faces: np.ndarray, remap: np.ndarray) -> np.ndarray:
    if len(faces) == 0:
        return faces.reshape(0, 3)
    f = remap[faces]
    ok = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    return f[ok]


def _apply_merge(vertices, faces, remap, keep):
    return TriangleMesh(vertices[keep], _remap_faces(faces, remap)), remap


def centroid_normalize(seq: DynamicMeshSequence) -> DynamicMeshSequence:
    """Shift every frame by minus the frame-0 centroid."""
    if seq.n_vertices == 0:
        raise MeshError("cannot normalize an empty sequence")
    c = seq.frames[0].mean(axis=0)
    return DynamicMeshSequence(seq.faces, seq.frames - c, seq.caption)


def decompose_trajectory(seq: DynamicMeshSequence) -> RelativeTrajectory:
    v0 = seq.frames[0].copy()
    return RelativeTrajectory(v0, seq.frames - v0, seq.faces)


def vertex_normals(mesh: TriangleMesh, return_degenerate: bool = False):
    """Area-weighted vertex normals; zero vectors where the weighted sum vanishes."""
    v, f = mesh.vertices, mesh.faces
    acc = np.zeros_like(v)
    if len(f):
        # cross product length is twice the face area, so it already carries the area weight
        cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        for k in range(3):
            np.add.at(acc, f[:, k], cross)
    length = np.linalg.norm(acc, axis=1)
    degenerate = length < 1e-12
    normals = np.zeros_like(v)
    normals[~degenerate] = acc[~degenerate] / length[~degenerate, None]
    if return_degenerate:
        return normals, degenerate
    return normals


def edge_set(mesh_or_faces) -> np.ndarray:
    """Undirected edges as sorted ``(min, max)`` rows, each listed once."""
    faces = mesh_or_faces.faces if hasattr(mesh_or_faces, "faces") else np.asarray(mesh_or_faces)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)
