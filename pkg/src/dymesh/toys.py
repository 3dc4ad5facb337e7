"""Small synthetic meshes and motions used by self-tests, tests and examples."""

from __future__ import annotations

import numpy as np
from scipy.spatial import Delaunay

from .mesh import DynamicMeshSequence, TriangleMesh, centroid_normalize
from .tensor import Rng


def grid_mesh(nx: int, ny: int | None = None, spacing: float | None = None, z: float = 0.0) -> TriangleMesh:
    """Planar ``nx`` by ``ny`` vertex grid, two triangles per cell, row-major indices."""
    ny = nx if ny is None else ny
    if spacing is None:
        xs, ys = np.linspace(-0.5, 0.5, nx), np.linspace(-0.5, 0.5, ny)
    else:
        xs, ys = np.arange(nx) * spacing, np.arange(ny) * spacing
    gx, gy = np.meshgrid(xs, ys)
    verts = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)], axis=1)
    faces = []
    for i in range(ny - 1):
        for j in range(nx - 1):
            a = i * nx + j
            faces += [(a, a + 1, a + nx + 1), (a, a + nx + 1, a + nx)]
    return TriangleMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3))


def cube_mesh() -> TriangleMesh:
    v = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
    f = [(0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5), (0, 4, 5), (0, 5, 1),
         (2, 3, 7), (2, 7, 6), (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3)]
    return TriangleMesh(v, np.array(f))


def random_triangulation(n: int, rng: Rng) -> TriangleMesh:
    """Delaunay triangulation of ``n`` uniform points in the unit square (z = 0)."""
    pts = rng.uniform((n, 2))
    tri = Delaunay(pts)
    return TriangleMesh(np.c_[pts, np.zeros(n)], tri.simplices.astype(np.int64))


def _ramp(n_frames: int) -> np.ndarray:
    return (np.arange(n_frames) / n_frames)[:, None, None]


def wave(n_frames: int = 16, k: int = 8) -> DynamicMeshSequence:
    m = grid_mesh(k)
    lift = np.zeros_like(m.vertices)
    lift[:, 2] = 0.15 * np.sin(3.0 * m.vertices[:, 0])
    return DynamicMeshSequence(m.faces, m.vertices[None] + lift[None] * np.sin(np.pi * _ramp(n_frames)))


def twist(n_frames: int = 16, k: int = 8) -> DynamicMeshSequence:
    m = grid_mesh(k)
    x, y, z = m.vertices.T
    ang = 0.6 * _ramp(n_frames)[..., 0] * (x[None] + 0.5)
    frames = np.stack([x * np.cos(ang) - y * np.sin(ang), x * np.sin(ang) + y * np.cos(ang),
                       np.broadcast_to(z, ang.shape)], axis=-1)
    return DynamicMeshSequence(m.faces, frames)


def bend(n_frames: int = 16, k: int = 8) -> DynamicMeshSequence:
    m = grid_mesh(k)
    lift = np.zeros_like(m.vertices)
    lift[:, 2] = 0.3 * m.vertices[:, 1] ** 2
    return DynamicMeshSequence(m.faces, m.vertices[None] + lift[None] * _ramp(n_frames))


def adhesion_pair(n_frames: int = 16, gap: float = 0.0) -> DynamicMeshSequence:
    """Two coincident sheets of different extent separating in opposite directions.

    At frame 0 the smaller sheet lies exactly on part of the larger one, so
    positions and normals alone cannot tell the sheets apart; only the
    connectivity can.
    """
    a = grid_mesh(10, 6, spacing=0.1)
    b = grid_mesh(5, 6, spacing=0.1, z=gap)
    verts = np.concatenate([a.vertices, b.vertices])
    faces = np.concatenate([a.faces, b.faces + a.n_vertices])
    sign = np.concatenate([np.ones(a.n_vertices), -np.ones(b.n_vertices)])
    motion = np.zeros_like(verts)
    motion[:, 2] = 0.2 * sign
    return DynamicMeshSequence(faces, verts[None] + motion[None] * _ramp(n_frames))


def overfit_set(n_frames: int = 16) -> list[DynamicMeshSequence]:
    return [centroid_normalize(s) for s in (wave(n_frames), twist(n_frames), bend(n_frames),
                                            adhesion_pair(n_frames))]


def stretch_case() -> tuple[DynamicMeshSequence, DynamicMeshSequence]:
    """Two disjoint quads (10 edges); one edge stretched 3x in frames 1 and 2 of 0..4."""
    quad = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=np.float64)
    verts = np.concatenate([quad, quad + [3.0, 0.0, 0.0]])
    faces = np.array([[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7]])
    ref = DynamicMeshSequence(faces, np.repeat(verts[None], 5, axis=0))
    frames = ref.frames.copy()
    # edge (4, 5) goes from length 1 to exactly 3 (a 3-4-5 direction); the other edge
    # at vertex 5, (5, 6), only grows to ~1.61 and stays normal at tau = 2
    frames[1:3, 5] = verts[4] + [1.8, 2.4, 0.0]
    return DynamicMeshSequence(faces, frames), ref
