from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from dymesh.mesh import (DynamicMeshSequence, TriangleMesh, centroid_normalize, decompose_trajectory, edge_set,
                         merge_duplicate_sequence, merge_duplicate_vertices, vertex_normals)
from dymesh.tensor import Rng
from dymesh.toys import cube_mesh, grid_mesh

from conftest import assert_close


def test_face_index_out_of_range():
    with pytest.raises(IndexError):
        TriangleMesh(np.zeros((2, 3)), [[0, 1, 2]])


def test_merge_shared_edge_listed_twice():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    m, remap = merge_duplicate_vertices(TriangleMesh(v, [[0, 1, 2], [3, 5, 4]]))
    assert m.n_vertices == 4 and m.n_faces == 2
    assert remap.tolist() == [0, 1, 2, 1, 2, 3]
    assert m.faces.tolist() == [[0, 1, 2], [1, 3, 2]]


def test_merge_without_duplicates_is_identity():
    cube = cube_mesh()
    m, remap = merge_duplicate_vertices(cube)
    assert np.array_equal(remap, np.arange(8)) and np.array_equal(m.faces, cube.faces)


def test_merge_all_identical_collapses():
    m, remap = merge_duplicate_vertices(TriangleMesh(np.ones((3, 3)), [[0, 1, 2]]))
    assert m.n_vertices == 1 and m.n_faces == 0 and remap.tolist() == [0, 0, 0]


def test_merge_empty_mesh():
    m, remap = merge_duplicate_vertices(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))))
    assert m.n_vertices == 0 and len(remap) == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 40), st.integers(0, 2**31))
def test_merge_never_grows_and_keeps_distinct_positions(n, seed):
    rng = Rng(seed)
    base = np.round(rng.uniform((n, 3)) * 3) / 3          # coarse grid forces duplicates
    faces = rng.integers(n, (n, 3))
    faces = faces[(faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])]
    m, remap = merge_duplicate_vertices(TriangleMesh(base, faces))
    assert m.n_vertices <= n and m.n_faces <= len(faces)
    assert {tuple(r) for r in m.vertices} == {tuple(r) for r in base}
    assert_close(m.vertices[remap], base, 1e-8)
    if m.n_faces:
        f = m.faces
        assert ((f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])).all()


def test_sequence_merge_requires_coincidence_in_every_frame():
    frames = np.zeros((2, 3, 3))
    frames[:, 1] = [1, 0, 0]
    frames[1, 2] = [0, 0, 1]           # vertex 2 coincides with vertex 0 only at frame 0
    seq, remap = merge_duplicate_sequence(DynamicMeshSequence([[0, 1, 2]], frames))
    assert seq.n_vertices == 3 and remap.tolist() == [0, 1, 2]


def test_centroid_normalize_examples():
    seq = centroid_normalize(DynamicMeshSequence(np.zeros((0, 3)), np.array([[[3, 4, 5.0]], [[4, 4, 5.0]]])))
    assert_close(seq.frames, [[[0, 0, 0]], [[1, 0, 0]]])
    cube = cube_mesh()
    shifted = centroid_normalize(DynamicMeshSequence(cube.faces, cube.vertices + [1, 0, 0]))
    assert_close(shifted.frames[0], cube.vertices)
    again = centroid_normalize(shifted)
    assert_close(again.frames, shifted.frames)


def test_centroid_normalize_preserves_distances(rng):
    f = rng.normal((3, 6, 3)) + 5
    out = centroid_normalize(DynamicMeshSequence(np.zeros((0, 3)), f)).frames
    d = lambda x: np.linalg.norm(x[:, :, None] - x[:, None], axis=-1)   # noqa: E731
    assert_close(d(out), d(f), 1e-12)
    assert_close(out[0].mean(0), np.zeros(3))


def test_decompose_examples(rng):
    static = DynamicMeshSequence.static(cube_mesh(), 4)
    assert np.all(decompose_trajectory(static).offsets == 0)
    drift = np.array([0.1, -0.2, 0.3])
    frames = cube_mesh().vertices[None] + np.arange(5)[:, None, None] * drift
    tr = decompose_trajectory(DynamicMeshSequence(cube_mesh().faces, frames))
    assert_close(tr.offsets, np.arange(5)[:, None, None] * np.ones((1, 8, 1)) * drift, 1e-15)
    one = decompose_trajectory(DynamicMeshSequence.static(cube_mesh(), 1))
    assert one.offsets.shape == (1, 8, 3) and np.all(one.offsets == 0)


def test_decompose_recompose_exact(rng):
    frames = rng.normal((7, 10, 3))
    seq = DynamicMeshSequence(np.zeros((0, 3)), frames)
    tr = decompose_trajectory(seq)
    assert np.all(tr.offsets[0] == 0)
    back = tr.recompose().frames
    # V^t = V_0 + (V^t - V_0) can differ by one rounding; the flat layout is (N, T*3)
    assert_close(back, frames, 1e-15)
    assert tr.flat().shape == (10, 21)


def test_normals_examples():
    grid = grid_mesh(4)
    assert_close(vertex_normals(grid), np.tile([0, 0, 1.0], (16, 1)))
    m = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], dtype=float), [[0, 1, 2]])
    n, degenerate = vertex_normals(m, return_degenerate=True)
    assert degenerate.tolist() == [False, False, False, True] and np.all(n[3] == 0)
    # octahedron apex
    v = np.array([[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float)
    f = [[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4], [1, 0, 5], [2, 1, 5], [3, 2, 5], [0, 3, 5]]
    assert_close(vertex_normals(TriangleMesh(v, f))[4], [0, 0, 1], 1e-12)


def test_normals_rotation_equivariant(rng):
    mesh = grid_mesh(5)
    mesh = TriangleMesh(mesh.vertices + rng.normal(mesh.vertices.shape) * 0.05, mesh.faces)
    rot = Rotation.from_rotvec([0.3, -0.7, 1.1]).as_matrix()
    n = vertex_normals(mesh)
    n_rot = vertex_normals(TriangleMesh(mesh.vertices @ rot.T, mesh.faces))
    assert_close(n_rot, n @ rot.T, 1e-9)
    assert_close(np.linalg.norm(n, axis=1), np.ones(25), 1e-9)


def test_edge_set_examples():
    assert edge_set(np.array([[0, 1, 2]])).tolist() == [[0, 1], [0, 2], [1, 2]]
    assert len(edge_set(np.array([[0, 1, 2], [1, 2, 3]]))) == 5
    assert edge_set(np.zeros((0, 3), dtype=int)).shape == (0, 2)


def test_sequence_reversal_is_involution(rng):
    seq = DynamicMeshSequence(np.zeros((0, 3)), rng.normal((5, 4, 3)))
    assert np.array_equal(seq.reversed().reversed().frames, seq.frames)
