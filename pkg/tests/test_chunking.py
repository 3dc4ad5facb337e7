from __future__ import annotations

import math

import numpy as np
import pytest

from dymesh.chunking import (ORIENTATIONS, ChunkConfig, ChunkConfigError, ChunkedTrajectory, blend_weight,
                             continuity_score, split_chunks, tdgw_blend)
from dymesh.mesh import DynamicMeshSequence, decompose_trajectory

from conftest import assert_close


def frame_ids(t: int, n: int = 1) -> np.ndarray:
    """Offsets whose x coordinate is the frame index, for readable slicing checks."""
    v = np.zeros((t, n, 3))
    v[..., 0] = np.arange(t)[:, None]
    return v


def test_split_examples():
    c32 = split_chunks(frame_ids(32))
    assert c32.num_chunks == 2
    assert c32.chunks[1, :, 0, 0].tolist() == list(range(8, 32))
    c16 = split_chunks(frame_ids(16))
    assert c16.num_chunks == 1
    assert c16.chunks[0, :8, 0, 0].tolist() == [0.0] * 8
    assert c16.chunks[0, 8:, 0, 0].tolist() == list(range(16))
    c40 = split_chunks(frame_ids(40))
    assert c40.num_chunks == 3
    assert c40.chunks[2, -8:, 0, 0].tolist() == [39.0] * 8     # last-frame tail padding


def test_overlap_regions_agree():
    ch = split_chunks(np.random.default_rng(0).normal(size=(70, 3, 3))).chunks
    for i in range(ch.shape[0] - 1):
        assert np.array_equal(ch[i, -8:], ch[i + 1, :8])


def test_accepts_relative_trajectory():
    seq = DynamicMeshSequence(np.zeros((0, 3)), np.random.default_rng(1).normal(size=(20, 4, 3)))
    tr = decompose_trajectory(seq)
    assert np.array_equal(split_chunks(tr).chunks, split_chunks(tr.offsets).chunks)


def test_features_layout_round_trip():
    ch = split_chunks(np.random.default_rng(2).normal(size=(33, 5, 3)))
    f = ch.features()
    assert f.shape == (3, 5, 72)
    assert np.array_equal(f[1, 2, 3:6], ch.chunks[1, 1, 2])
    back = ChunkedTrajectory.from_features(f, ch.config, 33)
    assert np.array_equal(back.chunks, ch.chunks)
    with pytest.raises(ValueError):
        ChunkedTrajectory.from_features(f[..., :60], ch.config, 33)


def _scalar_layout(t: int, ls: int, lc: int) -> list[list[int]]:
    """Frame index (or -1 for zero padding) held at every chunk slot, built one slot at a time."""
    lo = lc - ls
    num_c = 0
    while num_c * ls < t:
        num_c += 1
    rows = []
    for i in range(num_c):
        row = []
        for s in range(lc):
            if i == 0:
                src = -1 if s < lo else s - lo
            else:
                src = (i + 1) * ls - lc + s
            row.append(-1 if src < 0 else min(src, t - 1))
        rows.append(row)
    return rows


@pytest.mark.parametrize("cfg", [ChunkConfig(), ChunkConfig(16, 16), ChunkConfig(4, 7), ChunkConfig(5, 10)])
def test_layout_matches_scalar_reference(cfg):
    for t in range(1, 201):
        ch = split_chunks(frame_ids(t) + 1.0, cfg)    # shift so zero padding is distinguishable
        ref = _scalar_layout(t, cfg.stride, cfg.length)
        assert ch.num_chunks == len(ref) == math.ceil(t / cfg.stride)
        got = (ch.chunks[:, :, 0, 0] - 1.0).astype(int)
        got[ch.chunks[:, :, 0, 0] == 0] = -1
        assert got.tolist() == ref


def test_blend_example_one_ninth():
    assert blend_weight(0, 8) == 8 / 9
    cfg = ChunkConfig()
    chunks = np.zeros((2, 24, 1, 3))
    chunks[1] = 1.0
    out = tdgw_blend(ChunkedTrajectory(chunks, cfg, 32))
    assert_close(out[8, 0], [1 / 9] * 3, 1e-15)
    assert_close(out[15, 0], [8 / 9] * 3, 1e-15)
    as_written = tdgw_blend(ChunkedTrajectory(chunks, cfg, 32), "as-written")
    assert_close(as_written[8, 0], [8 / 9] * 3, 1e-15)
    hard = tdgw_blend(ChunkedTrajectory(chunks, cfg, 32), "hard")
    assert np.all(hard[8:16] == 0) and np.all(hard[16:] == 1)


def test_blend_is_convex():
    rng = np.random.default_rng(5)
    cfg = ChunkConfig()
    chunks = rng.normal(size=(3, 24, 4, 3))
    for o in ORIENTATIONS:
        out = tdgw_blend(ChunkedTrajectory(chunks, cfg, 48), o)
        for i in (1, 2):
            for t in range(8):
                a, b = chunks[i - 1, 16 + t], chunks[i, t]
                x = out[i * 16 - 8 + t]
                lo, hi = np.minimum(a, b), np.maximum(a, b)
                assert np.all(x >= lo - 1e-15) and np.all(x <= hi + 1e-15)


def test_blend_trims_and_copies_non_overlap():
    rng = np.random.default_rng(6)
    chunks = rng.normal(size=(3, 24, 2, 3))
    out = tdgw_blend(ChunkedTrajectory(chunks, ChunkConfig(), 40))
    assert out.shape == (40, 2, 3)
    assert np.array_equal(out[:8], chunks[0, 8:16])
    assert np.array_equal(out[16:24], chunks[1, 8:16])


def test_blend_errors():
    with pytest.raises(ValueError):
        tdgw_blend(ChunkedTrajectory(np.zeros((2, 20, 1, 3)), ChunkConfig(), 32))
    with pytest.raises(ValueError):
        blend_weight(0, 8, "sideways")


@pytest.mark.parametrize("stride,length", [(0, 4), (8, 4), (4, 9)])
def test_config_errors(stride, length):
    with pytest.raises(ChunkConfigError):
        ChunkConfig(stride, length)


def test_split_needs_a_frame():
    with pytest.raises(ValueError):
        split_chunks(np.zeros((0, 2, 3)))


def test_continuity_examples():
    assert_close(continuity_score(frame_ids(48, 3) * 0.1), [1.0, 1.0], 1e-9)
    assert np.all(continuity_score(np.zeros((40, 3, 3))) == 0)
    v = frame_ids(48, 3) * 0.1
    v[16:] += np.array([1.0, 0, 0])      # 10x the median step at boundary 16
    s = continuity_score(v)
    assert s[0] >= 10 and abs(s[1] - 1.0) < 1e-9
    with pytest.raises(ValueError):
        continuity_score(np.zeros((1, 2, 3)))
