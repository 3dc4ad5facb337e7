from __future__ import annotations

import numpy as np
import pytest

from dymesh import tensor as tn
from dymesh.chunking import split_chunks
from dymesh.mesh import DynamicMeshSequence, TriangleMesh
from dymesh.metrics import ave
from dymesh.tensor import Rng, Tensor
from dymesh.topology import BoolAdjacency, hop_bands, weighted_adjacency
from dymesh.toys import grid_mesh, wave
from dymesh.vae import (CapacityError, DyMeshVAE, PltaAttention, SyncEncoder, VaeConfig, fps, kl_divergence,
                        make_item, prepare_mesh, reconstruct, vae_loss)

from conftest import assert_close

SMALL = dict(hidden_dim=8, latent_dim=3, plta_layers=1, plta_steps=2, vertex_freqs=2, traj_freqs=2,
             decoder_blocks=1, normal_dim=4, fps_ratio=0.25)


def zero_params(module) -> None:
    for p in module.parameters():
        p.data = np.zeros_like(p.data)


def test_fps_examples():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0.1, 0, 0], [0.9, 0, 0]], dtype=float)
    assert fps(pts, 2).tolist() == [0, 1]
    assert fps(pts, 4).tolist() == [0, 1, 2, 3]     # 2 and 3 tie at 0.1; lowest index first
    assert fps(np.ones((5, 3)), 2).tolist() == [0, 1]
    with pytest.raises(ValueError):
        fps(pts, 5)


def test_fps_matches_brute_force_max_min(rng):
    pts = rng.normal((40, 3))
    got = fps(pts, 10)
    chosen = [0]
    for _ in range(9):
        d = np.min(np.linalg.norm(pts[:, None] - pts[chosen][None], axis=-1), axis=1)
        d[chosen] = -1
        chosen.append(int(np.argmax(d)))
    assert got.tolist() == chosen
    assert len(set(got.tolist())) == 10


def test_sample_count():
    cfg = VaeConfig()
    assert (cfg.sample_count(1), cfg.sample_count(7), cfg.sample_count(64), cfg.sample_count(100)) == (1, 1, 8, 12)


def test_plta_singleton_and_zero_projections(rng):
    layer = PltaAttention(4, 4, rng, norm="none")
    x = Tensor(rng.normal((1, 4)))
    out = layer(x, np.zeros((1, 1)))
    assert_close(out.data, layer.value(x).data + x.data, 1e-15)
    zero_params(layer)
    xs = Tensor(rng.normal((6, 4)))
    assert_close(layer(xs, np.zeros((6, 6))).data, xs.data, 0.0)


def test_plta_identity_adjacency_is_self_attention(rng):
    layer = PltaAttention(5, 5, rng)
    x = Tensor(rng.normal((7, 5)))
    eye = weighted_adjacency(hop_bands(BoolAdjacency.from_dense(np.eye(7, dtype=bool)), 2), 0.5)
    out = layer(x, eye.log_mask(1e-300))
    assert_close(out.data, layer.value(x).data + x.data, 1e-12)


def test_mask_floor_suppresses_non_adjacent(rng):
    eye = weighted_adjacency(hop_bands(BoolAdjacency.from_dense(np.eye(3, dtype=bool)), 1), 0.5)
    mask = eye.log_mask(1e-8)
    assert abs(mask[0, 1] + 18.420680743952367) < 1e-12
    logits = rng.uniform((3, 3)) * 2 - 1
    w = tn.masked_softmax(Tensor(logits), mask).data
    assert (w[~np.eye(3, dtype=bool)] < 1e-7).all()


def test_sync_map_shared_between_streams(rng):
    enc = SyncEncoder(6, rng)
    verts, traj = Tensor(rng.normal((10, 6))), Tensor(rng.normal((2, 10, 6)))
    idx = np.array([0, 4, 7])
    s, t = enc(verts[idx], verts, traj, idx)
    assert (enc._map_computations, enc._map_applications) == (1, 2)
    a = enc._last_map.data
    assert_close(t.data, a @ enc.v_traj(tn.layer_norm(traj)).data + traj.data[:, idx], 1e-12)
    assert_close(s.data, a @ enc.v(tn.layer_norm(verts)).data + verts.data[idx], 1e-12)


def test_sync_uniform_map_averages(rng):
    enc = SyncEncoder(4, rng, norm="none")
    enc.q.weight.data[:] = 0
    enc.q.bias.data[:] = 0
    verts, traj = Tensor(rng.normal((5, 4))), Tensor(rng.normal((1, 5, 4)))
    idx = np.array([0, 2])
    _, t = enc(verts[idx], verts, traj, idx)
    proj = enc.v_traj(traj).data
    assert_close(t.data, proj.mean(axis=1, keepdims=True) + traj.data[:, idx], 1e-12)


def test_kl_examples():
    z = Tensor(np.zeros((2, 3, 4)))
    assert kl_divergence(z, z).item() == 0.0
    assert abs(kl_divergence(Tensor(np.ones((2, 3, 4))), z).item() - 0.5) < 1e-15


def test_vae_loss_examples(rng):
    target = split_chunks(rng.normal((20, 4, 3)))
    recon = Tensor(target.features())
    assert vae_loss(recon, target, 0.0).item() == 0.0
    assert abs(vae_loss(Tensor(target.features() + 1), target, 0.0, eta=0.0).item() - 1.0) < 1e-15
    assert abs(vae_loss(recon, target, 2.0, eta=0.25).item() - 0.5) < 1e-15
    with pytest.raises(ValueError):
        vae_loss(Tensor(np.zeros((1, 4, 72))), target, 0.0)


def test_decode_shape_and_static_reconstruction():
    cfg = VaeConfig(**SMALL)
    model = DyMeshVAE(cfg, Rng(0))
    seq = wave(40, k=5)
    item = make_item(seq, cfg)
    enc, packet, kl = model.encode(item.inputs, item.chunks.features(), Rng(1))
    out = model.decode(packet.paired_features, packet.z, enc.vertex_features)
    assert out.shape == (3, 25, 72)
    assert np.all(out.data == 0)          # zero-initialized output projection
    assert packet.mu.shape == (3, 6, 3) and np.all(packet.sigma > 0)
    static = DynamicMeshSequence.static(grid_mesh(5), 20)
    rec = reconstruct(model, static)
    assert rec.n_frames == 20 and ave(rec, static) == 0.0


def test_latent_sampling_deterministic():
    cfg = VaeConfig(**SMALL)
    model = DyMeshVAE(cfg, Rng(0))
    item = make_item(wave(16, k=4), cfg)
    z1 = model.encode(item.inputs, item.chunks.features(), Rng(9))[1].z.data
    z2 = model.encode(item.inputs, item.chunks.features(), Rng(9))[1].z.data
    assert np.array_equal(z1, z2)
    with pytest.raises(ValueError):
        model.encode(item.inputs, item.chunks.features())


def test_encoder_permutation_equivariant(rng):
    cfg = VaeConfig(**SMALL)
    model = DyMeshVAE(cfg, Rng(4))
    mesh = grid_mesh(5)
    mesh = TriangleMesh(mesh.vertices + rng.normal(mesh.vertices.shape) * 0.03, mesh.faces)
    perm = rng.permutation(25)
    inv = np.argsort(perm)
    permuted = TriangleMesh(mesh.vertices[perm], inv[mesh.faces])
    a = model.encode_vertices(prepare_mesh(mesh, cfg)).data
    b = model.encode_vertices(prepare_mesh(permuted, cfg)).data
    assert_close(b, a[perm], 1e-9)


@pytest.mark.parametrize("place", ["none", "enc1", "enc2", "enc3"])
def test_normal_placements(place):
    cfg = VaeConfig(**{**SMALL, "normal_placement": place})
    model = DyMeshVAE(cfg, Rng(2))
    out = model.encode_vertices(prepare_mesh(grid_mesh(4), cfg))
    assert out.shape == (16, 8)


def test_inject_normals_examples(rng):
    feat = Tensor(rng.normal((16, 8)))
    none = DyMeshVAE(VaeConfig(**{**SMALL, "normal_placement": "none"}), Rng(0))
    assert none.inject_normals(feat, np.zeros((16, 3))) is feat
    enc2 = DyMeshVAE(VaeConfig(**SMALL), Rng(0))
    normals = np.tile([0, 0, 1.0], (16, 1))
    out = enc2.inject_normals(feat, normals).data
    assert out.shape == (16, 12)
    assert np.all(out[:, 8:] == out[0, 8:])
    degenerate = enc2.inject_normals(feat, np.zeros((16, 3))).data
    assert_close(degenerate[:, 8:], np.tile(enc2.normal_proj.bias.data, (16, 1)), 0.0)


def test_capacity_and_config_errors():
    with pytest.raises(CapacityError):
        prepare_mesh(grid_mesh(5), VaeConfig(max_vertices=10))
    with pytest.raises(ValueError):
        VaeConfig(normal_placement="enc4")
    with pytest.raises(ValueError):
        VaeConfig(hidden_dim=10, heads=3)


def test_checkpoint_round_trip(tmp_path):
    from dymesh.training import load_model, save_model
    cfg = VaeConfig(**SMALL)
    model = DyMeshVAE(cfg, Rng(6))
    save_model(model, tmp_path / "v.ckpt")
    back = load_model(tmp_path / "v.ckpt", expect="vae")
    assert back.cfg == cfg
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), back.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)
    with pytest.raises(ValueError):
        load_model(tmp_path / "v.ckpt", expect="flow")
