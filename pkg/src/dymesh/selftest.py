"""Built-in oracle and invariant checks, runnable without test tooling."""

from __future__ import annotations

import tempfile
import time
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import stats

from . import tensor as tn
from .chunking import ORIENTATIONS, ChunkConfig, split_chunks, tdgw_blend
from .dataset import ManifestRecord, read_manifest, write_manifest
from .formats import parse_dms, dms_bytes
from .metrics import rho_abn
from .sgtt import SGTT, FlowCondition, SgttConfig, euler_sample, rf_loss, sample_timestep, timestep_cdf
from .tensor import Rng, Tensor, grad_check
from .topology import bfs_band_oracle, hop_bands, one_hop
from .toys import random_triangulation, stretch_case

CHECKS: list[tuple[str, Callable[[], str]]] = []


class CheckFailed(AssertionError):
    pass


def check(name: str):
    def wrap(fn):
        CHECKS.append((name, fn))
        return fn
    return wrap


def _require(cond: bool, detail: str) -> None:
    if not cond:
        raise CheckFailed(detail)


@check("hop bands match BFS")
def _hop_bands() -> str:
    rng = Rng(11)
    for k in range(5):
        adj = one_hop(random_triangulation(20 + 30 * k, rng.fork(k)))
        for steps in range(4):
            fast, ref = hop_bands(adj, steps), bfs_band_oracle(adj, steps)
            for l, (a, b) in enumerate(zip(fast.bands, ref.bands)):
                _require(a.pairs() == b.pairs(), f"band {l} differs (mesh {k}, L={steps})")
    return "5 meshes x L=0..3"


@check("chunk round trip")
def _chunks() -> str:
    rng = Rng(3)
    worst = 0.0
    for t in (1, 15, 16, 17, 40, 64, 101):
        v = rng.normal((t, 4, 3))
        for o in ORIENTATIONS[:2]:
            worst = max(worst, float(np.abs(tdgw_blend(split_chunks(v, ChunkConfig()), o) - v).max()))
    _require(worst <= 1e-12, f"max error {worst:.3g}")
    return f"max error {worst:.1e}"


@check("gradient of sum of squares")
def _grad_sq() -> str:
    x = Tensor(Rng(1).normal((4, 3)), requires_grad=True)
    err = grad_check(lambda a: tn.tsum(a * a), x)
    _require(err < 1e-7, f"relative error {err:.3g}")
    return f"relative error {err:.1e}"


@check("gradient of the flow loss")
def _grad_flow() -> str:
    cfg = SgttConfig(blocks=1, dim=8, latent_dim=4, shape_dim=8, text_dim=5, heads=2)
    model, rng = SGTT(cfg, Rng(0)), Rng(100)
    for _, p in model.named_parameters():
        p.data = rng.normal(p.shape) * 0.5
    z = rng.normal((2, 1, 6, 4))
    cond = FlowCondition(rng.normal((6, 8)), rng.normal((3, 5)))
    worst = max(grad_check(lambda _: rf_loss(model, z, cond, Rng(7), drop_prob=0.5), p)
                for p in model.parameters())
    _require(worst < 1e-4, f"relative error {worst:.3g}")
    return f"relative error {worst:.1e}"


@check("untrained blocks are identities")
def _identity() -> str:
    cfg = SgttConfig(blocks=2, dim=16, latent_dim=4, shape_dim=6, text_dim=5)
    model, rng = SGTT(cfg, Rng(2)), Rng(4)
    x0, x = model.block_stack(rng.normal((2, 3, 5, 4)), np.array([0.3, 0.8]), rng.normal((5, 6)),
                              rng.normal((2, 2, 5)))
    diff = float(np.abs(x.data - x0.data).max())
    _require(diff <= 1e-12, f"residual change {diff:.3g}")
    return f"residual change {diff:.1e}"


@check("euler oracle")
def _euler() -> str:
    rng = Rng(9)
    # dyadic values keep target - eps and eps + (target - eps) free of rounding
    target, eps = (np.round(rng.normal((2, 3, 4)) * 1024) / 1024 for _ in range(2))
    oracle = lambda z, t, shape, text: target - eps   # noqa: E731
    one = euler_sample(oracle, FlowCondition(np.zeros((3, 1))), target.shape, steps=1, guidance=1.0, noise=eps)
    many = euler_sample(oracle, FlowCondition(np.zeros((3, 1))), target.shape, steps=64, guidance=1.0, noise=eps)
    e1, e64 = float(np.abs(one - target).max()), float(np.abs(many - target).max())
    _require(e1 == 0.0 and e64 <= 1e-6, f"errors {e1:.3g}, {e64:.3g}")
    return f"one-step error {e1:.1e}, 64-step error {e64:.1e}"


@check("timestep distribution")
def _timesteps() -> str:
    draws = sample_timestep(Rng(123).uniform(20000))
    ks = stats.kstest(draws, timestep_cdf).statistic
    _require(ks < 0.02, f"KS {ks:.3g}")
    return f"KS {ks:.4f}"


@check("anomalous edge ratio")
def _metrics() -> str:
    recon, ref = stretch_case()
    r2, r5 = rho_abn(recon, ref, 2.0), rho_abn(recon, ref, 5.0)
    _require(r2 == 0.05 and r5 == 0.0, f"rho2={r2}, rho5={r5}")
    return "rho2=0.05 rho5=0"


@check("container and manifest round trips")
def _io() -> str:
    from .mesh import DynamicMeshSequence
    rng = Rng(5)
    seq = DynamicMeshSequence(np.array([[0, 1, 2], [1, 2, 3]]), rng.normal((3, 4, 3)).astype(np.float32))
    back = parse_dms(dms_bytes(seq))
    _require(np.array_equal(back.frames, seq.frames) and np.array_equal(back.faces, seq.faces), "dms differs")
    recs = [ManifestRecord(f"r{i}", "src", 16, 10, 12, accepted=bool(i % 2), window=16, start=i) for i in range(5)]
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "m.tsv"
        write_manifest(recs, path)
        _require(read_manifest(path) == recs, "manifest differs")
    return "dms and manifest exact"


def run_all(echo=print) -> int:
    """Run every check; returns the number of failures."""
    failures = 0
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            detail = fn()
            status = "PASS"
        except Exception as exc:   # a broken check is reported, not raised
            detail, status = f"{type(exc).__name__}: {exc}", "FAIL"
            failures += 1
        echo(f"{status}\t{name}\t{detail}\t{time.perf_counter() - t0:.2f}s")
    return failures
