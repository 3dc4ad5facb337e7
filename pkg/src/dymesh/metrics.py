"""Sequence-level evaluation: average vertex error, anomalous edge ratio, moving distance."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import DynamicMeshSequence, TriangleMesh, edge_set

DEFAULT_TAUS = (2.0, 5.0, 10.0)


@dataclass
class EdgeRatioCount:
    anomalous: int
    total: int          # (edge, frame) pairs with a non-zero reference length
    excluded: int       # pairs skipped because the reference edge has zero length

    @property
    def ratio(self) -> float:
        return self.anomalous / self.total if self.total else 0.0


@dataclass
class MetricReport:
    ave: float | None
    rho_abn: dict[float, float] = field(default_factory=dict)
    amd: float | None = None
    excluded_edges: int = 0

    def __post_init__(self):
        vals = [v for v in (self.ave, self.amd) if v is not None]
        if any(v < 0 for v in vals) or any(not 0.0 <= r <= 1.0 for r in self.rho_abn.values()):
            raise ValueError("metric values out of range")

    def row(self) -> list[str]:
        cells = ["" if self.ave is None else f"{self.ave:.6g}"]
        cells += [f"{self.rho_abn[t]:.6g}" for t in sorted(self.rho_abn)]
        cells.append("" if self.amd is None else f"{self.amd:.6g}")
        return cells

    def header(self) -> list[str]:
        return ["ave"] + [f"rho_{t:g}" for t in sorted(self.rho_abn)] + ["amd"]


def _check_pair(a: DynamicMeshSequence, b: DynamicMeshSequence) -> None:
    if a.frames.shape != b.frames.shape:
        raise ValueError(f"sequence shapes differ: {a.frames.shape} vs {b.frames.shape}")


def ave(recon: DynamicMeshSequence, gt: DynamicMeshSequence) -> float:
    """Mean Euclidean distance between corresponding vertices over all frames."""
    _check_pair(recon, gt)
    if recon.frames.size == 0:
        raise ValueError("empty sequence")
    return float(np.linalg.norm(recon.frames - gt.frames, axis=-1).mean())


def _edge_lengths(frames: np.ndarray, edges: np.ndarray) -> np.ndarray:
    return np.linalg.norm(frames[:, edges[:, 0]] - frames[:, edges[:, 1]], axis=-1)


def edge_ratio_count(recon: DynamicMeshSequence, reference: TriangleMesh | DynamicMeshSequence,
                     tau: float) -> EdgeRatioCount:
    """Count anomalous (edge, frame) pairs over frames 1..T-1.

    A full reference sequence is compared frame by frame; a single mesh
    (generation mode) serves as the reference for every frame.
    """
    if not tau > 1.0:
        raise ValueError(f"tau must exceed 1, got {tau}")
    if isinstance(reference, DynamicMeshSequence):
        _check_pair(recon, reference)
        ref_frames = reference.frames[1:]
    else:
        if reference.vertices.shape != recon.frames.shape[1:]:
            raise ValueError("reference mesh and sequence have different vertex counts")
        ref_frames = reference.vertices[None]
    if not np.array_equal(reference.faces, recon.faces):
        raise ValueError("recon and reference must share topology")
    edges = edge_set(recon.faces)
    rec = _edge_lengths(recon.frames[1:], edges)
    ref = np.broadcast_to(_edge_lengths(ref_frames, edges), rec.shape)
    valid = ref > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(valid, rec / np.where(valid, ref, 1.0), 1.0)
    bad = valid & ((r > tau) | (r < 1.0 / tau))
    return EdgeRatioCount(int(bad.sum()), int(valid.sum()), int((~valid).sum()))


def rho_abn(recon: DynamicMeshSequence, reference: TriangleMesh | DynamicMeshSequence,
            tau: float = 2.0) -> float:
    return edge_ratio_count(recon, reference, tau).ratio


def amd(seq: DynamicMeshSequence) -> float:
    """Mean per-vertex displacement between consecutive frames."""
    if seq.n_frames < 2:
        raise ValueError("moving distance needs at least two frames")
    return float(np.linalg.norm(np.diff(seq.frames, axis=0), axis=-1).mean())


def evaluate(recon: DynamicMeshSequence, reference: TriangleMesh | DynamicMeshSequence,
             taus=DEFAULT_TAUS) -> MetricReport:
    """All metrics available for the given pair; AVE needs a full reference sequence."""
    counts = {float(t): edge_ratio_count(recon, reference, t) for t in taus}
    return MetricReport(
        ave=ave(recon, reference) if isinstance(reference, DynamicMeshSequence) else None,
        rho_abn={t: c.ratio for t, c in counts.items()},
        amd=amd(recon) if recon.n_frames >= 2 else None,
        excluded_edges=next(iter(counts.values())).excluded if counts else 0,
    )
