"""Sparse boolean adjacency algebra and power-law hop bands.

Connectivity is doubled by boolean squaring, ``C_{2l} = (C_l . C_l) | C_l``,
and each squaring contributes the band of newly reached vertex pairs. The
bands are weighted by ``gamma ** band`` to form the attention mask.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .mesh import TriangleMesh


@dataclass
class BoolAdjacency:
    """Symmetric boolean pattern in CSR form (sorted column indices per row)."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray

    def row(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def pairs(self) -> set[tuple[int, int]]:
        rows = np.repeat(np.arange(self.n), np.diff(self.indptr))
        return set(zip(rows.tolist(), self.indices.tolist()))

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n), dtype=bool)
        rows = np.repeat(np.arange(self.n), np.diff(self.indptr))
        out[rows, self.indices] = True
        return out

    def is_symmetric(self) -> bool:
        d = self.to_dense()
        return bool((d == d.T).all())

    @classmethod
    def from_rows(cls, n: int, rows: list[np.ndarray]) -> "BoolAdjacency":
        lengths = np.array([len(r) for r in rows], dtype=np.int64)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(lengths, out=indptr[1:])
        indices = np.concatenate(rows).astype(np.int64) if rows else np.zeros(0, np.int64)
        return cls(n, indptr, indices)

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "BoolAdjacency":
        dense = np.asarray(dense, dtype=bool)
        return cls.from_rows(len(dense), [np.flatnonzero(r) for r in dense])


@dataclass
class HopBands:
    steps: int
    bands: list[BoolAdjacency]
    reach: BoolAdjacency            # C_{2^L}, the union of all bands

    def sizes(self) -> list[int]:
        return [b.nnz for b in self.bands]


@dataclass
class WeightedAdjacency:
    n: int
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    gamma: float

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        rows = np.repeat(np.arange(self.n), np.diff(self.indptr))
        out[rows, self.indices] = self.weights
        return out

    def weight(self, i: int, j: int) -> float:
        row = self.indices[self.indptr[i]:self.indptr[i + 1]]
        k = np.searchsorted(row, j)
        if k < len(row) and row[k] == j:
            return float(self.weights[self.indptr[i] + k])
        return 0.0

    def log_mask(self, eps: float = 1e-8) -> np.ndarray:
        """Dense additive attention mask ``log(Adj + eps)``."""
        return np.log(self.to_dense() + eps)


def one_hop(mesh: TriangleMesh | np.ndarray, n: int | None = None) -> BoolAdjacency:
    """Vertices sharing a face, plus the diagonal."""
    if isinstance(mesh, TriangleMesh):
        faces, n = mesh.faces, mesh.n_vertices
    else:
        faces = np.asarray(mesh, dtype=np.int64).reshape(-1, 3)
        if n is None:
            raise ValueError("vertex count required with a bare face array")
    if len(faces) and (faces.min() < 0 or faces.max() >= n):
        raise IndexError(f"face index out of range for {n} vertices")
    if n == 0:
        return BoolAdjacency(0, np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int64))
    src = np.concatenate([faces[:, a] for a in (0, 1, 2, 1, 2, 0)] + [np.arange(n)])
    dst = np.concatenate([faces[:, b] for b in (1, 2, 0, 0, 1, 2)] + [np.arange(n)])
    key = np.unique(src * n + dst)
    rows, cols = np.divmod(key, n)
    counts = np.bincount(rows, minlength=n)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return BoolAdjacency(n, indptr, cols.astype(np.int64))


def _gather_ranges(indptr: np.ndarray, indices: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Concatenation of ``indices`` row slices for every row in ``rows``."""
    starts = indptr[rows]
    lengths = indptr[rows + 1] - starts
    total = int(lengths.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    offsets = np.repeat(starts - np.concatenate([[0], np.cumsum(lengths)[:-1]]), lengths)
    return indices[np.arange(total) + offsets]


def boolean_square(adj: BoolAdjacency) -> BoolAdjacency:
    """Pattern of ``Boolean(A . A) | A``, computed row by row.

    Row ``i`` of the product is the union of the neighbor lists of the
    neighbors of ``i``; a scratch marker of length ``n`` collects it.
    """
    n = adj.n
    mark = np.zeros(n, dtype=bool)
    rows = []
    for i in range(n):
        own = adj.row(i)
        reached = _gather_ranges(adj.indptr, adj.indices, own)
        mark[reached] = True
        mark[own] = True
        r = np.flatnonzero(mark)
        mark[r] = False
        rows.append(r)
    return BoolAdjacency.from_rows(n, rows)


def _difference(a: BoolAdjacency, b: BoolAdjacency) -> BoolAdjacency:
    """Pattern of ``a & ~b`` (rows are sorted)."""
    rows = [np.setdiff1d(a.row(i), b.row(i), assume_unique=True) for i in range(a.n)]
    return BoolAdjacency.from_rows(a.n, rows)


def hop_bands(adj: BoolAdjacency, steps: int) -> HopBands:
    """Band_0 = C_1; Band_l = C_{2^l} & ~C_{2^(l-1)} for l = 1..steps."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    current = adj
    bands = [adj]
    for _ in range(steps):
        nxt = boolean_square(current)
        bands.append(_difference(nxt, current))
        current = nxt
    return HopBands(steps, bands, current)


def weighted_adjacency(bands: HopBands, gamma: float = 0.5) -> WeightedAdjacency:
    """Adj = sum_l gamma^l Band_l as a sparse matrix."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    n = bands.reach.n
    rows_out = []
    w_out = []
    for i in range(n):
        cols = [b.row(i) for b in bands.bands]
        w = [np.full(len(c), gamma ** l) for l, c in enumerate(cols)]
        c = np.concatenate(cols)
        w = np.concatenate(w)
        order = np.argsort(c, kind="stable")
        rows_out.append(c[order])
        w_out.append(w[order])
    pattern = BoolAdjacency.from_rows(n, rows_out)
    weights = np.concatenate(w_out) if w_out else np.zeros(0)
    return WeightedAdjacency(n, pattern.indptr, pattern.indices, weights, gamma)


def topology_mask(mesh: TriangleMesh, steps: int = 4, gamma: float = 0.5) -> WeightedAdjacency:
    return weighted_adjacency(hop_bands(one_hop(mesh), steps), gamma)


def bfs_band_oracle(adj: BoolAdjacency, steps: int) -> HopBands:
    """Bands from exact per-source BFS distances, truncated at depth 2^steps."""
    n = adj.n
    limit = 2 ** steps
    neighbors = [adj.row(i).tolist() for i in range(n)]
    band_rows: list[list[list[int]]] = [[[] for _ in range(n)] for _ in range(steps + 1)]
    for s in range(n):
        dist = {s: 0}
        queue = deque([s])
        while queue:
            u = queue.popleft()
            du = dist[u]
            if du == limit:
                continue
            for w in neighbors[u]:
                if w not in dist:
                    dist[w] = du + 1
                    queue.append(w)
        for v, d in dist.items():
            band = 0 if d <= 1 else (d - 1).bit_length()
            band_rows[band][s].append(v)
    bands = [BoolAdjacency.from_rows(n, [np.sort(np.array(r, dtype=np.int64)) for r in rows])
             for rows in band_rows]
    reach_rows = [np.sort(np.concatenate([b.row(i) for b in bands])) for i in range(n)]
    return HopBands(steps, bands, BoolAdjacency.from_rows(n, reach_rows))
