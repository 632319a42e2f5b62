"""Graph-kernel integral operators between arbitrary point meshes.

A NeighborIndex lists every (query, source) pair within radius r, found by
exact search over a uniform binning of side r. Application is a discrete
kernel integral: messages k(x, y_i) f(y_i) q_i summed over the neighborhood,
with quadrature weights q_i from the source mesh. Gather and scatter run
through constant sparse matrices so gradients flow only into the kernel MLP
and the function values.
"""

from __future__ import annotations

import itertools

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .errors import MeshError, ShapeError
from .field import Mesh
from .spectral import PointwiseOp


class NeighborIndex:
    """Radius-r neighbor pairs between a query mesh and a source mesh.

    Pairs are ordered by (query index, source index). Gather/scatter CSR
    matrices (with precomputed transposes) are built once for reuse.
    """

    def __init__(self, query_mesh: Mesh, source_mesh: Mesh, radius: float,
                 query_idx: np.ndarray, source_idx: np.ndarray):
        self.query_mesh = query_mesh
        self.source_mesh = source_mesh
        self.radius = float(radius)
        self.query_idx = query_idx
        self.source_idx = source_idx
        self.n_pairs = len(query_idx)
        counts = np.bincount(query_idx, minlength=query_mesh.n_points)
        self.counts = counts
        self.empty_count = int((counts == 0).sum())
        self.pair_weights = source_mesh.quad_weights[source_idx]

        n_q, n_s, p = query_mesh.n_points, source_mesh.n_points, self.n_pairs
        ones = np.ones(p)
        gather = sp.csr_matrix((ones, (np.arange(p), source_idx)), shape=(p, n_s))
        scatter = sp.csr_matrix((ones, (query_idx, np.arange(p))), shape=(n_q, p))
        self.gather = (gather, gather.T.tocsr())
        self.scatter = (scatter, scatter.T.tocsr())


def build_neighbors(query_mesh: Mesh, source_mesh: Mesh, r: float) -> NeighborIndex:
    """Exact Euclidean radius query (distance <= r, inclusive)."""
    if r <= 0:
        raise MeshError(f"neighbor radius must be positive, got {r}")
    if query_mesh.dim != source_mesh.dim:
        raise MeshError("query and source meshes have different dimensions")
    q, s = query_mesh.points, source_mesh.points
    dim = query_mesh.dim

    origin = np.minimum(q.min(axis=0), s.min(axis=0))
    s_cells = np.floor((s - origin) / r).astype(np.int64)
    buckets: dict[tuple, list] = {}
    for i, cell in enumerate(map(tuple, s_cells)):
        buckets.setdefault(cell, []).append(i)
    packed = {cell: np.asarray(idx, dtype=np.int64) for cell, idx in buckets.items()}

    offsets = list(itertools.product((-1, 0, 1), repeat=dim))
    q_cells = np.floor((q - origin) / r).astype(np.int64)
    r2 = r * r
    qi_parts, si_parts = [], []
    for j in range(len(q)):
        base = tuple(q_cells[j])
        cand = [packed[c] for c in
                (tuple(base[k] + off[k] for k in range(dim)) for off in offsets)
                if c in packed]
        if not cand:
            continue
        cand = np.concatenate(cand)
        d2 = ((s[cand] - q[j]) ** 2).sum(axis=1)
        keep = cand[d2 <= r2]
        if keep.size:
            keep.sort()
            qi_parts.append(np.full(keep.size, j, dtype=np.int64))
            si_parts.append(keep)
    if qi_parts:
        query_idx = np.concatenate(qi_parts)
        source_idx = np.concatenate(si_parts)
    else:
        query_idx = np.zeros(0, dtype=np.int64)
        source_idx = np.zeros(0, dtype=np.int64)
    return NeighborIndex(query_mesh, source_mesh, r, query_idx, source_idx)


class KernelNet:
    """MLP kernel k(x, y): concatenated coordinates to a d_out x d_in matrix."""

    def __init__(self, name: str, dim: int, d_in: int, d_out: int, hidden=(32, 32)):
        self.name = name
        self.dim = int(dim)
        self.d_in = int(d_in)
        self.d_out = int(d_out)
        self.mlp = PointwiseOp(f"{name}.k", (2 * dim, *hidden, d_out * d_in))

    def init_params(self, store: ad.ParamStore, rng) -> None:
        self.mlp.init_params(store, rng)
        store.add(f"{self.name}.bias", np.zeros(self.d_out))

    def param_names(self) -> list[str]:
        return self.mlp.param_names() + [f"{self.name}.bias"]

    def matrices(self, store: ad.ParamStore, nbrs: NeighborIndex) -> ad.Tensor:
        """Kernel matrices for every neighbor pair, shape (n_pairs, d_out, d_in)."""
        coords = np.concatenate(
            [nbrs.query_mesh.points[nbrs.query_idx],
             nbrs.source_mesh.points[nbrs.source_idx]], axis=1)
        k = self.mlp(store, ad.Tensor(coords))
        return ad.reshape(k, (nbrs.n_pairs, self.d_out, self.d_in))


def gno_apply(kernel: KernelNet, store: ad.ParamStore, nbrs: NeighborIndex,
              values) -> ad.Tensor:
    """Kernel integral of source values (n_source, d_in) onto the query mesh.

    Empty neighborhoods give zero plus the learned bias.
    """
    values = ad.as_tensor(values)
    if values.shape != (nbrs.source_mesh.n_points, kernel.d_in):
        raise ShapeError(
            f"expected source values {(nbrs.source_mesh.n_points, kernel.d_in)}, "
            f"got {values.shape}")
    k = kernel.matrices(store, nbrs)
    gathered = ad.sparse_matmul(nbrs.gather, values) * nbrs.pair_weights[:, None]
    msgs = ad.einsum2("pij,pj->pi", k, gathered)
    out = ad.sparse_matmul(nbrs.scatter, msgs)
    return out + store[f"{kernel.name}.bias"]


def gno_set_apply(kernel: KernelNet, store: ad.ParamStore, nbrs: NeighborIndex,
                  values, groups: int) -> ad.Tensor:
    """Shared-kernel integral per width-d_in group of (n_source, groups*d_in)."""
    values = ad.as_tensor(values)
    n_s, total = values.shape
    if n_s != nbrs.source_mesh.n_points or total != groups * kernel.d_in:
        raise ShapeError(
            f"expected source values {(nbrs.source_mesh.n_points, groups * kernel.d_in)}, "
            f"got {values.shape}")
    k = kernel.matrices(store, nbrs)
    gathered = ad.sparse_matmul(nbrs.gather, values) * nbrs.pair_weights[:, None]
    gathered = ad.reshape(gathered, (nbrs.n_pairs, groups, kernel.d_in))
    msgs = ad.einsum2("pij,pgj->pgi", k, gathered)
    msgs = ad.reshape(msgs, (nbrs.n_pairs, groups * kernel.d_out))
    out = ad.sparse_matmul(nbrs.scatter, msgs)
    out = ad.reshape(out, (nbrs.query_mesh.n_points, groups, kernel.d_out))
    out = out + store[f"{kernel.name}.bias"]
    return ad.reshape(out, (nbrs.query_mesh.n_points, groups * kernel.d_out))


def nearest_neighbor_spacing(mesh: Mesh, chunk: int = 512) -> float:
    """Mean distance from each point to its nearest other point."""
    pts = mesh.points
    n = len(pts)
    if n < 2:
        raise MeshError("nearest-neighbor spacing needs at least two points")
    nearest = np.empty(n)
    for start in range(0, n, chunk):
        block = pts[start:start + chunk]
        d2 = ((block[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        rows = np.arange(len(block))
        d2[rows, start + rows] = np.inf
        nearest[start:start + chunk] = np.sqrt(d2.min(axis=1))
    return float(nearest.mean())
