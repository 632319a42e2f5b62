"""Neighbor search, kernel integral application, and its set form."""

import numpy as np
import pytest

from codano import autodiff as ad
from codano.errors import MeshError, ShapeError
from codano.field import DEFAULT_EXTENT, Mesh
from codano.gno import (KernelNet, NeighborIndex, build_neighbors, gno_apply,
                        gno_set_apply, nearest_neighbor_spacing)


def brute_force_pairs(q, s, r):
    pairs = []
    for j in range(len(q)):
        for i in range(len(s)):
            if np.sqrt(((q[j] - s[i]) ** 2).sum()) <= r:
                pairs.append((j, i))
    return pairs


def make_kernel(rng, d_in=1, d_out=1, hidden=(8,), name="ker"):
    kernel = KernelNet(name, dim=2, d_in=d_in, d_out=d_out, hidden=hidden)
    store = ad.ParamStore()
    kernel.init_params(store, rng)
    return kernel, store


def set_constant_kernel(kernel, store, matrix):
    """Zero the MLP so the kernel outputs a fixed matrix everywhere."""
    n_layers = len(kernel.mlp.widths) - 1
    for i in range(n_layers):
        store[f"{kernel.name}.k.w{i}"].data[...] = 0.0
        store[f"{kernel.name}.k.b{i}"].data[...] = 0.0
    store[f"{kernel.name}.k.b{n_layers - 1}"].data[...] = np.asarray(matrix).reshape(-1)
    store[f"{kernel.name}.bias"].data[...] = 0.0


class TestBuildNeighbors:
    def test_single_self_neighbor(self):
        mesh = Mesh.irregular(np.array([[0.5, 0.5]]), extents=(1.0, 1.0))
        nbrs = build_neighbors(mesh, mesh, r=1.0)
        assert nbrs.n_pairs == 1
        assert nbrs.query_idx[0] == 0 and nbrs.source_idx[0] == 0
        assert nbrs.empty_count == 0

    def test_4x4_grid_matches_brute_force(self):
        mesh = Mesh.uniform((4, 4), extents=(1.0, 1.0))
        r = 0.25 * 1.05
        nbrs = build_neighbors(mesh, mesh, r)
        got = list(zip(nbrs.query_idx.tolist(), nbrs.source_idx.tolist()))
        expect = brute_force_pairs(mesh.points, mesh.points, r)
        assert got == expect
        # interior points see themselves plus the 4-neighborhood
        counts = nbrs.counts.reshape(4, 4)
        assert np.all(counts[1:3, 1:3] == 5)

    def test_tiny_radius_keeps_only_self(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0.1, 0.9, size=(20, 2))
        mesh = Mesh.irregular(pts, extents=(1.0, 1.0))
        nbrs = build_neighbors(mesh, mesh, r=1e-9)
        assert nbrs.n_pairs == 20
        np.testing.assert_array_equal(nbrs.query_idx, nbrs.source_idx)

    def test_pairs_satisfy_radius_bound(self):
        rng = np.random.default_rng(1)
        q = Mesh.irregular(rng.uniform(0, 1, (40, 2)), extents=(1.0, 1.0))
        s = Mesh.irregular(rng.uniform(0, 1, (60, 2)), extents=(1.0, 1.0))
        nbrs = build_neighbors(q, s, r=0.3)
        d = np.sqrt(((q.points[nbrs.query_idx] - s.points[nbrs.source_idx]) ** 2).sum(1))
        assert np.all(d <= 0.3)
        expect = brute_force_pairs(q.points, s.points, 0.3)
        assert len(expect) == nbrs.n_pairs

    def test_symmetry_when_query_is_source(self):
        rng = np.random.default_rng(2)
        mesh = Mesh.irregular(rng.uniform(0, 1, (50, 2)), extents=(1.0, 1.0))
        nbrs = build_neighbors(mesh, mesh, r=0.25)
        pairs = set(zip(nbrs.query_idx.tolist(), nbrs.source_idx.tolist()))
        assert all((i, j) in pairs for (j, i) in pairs)

    def test_empty_neighborhoods_counted(self):
        q = Mesh.irregular(np.array([[0.1, 0.1], [0.9, 0.9]]), extents=(1.0, 1.0))
        s = Mesh.irregular(np.array([[0.1, 0.1]]), extents=(1.0, 1.0))
        nbrs = build_neighbors(q, s, r=0.05)
        assert nbrs.empty_count == 1
        assert nbrs.n_pairs == 1

    def test_rejects_nonpositive_radius(self):
        mesh = Mesh.uniform((2, 2))
        with pytest.raises(MeshError, match="radius"):
            build_neighbors(mesh, mesh, r=0.0)


class TestGnoApply:
    def test_zero_input_gives_bias(self):
        rng = np.random.default_rng(0)
        kernel, store = make_kernel(rng, d_in=2, d_out=3)
        store["ker.bias"].data[...] = [1.0, -2.0, 0.5]
        mesh = Mesh.uniform((4, 4))
        nbrs = build_neighbors(mesh, mesh, r=1.2 * mesh.spacing[0])
        out = gno_apply(kernel, store, nbrs, np.zeros((16, 2))).data
        np.testing.assert_array_equal(out, np.tile([1.0, -2.0, 0.5], (16, 1)))

    def test_constant_reproduction_local_average(self):
        """Identity kernel / (pi r^2) on a dense grid reproduces constants."""
        mesh = Mesh.uniform((64, 64))
        r = 0.6
        kernel, store = make_kernel(np.random.default_rng(0))
        set_constant_kernel(kernel, store, np.eye(1) / (np.pi * r * r))
        nbrs = build_neighbors(mesh, mesh, r)
        c = 3.7
        out = gno_apply(kernel, store, nbrs, np.full((64 * 64, 1), c)).data
        pts = mesh.points
        interior = np.all((pts >= r) & (pts <= DEFAULT_EXTENT - r), axis=1)
        rel = np.abs(out[interior, 0] - c) / c
        assert rel.max() < 0.05

    def test_refinement_under_density_doubling(self):
        """Monte-Carlo source clouds n and 2n give outputs within 2 percent.

        The per-ball estimate carries indicator noise ~ 1/sqrt(points in
        ball), so the ball must hold a few thousand samples to resolve 2%.
        """
        rng = np.random.default_rng(3)
        ext = (DEFAULT_EXTENT, DEFAULT_EXTENT)
        base = rng.uniform(0, DEFAULT_EXTENT, (16384, 2))
        extra = rng.uniform(0, DEFAULT_EXTENT, (16384, 2))
        coarse = Mesh.irregular(base, extents=ext)
        fine = Mesh.irregular(np.concatenate([base, extra]), extents=ext)
        query = Mesh.uniform((16, 16))

        kernel, store = make_kernel(np.random.default_rng(5), hidden=(8,))
        # gentle smooth kernel: order-one mean with small spatial variation
        n_layers = len(kernel.mlp.widths) - 1
        store[f"ker.k.w{n_layers - 1}"].data[...] *= 0.1
        store[f"ker.k.b{n_layers - 1}"].data[...] = 1.0

        def smooth(pts):
            return (np.sin(pts[:, 0]) * np.cos(pts[:, 1]) + 1.5)[:, None]

        r = 2.0
        with ad.no_grad():
            y1 = gno_apply(kernel, store, build_neighbors(query, coarse, r),
                           smooth(coarse.points)).data
            y2 = gno_apply(kernel, store, build_neighbors(query, fine, r),
                           smooth(fine.points)).data
        rel = np.linalg.norm(y1 - y2) / np.linalg.norm(y2)
        assert rel < 0.02

    def test_rejects_wrong_value_shape(self):
        kernel, store = make_kernel(np.random.default_rng(0), d_in=2)
        mesh = Mesh.uniform((3, 3))
        nbrs = build_neighbors(mesh, mesh, r=1.0)
        with pytest.raises(ShapeError, match="source values"):
            gno_apply(kernel, store, nbrs, np.zeros((9, 3)))

    def test_gradients(self):
        rng = np.random.default_rng(7)
        kernel, store = make_kernel(rng, d_in=2, d_out=2, hidden=(4,))
        src = Mesh.uniform((3, 3))
        qry = Mesh.irregular(rng.uniform(0.5, 5.5, (4, 2)),
                             extents=(DEFAULT_EXTENT, DEFAULT_EXTENT))
        nbrs = build_neighbors(qry, src, r=2.5)
        vals = ad.Tensor(rng.standard_normal((9, 2)), requires_grad=True)
        probe = rng.standard_normal((4, 2))

        def loss_fn():
            return ad.tsum(gno_apply(kernel, store, nbrs, vals) * probe)

        loss = loss_fn()
        store.zero_grads()
        ad.backward(loss, params=store.tensors() + [vals])
        for name in store.names():
            p = store[name]
            flat = p.data.reshape(-1)
            fd = np.zeros_like(flat)
            with ad.no_grad():
                for i in range(flat.size):
                    h = 1e-6 * max(1.0, abs(flat[i]))
                    orig = flat[i]
                    flat[i] = orig + h
                    up = loss_fn().data.item()
                    flat[i] = orig - h
                    dn = loss_fn().data.item()
                    flat[i] = orig
                    fd[i] = (up - dn) / (2 * h)
            denom = max(np.abs(p.grad).max(), np.abs(fd).max(), 1e-8)
            assert np.abs(p.grad.reshape(-1) - fd).max() / denom < 1e-5, name
        # values gradient
        flat = vals.data.reshape(-1)
        fd = np.zeros_like(flat)
        with ad.no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + 1e-6
                up = loss_fn().data.item()
                flat[i] = orig - 1e-6
                dn = loss_fn().data.item()
                flat[i] = orig
                fd[i] = (up - dn) / 2e-6
        denom = max(np.abs(vals.grad).max(), np.abs(fd).max(), 1e-8)
        assert np.abs(vals.grad.reshape(-1) - fd).max() / denom < 1e-5


class TestGnoSetApply:
    def test_one_group_equals_gno_apply(self):
        rng = np.random.default_rng(0)
        kernel, store = make_kernel(rng, d_in=3, d_out=2)
        mesh = Mesh.uniform((4, 4))
        nbrs = build_neighbors(mesh, mesh, r=2.0 * mesh.spacing[0])
        vals = rng.standard_normal((16, 3))
        single = gno_apply(kernel, store, nbrs, vals).data
        grouped = gno_set_apply(kernel, store, nbrs, vals, groups=1).data
        np.testing.assert_array_equal(grouped, single)

    def test_swap_groups_swaps_outputs_bitwise(self):
        rng = np.random.default_rng(1)
        kernel, store = make_kernel(rng, d_in=2, d_out=2)
        mesh = Mesh.uniform((5, 5))
        nbrs = build_neighbors(mesh, mesh, r=2.0 * mesh.spacing[0])
        x = rng.standard_normal((25, 6))  # 3 groups of width 2
        perm = [1, 2, 0]
        xp = np.concatenate([x[:, 2 * g:2 * g + 2] for g in perm], axis=1)
        y = gno_set_apply(kernel, store, nbrs, x, groups=3).data
        yp = gno_set_apply(kernel, store, nbrs, xp, groups=3).data
        expect = np.concatenate([y[:, 2 * g:2 * g + 2] for g in perm], axis=1)
        assert np.array_equal(yp, expect)

    def test_identical_groups_identical_outputs(self):
        rng = np.random.default_rng(2)
        kernel, store = make_kernel(rng, d_in=2, d_out=3)
        mesh = Mesh.uniform((4, 4))
        nbrs = build_neighbors(mesh, mesh, r=2.0 * mesh.spacing[0])
        block = rng.standard_normal((16, 2))
        x = np.concatenate([block, block], axis=1)
        y = gno_set_apply(kernel, store, nbrs, x, groups=2).data
        assert np.array_equal(y[:, :3], y[:, 3:])


class TestSpacing:
    def test_uniform_grid_spacing(self):
        mesh = Mesh.uniform((8, 8))
        assert nearest_neighbor_spacing(mesh) == pytest.approx(mesh.spacing[0])

    def test_needs_two_points(self):
        mesh = Mesh.irregular(np.array([[0.5, 0.5]]), extents=(1.0, 1.0))
        with pytest.raises(MeshError, match="at least two"):
            nearest_neighbor_spacing(mesh)
