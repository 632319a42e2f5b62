"""Reverse-mode gradients verified against central finite differences."""

import numpy as np
import pytest
import scipy.sparse as sp

from codano import autodiff as ad
from codano.errors import NumericError, ShapeError, TrainingStateError


def fd_grad(loss_fn, tensor, step=1e-6):
    """Central finite differences of a scalar loss w.r.t. one tensor's entries."""
    saved = tensor.data.copy()
    out = np.zeros_like(saved)
    it = np.nditer(saved, flags=["multi_index"])
    with ad.no_grad():
        for _ in it:
            ix = it.multi_index
            h = step * max(1.0, abs(saved[ix]))
            tensor.data[ix] = saved[ix] + h
            up = float(loss_fn().data)
            tensor.data[ix] = saved[ix] - h
            down = float(loss_fn().data)
            tensor.data[ix] = saved[ix]
            out[ix] = (up - down) / (2 * h)
    tensor.data = saved
    return out


def check_against_fd(loss_fn, tensors, tol=1e-5):
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    ad.backward(loss)
    for t in tensors:
        fd = fd_grad(loss_fn, t)
        scale = max(np.max(np.abs(fd)), np.max(np.abs(t.grad)), 1e-8)
        assert np.max(np.abs(t.grad - fd)) / scale < tol


class TestElementwiseOps:
    def setup_method(self):
        self.rng = np.random.default_rng(0)

    def param(self, *shape):
        return ad.Tensor(self.rng.standard_normal(shape), requires_grad=True)

    def test_add_mul_broadcast(self):
        a, b = self.param(3, 4), self.param(4)
        check_against_fd(lambda: ((a + b) * b * 0.5).sum(), [a, b])

    def test_sub_div(self):
        a, b = self.param(5), self.param(5)
        b.data = np.abs(b.data) + 1.0
        check_against_fd(lambda: (a / b - b).sum(), [a, b])

    def test_exp_sqrt(self):
        a = self.param(6)
        a.data = np.abs(a.data) + 0.5
        check_against_fd(lambda: (ad.texp(a * 0.3) + ad.tsqrt(a)).sum(), [a])

    def test_gelu(self):
        a = self.param(8)
        check_against_fd(lambda: ad.gelu(a).sum(), [a])

    def test_gelu_values(self):
        """GELU(0) = 0 and GELU(+-1) = +-1 * Phi(+-1) exactly."""
        x = ad.Tensor(np.array([0.0, 1.0, -1.0]))
        out = ad.gelu(x).data
        assert out[0] == 0.0
        assert out[1] == pytest.approx(0.8413447460685429, rel=1e-12)
        assert out[2] == pytest.approx(-0.15865525393145707, rel=1e-12)


class TestShapeOps:
    def setup_method(self):
        self.rng = np.random.default_rng(1)

    def test_reshape_transpose(self):
        a = ad.Tensor(self.rng.standard_normal((2, 3, 4)), requires_grad=True)
        w = self.rng.standard_normal((4, 3, 2))
        check_against_fd(lambda: (ad.transpose(ad.reshape(a, (2, 3, 4)), (2, 1, 0)) * w).sum(), [a])

    def test_concat_stack(self):
        a = ad.Tensor(self.rng.standard_normal((2, 3)), requires_grad=True)
        b = ad.Tensor(self.rng.standard_normal((2, 3)), requires_grad=True)
        check_against_fd(lambda: (ad.concat([a, b], axis=1) * 2.0).sum(), [a, b])
        check_against_fd(lambda: (ad.stack([a, b], axis=0) * 0.7).sum(), [a, b])

    def test_sum_axis_keepdims(self):
        a = ad.Tensor(self.rng.standard_normal((3, 5)), requires_grad=True)
        w = self.rng.standard_normal((3, 1))
        check_against_fd(lambda: (ad.tsum(a, axis=1, keepdims=True) * w).sum(), [a])


class TestContractions:
    def setup_method(self):
        self.rng = np.random.default_rng(2)

    def test_einsum_matmul(self):
        a = ad.Tensor(self.rng.standard_normal((4, 3)), requires_grad=True)
        b = ad.Tensor(self.rng.standard_normal((3, 5)), requires_grad=True)
        check_against_fd(lambda: ad.einsum2("ij,jk->ik", a, b).sum(), [a, b])

    def test_einsum_batched_with_weights(self):
        q = ad.Tensor(self.rng.standard_normal((3, 7, 2)), requires_grad=True)
        w = self.rng.standard_normal(7)
        check_against_fd(lambda: ad.einsum2("jnd,n->jd", q, w).sum(), [q])

    def test_einsum_orphan_index_rejected(self):
        a = ad.Tensor(np.zeros((2, 2)))
        with pytest.raises(ShapeError, match="sums"):
            ad.einsum2("ij,jk->k", a, ad.Tensor(np.zeros((2, 2))))

    def test_sparse_matmul(self):
        mat = sp.random(6, 4, density=0.5, random_state=3, format="csr")
        pair = (mat, sp.csr_matrix(mat.T))
        x = ad.Tensor(self.rng.standard_normal((4, 3)), requires_grad=True)
        check_against_fd(lambda: (ad.sparse_matmul(pair, x) * 1.5).sum(), [x])


class TestSpectralOps:
    def setup_method(self):
        self.rng = np.random.default_rng(3)

    def test_fft_linear_functional(self):
        """d/dx of Re(sum a * FFT(x)) equals Re(N * ifft(a)) (conjugate adjoint)."""
        x = ad.Tensor(self.rng.standard_normal((1, 8, 1)), requires_grad=True)
        a = self.rng.standard_normal((1, 8, 1)) + 1j * self.rng.standard_normal((1, 8, 1))

        def loss():
            return ad.real(ad.fftn(x, axes=(1,)) * a).sum()

        ad.backward(loss())
        expected = (np.fft.ifftn(np.conj(a), axes=(1,)) * 8).real
        assert np.max(np.abs(x.grad - expected)) < 1e-10
        check_against_fd(loss, [x])

    def test_fft_ifft_roundtrip_grad(self):
        x = ad.Tensor(self.rng.standard_normal((2, 4, 4, 3)), requires_grad=True)
        w = self.rng.standard_normal((2, 4, 4, 3))

        def loss():
            spec = ad.fftn(x, axes=(1, 2))
            back = ad.real(ad.ifftn(spec, axes=(1, 2)))
            return (back * w).sum()

        check_against_fd(loss, [x])

    def test_complex_weight_path(self):
        """Real pair -> complex -> spectral multiply -> inverse -> real, against FD."""
        re = ad.Tensor(self.rng.standard_normal((4, 2, 2)) * 0.3, requires_grad=True)
        im = ad.Tensor(self.rng.standard_normal((4, 2, 2)) * 0.3, requires_grad=True)
        x = ad.Tensor(self.rng.standard_normal((1, 4, 2)), requires_grad=True)
        probe = self.rng.standard_normal((1, 4, 2))

        def loss():
            w = ad.make_complex(re, im)
            spec = ad.fftn(x, axes=(1,))
            out = ad.einsum2("bki,kio->bko", spec, w)
            return (ad.real(ad.ifftn(out, axes=(1,))) * probe).sum()

        check_against_fd(loss, [re, im, x])

    def test_corner_extract_embed_adjoint_pair(self):
        x = ad.Tensor(self.rng.standard_normal((2, 8, 8, 3)), requires_grad=True)
        w = self.rng.standard_normal((2, 4, 4, 3))

        def loss():
            spec = ad.fftn(x, axes=(1, 2))
            corners = ad.corners_extract(spec, (2, 2))
            back = ad.corners_embed(corners, (8, 8))
            trunc = ad.real(ad.ifftn(back, axes=(1, 2)))
            return trunc.sum() + ad.real(corners * w).sum()

        check_against_fd(loss, [x])


class TestOrderedReductions:
    def test_ordered_sum_permutation_bits(self):
        """Summing a shuffled axis in value-sorted order is bit-identical."""
        rng = np.random.default_rng(4)
        x = rng.standard_normal((5, 64))
        perm = rng.permutation(5)
        a = ad.ordered_sum(ad.Tensor(x), axis=0).data
        b = ad.ordered_sum(ad.Tensor(x[perm]), axis=0).data
        assert np.array_equal(a, b)

    def test_ordered_sum_grad(self):
        x = ad.Tensor(np.random.default_rng(5).standard_normal((4, 6)), requires_grad=True)
        w = np.random.default_rng(6).standard_normal(6)
        check_against_fd(lambda: (ad.ordered_sum(x, axis=0) * w).sum(), [x])

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(7)
        s = ad.softmax_rows(ad.Tensor(rng.standard_normal((6, 6)) * 3)).data
        assert np.max(np.abs(s.sum(axis=-1) - 1.0)) < 1e-12

    def test_softmax_uniform_on_identical_logits(self):
        s = ad.softmax_rows(ad.Tensor(np.full((3, 3), 0.7))).data
        assert np.max(np.abs(s - 1.0 / 3.0)) < 1e-12

    def test_softmax_permutation_bits(self):
        """Permuting a row's entries permutes its softmax bit-identically."""
        rng = np.random.default_rng(8)
        row = rng.standard_normal(7)
        perm = rng.permutation(7)
        a = ad.softmax_rows(ad.Tensor(row[None, :])).data[0]
        b = ad.softmax_rows(ad.Tensor(row[perm][None, :])).data[0]
        assert np.array_equal(a[perm], b)

    def test_softmax_grad(self):
        x = ad.Tensor(np.random.default_rng(9).standard_normal((3, 4)), requires_grad=True)
        w = np.random.default_rng(10).standard_normal((3, 4))
        check_against_fd(lambda: (ad.softmax_rows(x) * w).sum(), [x])


class TestBackward:
    def test_non_scalar_loss_rejected(self):
        x = ad.Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            ad.backward(x + 1.0)

    def test_unreachable_params_get_zero_grad(self):
        store = ad.ParamStore()
        a = store.add("used", np.ones(2))
        store.add("unused", np.ones(3))
        ad.backward((a * 2.0).sum(), params=store)
        assert np.array_equal(store["unused"].grad, np.zeros(3))
        assert np.array_equal(store["used"].grad, np.full(2, 2.0))

    def test_fanout_accumulates(self):
        x = ad.Tensor(np.array([3.0]), requires_grad=True)
        y = x * x + x * 2.0  # dy/dx = 2x + 2 = 8
        ad.backward(y.sum())
        assert x.grad[0] == pytest.approx(8.0, rel=1e-14)

    def test_tape_freed_after_backward(self):
        x = ad.Tensor(np.ones(4), requires_grad=True)
        y = (x * x).sum()
        ad.backward(y)
        assert y._vjp is None and y._parents == ()

    def test_nan_in_backward_raises_when_checked(self):
        ad.set_checked(True)
        try:
            x = ad.Tensor(np.array([0.0, 1.0]), requires_grad=True)
            loss = (ad.tsqrt(x) * np.zeros(2)).sum()
            with pytest.raises(NumericError, match="backward"):
                ad.backward(loss)
        finally:
            ad.set_checked(False)

    def test_forward_nonfinite_raises_when_checked(self):
        ad.set_checked(True)
        try:
            with pytest.raises(NumericError, match="exp"):
                ad.texp(ad.Tensor(np.array([1000.0]), requires_grad=True))
        finally:
            ad.set_checked(False)


class TestOptimizer:
    def test_adam_single_step_matches_manual(self):
        store = ad.ParamStore()
        p = store.add("w", np.array([1.0, 2.0]))
        p.grad = np.array([0.1, -0.2])
        state = ad.AdamState(lr=0.01)
        ad.optimizer_step(store, state)
        # first step: m_hat = g, v_hat = g^2 -> update = lr * g / (|g| + eps)
        expected = np.array([1.0, 2.0]) - 0.01 * np.array([0.1, -0.2]) / (
            np.abs(np.array([0.1, -0.2])) + 1e-8
        )
        assert np.allclose(p.data, expected, rtol=1e-12)

    def test_zero_grads_leave_fresh_params_unchanged(self):
        store = ad.ParamStore()
        p = store.add("w", np.ones(3))
        p.grad = np.zeros(3)
        ad.optimizer_step(store, ad.AdamState())
        assert np.array_equal(p.data, np.ones(3))

    def test_frozen_params_bit_identical(self):
        store = ad.ParamStore()
        a = store.add("encoder.w", np.ones(2))
        b = store.add("head.w", np.ones(2))
        store.freeze("encoder")
        a.grad = np.full(2, 9.9)
        b.grad = np.full(2, 1.0)
        before = a.data.copy()
        ad.optimizer_step(store, ad.AdamState())
        assert np.array_equal(a.data, before)
        assert not np.array_equal(b.data, np.ones(2))

    def test_missing_grad_raises(self):
        store = ad.ParamStore()
        store.add("w", np.ones(2))
        with pytest.raises(TrainingStateError, match="missing gradient"):
            ad.optimizer_step(store, ad.AdamState())

    def test_clip_grad_norm(self):
        store = ad.ParamStore()
        p = store.add("w", np.zeros(4))
        p.grad = np.full(4, 10.0)
        norm = ad.clip_grad_norm(store, 5.0)
        assert norm == pytest.approx(20.0)
        assert np.linalg.norm(p.grad) == pytest.approx(5.0, rel=1e-12)

    def test_determinism_two_runs_bit_identical(self):
        """Same seed, same data: parameters after N Adam steps agree bitwise."""

        def run():
            rng = np.random.default_rng(11)
            store = ad.ParamStore()
            w = store.add("w", rng.standard_normal((3, 3)))
            state = ad.AdamState()
            x = rng.standard_normal((5, 3))
            for _ in range(10):
                store.zero_grads()
                loss = (ad.einsum2("ni,io->no", x, w) * 1.0).sum()
                ad.backward(loss, store)
                ad.optimizer_step(store, state)
            return store.state_dict()["w"]

        assert np.array_equal(run(), run())


class TestGradCheck:
    def _store_and_loss(self):
        rng = np.random.default_rng(12)
        store = ad.ParamStore()
        w1 = store.add("mlp.w1", rng.standard_normal((3, 5)) * 0.5)
        w2 = store.add("mlp.w2", rng.standard_normal((5, 2)) * 0.5)
        x = rng.standard_normal((7, 3))
        t = rng.standard_normal((7, 2))

        def loss():
            h = ad.gelu(ad.einsum2("ni,ih->nh", x, w1))
            y = ad.einsum2("nh,ho->no", h, w2)
            return ((y - t) * (y - t)).sum()

        return store, loss

    def test_passes_on_correct_gradients(self):
        store, loss = self._store_and_loss()
        report = ad.grad_check(loss, store, tol=1e-5)
        assert report.passed, report.summary_lines()

    def test_corrupted_gradient_fails_naming_group(self):
        store, loss = self._store_and_loss()
        report = ad.grad_check(loss, store, tol=1e-5, corrupt="mlp.w2")
        assert not report.passed
        assert report.groups["mlp.w2"].status == "fail"
        assert report.groups["mlp.w1"].status == "ok"
        assert report.worst_group == "mlp.w2"

    def test_tol_zero_always_fails(self):
        store, loss = self._store_and_loss()
        report = ad.grad_check(loss, store, tol=0.0)
        assert not report.passed

    def test_frozen_groups_skipped(self):
        store, loss = self._store_and_loss()
        store.freeze("mlp.w1")
        report = ad.grad_check(loss, store, tol=1e-5)
        assert report.groups["mlp.w1"].status == "skipped"
        assert report.passed


class TestParamStore:
    def test_duplicate_name_rejected(self):
        store = ad.ParamStore()
        store.add("w", np.ones(1))
        with pytest.raises(TrainingStateError, match="already exists"):
            store.add("w", np.ones(1))

    def test_state_roundtrip_and_mismatch(self):
        store = ad.ParamStore()
        store.add("a", np.arange(3.0))
        state = store.state_dict()
        state["a"] += 1
        store.load_state(state)
        assert np.array_equal(store["a"].data, np.arange(3.0) + 1)
        with pytest.raises(TrainingStateError, match="state mismatch"):
            store.load_state({"b": np.ones(1)})
