import math
import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmje.errors import RankDeficient
from gmje.gje import (
    BatchEmbeddings,
    KernelSpec,
    dual_gram,
    dual_nll,
    dual_nll_grad_zt,
    dual_predict,
    ema_update,
    empirical_joint_cov,
    entropy_max_grad,
    entropy_max_loss,
    gram_nll,
    hsic,
    linear_dual_loss,
    linear_primal_loss,
    make_rff,
    median_rbf,
    primal_dual_residual,
    primal_joint_nll,
    primal_predict,
    rff_dual_nll,
    rff_features,
    rff_logdet,
    rff_woodbury_inverse,
    trace_trap_datafit,
)
from gmje.gaussian import JointGaussian, condition


def batch_from(z: np.ndarray, d_c: int) -> BatchEmbeddings:
    return BatchEmbeddings(z[:, :d_c], z[:, d_c:])


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


class TestBatch:
    def test_rejects_single_row(self):
        with pytest.raises(ValueError):
            BatchEmbeddings(np.zeros((1, 2)), np.zeros((1, 2)))

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            BatchEmbeddings(np.array([[0.0], [np.nan]]), np.zeros((2, 1)))

    def test_vectors_become_columns(self):
        b = BatchEmbeddings(np.arange(3.0), np.arange(3.0))
        assert b.z.shape == (3, 2)


class TestEmpiricalCov:
    def test_single_nonzero_row(self):
        z = np.zeros((5, 3))
        z[2] = [1.0, 2.0, 3.0]
        c = empirical_joint_cov(batch_from(z, 1)).cov
        np.testing.assert_allclose(c, np.outer(z[2], z[2]) / 5)

    def test_orthonormal_rows(self, rng):
        q, _ = np.linalg.qr(rng.standard_normal((16, 4)))
        c = empirical_joint_cov(batch_from(q * 4.0, 2)).cov
        np.testing.assert_allclose(c, np.eye(4), atol=1e-12)

    def test_loop_oracle(self, rng):
        z = rng.standard_normal((32, 6))
        expect = sum(np.outer(r, r) for r in z) / 32
        np.testing.assert_allclose(empirical_joint_cov(batch_from(z, 3)).cov, expect, atol=1e-12)


class TestPrimalNll:
    def test_trace_trap_form(self, rng):
        z = rng.standard_normal((40, 5))
        c = z.T @ z / 40
        assert primal_joint_nll(batch_from(z, 2)) == pytest.approx(2.5 + 0.5 * np.linalg.slogdet(c)[1], abs=1e-10)

    def test_scalar_unit_variance(self):
        z = np.array([[1.0], [-1.0], [1.0], [-1.0]])
        assert primal_joint_nll(BatchEmbeddings(z, np.zeros((4, 0)))) == pytest.approx(0.5, abs=1e-15)

    def test_loop_oracle(self, rng):
        z = rng.standard_normal((30, 4)) @ rng.standard_normal((4, 4))
        c = z.T @ z / 30
        cinv = np.linalg.inv(c)
        loop = sum(r @ cinv @ r for r in z) / (2 * 30) + 0.5 * np.linalg.slogdet(c)[1]
        assert primal_joint_nll(batch_from(z, 2)) == pytest.approx(loop, abs=1e-10)


class TestTraceTrap:
    def test_d4(self, rng):
        assert trace_trap_datafit(batch_from(rng.standard_normal((32, 4)), 2)) == pytest.approx(2.0, abs=1e-10)

    def test_d8_loop(self, rng):
        z = rng.standard_normal((64, 8))
        cinv = np.linalg.inv(z.T @ z / 64)
        loop = sum(r @ cinv @ r for r in z) / (2 * 64)
        assert loop == pytest.approx(4.0, abs=1e-10)
        assert trace_trap_datafit(batch_from(z, 4)) == pytest.approx(4.0, abs=1e-10)

    def test_rank_deficient(self, rng):
        z = rng.standard_normal((20, 3))
        z = np.column_stack([z, z[:, 0]])
        with pytest.raises(RankDeficient):
            trace_trap_datafit(batch_from(z, 2))

    def test_scalar(self, rng):
        z = rng.standard_normal((9, 1))
        assert trace_trap_datafit(BatchEmbeddings(z, np.zeros((9, 0)))) == pytest.approx(0.5, abs=1e-14)

    def test_too_few_rows(self, rng):
        with pytest.raises(RankDeficient):
            trace_trap_datafit(batch_from(rng.standard_normal((4, 4)), 2))


class TestEntropyMax:
    def test_unit_volume(self, rng):
        q, _ = np.linalg.qr(rng.standard_normal((16, 4)))
        assert entropy_max_loss(batch_from(q * 4.0, 2)) == pytest.approx(0.0, abs=1e-12)

    def test_scaling(self, rng):
        z = rng.standard_normal((20, 4))
        c = 1.7
        diff = entropy_max_loss(batch_from(c * z, 2)) - entropy_max_loss(batch_from(z, 2))
        assert diff == pytest.approx(-4 * math.log(c), abs=1e-10)

    def test_gradient(self, rng):
        z = rng.standard_normal((16, 4))
        num = fd_grad(lambda zz: entropy_max_loss(batch_from(zz, 2)), z)
        ana = entropy_max_grad(batch_from(z, 2))
        np.testing.assert_allclose(ana, num, rtol=1e-4, atol=1e-8)
        assert np.max(np.abs(ana)) > 0


class TestPrimalPredict:
    def test_decorrelated(self):
        joint = JointGaussian.from_full(np.zeros(2), np.diag([1.0, 2.0]), 1)
        g = primal_predict(joint, np.array([3.0]))
        assert g.mean[0] == 0.0 and g.cov[0, 0] == pytest.approx(2.0)

    def test_scalar_blocks(self):
        joint = JointGaussian.from_full(np.zeros(2), np.array([[1.0, 0.5], [0.5, 1.0]]), 1)
        g = primal_predict(joint, np.array([2.0]))
        assert g.mean[0] == pytest.approx(1.0) and g.cov[0, 0] == pytest.approx(0.75)

    def test_matches_condition(self, rng):
        joint = empirical_joint_cov(batch_from(rng.standard_normal((50, 5)), 2))
        zc = rng.standard_normal(2)
        a, b = primal_predict(joint, zc), condition(joint, zc)
        np.testing.assert_allclose(a.mean, b.mean, atol=1e-10)
        np.testing.assert_allclose(a.cov, b.cov, atol=1e-10)


class TestDualNll:
    def test_zero_targets(self, rng):
        b = BatchEmbeddings(rng.standard_normal((10, 2)), np.zeros((10, 3)))
        k = KernelSpec("rbf", 0.7, 0.1)
        assert dual_nll(b, k) == pytest.approx(1.5 * np.linalg.slogdet(dual_gram(b, k))[1], abs=1e-10)

    def test_single_point(self):
        assert gram_nll(np.array([[1.0]]), np.array([1.7])) == pytest.approx(0.5 * 1.7**2)

    def test_column_loop(self, rng):
        b = BatchEmbeddings(rng.standard_normal((25, 2)), rng.standard_normal((25, 3)))
        k = KernelSpec("rbf", 0.5, 0.1)
        gram = dual_gram(b, k)
        kinv = np.linalg.inv(gram)
        ld = np.linalg.slogdet(gram)[1]
        loop = sum(0.5 * y @ kinv @ y + 0.5 * ld for y in b.z_t.T)
        assert dual_nll(b, k) == pytest.approx(loop, abs=1e-10)

    def test_grad_zt(self, rng):
        b = BatchEmbeddings(rng.standard_normal((12, 2)), rng.standard_normal((12, 2)))
        k = KernelSpec("rbf", 1.0, 0.05)
        num = fd_grad(lambda zt: dual_nll(BatchEmbeddings(b.z_c, zt), k), b.z_t.copy())
        np.testing.assert_allclose(dual_nll_grad_zt(b, k), num, rtol=1e-5, atol=1e-7)


class TestDualPredict:
    def test_interpolates(self):
        zc = np.array([-1.0, -0.3, 0.4, 1.2])
        zt = np.array([0.5, -1.0, 2.0, 0.1])
        b = BatchEmbeddings(zc, zt)
        g = dual_predict(b, KernelSpec("rbf", 0.5), np.array([0.4]), jitter=1e-10)
        assert g.mean[0] == pytest.approx(2.0, abs=1e-5)
        assert g.cov[0, 0] == pytest.approx(0.0, abs=1e-6)

    def test_prior_reversion(self, rng):
        b = BatchEmbeddings(rng.standard_normal(10), rng.standard_normal(10))
        g = dual_predict(b, KernelSpec("rbf", 0.5, 0.1), np.array([50.0]))
        assert g.mean[0] == pytest.approx(0.0, abs=1e-12)
        assert g.cov[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_variance_never_negative(self, rng):
        b = BatchEmbeddings(rng.standard_normal(30), rng.standard_normal(30))
        k = KernelSpec("rbf", 2.0, 0.0)
        for x in b.z_c[:, 0]:
            assert dual_predict(b, k, np.array([x]), jitter=1e-12).cov[0, 0] >= 0.0

    def test_linear_kernel_matches_primal(self, rng):
        z = rng.standard_normal((60, 4)) @ rng.standard_normal((4, 4))
        b = batch_from(z, 2)
        zc = rng.standard_normal(2)
        dual = dual_predict(b, KernelSpec("linear", noise=1e-7), zc)
        primal = primal_predict(empirical_joint_cov(b), zc)
        np.testing.assert_allclose(dual.mean, primal.mean, atol=1e-6)


class TestPrimalDual:
    @pytest.mark.parametrize("n,d,tol", [(32, 4, 1e-6), (64, 8, 1e-6)])
    def test_residual(self, rng, n, d, tol):
        z = rng.standard_normal((n, d))
        assert primal_dual_residual(batch_from(z, d // 2), 1e-6) <= tol

    def test_scalar_batch(self, rng):
        z = rng.standard_normal((8, 1))
        assert primal_dual_residual(BatchEmbeddings(z, np.zeros((8, 0))), 1e-6) <= 1e-10

    def test_dense_sides(self, rng):
        z = rng.standard_normal((20, 4))
        b = batch_from(z, 2)
        k = z @ z.T + 1e-3 * np.eye(20)
        dense = 0.5 * np.trace(z.T @ np.linalg.inv(k) @ z) + 0.5 * np.linalg.slogdet(k)[1]
        assert linear_dual_loss(b, 1e-3) == pytest.approx(dense, abs=1e-8)
        assert linear_primal_loss(b, 1e-3) == pytest.approx(dense, abs=1e-8)


class TestRff:
    def test_zero_distance(self):
        rng = np.random.default_rng(0)
        proj = make_rff(3, 4096, 1.0, rng)
        x = rng.standard_normal((20, 3))
        psi = rff_features(x, proj)
        np.testing.assert_allclose(np.sum(psi * psi, 1), 1.0, atol=0.05)

    def test_far_pairs(self):
        rng = np.random.default_rng(1)
        proj = make_rff(2, 4096, 1.0, rng)
        a = rff_features(np.zeros((1, 2)), proj)
        b = rff_features(np.full((1, 2), 100.0), proj)
        assert abs(float((a @ b.T)[0, 0])) < 0.1

    def test_kernel_approximation(self):
        rng = np.random.default_rng(2)
        proj = make_rff(2, 4096, 0.8, rng)
        x = rng.standard_normal((15, 2))
        psi = rff_features(x, proj)
        np.testing.assert_allclose(psi @ psi.T, KernelSpec("rbf", 0.8).gram(x), atol=0.08)

    def test_zero_features(self):
        assert rff_logdet(np.zeros((10, 3)), 0.2) == pytest.approx(10 * math.log(0.2), abs=1e-12)

    @pytest.mark.parametrize("n,dfeat", [(64, 16), (256, 32)])
    def test_dense_oracle(self, rng, n, dfeat):
        psi = rng.standard_normal((n, dfeat)) / math.sqrt(dfeat)
        zt = rng.standard_normal((n, 2))
        k = psi @ psi.T + 0.3 * np.eye(n)
        kinv = np.linalg.inv(k)
        np.testing.assert_allclose(rff_woodbury_inverse(psi, 0.3), kinv, atol=1e-8)
        assert rff_logdet(psi, 0.3) == pytest.approx(np.linalg.slogdet(k)[1], abs=1e-8)
        dense = 0.5 * np.trace(zt.T @ kinv @ zt) + np.linalg.slogdet(k)[1]
        assert rff_dual_nll(psi, zt, 0.3) == pytest.approx(dense, abs=1e-8)

    def test_no_quadratic_storage(self, rng):
        psi = rng.standard_normal((2048, 64)) / 8.0
        zt = rng.standard_normal((2048, 1))
        tracemalloc.start()
        rff_dual_nll(psi, zt, 0.1)
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        assert peak < 2048 * 2048 * 8 / 4

    def test_feature_cap(self, rng):
        with pytest.raises(ValueError):
            rff_dual_nll(np.zeros((4, 5)), np.zeros(4), 0.1, max_features=4)


class TestHsic:
    def test_collapse(self, rng):
        assert hsic(np.ones((10, 2)), rng.standard_normal((10, 2))) == pytest.approx(0.0, abs=1e-12)

    def test_two_points(self):
        assert hsic(np.array([0.0, 1.0]), np.array([0.0, 1.0])) == pytest.approx(0.25)

    def test_frobenius(self, rng):
        z = rng.standard_normal((8, 3))
        h = np.eye(8) - 1 / 8
        hkh = h @ z @ z.T @ h
        assert hsic(z, z) == pytest.approx(np.sum(hkh**2) / 49, abs=1e-10)

    def test_independent_rbf_small(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((400, 1))
        dep = hsic(x, x**2, median_rbf(x), median_rbf(x**2))
        ind = hsic(x, rng.standard_normal((400, 1)), median_rbf(x), KernelSpec("rbf", 1.0))
        assert dep > 5 * ind


def test_ema_update():
    out = ema_update([np.ones(3)], [np.zeros(3)], 0.9)
    np.testing.assert_allclose(out[0], 0.9)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**31))
def test_trace_trap_is_constant(d, seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((4 * d + 3, d)) @ rng.standard_normal((d, d))
    if np.linalg.cond(z) > 1e8:
        return
    assert trace_trap_datafit(batch_from(z, d // 2 or 1)) == pytest.approx(d / 2, abs=1e-8)
