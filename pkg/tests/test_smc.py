import csv
import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmje.errors import NotNormalized
from gmje.rng import make_rng
from gmje.smc import (
    BankConfig,
    ClusterStream,
    FifoBank,
    ParticleBank,
    StreamConfig,
    WeightedPool,
    ess,
    fifo_push,
    general_importance_update,
    importance_update,
    normalize_rows,
    resample,
    resample_indices,
    smc_simulation,
    weighted_infonce,
    write_metrics_csv,
)


def unit(rng, n, d):
    return normalize_rows(rng.standard_normal((n, d)))


class TestWeightedInfonce:
    def test_uniform_weights(self, rng):
        bank = ParticleBank.uniform(unit(rng, 8, 5), tau=0.3)
        zc, zt = unit(rng, 2, 5)
        plain = -zc @ zt / 0.3 + math.log(np.sum(np.exp(bank.particles @ zc / 0.3)))
        assert weighted_infonce(zc, zt, bank) == pytest.approx(plain - math.log(8), abs=1e-12)

    def test_one_hot(self, rng):
        parts = unit(rng, 5, 4)
        w = np.zeros(5)
        w[2] = 1.0
        zc = unit(rng, 1, 4)[0]
        assert weighted_infonce(zc, parts[2], ParticleBank(parts, w)) == pytest.approx(0.0, abs=1e-12)

    def test_direct_exponentials(self, rng):
        parts = unit(rng, 32, 6)
        w = rng.dirichlet(np.ones(32))
        zc, zt = unit(rng, 2, 6)
        direct = -math.log(math.exp(zc @ zt / 0.5) / sum(wi * math.exp(zc @ p / 0.5) for wi, p in zip(w, parts)))
        assert weighted_infonce(zc, zt, ParticleBank(parts, w, tau=0.5)) == pytest.approx(direct, abs=1e-10)

    def test_not_normalized(self, rng):
        bank = ParticleBank.uniform(unit(rng, 4, 3))
        with pytest.raises(NotNormalized):
            weighted_infonce(np.array([1.0, 1.0, 0.0]), bank.particles[0], bank)

    def test_bank_rejects_raw_vectors(self, rng):
        with pytest.raises(NotNormalized):
            ParticleBank.uniform(rng.standard_normal((4, 3)) * 3)


class TestImportanceUpdate:
    def test_constant_likelihood_keeps_prior(self):
        v = normalize_rows(np.array([[1.0, 2.0, 2.0]]))
        parts = np.repeat(v, 4, axis=0)
        w = np.array([0.1, 0.2, 0.3, 0.4])
        pool = importance_update(ParticleBank(parts, w), np.repeat(v, 2, axis=0))
        prior = np.concatenate([w * 4 / 6, np.full(2, 1 / 6)])
        np.testing.assert_allclose(pool.weights, prior, atol=1e-14)

    def test_concentration(self, rng):
        parts = unit(rng, 6, 8)
        incoming = unit(rng, 2, 8)
        pool = importance_update(ParticleBank.uniform(parts, tau=1e-3), incoming, queries=parts[3:4])
        assert pool.weights[3] == pytest.approx(1.0, abs=1e-12)

    def test_likelihood_oracle(self, rng):
        m, b, tau = 10, 4, 0.2
        parts = unit(rng, m, 5)
        w = rng.dirichlet(np.ones(m))
        incoming, queries = unit(rng, b, 5), unit(rng, 3, 5)
        pool = importance_update(ParticleBank(parts, w, tau=tau), incoming, queries)
        allp = np.vstack([parts, incoming])
        lik = np.array([np.mean(np.exp(queries @ p / tau)) for p in allp])
        prior = np.concatenate([w * m / (m + b), np.full(b, 1 / (m + b))])
        expect = prior * lik / np.sum(prior * lik)
        np.testing.assert_allclose(pool.weights, expect, rtol=1e-12)
        assert pool.weights.sum() == pytest.approx(1.0, abs=1e-14)

    def test_scaled_likelihood_cancels(self, rng):
        # duplicating every query leaves the mean likelihood unchanged
        parts = unit(rng, 12, 4)
        incoming, queries = unit(rng, 3, 4), unit(rng, 5, 4)
        bank = ParticleBank.uniform(parts, tau=0.4)
        a = importance_update(bank, incoming, queries).weights
        b = importance_update(bank, incoming, np.vstack([queries, queries])).weights
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_constant_factor_cancels(self):
        parts = normalize_rows(np.array([[1.0, 0.0, 0.0], [0.6, 0.8, 0.0], [0.0, 1.0, 0.0]]))
        incoming = normalize_rows(np.array([[1.0, 1.0, 0.0]]))
        q = normalize_rows(np.array([[0.3, 0.9, 0.0]]))
        bank = ParticleBank.uniform(parts, tau=0.5)
        a = importance_update(bank, incoming, q).weights
        allp = np.vstack([parts, incoming])
        lik = np.exp(allp @ q[0] / 0.5)
        prior = np.full(4, 0.25)
        for scaled in (lik, 7.3 * lik):
            np.testing.assert_allclose(a, prior * scaled / np.sum(prior * scaled), atol=1e-12)


class TestGeneralUpdate:
    def test_isotropic_reduction(self, rng):
        tau = 0.3
        parts = unit(rng, 10, 4)
        incoming, queries = unit(rng, 3, 4), unit(rng, 4, 4)
        w = rng.dirichlet(np.ones(10))
        iso = importance_update(ParticleBank(parts, w, tau=tau), incoming, queries).weights
        full = general_importance_update(ParticleBank(parts, w, tau=tau, mode="full_cov", shared_cov=tau * np.eye(4)),
                                         incoming, queries).weights
        np.testing.assert_allclose(full, iso, atol=1e-10)

    def test_query_at_mean_wins(self, rng):
        parts = rng.standard_normal((6, 3))
        bank = ParticleBank.uniform(parts, mode="full_cov", shared_cov=np.diag([1.0, 2.0, 0.5]))
        pool = general_importance_update(bank, rng.standard_normal((6, 3)) + 10, queries=parts[4:5])
        assert int(np.argmax(pool.weights)) == 4

    def test_no_determinant(self, rng):
        parts = rng.standard_normal((5, 2))
        incoming, queries = rng.standard_normal((2, 2)), rng.standard_normal((3, 2))
        cov = np.array([[1.0, 0.3], [0.3, 0.7]])
        for c in (0.5, 4.0):
            bank = ParticleBank.uniform(parts, mode="full_cov", shared_cov=c * cov)
            got = general_importance_update(bank, incoming, queries).weights
            allp = np.vstack([parts, incoming])
            prec = np.linalg.inv(c * cov)
            lik = np.array([np.mean([np.exp(-0.5 * (q - p) @ prec @ (q - p)) for q in queries]) for p in allp])
            prior = np.concatenate([np.full(5, 1 / 7), np.full(2, 1 / 7)])
            np.testing.assert_allclose(got, prior * lik / np.sum(prior * lik), rtol=1e-10)


class TestEss:
    def test_uniform(self):
        assert ess(np.full(64, 1 / 64)) == pytest.approx(64)

    def test_one_hot(self):
        assert ess(np.array([0.0, 1.0, 0.0])) == 1.0

    def test_direct(self):
        assert ess(np.array([0.5, 0.25, 0.25])) == pytest.approx(2.667, abs=1e-3)


class TestResample:
    def _pool(self, w):
        n = w.size
        return WeightedPool(normalize_rows(np.eye(n)), w, np.log(np.maximum(w, 1e-300)))

    @pytest.mark.parametrize("scheme", ["systematic", "multinomial"])
    def test_one_hot(self, scheme):
        w = np.zeros(5)
        w[3] = 1.0
        bank = resample(self._pool(w), 8, make_rng(1), scheme)
        np.testing.assert_array_equal(bank.particles, np.tile(np.eye(5)[3], (8, 1)))
        np.testing.assert_allclose(bank.weights, 1 / 8)

    def test_systematic_uniform(self):
        idx = resample_indices(np.full(10, 0.1), 10, make_rng(2), "systematic")
        np.testing.assert_array_equal(np.sort(idx), np.arange(10))

    @pytest.mark.parametrize("scheme", ["systematic", "multinomial"])
    def test_unbiased_multiplicity(self, scheme):
        m, reps = 16, 10**4
        w = np.concatenate([[0.7], np.full(9, 0.3 / 9)])
        rng = make_rng(3)
        counts = np.array([np.sum(resample_indices(w, m, rng, scheme) == 0) for _ in range(reps)])
        se = math.sqrt(m * 0.7 * 0.3 / reps)
        assert abs(counts.mean() - 0.7 * m) <= 3 * se

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            resample_indices(np.ones(2) / 2, 2, make_rng(0), "stratified")


class TestFifo:
    def test_eviction_order(self):
        m = 4
        q = FifoBank(np.zeros((m, 1)))
        for i in range(m + 1):
            q = fifo_push(q, np.array([[float(i + 1)]]))
        np.testing.assert_array_equal(q.ordered()[:, 0], [2, 3, 4, 5])

    def test_full_batch(self, rng):
        batch = rng.standard_normal((6, 2))
        q = fifo_push(FifoBank(np.zeros((6, 2)), head=2), batch)
        np.testing.assert_array_equal(q.ordered(), batch)

    def test_deque_oracle(self):
        rng = make_rng(4)
        m = 7
        q = FifoBank(np.zeros((m, 1)))
        ref = deque([0.0] * m, maxlen=m)
        value = 0.0
        for _ in range(200):
            b = int(rng.integers(1, m + 1))
            items = value + 1 + np.arange(b, dtype=float)
            value += b
            q = fifo_push(q, items[:, None])
            ref.extend(items)
            np.testing.assert_array_equal(q.ordered()[:, 0], list(ref))

    def test_oversized(self):
        with pytest.raises(ValueError):
            fifo_push(FifoBank(np.zeros((2, 1))), np.zeros((3, 1)))


class TestSimulation:
    def test_balanced_high_temperature(self):
        stream = StreamConfig(rare_frequency=0.1)
        res = smc_simulation(stream, BankConfig(tau=100.0), 300, make_rng(5))
        m = 256
        assert res.ess.min() > 0.95 * (m + stream.batch_size)
        share = res.smc_counts[-100:].mean(0) / m
        np.testing.assert_allclose(share, 0.1, atol=0.05)

    def test_ess_bounds_and_reset(self):
        stream = StreamConfig()
        res = smc_simulation(stream, BankConfig(), 300, make_rng(6))
        assert np.all(res.ess >= 1.0) and np.all(res.ess <= 256 + 32 + 1e-9)
        np.testing.assert_allclose(res.post_resample_ess, 256.0)
        assert res.pool_size == 288

    def test_threshold_mode(self):
        res = smc_simulation(StreamConfig(), BankConfig(ess_threshold=0.3), 200, make_rng(7))
        assert res.resampled.any()
        assert np.all(res.post_resample_ess[res.resampled] == pytest.approx(256.0))

    def test_paired_stream(self):
        # both banks see the same draws, so FIFO contents are a pure function of the stream
        res = smc_simulation(StreamConfig(), BankConfig(), 50, make_rng(8))
        cfg = StreamConfig()
        stream = ClusterStream(cfg, make_rng(8))
        _, _, init = stream.draw(256)
        labels = deque(init.tolist(), maxlen=256)
        for t in range(50):
            _, _, lab = stream.draw(cfg.batch_size)
            stream.rng.random()  # the systematic offset drawn by the resampler
            labels.extend(lab.tolist())
            np.testing.assert_array_equal(res.fifo_counts[t], np.bincount(list(labels), minlength=10))

    def test_metrics_csv(self, tmp_path):
        res = smc_simulation(StreamConfig(), BankConfig(), 5, make_rng(9))
        write_metrics_csv(res, tmp_path / "smc.csv", "smc")
        rows = list(csv.reader(open(tmp_path / "smc.csv")))
        assert rows[0] == ["step", "ess"] + [f"class_{i}" for i in range(10)] + ["rare_retention"]
        assert len(rows) == 6
        assert sum(int(v) for v in rows[1][2:12]) == 256


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 40))
def test_pool_weights_form_a_simplex(seed, b):
    rng = np.random.default_rng(seed)
    bank = ParticleBank(unit(rng, 20, 3), rng.dirichlet(np.ones(20)), tau=0.05)
    pool = importance_update(bank, unit(rng, b, 3))
    assert pool.weights.min() >= 0
    assert pool.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert 1.0 - 1e-9 <= pool.ess <= 20 + b + 1e-9
