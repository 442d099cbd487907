import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semsplat.core import Codebook, FeatureReservoir
from semsplat.errors import InvalidInputError
from semsplat.vq import (VqConfig, accumulate, assign, assign_batch, ema_step,
                         online_step, revive_dead_codes, seed_from_samples,
                         warm_start)

RNG = np.random.default_rng(21)


def make_codebook(E, lam=0.96, eps=1e-5, reservoir_capacity=64):
    E = np.asarray(E, dtype=float)
    return Codebook(E=E, N=np.zeros(E.shape[0]), M=np.zeros_like(E),
                    lam=lam, epsilon=eps,
                    reservoir=FeatureReservoir(reservoir_capacity, E.shape[1]))


def cluster_stream(rng, centers, batch, sigma=0.01, weights=None):
    R = centers.shape[0]
    ids = rng.choice(R, size=batch, p=weights)
    return centers[ids] + rng.normal(0, sigma, (batch, centers.shape[1]))


class TestAssign:
    def test_exact_match(self):
        cb = make_codebook(RNG.normal(size=(5, 3)))
        assert assign(cb.E[3], cb) == 3

    def test_tie_breaks_low(self):
        cb = make_codebook([[0.0], [2.0]])
        assert assign(np.array([1.0]), cb) == 0

    def test_matches_exhaustive_scan(self):
        cb = make_codebook(RNG.normal(size=(17, 6)))
        xs = RNG.normal(size=(200, 6))
        got = assign_batch(xs, cb)
        for n in range(xs.shape[0]):
            dists = [np.linalg.norm(xs[n] - cb.E[k]) for k in range(17)]
            assert got[n] == int(np.argmin(dists))

    def test_dimension_mismatch(self):
        cb = make_codebook(np.eye(3))
        with pytest.raises(InvalidInputError):
            assign(np.zeros(4), cb)


class TestAccumulate:
    def test_repeated_sample(self):
        cb = make_codebook(np.eye(4))
        batch = np.tile(cb.E[2], (5, 1))
        stats = accumulate(batch, cb)
        assert stats.counts[2] == 5
        assert np.allclose(stats.sums[2], 5 * cb.E[2])
        assert stats.counts.sum() == 5
        assert not stats.sums[[0, 1, 3]].any()

    def test_single_sample(self):
        cb = make_codebook(RNG.normal(size=(4, 2)))
        stats = accumulate(RNG.normal(size=(1, 2)), cb)
        assert (stats.counts > 0).sum() == 1

    def test_matches_scalar_loop(self):
        cb = make_codebook(RNG.normal(size=(6, 3)))
        batch = RNG.normal(size=(40, 3))
        stats = accumulate(batch, cb)
        counts = np.zeros(6)
        sums = np.zeros((6, 3))
        for x in batch:
            k = assign(x, cb)
            counts[k] += 1
            sums[k] += x
        assert np.array_equal(stats.counts, counts)
        assert np.allclose(stats.sums, sums, atol=1e-12)

    def test_zero_sums_where_zero_counts(self):
        cb = make_codebook(RNG.normal(size=(8, 2)))
        stats = accumulate(RNG.normal(size=(3, 2)), cb)
        empty = stats.counts == 0
        assert not stats.sums[empty].any()


class TestEmaStep:
    def test_zero_decay_replaces_history(self):
        cb = make_codebook(RNG.normal(size=(3, 2)), lam=0.0)
        stats = accumulate(RNG.normal(size=(10, 2)), cb)
        out = ema_step(cb, stats)
        assert np.array_equal(out.N, stats.counts)
        assert np.array_equal(out.M, stats.sums)
        assert np.allclose(out.E, stats.sums / (stats.counts + cb.epsilon)[:, None])

    def test_decay_arithmetic(self):
        cb = make_codebook(np.eye(2), lam=0.96)
        cb.N[:] = 10.0
        from semsplat.vq import VqBatchStats
        out = ema_step(cb, VqBatchStats(counts=np.zeros(2), sums=np.zeros((2, 2))))
        assert np.allclose(out.N, 9.6)

    def test_monotone_decay_exact(self):
        # zero-count batches decay N by exactly lambda each step: nothing but
        # the multiplication may touch the buffer
        from semsplat.vq import VqBatchStats
        cb = make_codebook(RNG.normal(size=(4, 2)), lam=0.96)
        cb.N[:] = np.array([1.0, 2.0, 0.5, 7.0])
        ref = cb.N.copy()
        zero = VqBatchStats(counts=np.zeros(4), sums=np.zeros((4, 2)))
        for _ in range(30):
            cb = ema_step(cb, zero)
            ref = 0.96 * ref
            assert np.array_equal(cb.N, ref)

    def test_codeword_consistency_invariant(self):
        cb = make_codebook(RNG.normal(size=(5, 3)))
        cfg = VqConfig(K=5)
        rng = np.random.default_rng(0)
        for _ in range(10):
            cb, _ = online_step(cb, rng.normal(size=(20, 3)), cfg, rng)
            assert np.allclose(cb.E, cb.M / (cb.N + cb.epsilon)[:, None], atol=1e-12)

    def test_assignment_idempotent_near_unit_decay(self):
        cb = make_codebook(RNG.normal(size=(4, 3)), lam=0.999999)
        cb.N[:] = 1.0
        cb.M[:] = cb.E * (1.0 + cb.epsilon)
        batch = RNG.normal(size=(50, 3))
        before = assign_batch(batch, cb)
        cb2 = ema_step(cb, accumulate(batch, cb))
        assert np.array_equal(before, assign_batch(batch, cb2))

    def test_streaming_converges_to_kmeans(self):
        # four tight, well-separated clusters: EMA codewords land on the
        # batch k-means centroids of the pooled stream
        rng = np.random.default_rng(77)
        centers = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0], [0.0, 0, 1]])
        cfg = VqConfig(K=4, lam=0.96)
        pooled = []
        first = cluster_stream(rng, centers, 64)
        pooled.append(first)
        cb = make_codebook(seed_from_samples(first, 4), lam=0.96)
        cb = warm_start(first, cb, cfg).codebook
        for _ in range(200):
            batch = cluster_stream(rng, centers, 64)
            pooled.append(batch)
            cb, _ = online_step(cb, batch, cfg, rng)
        data = np.concatenate(pooled)

        # Lloyd iterations with an independent farthest-point init over the pool
        km = [data[0]]
        for _ in range(3):
            d = np.min([np.linalg.norm(data - c, axis=1) for c in km], axis=0)
            km.append(data[int(d.argmax())])
        km = np.stack(km)
        for _ in range(50):
            d = ((data[:, None] - km[None]) ** 2).sum(axis=2)
            a = d.argmin(axis=1)
            km = np.stack([data[a == k].mean(axis=0) for k in range(4)])

        best = None
        for perm in itertools.permutations(range(4)):
            err = np.abs(cb.E[list(perm)] - km).max()
            best = err if best is None else min(best, err)
        assert best < 0.05


class TestWarmStart:
    def test_singleton_codebook_accepts_everything(self):
        cb = make_codebook(RNG.normal(size=(1, 3)))
        cfg = VqConfig(K=1, gamma=0.99)
        res = warm_start(RNG.normal(size=(20, 3)), cb, cfg)
        assert not res.degenerate
        assert res.used == 20

    def test_equidistant_confidence_half(self):
        from semsplat.vq import confidence_scores
        cb = make_codebook([[0.0, 0.0], [2.0, 0.0]])
        p = confidence_scores(np.array([[1.0, 0.0]]), cb, tau=0.7)
        assert np.allclose(p, [[0.5, 0.5]])
        res = warm_start(np.array([[1.0, 0.0]]), cb, VqConfig(K=2, gamma=0.6))
        assert res.degenerate

    def test_outliers_filtered_counts_match_loop(self):
        # confidence is a relative softmax over codeword distances, so the
        # rejected outliers sit far away but near-equidistant from every seed
        rng = np.random.default_rng(5)
        seeds = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0], [1.0, 1, 0]])
        inliers = cluster_stream(rng, seeds, 30, sigma=0.02)
        outliers = np.tile([0.5, 0.5, 0.0], (30, 1))
        outliers[:, 2] = rng.uniform(8, 12, 30)
        buffer = np.concatenate([inliers, outliers])
        cb = make_codebook(seeds)
        cfg = VqConfig(K=4, gamma=0.5, tau_warm=0.7)
        res = warm_start(buffer, cb, cfg)
        assert res.used == 30

        from semsplat.vq import confidence_scores
        expected_counts = np.zeros(4)
        for x in buffer:
            p = confidence_scores(x[None], cb, 0.7)[0]
            if p.max() >= 0.5:
                expected_counts[assign(x, cb)] += 1
        assert np.array_equal(res.codebook.N, expected_counts)

    def test_consistency_after_warm_start(self):
        rng = np.random.default_rng(6)
        buffer = rng.normal(size=(50, 3))
        cb = make_codebook(seed_from_samples(buffer, 4))
        res = warm_start(buffer, cb, VqConfig(K=4, gamma=0.1))
        out = res.codebook
        assert np.allclose(out.E, out.M / (out.N + out.epsilon)[:, None], atol=1e-12)


class TestDeadCodes:
    def test_no_dead_codes_no_change(self):
        cb = make_codebook(RNG.normal(size=(3, 2)))
        cb.N[:] = 1.0
        res = revive_dead_codes(cb, VqConfig(K=3), np.random.default_rng(0))
        assert res.revived == [] and not res.skipped
        assert np.array_equal(res.codebook.E, cb.E)

    def test_revive_from_reservoir(self):
        cb = make_codebook(RNG.normal(size=(2, 2)))
        cb.N[:] = [1.0, 0.0]
        v = np.array([3.0, -1.0])
        cb.reservoir.extend(v[None])
        res = revive_dead_codes(cb, VqConfig(K=2), np.random.default_rng(0))
        assert res.revived == [1]
        eps = cb.epsilon
        assert np.allclose(res.codebook.E[1], v / (1 + 2 * eps))
        assert np.allclose(res.codebook.N[1], 1 + eps)

    def test_empty_reservoir_skips(self):
        cb = make_codebook(RNG.normal(size=(2, 2)))
        cb.N[:] = [1.0, 0.0]
        res = revive_dead_codes(cb, VqConfig(K=2), np.random.default_rng(0))
        assert res.skipped and res.revived == []

    def test_abandoned_cluster_revived_on_schedule(self):
        # decay with zero counts is exactly lambda^t, so the first step where
        # N_3 < delta is computable in closed form
        rng = np.random.default_rng(30)
        centers = np.array([[0.0, 0], [1.0, 0], [0.0, 1], [1.0, 1]])
        cfg = VqConfig(K=4, lam=0.96, delta_dead=1e-2)
        warm = cluster_stream(rng, centers, 128)
        cb = make_codebook(seed_from_samples(warm, 4), lam=0.96,
                           reservoir_capacity=256)
        cb = warm_start(warm, cb, cfg).codebook

        # serve all four clusters briefly, then abandon cluster 3
        for _ in range(5):
            cb, _ = online_step(cb, cluster_stream(rng, centers, 64), cfg, rng)
        idx3 = assign(centers[3], cb)
        n0 = cb.N[idx3]
        t_star = int(np.ceil(np.log(cfg.delta_dead / n0) / np.log(cfg.lam)))

        revived_at = None
        for t in range(1, t_star + 6):
            batch = cluster_stream(rng, centers[:3], 64)
            cb, res = online_step(cb, batch, cfg, rng)
            if idx3 in res.revived:
                revived_at = t
                break
        assert revived_at is not None
        assert abs(revived_at - t_star) <= 5


class TestConfig:
    def test_validation(self):
        with pytest.raises(InvalidInputError):
            VqConfig(lam=1.0)
        with pytest.raises(InvalidInputError):
            VqConfig(gamma=0.0)
        with pytest.raises(InvalidInputError):
            VqConfig(K=0)

    @given(st.floats(0.01, 0.99), st.integers(1, 50))
    @settings(max_examples=30, deadline=None)
    def test_counts_stay_nonnegative(self, lam, batch):
        rng = np.random.default_rng(1)
        cb = make_codebook(rng.normal(size=(3, 2)), lam=lam)
        cfg = VqConfig(K=3, lam=lam)
        for _ in range(5):
            cb, _ = online_step(cb, rng.normal(size=(batch, 2)), cfg, rng)
            assert (cb.N >= 0).all()
