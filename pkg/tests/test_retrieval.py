import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffreg.errors import ConfigError, RetrievalError
from diffreg.retrieval import RetrievalConfig, build_reference_index, candidate_rows, retrieve_references, retrieve_rows

from conftest import make_dataset


def brute_force_pool(features, ids, candidates, query, P):
    """Exhaustive sort by (squared distance, sample_id)."""
    d = ((features[candidates] - query) ** 2).sum(axis=1)
    order = sorted(range(len(candidates)), key=lambda i: (d[i], ids[candidates[i]]))
    return [candidates[i] for i in order[:P]]


class TestIndex:
    def test_rounding_into_one_bucket(self):
        idx = build_reference_index(make_dataset([30.2, 29.8, 30.0], np.zeros(3)))
        assert list(idx.buckets) == [30]
        assert idx.bucket(30).size == 3

    def test_two_buckets(self):
        idx = build_reference_index(make_dataset([30.0, 31.0], np.zeros(2)))
        assert sorted(idx.buckets) == [30, 31]
        assert all(b.size == 1 for b in idx.buckets.values())

    def test_conservation(self, small_ds):
        idx = build_reference_index(small_ds)
        rows = np.concatenate(list(idx.buckets.values()))
        assert sorted(rows) == list(range(len(small_ds)))
        for t, b in idx.buckets.items():
            assert np.all(np.abs(idx.labels[b] - t) <= 0.5)

    def test_empty_dataset(self):
        from diffreg.dataset import Dataset
        with pytest.raises(RetrievalError):
            build_reference_index(Dataset([], feature_dim=2))


class TestConfig:
    def test_defaults(self):
        cfg = RetrievalConfig()
        assert (cfg.P, cfg.R, cfg.max_widen, cfg.exclude_subject) == (30, 10, 3, True)

    def test_r_above_p_rejected(self):
        with pytest.raises(ConfigError):
            RetrievalConfig(P=5, R=6)


class TestRetrieve:
    def test_undersized_bucket_returns_everything(self):
        idx = build_reference_index(make_dataset([30, 30, 30, 50], np.arange(4.0)))
        refs = retrieve_references(idx, np.array([0.0]), 30, RetrievalConfig(), np.random.default_rng(0))
        assert sorted(s.sample_id for s in refs) == ["s0000", "s0001", "s0002"]

    def test_pool_matches_exhaustive_sort(self):
        rng = np.random.default_rng(1)
        n = 1000
        ds = make_dataset(np.full(n, 40.0), rng.normal(size=(n, 5)))
        idx = build_reference_index(ds)
        q = rng.normal(size=5)
        hit = retrieve_rows(idx, q, 40, RetrievalConfig(P=2, R=2), rng)
        ids = [s.sample_id for s in idx.samples]
        assert list(hit.pool) == brute_force_pool(idx.features, ids, np.arange(n), q, 2)

    def test_draw_is_distinct_subset_of_pool(self, small_ds):
        idx = build_reference_index(small_ds)
        for seed in range(20):
            hit = retrieve_rows(idx, small_ds.features[seed], 30, RetrievalConfig(P=30, R=10),
                                np.random.default_rng(seed))
            assert len(set(hit.rows)) == len(hit.rows) == min(10, hit.pool.size)
            assert set(hit.rows) <= set(hit.pool)

    def test_ties_broken_by_sample_id(self):
        # all candidates equidistant; expect the first P in sample_id order
        ds = make_dataset([30] * 6, [[1.0], [-1.0], [1.0], [-1.0], [1.0], [-1.0]])
        idx = build_reference_index(ds)
        hit = retrieve_rows(idx, np.array([0.0]), 30, RetrievalConfig(P=4, R=4), np.random.default_rng(0))
        assert [idx.samples[r].sample_id for r in hit.pool] == ["s0000", "s0001", "s0002", "s0003"]

    def test_minimal_widening(self):
        ds = make_dataset([25, 28, 33], np.zeros(3), label_min=20, label_max=40)
        idx = build_reference_index(ds)
        rows, w = candidate_rows(idx, 30, 3)
        assert w == 2 and [idx.samples[r].label for r in rows] == [28.0]
        rows, w = candidate_rows(idx, 30, 5)
        assert w == 2

    def test_widening_exhausted(self):
        idx = build_reference_index(make_dataset([20, 40], np.zeros(2)))
        with pytest.raises(RetrievalError):
            retrieve_rows(idx, np.zeros(1), 30, RetrievalConfig(max_widen=3), np.random.default_rng(0))

    def test_subject_exclusion(self):
        ds = make_dataset([30, 30, 30], np.zeros(3), subjects=["a", "a", "b"])
        idx = build_reference_index(ds)
        refs = retrieve_references(idx, np.zeros(1), 30, RetrievalConfig(), np.random.default_rng(0),
                                   excluded_subject="a")
        assert [s.subject_id for s in refs] == ["b"]
        refs = retrieve_references(idx, np.zeros(1), 30, RetrievalConfig(exclude_subject=False),
                                   np.random.default_rng(0), excluded_subject="a")
        assert len(refs) == 3

    def test_exclusion_can_force_widening(self):
        ds = make_dataset([30, 31], np.zeros(2), subjects=["a", "b"])
        hit = retrieve_rows(build_reference_index(ds), np.zeros(1), 30, RetrievalConfig(), np.random.default_rng(0),
                            excluded_subject="a")
        assert hit.widen == 1

    def test_target_age_clamped(self):
        idx = build_reference_index(make_dataset([20, 40], np.zeros(2)))
        refs = retrieve_references(idx, np.zeros(1), 95.0, RetrievalConfig(max_widen=0), np.random.default_rng(0))
        assert refs[0].label == 40

    def test_dimension_mismatch(self, small_ds):
        with pytest.raises(RetrievalError):
            retrieve_rows(build_reference_index(small_ds), np.zeros(2), 30, RetrievalConfig(), np.random.default_rng(0))

    def test_deterministic(self, small_ds):
        idx = build_reference_index(small_ds)
        a = retrieve_rows(idx, small_ds.features[0], 30, RetrievalConfig(P=8, R=3), np.random.default_rng(4))
        b = retrieve_rows(idx, small_ds.features[0], 30, RetrievalConfig(P=8, R=3), np.random.default_rng(4))
        np.testing.assert_array_equal(a.rows, b.rows)

    def test_random_method_draws_from_whole_bucket(self):
        rng = np.random.default_rng(0)
        ds = make_dataset(np.full(50, 30.0), rng.normal(size=(50, 2)))
        hit = retrieve_rows(build_reference_index(ds), np.zeros(2), 30, RetrievalConfig(P=5, R=5, method="random"), rng)
        assert hit.pool.size == 50 and hit.rows.size == 5

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(1, 120))
    def test_pool_optimality(self, seed, P, n):
        rng = np.random.default_rng(seed)
        ds = make_dataset(rng.integers(28, 33, size=n).astype(float), rng.normal(size=(n, 3)), label_min=20, label_max=40)
        idx = build_reference_index(ds)
        q = rng.normal(size=3)
        cfg = RetrievalConfig(P=P, R=1, max_widen=3)
        hit = retrieve_rows(idx, q, 30, cfg, rng)
        rows, w = candidate_rows(idx, 30, 3)
        d = ((idx.features - q) ** 2).sum(axis=1)
        outside = np.setdiff1d(rows, hit.pool)
        if outside.size:
            assert d[hit.pool].max() <= d[outside].min()
        assert np.all(np.abs(idx.ages[hit.pool] - 30) <= hit.widen)
