"""Exact and HNSW index behavior, recall, timing, and serialization."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from oracles import brute_force_knn

from rac.ann import (
    ExactIndex,
    HnswParams,
    KeyStore,
    Neighbors,
    bench_index,
    build_exact,
    build_hnsw,
    load_index,
    recall_at_k,
    save_index,
)
from rac.errors import FormatError, ValidationError


def unit_rows(j, d, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(j, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture(scope="module")
def medium_store():
    return KeyStore(unit_rows(2500, 32, seed=100))


@pytest.fixture(scope="module")
def medium_exact(medium_store):
    return build_exact(medium_store, "l2")


@pytest.fixture(scope="module")
def medium_hnsw(medium_store):
    return build_hnsw(medium_store, "l2", HnswParams(M=16, ef_construction=100, seed=7))


class TestExactIndex:
    def test_nearest_of_two_keys(self):
        store = KeyStore(np.array([[0.0, 0.0], [1.0, 0.0]]))
        index = build_exact(store, "l2")
        res = index.query(np.array([0.1, 0.0]), k=1)
        assert res.ids[0] == 0
        assert_allclose(res.distances, [0.1], rtol=1e-6)

    def test_stored_key_query_returns_itself_first(self):
        store = KeyStore(unit_rows(50, 8, seed=1))
        index = build_exact(store, "l2")
        res = index.query(store.keys[17], k=3)
        assert res.ids[0] == 17
        assert res.distances[0] == 0.0

    def test_self_query_full_match(self, medium_store, medium_exact):
        hits = sum(
            medium_exact.query(medium_store.keys[i], k=1).ids[0] == i
            for i in range(0, medium_store.n, 25)
        )
        assert hits == len(range(0, medium_store.n, 25))

    def test_matches_brute_force_scan_bitwise(self, medium_store, medium_exact):
        rng = np.random.default_rng(2)
        keys64 = medium_store.keys.astype(np.float64)
        for _ in range(25):
            q = rng.normal(size=32)
            got = medium_exact.query(q, k=10)
            ids, dists = brute_force_knn(keys64, q, 10, "l2")
            assert_array_equal(got.ids, ids)
            assert_array_equal(got.distances, dists)

    def test_distance_ties_break_by_ascending_id(self):
        keys = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
        store = KeyStore(keys, ids=np.array([7, 3, 9]))
        index = build_exact(store, "l2")
        res = index.query(np.zeros(2), k=3)
        assert_array_equal(res.ids, [3, 7, 9])

    def test_k_beyond_population_returns_all(self):
        store = KeyStore(unit_rows(4, 3, seed=3))
        res = build_exact(store).query(np.zeros(3), k=99)
        assert len(res.ids) == 4

    def test_dimension_mismatch_rejected(self, medium_exact):
        with pytest.raises(ValidationError):
            medium_exact.query(np.zeros(5), k=1)
        with pytest.raises(ValidationError):
            medium_exact.query(np.zeros(32), k=0)

    def test_empty_store_rejected(self):
        with pytest.raises(ValidationError):
            KeyStore(np.zeros((0, 4)))


class TestCosineMetric:
    def test_query_scale_invariance(self):
        store = KeyStore(np.random.default_rng(4).normal(size=(60, 8)))
        index = build_exact(store, "cosine")
        q = np.random.default_rng(5).normal(size=8)
        a, b = index.query(q, k=5), index.query(5.0 * q, k=5)
        assert_array_equal(a.ids, b.ids)
        assert_allclose(a.distances, b.distances, rtol=1e-12)

    def test_key_scale_invariance(self):
        rng = np.random.default_rng(6)
        raw = rng.normal(size=(40, 6))
        scales = rng.uniform(0.5, 20.0, size=(40, 1))
        a = build_exact(KeyStore(raw), "cosine")
        b = build_exact(KeyStore(raw * scales), "cosine")
        q = rng.normal(size=6)
        assert_array_equal(a.query(q, 5).ids, b.query(q, 5).ids)

    def test_ordering_matches_direct_cosine_distance(self):
        rng = np.random.default_rng(7)
        keys = rng.normal(size=(200, 10))
        index = build_exact(KeyStore(keys), "cosine")
        q = rng.normal(size=10)
        got = index.query(q, k=8)
        ids, _ = brute_force_knn(keys, q, 8, "cosine")
        assert_array_equal(got.ids, ids)

    def test_reported_distance_relates_to_cosine(self):
        # L2 over unit vectors: d^2 / 2 = 1 - cos
        rng = np.random.default_rng(8)
        keys = rng.normal(size=(30, 5))
        index = build_exact(KeyStore(keys), "cosine")
        q = rng.normal(size=5)
        got = index.query(q, k=30)
        _, cosd = brute_force_knn(keys, q, 30, "cosine")
        assert_allclose(got.distances**2 / 2.0, cosd, atol=1e-6)


class TestHnswIndex:
    def test_single_key_always_returned(self):
        store = KeyStore(np.array([[1.0, 2.0, 3.0]]), ids=np.array([42]))
        index = build_hnsw(store, "l2", HnswParams(M=4, ef_construction=8))
        for q in (np.zeros(3), np.ones(3) * 9):
            res = index.query(q, k=5)
            assert_array_equal(res.ids, [42])

    def test_small_store_agrees_with_exact(self):
        store = KeyStore(unit_rows(80, 8, seed=9))
        exact = build_exact(store)
        hnsw = build_hnsw(store, params=HnswParams(M=8, ef_construction=40, seed=1))
        for i in range(10):
            q = unit_rows(1, 8, seed=50 + i)[0]
            a = hnsw.query(q, k=5, ef_search=80)
            b = exact.query(q, k=5)
            assert_array_equal(a.ids, b.ids)
            # kernels differ (norm expansion vs direct difference): ulp-level slack
            assert_allclose(a.distances, b.distances, rtol=1e-12)

    def test_recall_against_exact_oracle(self, medium_store, medium_exact, medium_hnsw):
        queries = unit_rows(100, 32, seed=11)
        r = recall_at_k(medium_hnsw, medium_exact, queries, k=10)
        assert r >= 0.9

    def test_self_match_rate(self, medium_store, medium_hnsw):
        idxs = range(0, medium_store.n, 5)
        hits = sum(
            medium_hnsw.query(medium_store.keys[i], k=1).ids[0] == i for i in idxs
        )
        assert hits / len(idxs) >= 0.99

    def test_more_links_do_not_hurt_recall(self, medium_store, medium_exact):
        queries = unit_rows(60, 32, seed=12)
        sparse = build_hnsw(medium_store, "l2", HnswParams(M=4, ef_construction=30, seed=7))
        r_sparse = recall_at_k(sparse, medium_exact, queries, k=10)
        r_dense = recall_at_k(
            build_hnsw(medium_store, "l2", HnswParams(M=16, ef_construction=100, seed=7)),
            medium_exact,
            queries,
            k=10,
        )
        assert r_dense >= r_sparse

    def test_degree_caps_hold(self, medium_hnsw):
        stats = medium_hnsw.degree_stats()
        assert stats["max_degree_layer0"] <= 2 * medium_hnsw.params.M
        assert stats["max_degree_upper"] <= medium_hnsw.params.M

    def test_build_is_deterministic_under_seed(self, tmp_path):
        store = KeyStore(unit_rows(400, 16, seed=13))
        params = HnswParams(M=8, ef_construction=40, seed=3)
        a, b = build_hnsw(store, "l2", params), build_hnsw(store, "l2", params)
        pa, pb = str(tmp_path / "a.ridx"), str(tmp_path / "b.ridx")
        save_index(a, pa)
        save_index(b, pb)
        assert open(pa, "rb").read() == open(pb, "rb").read()

    def test_ef_search_below_k_rejected(self, medium_hnsw):
        with pytest.raises(ValidationError):
            medium_hnsw.query(np.zeros(32), k=10, ef_search=5)

    def test_params_validated(self):
        with pytest.raises(ValidationError):
            HnswParams(M=1).validate()
        with pytest.raises(ValidationError):
            HnswParams(M=8, ef_construction=4).validate()
        with pytest.raises(ValidationError):
            HnswParams(level_lambda=-0.1).validate()

    def test_cosine_hnsw_scale_invariance(self):
        store = KeyStore(np.random.default_rng(14).normal(size=(300, 8)))
        index = build_hnsw(store, "cosine", HnswParams(M=8, ef_construction=40, seed=2))
        q = np.random.default_rng(15).normal(size=8)
        a, b = index.query(q, k=5), index.query(0.2 * q, k=5)
        assert_array_equal(a.ids, b.ids)
        assert_allclose(a.distances, b.distances, rtol=1e-12)


class TestRecall:
    def test_exact_vs_itself_is_one(self, medium_store, medium_exact):
        queries = unit_rows(20, 32, seed=16)
        assert recall_at_k(medium_exact, medium_exact, queries, k=10) == 1.0

    def test_disjoint_results_give_zero(self, medium_exact, medium_store):
        class Disjoint:
            metric = "l2"
            store = medium_store

            def query(self, q, k):
                # ids guaranteed absent from any exact top-k: negative ids
                return Neighbors(-np.arange(1, k + 1), np.zeros(k))

        queries = unit_rows(5, 32, seed=17)
        assert recall_at_k(Disjoint(), medium_exact, queries, k=5) == 0.0

    def test_mismatched_stores_rejected(self, medium_exact):
        other = build_exact(KeyStore(unit_rows(10, 32, seed=18)))
        with pytest.raises(ValidationError):
            recall_at_k(other, medium_exact, unit_rows(2, 32, seed=19), k=3)


class TestBench:
    def test_repeats_multiply_query_count(self, medium_exact):
        queries = unit_rows(10, 32, seed=20)
        report = bench_index(medium_exact, queries, k=5, repeats=3)
        assert report["total_queries"] == 30
        stats = report["query_time_per_sample"]
        assert 0 <= stats["p50"] <= stats["p95"]
        assert stats["mean"] > 0
        assert report["build_time_per_key"] >= 0

    def test_repeats_validated(self, medium_exact):
        with pytest.raises(ValidationError):
            bench_index(medium_exact, unit_rows(2, 32, seed=21), repeats=0)


class TestSerialization:
    def test_exact_round_trip_identical_queries(self, tmp_path, medium_exact, medium_store):
        path = str(tmp_path / "exact.ridx")
        save_index(medium_exact, path)
        back = load_index(path)
        assert back.kind == "exact" and back.metric == "l2"
        rng = np.random.default_rng(22)
        for _ in range(20):
            q = rng.normal(size=32)
            a, b = medium_exact.query(q, 10), back.query(q, 10)
            assert_array_equal(a.ids, b.ids)
            assert_array_equal(a.distances, b.distances)

    def test_hnsw_round_trip_identical_queries(self, tmp_path, medium_hnsw):
        path = str(tmp_path / "hnsw.ridx")
        save_index(medium_hnsw, path)
        back = load_index(path)
        assert back.kind == "hnsw"
        assert back.params.M == 16 and back.params.ef_construction == 100
        rng = np.random.default_rng(23)
        for _ in range(20):
            q = rng.normal(size=32)
            a, b = medium_hnsw.query(q, 10), back.query(q, 10)
            assert_array_equal(a.ids, b.ids)
            assert_array_equal(a.distances, b.distances)

    def test_metric_echoed_through_header(self, tmp_path):
        store = KeyStore(np.random.default_rng(24).normal(size=(20, 4)))
        index = build_exact(store, "cosine")
        path = str(tmp_path / "cos.ridx")
        save_index(index, path)
        assert load_index(path).metric == "cosine"

    def test_corrupted_header_rejected(self, tmp_path):
        p = tmp_path / "bad.ridx"
        p.write_bytes(b"RACIDX1\nwrong\nl2\n4\n10\n0\n0\n0\n")
        with pytest.raises(FormatError):
            load_index(str(p))
        p.write_bytes(b"NOTANIDX\n")
        with pytest.raises(FormatError):
            load_index(str(p))

    def test_truncated_body_rejected(self, tmp_path, medium_exact):
        path = tmp_path / "trunc.ridx"
        save_index(medium_exact, str(path))
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError):
            load_index(str(path))

    def test_trailing_bytes_rejected(self, tmp_path, medium_exact):
        path = tmp_path / "trail.ridx"
        save_index(medium_exact, str(path))
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError):
            load_index(str(path))


class TestNeighborsInvariants:
    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValidationError):
            Neighbors(np.array([1, 1]), np.array([0.1, 0.2]))

    def test_descending_distances_rejected(self):
        with pytest.raises(ValidationError):
            Neighbors(np.array([1, 2]), np.array([0.3, 0.2]))

    def test_duplicate_payload_ids_rejected(self):
        with pytest.raises(ValidationError):
            KeyStore(np.zeros((2, 2)), ids=np.array([5, 5]))
