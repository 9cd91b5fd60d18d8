import math

import numpy as np
import pytest

from latesearch import pipeline
from latesearch.core import (
    CandidateSet,
    CentroidSet,
    CorpusEmbeddings,
    DimensionMismatch,
    InvertedList,
    QueryMatrix,
    SearchParams,
)
from latesearch.indexer import IndexConfig, build_index, build_inverted_list
from latesearch.pipeline import (
    CentroidScoreTable,
    centroid_interaction,
    centroid_only_ranking,
    compute_centroid_scores,
    exhaustive_search,
    generate_candidates,
    prune_centroids,
    rank_final,
    search,
    select_top,
)

from conftest import unit_rows
from oracles import centroid_scores_naive, exact_index_scores, rank


def table_from(S):
    S = np.asarray(S, dtype=np.float32)
    return CentroidScoreTable(S, S.max(axis=1))


def test_centroid_scores_identity():
    t = compute_centroid_scores(QueryMatrix([[1, 0]]), CentroidSet(np.eye(2)))
    assert t.S.tolist() == [[1.0], [0.0]]
    assert t.per_centroid_max.tolist() == [1.0, 0.0]


def test_centroid_scores_duplicate_query_rows(rng):
    C = CentroidSet(unit_rows(rng, 5, 8))
    q = unit_rows(rng, 1, 8)
    t = compute_centroid_scores(QueryMatrix(np.vstack([q, q])), C)
    assert np.array_equal(t.S[:, 0], t.S[:, 1])


def test_centroid_scores_match_dot_products(rng):
    C = CentroidSet(unit_rows(rng, 12, 16))
    q = QueryMatrix(unit_rows(rng, 5, 16))
    t = compute_centroid_scores(q, C)
    for c in range(12):
        for i in range(5):
            assert t.S[c, i] == pytest.approx(float(np.dot(C.data[c].astype(float), q.data[i])), abs=1e-6)
    with pytest.raises(DimensionMismatch):
        compute_centroid_scores(QueryMatrix(unit_rows(rng, 1, 8)), C)


def test_generate_candidates_full_probe_covers_corpus():
    codes, doclens = [0, 1, 1, 2, 3], [2, 0, 1, 2]
    ivf = build_inverted_list(codes, doclens, 4)
    t = table_from(np.random.default_rng(0).uniform(-1, 1, (4, 3)))
    got = generate_candidates(t, ivf, 4, 4)
    assert got.passage_ids.tolist() == [0, 2, 3]
    assert got.scores is None


def test_generate_candidates_single_token():
    ivf = InvertedList(np.array([0, 1, 3, 3]), np.array([5, 3, 7]))
    t = table_from([[0.1], [0.9], [0.2]])
    assert generate_candidates(t, ivf, 1, 8).passage_ids.tolist() == [3, 7]
    with pytest.raises(ValueError):
        generate_candidates(t, ivf, 4, 8)


def test_generate_candidates_tie_prefers_lower_centroid():
    ivf = InvertedList(np.array([0, 1, 2]), np.array([0, 1]))
    t = table_from([[0.5], [0.5]])
    assert generate_candidates(t, ivf, 1, 2).passage_ids.tolist() == [0]


def test_generate_candidates_matches_bruteforce(rng):
    for _ in range(20):
        K, nq, P = int(rng.integers(2, 30)), int(rng.integers(1, 6)), int(rng.integers(1, 40))
        doclens = rng.integers(0, 6, size=P)
        codes = rng.integers(0, K, size=int(doclens.sum()))
        ivf = build_inverted_list(codes, doclens, K)
        S = rng.uniform(-1, 1, (K, nq))
        nprobe = int(rng.integers(1, K + 1))
        want = set()
        for i in range(nq):
            top = sorted(range(K), key=lambda c: (-np.float32(S[c, i]), c))[:nprobe]
            for c in top:
                want |= set(ivf.passages(c).tolist())
        got = generate_candidates(table_from(S), ivf, nprobe, P).passage_ids.tolist()
        assert got == sorted(want)


def test_prune_centroids():
    assert prune_centroids(table_from([[0.9, -1.0], [-1.0, -1.0]]), -1).all()
    assert prune_centroids(table_from([[0.9, 0.1], [0.5, 0.2]]), 0.6).tolist() == [True, False]
    assert prune_centroids(table_from([[0.25], [0.2]]), 0.25).tolist() == [True, False]


def test_centroid_interaction_examples():
    t = table_from([[1.0, 1.0], [0.2, 0.3]])
    out = centroid_interaction(CandidateSet([0]), np.array([0, 0, 0], np.uint32), np.array([3]), t)
    assert out.scores.tolist() == [2.0]
    # token on centroid 1 is dominated by the token on centroid 0
    codes = np.array([0, 1], np.uint32)
    full = centroid_interaction(CandidateSet([0]), codes, np.array([2]), t)
    masked = centroid_interaction(CandidateSet([0]), codes, np.array([2]), t, np.array([True, False]))
    assert full.scores.tolist() == masked.scores.tolist() == [2.0]


def test_centroid_interaction_all_masked_scores_zero():
    t = table_from([[-0.5, -0.4]])
    out = centroid_interaction(CandidateSet([0]), np.array([0], np.uint32), np.array([1]), t, np.array([False]))
    assert out.scores.tolist() == [0.0]


def test_centroid_interaction_matches_naive(small_collection, small_index):
    idx = small_index
    for q in small_collection.queries[:4]:
        t = compute_centroid_scores(q, idx.centroids)
        pids = np.arange(idx.num_passages)
        for mask in (None, prune_centroids(t, 0.3)):
            got = centroid_interaction(CandidateSet(pids), idx.codes, idx.doclens, t, mask)
            want = centroid_scores_naive(q, idx, pids, mask)
            assert np.allclose(got.scores, [want[p] for p in pids], atol=1e-6)


def test_select_top_tie_break():
    out = select_top(CandidateSet([1, 0], [0.5, 0.5]), 1)
    assert out.passage_ids.tolist() == [0]


def test_select_top_identity_when_n_large():
    c = CandidateSet([4, 2, 9], [0.1, 0.7, 0.3])
    out = select_top(c, 10)
    assert out.passage_ids.tolist() == [2, 9, 4]
    assert out.scores.tolist() == pytest.approx([0.7, 0.3, 0.1])


def test_select_top_matches_sort_oracle(rng):
    for _ in range(200):
        n = int(rng.integers(1, 60))
        ids = rng.permutation(1000)[:n]
        scores = rng.integers(0, 5, size=n).astype(np.float32) / 4  # lots of ties
        k = int(rng.integers(1, 70))
        out = select_top(CandidateSet(ids, scores), k)
        want = sorted(zip(ids.tolist(), scores.tolist()), key=lambda t: (-t[1], t[0]))[:k]
        assert out.passage_ids.tolist() == [w[0] for w in want]


def test_rank_final_single_and_overflow(small_collection, small_index):
    q = small_collection.queries[0]
    oracle = exact_index_scores(q, small_index)
    one = rank_final(CandidateSet([7]), small_index, q, 5)
    assert one.passage_ids.tolist() == [7]
    assert one.scores[0] == pytest.approx(oracle[7], abs=1e-5)
    few = rank_final(CandidateSet([3, 1, 2]), small_index, q, 10)
    assert sorted(few.passage_ids.tolist()) == [1, 2, 3]


def test_rank_final_matches_uncompressed_ordering_when_lossless(rng):
    # every token sits on a centroid, so 4-bit residuals are all zero
    K, d = 12, 16
    C = unit_rows(rng, K, d)
    doclens = rng.integers(1, 5, size=10)
    words = rng.integers(0, K, size=int(doclens.sum()))
    corpus = CorpusEmbeddings(C[words], doclens)
    index = build_index(corpus, IndexConfig(nbits=4, num_centroids=K, rng_seed=2))
    q = QueryMatrix(unit_rows(rng, 3, d))
    exact = {p: float((corpus.passage(p) @ q.data.T).max(axis=0).sum()) for p in range(10)}
    got = rank_final(CandidateSet(np.arange(10)), index, q, 10)
    assert sorted(got.passage_ids.tolist()) == list(range(10))
    for p, s in zip(got.passage_ids, got.scores):
        assert s == pytest.approx(exact[int(p)], abs=1e-5)
    want = sorted(range(10), key=lambda p: (-round(exact[p], 4), p))
    assert got.passage_ids.tolist() == want


def test_search_exhaustive_params_match_oracle(small_collection, small_index):
    N = small_index.num_passages
    params = SearchParams(k=20, nprobe=small_index.num_centroids, t_cs=-1.0, ndocs=4 * N)
    for q in small_collection.queries:
        res, trace = search(q, small_index, params)
        oracle = exact_index_scores(q, small_index)
        assert res.passage_ids.tolist() == rank(oracle, 20)
        assert np.allclose(res.scores, [oracle[p] for p in res.passage_ids], atol=1e-5)
        assert trace.stage1 == trace.stage2_out == trace.stage3_out == trace.decompressed == N


def test_exact_match_passage_ranks_first(rng):
    K, d = 16, 32
    C = unit_rows(rng, K, d)
    doclens = np.full(30, 4)
    words = rng.integers(0, K, size=120)
    noise = unit_rows(rng, 120, d) * 0.05
    data = C[words] + noise
    data /= np.linalg.norm(data, axis=1, keepdims=True)
    corpus = CorpusEmbeddings(data, doclens)
    index = build_index(corpus, IndexConfig(nbits=2, num_centroids=K, rng_seed=0))
    target = 17
    q = QueryMatrix(corpus.passage(target))
    for nprobe in (1, 2, K):
        res, _ = search(q, index, SearchParams(k=3, nprobe=nprobe, t_cs=-1.0, ndocs=64))
        assert res.passage_ids[0] == target


def test_stage_trace_monotone(small_collection, small_index):
    for params in (SearchParams(5, 1, 0.5, 16), SearchParams(10, 2, 0.3, 40), SearchParams(3, 4, 0.0, 3)):
        for q in small_collection.queries:
            res, tr = search(q, small_index, params)
            assert tr.stage2_out == min(params.ndocs, tr.stage1)
            assert tr.stage3_out == min(math.ceil(params.ndocs / 4), tr.stage2_out)
            assert tr.decompressed == tr.stage3_out
            assert tr.stage1 >= tr.stage2_out >= tr.stage3_out >= tr.result == len(res)
            assert tr.result == min(params.k, tr.stage3_out)


def test_single_centroid_product_per_query(small_collection, small_index, monkeypatch):
    calls = []
    real = pipeline.compute_centroid_scores

    def counting(q, c):
        calls.append(1)
        return real(q, c)

    monkeypatch.setattr(pipeline, "compute_centroid_scores", counting)
    for ndocs in (8, 64, 600):
        calls.clear()
        _, tr = search(small_collection.queries[0], small_index, SearchParams(5, 4, 0.2, ndocs))
        assert len(calls) == 1 and tr.centroid_products == 1


def test_pruning_safe_at_minus_one(small_collection, small_index):
    idx = small_index
    for q in small_collection.queries:
        t = compute_centroid_scores(q, idx.centroids)
        cands = generate_candidates(t, idx.ivf, 3, idx.num_passages)
        s2 = centroid_interaction(cands, idx.codes, idx.doclens, t, prune_centroids(t, -1.0))
        s3 = centroid_interaction(cands, idx.codes, idx.doclens, t, None)
        assert np.array_equal(s2.scores, s3.scores)


def test_empty_stage1_gives_empty_result(rng):
    # passage 1 has no tokens; a corpus whose only tokens sit on centroid 0
    corpus = CorpusEmbeddings(unit_rows(rng, 3, 8), [3, 0])
    index = build_index(corpus, IndexConfig(nbits=2, num_centroids=1))
    res, tr = search(QueryMatrix(unit_rows(rng, 1, 8)), index, SearchParams(1, 1, -1, 4))
    assert len(res) == 1 and tr.stage1 == 1


def test_no_filter_mode_decompresses_all_stage1(small_collection, small_index):
    p = SearchParams(10, 2, 0.4, 64)
    for q in small_collection.queries[:5]:
        res, tr = search(q, small_index, p, filtering=False)
        assert tr.decompressed == tr.stage1
        assert tr.stage2_rows == tr.stage3_rows == 0


def test_centroid_only_ranking_full_probe(small_collection, small_index):
    q = small_collection.queries[0]
    r = centroid_only_ranking(q, small_index)
    assert len(r) == small_index.num_passages
    want = centroid_scores_naive(q, small_index, range(small_index.num_passages))
    assert r.passage_ids.tolist()[:20] == rank(want, 20)


def test_exhaustive_search_matches_oracle(small_collection, small_index):
    q = small_collection.queries[1]
    got = exhaustive_search(q, small_index, 15)
    assert got.passage_ids.tolist() == rank(exact_index_scores(q, small_index), 15)


def test_concurrent_searches_agree(small_collection, small_index):
    from concurrent.futures import ThreadPoolExecutor
    p = SearchParams.for_k(10)
    serial = [search(q, small_index, p)[0].passage_ids.tolist() for q in small_collection.queries]
    with ThreadPoolExecutor(4) as pool:
        par = list(pool.map(lambda q: search(q, small_index, p, threads=2)[0].passage_ids.tolist(),
                            small_collection.queries))
    assert serial == par


def test_zero_residual_stage3_equals_stage4(rng):
    # tokens sit exactly on their centroids, so reconstruction returns the centroid
    K, d = 8, 16
    C = unit_rows(rng, K, d)
    doclens = rng.integers(1, 6, size=25)
    doclens[0] = K  # every centroid is used at least once
    words = np.concatenate([np.arange(K), rng.integers(0, K, size=int(doclens.sum()) - K)])
    corpus = CorpusEmbeddings(C[words], doclens)
    index = build_index(corpus, IndexConfig(nbits=2, num_centroids=K, rng_seed=0))
    assert not index.quantizer.bucket_weights.any()
    pids = np.arange(25)
    for _ in range(5):
        q = QueryMatrix(unit_rows(rng, 4, d))
        t = compute_centroid_scores(q, index.centroids)
        approx = centroid_interaction(CandidateSet(pids), index.codes, index.doclens, t)
        exact = rank_final(CandidateSet(pids), index, q, 25)
        by_pid = dict(zip(exact.passage_ids.tolist(), exact.scores.tolist()))
        assert np.allclose(approx.scores, [by_pid[p] for p in pids], atol=1e-6)
