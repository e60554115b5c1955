import math

import numpy as np
import pytest

from embeval import simsearch
from embeval.errors import DimensionError, EmbevalError, ZeroNormError
from embeval.simsearch import cosine, format_neighbors, parse_neighbors, top_k
from embeval.store import EmbeddingMatrix

from oracles import naive_top_k


def matrix(values, prefix):
    values = np.asarray(values, dtype=np.float32)
    return EmbeddingMatrix(tuple(f"{prefix}{i}" for i in range(len(values))), values)


class TestCosine:
    def test_orthogonal(self):
        assert cosine([1, 0], [0, 1]) == 0.0

    def test_identity(self):
        assert cosine([0.3, -0.7], [0.3, -0.7]) == pytest.approx(1.0, abs=1e-9)

    def test_diagonal(self):
        assert cosine([1, 0], [1, 1]) == pytest.approx(1 / math.sqrt(2), abs=1e-8)
        assert cosine([1, 0], [1, 1]) == pytest.approx(0.70710678, abs=1e-8)

    def test_errors(self):
        with pytest.raises(DimensionError):
            cosine([1, 0], [1, 0, 0])
        with pytest.raises(ZeroNormError):
            cosine([0, 0], [1, 0])


class TestTopK:
    def test_self_retrieval(self):
        rng = np.random.default_rng(1)
        corpus = matrix(rng.normal(size=(20, 6)), "d")
        query = EmbeddingMatrix(("q",), corpus.values[7:8])
        (run,) = top_k(query, corpus, 3, workers=1)
        assert run.hits[0][0] == "d7"
        assert run.hits[0][1] == pytest.approx(1.0, abs=1e-6)

    def test_k_exceeds_corpus(self):
        rng = np.random.default_rng(2)
        corpus = matrix(rng.normal(size=(5, 3)), "d")
        queries = matrix(rng.normal(size=(2, 3)), "q")
        runs = top_k(queries, corpus, 50, workers=1)
        expected = naive_top_k(queries.values, corpus.values, 5)
        for run, want in zip(runs, expected):
            assert len(run.hits) == 5
            assert run.doc_ids == [f"d{i}" for i in want]

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(3)
        corpus = matrix(rng.normal(size=(50, 12)), "d")
        queries = matrix(rng.normal(size=(8, 12)), "q")
        runs = top_k(queries, corpus, 5, workers=1)
        assert [r.doc_ids for r in runs] == [[f"d{i}" for i in row] for row in naive_top_k(queries.values, corpus.values, 5)]

    def test_ties_broken_by_row_index(self):
        base = np.array([[1.0, 0.0], [0.0, 1.0]])
        corpus = matrix(np.array([base[1], base[0], base[0] * 2, base[1], base[0] * 0.5]), "d")
        queries = matrix([[1.0, 0.0]], "q")
        for k in (1, 2, 3, 4, 5):
            (run,) = top_k(queries, corpus, k, workers=1)
            assert run.doc_ids == ["d1", "d2", "d4", "d0", "d3"][:k]

    def test_ties_across_corpus_blocks(self, monkeypatch):
        monkeypatch.setattr(simsearch, "CORPUS_BLOCK", 3)
        corpus = matrix(np.tile([[1.0, 0.0]], (10, 1)), "d")
        (run,) = top_k(matrix([[1.0, 0.0]], "q"), corpus, 4, workers=1)
        assert run.doc_ids == ["d0", "d1", "d2", "d3"]

    def test_blocked_equals_unblocked(self, monkeypatch):
        rng = np.random.default_rng(4)
        corpus = matrix(rng.normal(size=(97, 9)), "d")
        queries = matrix(rng.normal(size=(11, 9)), "q")
        whole = top_k(queries, corpus, 10, workers=1)
        monkeypatch.setattr(simsearch, "CORPUS_BLOCK", 7)
        monkeypatch.setattr(simsearch, "QUERY_BLOCK", 3)
        assert [r.doc_ids for r in top_k(queries, corpus, 10, workers=1)] == [r.doc_ids for r in whole]

    def test_prefix_monotonicity(self):
        rng = np.random.default_rng(5)
        corpus = matrix(rng.normal(size=(40, 5)), "d")
        queries = matrix(rng.normal(size=(4, 5)), "q")
        for k in range(1, 12):
            small = top_k(queries, corpus, k, workers=1)
            large = top_k(queries, corpus, k + 1, workers=1)
            for s, l in zip(small, large):
                assert l.hits[:k] == s.hits

    def test_workers_do_not_change_output(self, monkeypatch):
        monkeypatch.setattr(simsearch, "QUERY_BLOCK", 4)
        rng = np.random.default_rng(6)
        corpus = matrix(rng.normal(size=(300, 16)), "d")
        queries = matrix(rng.normal(size=(37, 16)), "q")
        outputs = {format_neighbors(top_k(queries, corpus, 7, workers=w)) for w in (1, 2, 8)}
        assert len(outputs) == 1

    def test_scores_bounded_and_sorted(self):
        rng = np.random.default_rng(7)
        corpus = matrix(rng.normal(size=(60, 4)), "d")
        queries = matrix(rng.normal(size=(6, 4)), "q")
        for run in top_k(queries, corpus, 60, workers=1):
            scores = [s for _, s in run.hits]
            assert scores == sorted(scores, reverse=True)
            assert all(-1 - 1e-6 <= s <= 1 + 1e-6 for s in scores)

    def test_output_order_follows_queries(self):
        rng = np.random.default_rng(8)
        corpus = matrix(rng.normal(size=(10, 3)), "d")
        queries = EmbeddingMatrix(("z", "a", "m"), rng.normal(size=(3, 3)))
        assert [r.query_id for r in top_k(queries, corpus, 2)] == ["z", "a", "m"]

    def test_errors(self):
        corpus = matrix([[1.0, 0.0]], "d")
        with pytest.raises(EmbevalError, match="k must"):
            top_k(matrix([[1.0, 0.0]], "q"), corpus, 0)
        with pytest.raises(EmbevalError, match="empty"):
            top_k(matrix([[1.0, 0.0]], "q"), EmbeddingMatrix.empty(2), 1)
        with pytest.raises(DimensionError):
            top_k(matrix([[1.0, 0.0, 0.0]], "q"), corpus, 1)

    def test_workers_env(self, monkeypatch):
        monkeypatch.setenv(simsearch.WORKERS_ENV, "3")
        assert simsearch.default_workers() == 3
        monkeypatch.setenv(simsearch.WORKERS_ENV, "zero")
        with pytest.raises(EmbevalError):
            simsearch.default_workers()


def test_neighbor_tsv_round_trip():
    rng = np.random.default_rng(9)
    runs = top_k(matrix(rng.normal(size=(3, 4)), "q"), matrix(rng.normal(size=(9, 4)), "d"), 4, workers=1)
    text = format_neighbors(runs)
    first = text.splitlines()[0].split("\t")
    assert first[0] == "q0" and first[1] == "1" and len(first[3].split(".")[1]) == 9
    back = parse_neighbors(text)
    assert [r.doc_ids for r in back] == [r.doc_ids for r in runs]
