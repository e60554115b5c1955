"""Exact cosine top-k retrieval over a streamed corpus."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from embeval.errors import DimensionError, EmbevalError, ZeroNormError
from embeval.store import EmbeddingMatrix, unit_rows

WORKERS_ENV = "EMBEVAL_WORKERS"

# Block shapes are fixed so every GEMM call sees the same operands whatever the
# worker count; that keeps scores bit-identical across parallel settings.
QUERY_BLOCK = 64
CORPUS_BLOCK = 8192


@dataclass(frozen=True)
class NeighborList:
    query_id: str
    hits: tuple[tuple[str, float], ...]

    @property
    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.hits]


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw:
        try:
            value = int(raw)
        except ValueError:
            raise EmbevalError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
        if value < 1:
            raise EmbevalError(f"{WORKERS_ENV} must be >= 1")
        return value
    return os.cpu_count() or 1


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = np.sqrt(np.dot(u, u))
    nv = np.sqrt(np.dot(v, v))
    if nu == 0 or nv == 0:
        raise ZeroNormError("cosine of a zero vector is undefined")
    return float(np.dot(u, v) / (nu * nv))


def _select(scores: np.ndarray, index: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """The k best (score desc, index asc) entries of one query's candidates."""
    if scores.shape[0] > k:
        kth = np.partition(scores, scores.shape[0] - k)[scores.shape[0] - k]
        above = scores > kth
        tied = np.flatnonzero(scores == kth)
        need = k - int(above.sum())
        # tied candidates at the cut are admitted by ascending corpus index
        tied = tied[np.argsort(index[tied], kind="stable")[:need]]
        keep = np.concatenate([np.flatnonzero(above), tied])
        scores, index = scores[keep], index[keep]
    order = np.lexsort((index, -scores))
    return scores[order], index[order]


def _search_block(queries: np.ndarray, corpus: np.ndarray, k: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # running k-best per query, merged block by block over the corpus
    best = [(np.empty(0), np.empty(0, dtype=np.int64)) for _ in range(queries.shape[0])]
    for start in range(0, corpus.shape[0], CORPUS_BLOCK):
        block = corpus[start : start + CORPUS_BLOCK]
        sims = queries @ block.T
        block_index = np.arange(start, start + block.shape[0], dtype=np.int64)
        for q in range(queries.shape[0]):
            s, i = best[q]
            best[q] = _select(np.concatenate([s, sims[q]]), np.concatenate([i, block_index]), k)
    return best


def top_k(
    queries: EmbeddingMatrix,
    corpus: EmbeddingMatrix,
    k: int,
    workers: int | None = None,
) -> list[NeighborList]:
    """For each query row, the ``k`` corpus rows with highest cosine similarity.

    Ties are broken by ascending corpus row index. Output follows query order.
    Queries are processed in fixed-size blocks spread over ``workers`` threads.
    """
    if k < 1:
        raise EmbevalError(f"k must be a positive integer, got {k}")
    if corpus.n == 0:
        raise EmbevalError("corpus is empty")
    if queries.dims != corpus.dims:
        raise DimensionError(f"query dims {queries.dims} != corpus dims {corpus.dims}")
    workers = workers or default_workers()
    q = unit_rows(queries.values, queries.ids)
    c = unit_rows(corpus.values, corpus.ids)
    k_eff = min(k, corpus.n)
    starts = list(range(0, queries.n, QUERY_BLOCK))

    def run(start: int):
        return _search_block(q[start : start + QUERY_BLOCK], c, k_eff)

    if workers == 1 or len(starts) <= 1:
        blocks = [run(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(run, starts))

    results = []
    for start, block in zip(starts, blocks):
        for offset, (scores, index) in enumerate(block):
            qid = queries.ids[start + offset]
            hits = tuple((corpus.ids[int(i)], float(s)) for s, i in zip(scores, index))
            results.append(NeighborList(qid, hits))
    return results


def format_neighbors(runs: list[NeighborList]) -> str:
    """TSV lines ``query_id, rank, doc_id, score`` with 1-based rank."""
    out = []
    for run in runs:
        for rank, (doc_id, score) in enumerate(run.hits, start=1):
            out.append(f"{run.query_id}\t{rank}\t{doc_id}\t{score:.9f}\n")
    return "".join(out)


def parse_neighbors(text: str) -> list[NeighborList]:
    runs: dict[str, list[tuple[int, str, float]]] = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        qid, rank, doc_id, score = line.split("\t")
        runs.setdefault(qid, []).append((int(rank), doc_id, float(score)))
    return [
        NeighborList(qid, tuple((d, s) for _, d, s in sorted(hits)))
        for qid, hits in runs.items()
    ]
