"""Alignment and uniformity of embeddings on the unit hypersphere."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from embeval.errors import DimensionError, EmbevalError, UnknownIdError
from embeval.store import EmbeddingMatrix, RelevanceSet, unit_rows

DEFAULT_ALPHA = 2.0
DEFAULT_T = 2.0
DEFAULT_BATCH_SIZE = 1024


@dataclass(frozen=True)
class DiagReport:
    align: float
    uniform: float
    alpha: float
    t: float
    n_pos_pairs: int
    n_data_points: int
    batch_size: int

    def to_row(self, label: str, recall: float | None = None) -> str:
        extra = "" if recall is None else f"\t{recall:.9f}"
        return f"{label}\t{self.align:.9f}\t{self.uniform:.9f}{extra}\n"


def _squared_distances(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    diff = x - y
    return np.einsum("ij,ij->i", diff, diff)


def alignment(pairs, alpha: float = DEFAULT_ALPHA) -> float:
    """Mean of ``||x - y||^alpha`` over positive pairs.

    ``pairs`` is either a sequence of ``(x, y)`` vectors or a tuple of two
    row-aligned 2-D arrays.
    """
    if alpha <= 0:
        raise EmbevalError(f"alpha must be > 0, got {alpha}")
    if isinstance(pairs, tuple) and len(pairs) == 2 and np.ndim(pairs[0]) == 2:
        x = np.asarray(pairs[0], dtype=np.float64)
        y = np.asarray(pairs[1], dtype=np.float64)
    else:
        pairs = list(pairs)
        if not pairs:
            raise EmbevalError("alignment needs at least one pair")
        x = np.asarray([p[0] for p in pairs], dtype=np.float64)
        y = np.asarray([p[1] for p in pairs], dtype=np.float64)
    if x.shape[0] == 0:
        raise EmbevalError("alignment needs at least one pair")
    if x.shape != y.shape:
        raise DimensionError(f"pair shapes differ: {x.shape} vs {y.shape}")
    sq = _squared_distances(x, y)
    dist_pow = sq if alpha == 2.0 else np.power(np.sqrt(sq), alpha)
    return math.fsum(dist_pow.tolist()) / len(dist_pow)


def _batch_logsumexp(points: np.ndarray, t: float) -> tuple[float, int]:
    """log-sum-exp of ``-t ||x_i - x_j||^2`` over distinct ordered pairs in one batch."""
    m = points.shape[0]
    if m < 2:
        return -math.inf, 0
    sq_norms = np.einsum("ij,ij->i", points, points)
    gram = points @ points.T
    sq = np.maximum(sq_norms[:, None] + sq_norms[None, :] - 2.0 * gram, 0.0)
    logits = -t * sq[~np.eye(m, dtype=bool)]
    peak = logits.max()
    return float(peak + np.log(np.exp(logits - peak).sum())), logits.size


def uniformity(
    points,
    t: float = DEFAULT_T,
    batch_size: int = DEFAULT_BATCH_SIZE,
    seed: int = 0,
) -> float:
    """log E[exp(-t ||x - y||^2)] over distinct ordered pairs inside shuffled batches.

    Batch terms are merged with a running-max log-sum-exp in batch order, weighted
    by their pair counts, so nothing is exponentiated outside a max-shifted range.
    """
    values = points.values if isinstance(points, EmbeddingMatrix) else points
    x = np.asarray(values, dtype=np.float64)
    if t <= 0:
        raise EmbevalError(f"t must be > 0, got {t}")
    if batch_size < 2:
        raise EmbevalError(f"batch_size must be >= 2, got {batch_size}")
    n = x.shape[0]
    if n < 2:
        raise EmbevalError(f"uniformity needs at least two points, got {n}")
    if batch_size >= n:
        order = np.arange(n)
    else:
        order = np.random.default_rng(seed).permutation(n)
    running_max = -math.inf
    running_sum = 0.0
    total_pairs = 0
    for start in range(0, n, batch_size):
        lse, count = _batch_logsumexp(x[order[start : start + batch_size]], t)
        if count == 0:
            continue
        total_pairs += count
        if lse > running_max:
            running_sum = running_sum * math.exp(running_max - lse) + 1.0
            running_max = lse
        else:
            running_sum += math.exp(lse - running_max)
    value = running_max + math.log(running_sum) - math.log(total_pairs)
    # exact coincidence gives log(1) up to rounding; the quantity is never positive
    return min(value, 0.0)


def resolve_positive_pairs(
    query_emb: EmbeddingMatrix, doc_emb: EmbeddingMatrix, positives: RelevanceSet
) -> tuple[np.ndarray, np.ndarray]:
    """Row indices of every (query, doc) pair with positive gain, in file order."""
    q_rows, d_rows = [], []
    for qid, docs in positives.entries.items():
        if not query_emb.has(qid):
            raise UnknownIdError(f"query id {qid!r} not in query embeddings")
        for doc_id, gain in docs:
            if gain <= 0:
                continue
            if not doc_emb.has(doc_id):
                raise UnknownIdError(f"doc id {doc_id!r} not in document embeddings")
            q_rows.append(query_emb.row_of(qid))
            d_rows.append(doc_emb.row_of(doc_id))
    return np.asarray(q_rows, dtype=np.int64), np.asarray(d_rows, dtype=np.int64)


def diagnose(
    query_emb: EmbeddingMatrix,
    doc_emb: EmbeddingMatrix,
    positives: RelevanceSet,
    alpha: float = DEFAULT_ALPHA,
    t: float = DEFAULT_T,
    batch_size: int = DEFAULT_BATCH_SIZE,
    seed: int = 0,
) -> DiagReport:
    """Alignment over (query, clicked doc) pairs; uniformity over all query and doc points."""
    if query_emb.dims != doc_emb.dims:
        raise DimensionError(f"query dims {query_emb.dims} != doc dims {doc_emb.dims}")
    q_rows, d_rows = resolve_positive_pairs(query_emb, doc_emb, positives)
    q = unit_rows(query_emb.values, query_emb.ids)
    d = unit_rows(doc_emb.values, doc_emb.ids)
    align = alignment((q[q_rows], d[d_rows]), alpha)
    data = np.concatenate([q, d])
    uniform = uniformity(data, t=t, batch_size=batch_size, seed=seed)
    return DiagReport(align, uniform, alpha, t, len(q_rows), data.shape[0], batch_size)

