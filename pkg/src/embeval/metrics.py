"""Click-based NDCG, Recall@K and paired significance testing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from embeval.errors import EmbevalError
from embeval.simsearch import NeighborList
from embeval.store import Listing, RelevanceSet, unit_rows


@dataclass(frozen=True)
class MetricReport:
    metric_name: str
    per_query: dict[str, float]
    mean: float = field(init=False)
    k: int | None = None

    def __post_init__(self):
        if not self.per_query:
            raise EmbevalError("metric report needs at least one query")
        object.__setattr__(self, "mean", math.fsum(self.per_query.values()) / len(self.per_query))

    def to_tsv(self) -> str:
        lines = [f"{qid}\t{value:.9f}\n" for qid, value in self.per_query.items()]
        lines.append(f"# mean\t{self.mean:.9f}\tn={len(self.per_query)}\n")
        return "".join(lines)


def parse_metric_tsv(text: str) -> dict[str, float]:
    """Per-query values from a report written by :meth:`MetricReport.to_tsv`."""
    values = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        qid, value = line.split("\t")[:2]
        values[qid] = float(value)
    return values


def rerank_listing(listing: Listing) -> list[int]:
    """Candidate indices by descending cosine to the query; ties keep listing order."""
    q = unit_rows(listing.query_row[None, :], [listing.query_id])[0]
    docs = unit_rows(listing.doc_rows, listing.doc_ids)
    sims = docs @ q
    return [int(i) for i in np.argsort(-sims, kind="stable")]


def ndcg(gains: Sequence[float], truncation: int | None = None) -> float:
    """Linear-gain NDCG with a log2(rank + 1) discount; 0.0 when every gain is 0."""
    gains = [float(g) for g in gains]
    if not gains:
        raise EmbevalError("ndcg needs at least one gain")
    if any(g < 0 for g in gains):
        raise EmbevalError("gains must be non-negative")
    if truncation is not None and truncation < 1:
        raise EmbevalError(f"truncation must be positive, got {truncation}")
    depth = len(gains) if truncation is None else min(truncation, len(gains))
    discounts = [1.0 / math.log2(i + 2) for i in range(depth)]
    ideal = sorted(gains, reverse=True)
    idcg = math.fsum(g * d for g, d in zip(ideal, discounts))
    if idcg == 0.0:
        return 0.0
    dcg = math.fsum(g * d for g, d in zip(gains, discounts))
    # fsum makes DCG and IDCG identical for ideal orders; clip guards rounding elsewhere
    return min(dcg / idcg, 1.0)


def evaluate_ranking(
    listings: Sequence[Listing],
    truncation: int | None = None,
    binary_gains: bool = False,
) -> MetricReport:
    """Mean NDCG of each listing after cosine reranking.

    ``binary_gains`` collapses click counts to 0/1 before scoring.
    """
    if not listings:
        raise EmbevalError("evaluate_ranking needs at least one listing")
    per_query: dict[str, float] = {}
    for listing in listings:
        order = rerank_listing(listing)
        gains = [listing.gains[i] for i in order]
        if binary_gains:
            gains = [1.0 if g > 0 else 0.0 for g in gains]
        if listing.query_id in per_query:
            raise EmbevalError(f"duplicate listing id {listing.query_id!r}")
        per_query[listing.query_id] = ndcg(gains, truncation)
    name = "ndcg" if truncation is None else f"ndcg@{truncation}"
    return MetricReport(name, per_query, k=truncation)


def recall_at_k(runs: Sequence[NeighborList], rels: RelevanceSet, k: int) -> MetricReport:
    if k < 1:
        raise EmbevalError(f"k must be a positive integer, got {k}")
    per_query: dict[str, float] = {}
    for run in runs:
        if run.query_id not in rels:
            raise EmbevalError(f"query {run.query_id!r} has no relevance judgments")
        relevant = rels.relevant(run.query_id)
        if not relevant:
            raise EmbevalError(f"query {run.query_id!r} has no relevant documents")
        retrieved = {doc_id for doc_id, _ in run.hits[:k]}
        per_query[run.query_id] = len(relevant & retrieved) / len(relevant)
    return MetricReport(f"recall@{k}", per_query, k=k)


# ---------------------------------------------------------------------------
# significance


def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 1e-15) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided(t: float, df: float) -> float:
    """Two-sided tail probability P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Paired two-sided Student t-test on ``a - b``; returns ``(t, p)``."""
    if len(a) != len(b):
        raise EmbevalError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise EmbevalError("paired t-test needs at least two pairs")
    diffs = [float(x) - float(y) for x, y in zip(a, b)]
    if all(d == 0.0 for d in diffs):
        return 0.0, 1.0
    mean = math.fsum(diffs) / n
    var = math.fsum((d - mean) ** 2 for d in diffs) / (n - 1)
    if var == 0.0:
        # constant nonzero difference: infinitely significant
        t = math.copysign(math.inf, mean)
        return t, 0.0
    t = mean / math.sqrt(var / n)
    return t, student_t_two_sided(t, n - 1)
