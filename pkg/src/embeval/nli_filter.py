"""Pick and prune machine-translated NLI examples by translation-quality score."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Literal, Mapping, Sequence

from embeval.errors import EmbevalError, FormatError, UnknownIdError
from embeval.store import TripletRecord, TripletSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoredTranslation:
    sentence_id: str
    system: str
    score: float


@dataclass(frozen=True)
class FilterStats:
    input_count: int
    output_count: int
    removed_fraction: float
    mean_score_before: float
    mean_score_after: float  # NaN when nothing is retained

    def to_tsv(self) -> str:
        return "".join(
            f"{k}\t{v}\n"
            for k, v in (
                ("input_count", self.input_count),
                ("output_count", self.output_count),
                ("removed_fraction", format(self.removed_fraction, ".12g")),
                ("mean_score_before", format(self.mean_score_before, ".12g")),
                ("mean_score_after", format(self.mean_score_after, ".12g")),
            )
        )


def load_scores(path) -> list[ScoredTranslation]:
    """Read ``sentence_id<TAB>system<TAB>score`` lines; ``#`` lines are comments."""
    rows = []
    with open(path, encoding="utf-8") as handle:
        for row, line in enumerate(handle):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not parts[0] or not parts[1]:
                raise FormatError("expected 'sentence_id<TAB>system<TAB>score'", path, row)
            try:
                score = float(parts[2])
            except ValueError:
                raise FormatError(f"bad score {parts[2]!r}", path, row) from None
            if not math.isfinite(score):
                raise FormatError("score must be finite", path, row)
            rows.append(ScoredTranslation(parts[0], parts[1], score))
    return rows


def select_best_translation(scores: Iterable[ScoredTranslation]) -> dict[str, str]:
    """Highest-scoring system per sentence; ties go to the lexicographically smallest name.

    The result is keyed in sorted sentence-id order so it does not depend on input row order.
    """
    best: dict[str, tuple[float, str]] = {}
    seen: set[tuple[str, str]] = set()
    for item in scores:
        key = (item.sentence_id, item.system)
        if key in seen:
            raise EmbevalError(f"duplicate score row for sentence {item.sentence_id!r}, system {item.system!r}")
        seen.add(key)
        current = best.get(item.sentence_id)
        if current is None or item.score > current[0] or (item.score == current[0] and item.system < current[1]):
            best[item.sentence_id] = (item.score, item.system)
    return {sid: best[sid][1] for sid in sorted(best)}


def best_scores(scores: Iterable[ScoredTranslation]) -> dict[str, float]:
    """Per-sentence score of the selected system."""
    scores = list(scores)
    chosen = select_best_translation(scores)
    lookup = {(s.sentence_id, s.system): s.score for s in scores}
    return {sid: lookup[(sid, system)] for sid, system in chosen.items()}


def filter_by_threshold(scores: Mapping[str, float], threshold: float) -> tuple[list[str], FilterStats]:
    """Keep ids scoring at least ``threshold``, in input order."""
    if not scores:
        raise EmbevalError("filter_by_threshold needs a non-empty score map")
    retained = [sid for sid, s in scores.items() if s >= threshold]
    n_in, n_out = len(scores), len(retained)
    if n_out == 0:
        log.warning("threshold %g removes every one of %d examples", threshold, n_in)
    before = math.fsum(scores.values()) / n_in
    after = math.fsum(scores[s] for s in retained) / n_out if n_out else math.nan
    stats = FilterStats(n_in, n_out, (n_in - n_out) / n_in, before, after)
    return retained, stats


def triplet_scores(
    records: Sequence[TripletRecord],
    sentence_scores: Mapping[str, float],
    aggregate: Literal["min", "mean"] = "min",
) -> dict[str, float]:
    """Score each triplet from its member sentences (anchor, positive, negative).

    Members without a score are ignored; a triplet with no scored member is an error.
    """
    if aggregate not in ("min", "mean"):
        raise ValueError(f"unknown aggregate {aggregate!r}")
    out = {}
    for rec in records:
        vals = [sentence_scores[m] for m in rec.members if m in sentence_scores]
        if not vals:
            raise UnknownIdError(f"triplet {rec.triplet_id!r} has no scored member sentence")
        out[rec.triplet_id] = min(vals) if aggregate == "min" else math.fsum(vals) / len(vals)
    return out


def materialize_filtered_triplets(triplets: TripletSet, retained: Iterable[str]) -> TripletSet:
    """Row-aligned subset of ``triplets`` restricted to ``retained`` ids, original order kept."""
    keep = set(retained)
    known = set(triplets.triplet_ids)
    unknown = keep - known
    if unknown:
        raise UnknownIdError(f"unknown triplet id(s): {', '.join(sorted(unknown)[:5])}")
    rows = [i for i, tid in enumerate(triplets.triplet_ids) if tid in keep]
    return TripletSet(
        triplets.anchors.take(rows),
        triplets.positives.take(rows),
        triplets.hard_negatives.take(rows),
    )
