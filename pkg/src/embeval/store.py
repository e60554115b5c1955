"""On-disk formats and in-memory containers for embeddings and their sidecar files.

Binary embedding layout (little-endian)::

    b"EMBV" | u32 version=1 | u32 count | u32 dims
    count x (UTF-8 id, NUL terminated)
    count x dims float32, row-major

TSV embedding layout: ``id<TAB>v1 v2 ... vd`` per line.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal

import numpy as np

from embeval.errors import DimensionError, FormatError, UnknownIdError, ZeroNormError

MAGIC = b"EMBV"
VERSION = 1
UNIT_NORM_TOL = 1e-5

Format = Literal["binary", "tsv"]
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """Immutable n x d float32 matrix with one unique string id per row."""

    ids: tuple[str, ...]
    values: np.ndarray
    normalized: bool = False
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = tuple(self.ids)
        values = np.array(self.values, dtype=np.float32, order="C", copy=True)
        if values.ndim != 2:
            raise DimensionError(f"embedding values must be 2-D, got shape {values.shape}")
        if values.shape[1] < 1:
            raise DimensionError("embedding dims must be positive")
        if len(ids) != values.shape[0]:
            raise DimensionError(f"{len(ids)} ids for {values.shape[0]} rows")
        index: dict[str, int] = {}
        for row, id_ in enumerate(ids):
            if not isinstance(id_, str) or not id_:
                raise FormatError("empty id", row=row)
            if id_ in index:
                raise FormatError(f"duplicate id {id_!r}", row=row)
            index[id_] = row
        bad = ~np.isfinite(values).all(axis=1)
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise FormatError(f"non-finite value in row for id {ids[row]!r}", row=row)
        if self.normalized and len(ids):
            norms = np.linalg.norm(values.astype(np.float64), axis=1)
            off = np.abs(norms - 1.0) > UNIT_NORM_TOL
            if off.any():
                row = int(np.flatnonzero(off)[0])
                raise FormatError(f"id {ids[row]!r} flagged normalized but has norm {norms[row]}", row=row)
        values.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_index", index)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return (
            self.ids == other.ids
            and self.normalized == other.normalized
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    def row_of(self, id_: str) -> int:
        try:
            return self._index[id_]
        except KeyError:
            raise UnknownIdError(f"unknown id {id_!r}") from None

    def has(self, id_: str) -> bool:
        return id_ in self._index

    def vector(self, id_: str) -> np.ndarray:
        return self.values[self.row_of(id_)]

    def take(self, rows: Iterable[int], ids: Iterable[str] | None = None) -> EmbeddingMatrix:
        rows = np.asarray(list(rows), dtype=np.int64)
        new_ids = tuple(ids) if ids is not None else tuple(self.ids[r] for r in rows)
        values = self.values[rows] if len(rows) else np.zeros((0, self.dims), np.float32)
        return EmbeddingMatrix(new_ids, values, self.normalized)

    @classmethod
    def empty(cls, dims: int) -> EmbeddingMatrix:
        return cls((), np.zeros((0, dims), dtype=np.float32))


@dataclass(frozen=True)
class RelevanceSet:
    """Per-query relevance judgments ``query_id -> [(doc_id, gain), ...]``."""

    entries: dict[str, list[tuple[str, float]]]

    def __post_init__(self):
        for qid, docs in self.entries.items():
            if not docs:
                raise FormatError(f"query {qid!r} has no relevance entries")
            seen = set()
            for doc_id, gain in docs:
                if doc_id in seen:
                    raise FormatError(f"duplicate pair ({qid!r}, {doc_id!r})")
                seen.add(doc_id)
                if not math.isfinite(gain) or gain < 0:
                    raise FormatError(f"gain for ({qid!r}, {doc_id!r}) must be finite and >= 0, got {gain}")
            if not any(g > 0 for _, g in docs):
                raise FormatError(f"query {qid!r} has no document with positive gain")

    def relevant(self, query_id: str) -> set[str]:
        """Doc ids with strictly positive gain for ``query_id``."""
        return {d for d, g in self.entries[query_id] if g > 0}

    def __contains__(self, query_id: str) -> bool:
        return query_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class Listing:
    """One search session: query vector plus its ordered candidates and click gains."""

    query_id: str
    query_row: np.ndarray
    doc_ids: tuple[str, ...]
    doc_rows: np.ndarray
    gains: tuple[float, ...]

    def __post_init__(self):
        query_row = np.asarray(self.query_row, dtype=np.float64)
        doc_rows = np.asarray(self.doc_rows, dtype=np.float64)
        if not self.doc_ids:
            raise FormatError(f"listing {self.query_id!r} has no candidates")
        if doc_rows.ndim != 2 or doc_rows.shape[0] != len(self.doc_ids) or len(self.gains) != len(self.doc_ids):
            raise DimensionError(f"listing {self.query_id!r}: candidate arrays disagree in length")
        if doc_rows.shape[1] != query_row.shape[0]:
            raise DimensionError(
                f"listing {self.query_id!r}: candidate dims {doc_rows.shape[1]} != query dims {query_row.shape[0]}"
            )
        if any(g < 0 for g in self.gains):
            raise FormatError(f"listing {self.query_id!r} has a negative gain")
        object.__setattr__(self, "query_row", query_row)
        object.__setattr__(self, "doc_rows", doc_rows)
        object.__setattr__(self, "doc_ids", tuple(self.doc_ids))
        object.__setattr__(self, "gains", tuple(float(g) for g in self.gains))


@dataclass(frozen=True)
class TripletSet:
    """Row-aligned anchor / positive / hard-negative embeddings keyed by triplet id."""

    anchors: EmbeddingMatrix
    positives: EmbeddingMatrix
    hard_negatives: EmbeddingMatrix

    def __post_init__(self):
        a, p, h = self.anchors, self.positives, self.hard_negatives
        if not (a.n == p.n == h.n and a.dims == p.dims == h.dims):
            raise DimensionError("triplet matrices must share n and d")
        if not (a.ids == p.ids == h.ids):
            raise FormatError("triplet matrices are not row-aligned by triplet id")

    @property
    def triplet_ids(self) -> tuple[str, ...]:
        return self.anchors.ids

    @property
    def n(self) -> int:
        return self.anchors.n

    @property
    def dims(self) -> int:
        return self.anchors.dims

    def __len__(self) -> int:
        return self.n


@dataclass(frozen=True)
class TripletRecord:
    triplet_id: str
    anchor_id: str
    positive_id: str
    negative_id: str

    @property
    def members(self) -> tuple[str, str, str]:
        return (self.anchor_id, self.positive_id, self.negative_id)


# ---------------------------------------------------------------------------
# embedding files


def _guess_format(path: Path) -> Format:
    return "tsv" if path.suffix.lower() in {".tsv", ".txt"} else "binary"


def load_embeddings(path, format: Format | None = None) -> EmbeddingMatrix:
    """Read an embedding file; ``format`` defaults to ``tsv`` for .tsv/.txt paths, else binary."""
    path = Path(path)
    format = format or _guess_format(path)
    if format == "binary":
        return _load_binary(path)
    if format == "tsv":
        return _load_tsv(path)
    raise ValueError(f"unknown embedding format {format!r}")


def _load_binary(path: Path) -> EmbeddingMatrix:
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", path)
    magic, version, count, dims = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", path)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", path)
    if dims < 1:
        raise FormatError("dims must be positive", path)
    offset = _HEADER.size
    ids = []
    for row in range(count):
        end = data.find(b"\x00", offset)
        if end < 0:
            raise FormatError("unterminated id", path, row)
        try:
            ids.append(data[offset:end].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"id is not valid UTF-8 ({exc.reason})", path, row) from None
        offset = end + 1
    expected = count * dims * 4
    if len(data) - offset != expected:
        raise FormatError(f"expected {expected} bytes of float data, found {len(data) - offset}", path)
    values = np.frombuffer(data, dtype="<f4", count=count * dims, offset=offset).reshape(count, dims)
    _check_rows(ids, values, path)
    return EmbeddingMatrix(tuple(ids), values.astype(np.float32))


def _load_tsv(path: Path) -> EmbeddingMatrix:
    ids: list[str] = []
    rows: list[list[float]] = []
    dims = None
    with path.open("r", encoding="utf-8") as handle:
        for row, line in enumerate(handle):
            line = line.rstrip("\n").rstrip("\r")
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError("expected 'id<TAB>values'", path, row)
            id_, text = parts
            try:
                vec = [float(tok) for tok in text.split()]
            except ValueError as exc:
                raise FormatError(f"bad float ({exc})", path, row) from None
            if dims is None:
                dims = len(vec)
            if len(vec) != dims or not vec:
                raise FormatError(f"row has {len(vec)} values, expected {dims}", path, row)
            ids.append(id_)
            rows.append(vec)
    if dims is None:
        raise FormatError("empty TSV file; dimensionality cannot be inferred", path)
    values = np.asarray(rows, dtype=np.float64)
    _check_rows(ids, values, path)
    return EmbeddingMatrix(tuple(ids), values.astype(np.float32))


def _check_rows(ids: list[str], values: np.ndarray, path: Path) -> None:
    # re-validated by EmbeddingMatrix, but here the error carries the file path
    seen: set[str] = set()
    for row, id_ in enumerate(ids):
        if not id_:
            raise FormatError("empty id", path, row)
        if id_ in seen:
            raise FormatError(f"duplicate id {id_!r}", path, row)
        seen.add(id_)
    with np.errstate(over="ignore"):
        finite = np.isfinite(values.astype(np.float32)).all(axis=1)
    if not finite.all():
        raise FormatError("non-finite value", path, int(np.flatnonzero(~finite)[0]))


def save_embeddings(matrix: EmbeddingMatrix, path, format: Format | None = None) -> None:
    path = Path(path)
    format = format or _guess_format(path)
    if format == "binary":
        payload = encode_binary(matrix)
    elif format == "tsv":
        payload = _encode_tsv(matrix).encode("utf-8")
    else:
        raise ValueError(f"unknown embedding format {format!r}")
    atomic_write_bytes(path, payload)


def encode_binary(matrix: EmbeddingMatrix) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, matrix.n, matrix.dims)]
    for row, id_ in enumerate(matrix.ids):
        raw = id_.encode("utf-8")
        if b"\x00" in raw:
            raise FormatError("id contains NUL byte", row=row)
        parts.append(raw + b"\x00")
    parts.append(np.ascontiguousarray(matrix.values, dtype="<f4").tobytes())
    return b"".join(parts)


def _encode_tsv(matrix: EmbeddingMatrix) -> str:
    lines = []
    for row, id_ in enumerate(matrix.ids):
        if "\t" in id_ or "\n" in id_:
            raise FormatError("id contains TAB or newline", row=row)
        # 9 significant digits round-trip float32 exactly
        lines.append(id_ + "\t" + " ".join(format(float(v), ".9g") for v in matrix.values[row]))
    return "".join(line + "\n" for line in lines)


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see partial output."""
    atomic_write_many({Path(path): payload})


def atomic_write_many(files: dict) -> None:
    """Stage every payload in a temp file first; rename only once all writes succeeded.

    If a rename fails part-way, targets already replaced in this call are restored
    (or removed when they did not exist before), so the set is written all-or-nothing.
    """
    staged: list[tuple[str, Path]] = []
    done: list[tuple[Path, str | None]] = []  # (target, backup of previous content)
    try:
        for path, payload in files.items():
            path = Path(path)
            fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
            staged.append((tmp, path))
            with os.fdopen(fd, "wb") as handle:
                handle.write(payload)
        for tmp, path in staged:
            backup = None
            if path.exists():
                fd, backup = tempfile.mkstemp(prefix=f".{path.name}.old.", dir=path.parent)
                os.close(fd)
                os.replace(path, backup)
            done.append((path, backup))
            os.replace(tmp, path)
    except BaseException:
        for path, backup in reversed(done):
            try:
                if backup is not None:
                    os.replace(backup, path)
                elif path.exists():
                    path.unlink()
            except OSError:
                pass
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)
        raise
    for _, backup in done:
        if backup is not None and os.path.exists(backup):
            os.unlink(backup)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# normalization


def normalize(matrix: EmbeddingMatrix, zero_policy: Literal["error", "skip"] = "error") -> EmbeddingMatrix:
    """L2-normalize each row (64-bit arithmetic, stored back as float32).

    With ``zero_policy="skip"`` zero rows are dropped; use :func:`normalize_with_report`
    to also get the ids that were dropped.
    """
    return normalize_with_report(matrix, zero_policy)[0]


def normalize_with_report(
    matrix: EmbeddingMatrix, zero_policy: Literal["error", "skip"] = "error"
) -> tuple[EmbeddingMatrix, list[str]]:
    if zero_policy not in ("error", "skip"):
        raise ValueError(f"unknown zero_policy {zero_policy!r}")
    values = matrix.values.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", values, values))
    zero = norms == 0.0
    zero_ids = [matrix.ids[i] for i in np.flatnonzero(zero)]
    if zero_ids and zero_policy == "error":
        raise ZeroNormError(f"zero-norm row(s): {', '.join(map(repr, zero_ids[:5]))}", zero_ids)
    keep = np.flatnonzero(~zero)
    unit = values[keep] / norms[keep, None]
    ids = tuple(matrix.ids[i] for i in keep)
    return EmbeddingMatrix(ids, unit.astype(np.float32), normalized=True), zero_ids


def unit_rows(values: np.ndarray, ids=None) -> np.ndarray:
    """Float64 row-normalized copy of ``values``; raises on zero rows."""
    values = np.asarray(values, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", values, values))
    if (norms == 0).any():
        rows = np.flatnonzero(norms == 0)
        names = [ids[r] for r in rows] if ids is not None else [str(r) for r in rows]
        raise ZeroNormError(f"zero-norm row(s): {', '.join(names[:5])}", names)
    return values / norms[:, None]


# ---------------------------------------------------------------------------
# sidecar TSV files


def _data_lines(path: Path):
    with Path(path).open("r", encoding="utf-8") as handle:
        for row, line in enumerate(handle):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            yield row, line.split("\t")


def _parse_gain(text: str, path, row: int) -> float:
    try:
        gain = float(text)
    except ValueError:
        raise FormatError(f"bad gain {text!r}", path, row) from None
    if not math.isfinite(gain) or gain < 0:
        raise FormatError(f"gain must be finite and >= 0, got {text}", path, row)
    return gain


def load_qrels(path) -> RelevanceSet:
    """Read ``query_id<TAB>doc_id[<TAB>gain]`` lines; gain defaults to 1."""
    entries: dict[str, list[tuple[str, float]]] = {}
    seen: set[tuple[str, str]] = set()
    for row, parts in _data_lines(path):
        if len(parts) not in (2, 3):
            raise FormatError("expected 'query_id<TAB>doc_id[<TAB>gain]'", path, row)
        qid, did = parts[0], parts[1]
        if not qid or not did:
            raise FormatError("empty id", path, row)
        gain = _parse_gain(parts[2], path, row) if len(parts) == 3 else 1.0
        if (qid, did) in seen:
            raise FormatError(f"duplicate pair ({qid!r}, {did!r})", path, row)
        seen.add((qid, did))
        entries.setdefault(qid, []).append((did, gain))
    return RelevanceSet(entries)


def load_listings(path, queries: EmbeddingMatrix, docs: EmbeddingMatrix) -> list[Listing]:
    """Read ``listing_id<TAB>doc_id<TAB>position<TAB>gain`` lines.

    The query vector of a listing is looked up in ``queries`` under the listing id;
    candidates are ordered by position. Listings keep first-appearance order.
    """
    raw: dict[str, list[tuple[int, str, float]]] = {}
    for row, parts in _data_lines(path):
        if len(parts) != 4:
            raise FormatError("expected 'listing_id<TAB>doc_id<TAB>position<TAB>gain'", path, row)
        lid, did, pos_text, gain_text = parts
        try:
            pos = int(pos_text)
        except ValueError:
            raise FormatError(f"bad position {pos_text!r}", path, row) from None
        if not queries.has(lid):
            raise UnknownIdError(f"{path}: row {row}: listing {lid!r} has no query embedding")
        if not docs.has(did):
            raise UnknownIdError(f"{path}: row {row}: unknown doc id {did!r}")
        entries = raw.setdefault(lid, [])
        if any(p == pos for p, _, _ in entries):
            raise FormatError(f"duplicate position {pos} in listing {lid!r}", path, row)
        entries.append((pos, did, _parse_gain(gain_text, path, row)))
    listings = []
    for lid, entries in raw.items():
        entries.sort(key=lambda e: e[0])
        doc_ids = tuple(d for _, d, _ in entries)
        rows = docs.values[[docs.row_of(d) for d in doc_ids]]
        listings.append(Listing(lid, queries.vector(lid), doc_ids, rows, tuple(g for _, _, g in entries)))
    return listings


def load_triplet_records(path) -> list[TripletRecord]:
    records = []
    seen: set[str] = set()
    for row, parts in _data_lines(path):
        if len(parts) != 4 or not all(parts):
            raise FormatError("expected 'triplet_id<TAB>anchor_id<TAB>positive_id<TAB>negative_id'", path, row)
        if parts[0] in seen:
            raise FormatError(f"duplicate triplet id {parts[0]!r}", path, row)
        seen.add(parts[0])
        records.append(TripletRecord(*parts))
    return records


def resolve_triplets(records: list[TripletRecord], matrix: EmbeddingMatrix) -> TripletSet:
    ids = tuple(r.triplet_id for r in records)

    def gather(attr: str) -> EmbeddingMatrix:
        rows = [matrix.row_of(getattr(r, attr)) for r in records]
        return matrix.take(rows, ids)

    return TripletSet(gather("anchor_id"), gather("positive_id"), gather("negative_id"))


def load_triplets(path, matrix: EmbeddingMatrix) -> TripletSet:
    return resolve_triplets(load_triplet_records(path), matrix)


def write_triplet_records(path, records: Iterable[TripletRecord], header: str = "") -> None:
    body = "".join(f"{r.triplet_id}\t{r.anchor_id}\t{r.positive_id}\t{r.negative_id}\n" for r in records)
    atomic_write_text(path, header + body)
