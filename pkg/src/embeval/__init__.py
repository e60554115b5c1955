"""Evaluate, diagnose and contrastively tune precomputed sentence-embedding spaces."""

from embeval.errors import EmbevalError, FormatError, ZeroNormError
from embeval.store import (
    EmbeddingMatrix,
    Listing,
    RelevanceSet,
    TripletSet,
    load_embeddings,
    normalize,
    save_embeddings,
)

__version__ = "0.1.0"

__all__ = [
    "EmbevalError",
    "FormatError",
    "ZeroNormError",
    "EmbeddingMatrix",
    "Listing",
    "RelevanceSet",
    "TripletSet",
    "load_embeddings",
    "normalize",
    "save_embeddings",
]
