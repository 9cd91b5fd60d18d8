"""Late-interaction retrieval over a centroid + residual compressed index."""

from .core import (
    CandidateSet,
    CompressedIndex,
    CorpusEmbeddings,
    QueryMatrix,
    SearchParams,
)
from .indexer import IndexConfig, build_index
from .pipeline import exhaustive_search, search
from .storage import load_index, save_index

__version__ = "0.1.0"

__all__ = [
    "CandidateSet",
    "CompressedIndex",
    "CorpusEmbeddings",
    "IndexConfig",
    "QueryMatrix",
    "SearchParams",
    "build_index",
    "exhaustive_search",
    "load_index",
    "save_index",
    "search",
]
