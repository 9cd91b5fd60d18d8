"""Shared domain types for the late-interaction engine.

Every array-backed type is immutable after construction: the numpy buffers are
marked read-only so a built or loaded index can be shared freely between
concurrent searchers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np

NORM_TOLERANCE = 1e-3
MAX_PASSAGES = 2**32


class LateSearchError(Exception):
    """Base class for every error raised by the engine."""


class DimensionMismatch(LateSearchError):
    pass


class NotNormalized(LateSearchError):
    def __init__(self, row: int, norm: float, what: str = "row"):
        self.row = row
        self.norm = norm
        super().__init__(f"{what} {row} has L2 norm {norm:.6f}, expected 1.0 +/- {NORM_TOLERANCE}")


class InvariantViolation(LateSearchError):
    pass


def _frozen(arr: np.ndarray, dtype) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=dtype)
    if out is arr and out.flags.writeable:
        out = out.copy()
    out.flags.writeable = False
    return out


def check_unit_rows(data: np.ndarray, tol: float = NORM_TOLERANCE, what: str = "row") -> None:
    """Raise NotNormalized for the first row whose L2 norm is off by more than tol."""
    if data.shape[0] == 0:
        return
    norms = np.sqrt(np.einsum("ij,ij->i", data, data, dtype=np.float64))
    bad = np.flatnonzero(np.abs(norms - 1.0) > tol)
    if bad.size:
        r = int(bad[0])
        raise NotNormalized(r, float(norms[r]), what)


def prefix_offsets(lengths: np.ndarray) -> np.ndarray:
    offsets = np.zeros(len(lengths) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    return offsets


@dataclass(frozen=True)
class QueryMatrix:
    """|Q| x d unit-norm token embeddings for one query."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or data.shape[0] < 1:
            raise DimensionMismatch(f"query must be a non-empty 2-D matrix, got shape {data.shape}")
        object.__setattr__(self, "data", _frozen(data, np.float32))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def validate_query(q: QueryMatrix, index_dim: int) -> None:
    if q.dim != index_dim:
        raise DimensionMismatch(f"query dim {q.dim} != index dim {index_dim}")
    check_unit_rows(q.data, what="query row")


@dataclass(frozen=True)
class CorpusEmbeddings:
    """Token embeddings of every passage, packed row-major in passage order."""

    data: np.ndarray
    doclens: np.ndarray
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        doclens = np.asarray(self.doclens)
        if data.ndim != 2:
            raise DimensionMismatch(f"corpus data must be 2-D, got shape {data.shape}")
        if doclens.ndim != 1:
            raise DimensionMismatch("doclens must be 1-D")
        if doclens.size and doclens.min() < 0:
            raise InvariantViolation("negative passage length")
        if int(doclens.sum()) != data.shape[0]:
            raise InvariantViolation(
                f"sum(doclens)={int(doclens.sum())} != embedding rows {data.shape[0]}"
            )
        if len(doclens) >= MAX_PASSAGES:
            raise InvariantViolation("corpora of 2^32 or more passages are unsupported")
        object.__setattr__(self, "data", _frozen(data, np.float32))
        object.__setattr__(self, "doclens", _frozen(doclens, np.int64))
        object.__setattr__(self, "passage_offsets", _frozen(prefix_offsets(self.doclens), np.int64))
        if self.validate:
            check_unit_rows(self.data, what="embedding row")

    @property
    def num_passages(self) -> int:
        return len(self.doclens)

    @property
    def num_embeddings(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def passage(self, pid: int) -> np.ndarray:
        return self.data[self.passage_offsets[pid]:self.passage_offsets[pid + 1]]


@dataclass(frozen=True)
class CentroidSet:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or data.shape[0] < 1:
            raise InvariantViolation(f"need at least one centroid, got shape {data.shape}")
        object.__setattr__(self, "data", _frozen(data, np.float32))
        check_unit_rows(self.data, what="centroid")

    @property
    def num_centroids(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class CompressedVector:
    """One token: its centroid ID plus b*d/8 bytes of packed bucket indices."""

    centroid_id: int
    residual: bytes


@dataclass(frozen=True)
class InvertedList:
    """Centroid -> sorted unique passage IDs, as a CSR pair."""

    offsets: np.ndarray
    postings: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "offsets", _frozen(self.offsets, np.uint64))
        object.__setattr__(self, "postings", _frozen(self.postings, np.uint32))

    @property
    def num_centroids(self) -> int:
        return len(self.offsets) - 1

    def passages(self, centroid: int) -> np.ndarray:
        return self.postings[int(self.offsets[centroid]):int(self.offsets[centroid + 1])]

    def check(self, num_passages: int) -> None:
        off = self.offsets
        if len(off) < 2 or off[0] != 0:
            raise InvariantViolation("ivf offsets must start at 0 and have K+1 entries")
        if np.any(off[1:] < off[:-1]):
            raise InvariantViolation("ivf offsets must be monotone non-decreasing")
        if int(off[-1]) != len(self.postings):
            raise InvariantViolation("ivf offsets final entry != number of postings")
        if len(self.postings) == 0:
            return
        if int(self.postings.max()) >= num_passages:
            raise InvariantViolation("ivf posting refers to a passage beyond num_passages")
        # strictly increasing inside each slice; slice starts are exempt
        steps = np.diff(self.postings.astype(np.int64)) > 0
        starts = off[1:-1].astype(np.int64)
        starts = starts[(starts > 0) & (starts < len(self.postings))]
        steps[starts - 1] = True
        if not steps.all():
            raise InvariantViolation("ivf postings must be strictly increasing within each centroid")


@dataclass(frozen=True)
class QuantizerSpec:
    """Bucket cutoffs and reconstruction weights for b-bit residual codes.

    A residual component x falls in bucket ``searchsorted(cutoffs, x, side="right")``,
    i.e. bucket i covers ``[cutoffs[i-1], cutoffs[i])``.
    """

    bucket_cutoffs: np.ndarray
    bucket_weights: np.ndarray

    def __post_init__(self):
        cut = _frozen(self.bucket_cutoffs, np.float32)
        w = _frozen(self.bucket_weights, np.float32)
        if len(w) != len(cut) + 1 or len(w) not in (2, 4, 16):
            raise InvariantViolation(f"expected 2^b weights and 2^b-1 cutoffs, got {len(w)} and {len(cut)}")
        if np.any(np.diff(cut) < 0):
            raise InvariantViolation("bucket cutoffs must be ascending")
        object.__setattr__(self, "bucket_cutoffs", cut)
        object.__setattr__(self, "bucket_weights", w)

    @property
    def nbits(self) -> int:
        return int(len(self.bucket_weights)).bit_length() - 1

    def bucketize(self, values: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.bucket_cutoffs, values, side="right").astype(np.uint8)


@dataclass(frozen=True)
class SearchParams:
    k: int = 10
    nprobe: int = 1
    t_cs: float = 0.5
    ndocs: int = 256

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.nprobe < 1:
            raise ValueError(f"nprobe must be >= 1, got {self.nprobe}")
        if self.ndocs < self.k:
            raise ValueError(f"ndocs ({self.ndocs}) must be >= k ({self.k})")
        if not -1.0 <= self.t_cs <= 1.0:
            raise ValueError(f"t_cs must lie in [-1, 1], got {self.t_cs}")

    def check_against(self, num_centroids: int) -> None:
        if self.nprobe > num_centroids:
            raise ValueError(f"nprobe ({self.nprobe}) exceeds number of centroids ({num_centroids})")

    @classmethod
    def for_k(cls, k: int, **overrides) -> "SearchParams":
        """Default stage widths keyed on the final depth."""
        if k <= 10:
            base = dict(nprobe=1, t_cs=0.5, ndocs=256)
        elif k <= 100:
            base = dict(nprobe=2, t_cs=0.45, ndocs=1024)
        else:
            base = dict(nprobe=4, t_cs=0.4, ndocs=4096)
        base["ndocs"] = max(base["ndocs"], 4 * k)
        base.update({key: v for key, v in overrides.items() if v is not None})
        return cls(k=k, **base)


@dataclass(frozen=True)
class CandidateSet:
    passage_ids: np.ndarray
    scores: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "passage_ids", _frozen(self.passage_ids, np.uint32))
        if self.scores is not None:
            scores = _frozen(self.scores, np.float32)
            if len(scores) != len(self.passage_ids):
                raise InvariantViolation("scores must parallel passage_ids")
            object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return len(self.passage_ids)

    @classmethod
    def empty(cls, with_scores: bool = True) -> "CandidateSet":
        return cls(np.empty(0, np.uint32), np.empty(0, np.float32) if with_scores else None)


@dataclass(frozen=True)
class CompressedIndex:
    centroids: CentroidSet
    codes: np.ndarray          # (num_embeddings,) uint32
    residuals: np.ndarray      # (num_embeddings, nbits*dim/8) uint8
    doclens: np.ndarray        # (num_passages,) uint32
    ivf: InvertedList
    quantizer: QuantizerSpec
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        # memmapped arrays from a lazy load are already read-only; don't copy them
        for name, dtype in (("codes", np.uint32), ("residuals", np.uint8), ("doclens", np.uint32)):
            arr = getattr(self, name)
            if not (isinstance(arr, np.memmap) and arr.dtype == dtype):
                object.__setattr__(self, name, _frozen(arr, dtype))
        object.__setattr__(self, "offsets", _frozen(prefix_offsets(self.doclens), np.int64))

    @property
    def dim(self) -> int:
        return self.centroids.dim

    @property
    def nbits(self) -> int:
        return self.quantizer.nbits

    @property
    def num_centroids(self) -> int:
        return self.centroids.num_centroids

    @property
    def num_passages(self) -> int:
        return len(self.doclens)

    @property
    def num_embeddings(self) -> int:
        return len(self.codes)

    def token(self, t: int) -> CompressedVector:
        return CompressedVector(int(self.codes[t]), bytes(self.residuals[t]))

    def check(self) -> None:
        """Re-verify the cross-array invariants; raises InvariantViolation."""
        d, b = self.dim, self.nbits
        if d % (8 // b):
            raise InvariantViolation(f"dim {d} not packable at {b} bits")
        if self.residuals.ndim != 2 or self.residuals.shape != (self.num_embeddings, b * d // 8):
            raise InvariantViolation("residuals shape must be (num_embeddings, b*d/8)")
        if int(np.sum(self.doclens, dtype=np.int64)) != self.num_embeddings:
            raise InvariantViolation("sum(doclens) != num_embeddings")
        if self.num_embeddings and int(self.codes.max()) >= self.num_centroids:
            raise InvariantViolation("centroid code out of range")
        if self.ivf.num_centroids != self.num_centroids:
            raise InvariantViolation("ivf has wrong number of centroids")
        self.ivf.check(self.num_passages)
