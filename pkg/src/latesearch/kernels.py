"""Padding-free MaxSim over packed ragged layouts.

Scores for many passages are stored as one concatenated (T, |Q|) matrix plus
per-passage row offsets. Each worker keeps a single length-|Q| running-max
accumulator, so auxiliary memory never depends on the longest passage.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .core import DimensionMismatch, LateSearchError, QueryMatrix
from .parallel import parallel_range, workers_for


class EmptyPassageRange(LateSearchError):
    pass


@dataclass(frozen=True)
class PackedScores:
    data: np.ndarray     # (T, |Q|) float32
    offsets: np.ndarray  # (P+1,) int64

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        offsets = np.ascontiguousarray(self.offsets, dtype=np.int64)
        if data.ndim != 2 or data.shape[1] < 1:
            raise DimensionMismatch(f"scores must be (T, |Q|) with |Q| >= 1, got {data.shape}")
        if offsets.ndim != 1 or len(offsets) < 1 or offsets[0] != 0 or offsets[-1] != data.shape[0]:
            raise DimensionMismatch("offsets must start at 0 and end at T")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "offsets", offsets)

    @property
    def num_passages(self) -> int:
        return len(self.offsets) - 1


@numba.njit(nogil=True, cache=True)
def _maxsim_rows(scores, offsets, start, stop, acc, out):
    nq = scores.shape[1]
    for p in range(start, stop):
        lo = offsets[p]
        hi = offsets[p + 1]
        for i in range(nq):
            acc[i] = scores[lo, i]
        for t in range(lo + 1, hi):
            for i in range(nq):
                v = scores[t, i]
                if v > acc[i]:
                    acc[i] = v
        s = 0.0  # float64 sum, rounded once on store
        for i in range(nq):
            s += acc[i]
        out[p] = s


@numba.njit(nogil=True, cache=True)
def _centroid_maxsim(table, codes, starts, lens, keep, use_mask, start, stop, acc, out, rows):
    """MaxSim over rows table[codes[t]] for each passage's tokens, gathered on the fly.

    Masked-out tokens are skipped; a passage with no surviving token scores 0.
    rows[p] receives the number of rows that passage contributed.
    """
    nq = table.shape[1]
    for p in range(start, stop):
        lo = starts[p]
        hi = lo + lens[p]
        n = 0
        for t in range(lo, hi):
            c = codes[t]
            if use_mask and not keep[c]:
                continue
            if n == 0:
                for i in range(nq):
                    acc[i] = table[c, i]
            else:
                for i in range(nq):
                    v = table[c, i]
                    if v > acc[i]:
                        acc[i] = v
            n += 1
        s = 0.0  # float64 sum, rounded once on store
        if n > 0:
            for i in range(nq):
                s += acc[i]
        out[p] = s
        rows[p] = n


def maxsim_packed(scores: PackedScores, threads: Optional[int] = None) -> np.ndarray:
    """Per-passage sum over query tokens of the max score among that passage's rows."""
    offsets = scores.offsets
    if np.any(offsets[1:] <= offsets[:-1]):
        bad = int(np.flatnonzero(offsets[1:] <= offsets[:-1])[0])
        raise EmptyPassageRange(f"passage {bad} has an empty token range")
    n = scores.num_passages
    out = np.empty(n, dtype=np.float32)
    acc = np.empty((workers_for(n, threads), scores.data.shape[1]), dtype=np.float32)
    parallel_range(n, lambda lo, hi, w: _maxsim_rows(scores.data, offsets, lo, hi, acc[w], out), threads)
    return out


def maxsim_embeddings(
    q: QueryMatrix,
    embeddings: np.ndarray,
    offsets: np.ndarray,
    threads: Optional[int] = None,
) -> np.ndarray:
    """Late-interaction score of q against each passage of a packed embedding matrix."""
    embeddings = np.asarray(embeddings, dtype=np.float32)
    if embeddings.ndim != 2 or embeddings.shape[1] != q.dim:
        raise DimensionMismatch(f"passage dim {embeddings.shape[-1]} != query dim {q.dim}")
    rows = embeddings @ q.data.T
    return maxsim_packed(PackedScores(rows, offsets), threads)


def centroid_maxsim(
    table: np.ndarray,
    codes: np.ndarray,
    starts: np.ndarray,
    lens: np.ndarray,
    keep: Optional[np.ndarray] = None,
    threads: Optional[int] = None,
):
    """Fused gather + MaxSim for centroid interaction.

    Equivalent to ``maxsim_packed`` over the stacked rows ``table[codes[t]]``
    of each passage (minus masked tokens), without materializing them.
    Returns ``(scores, rows_per_passage)``.
    """
    n = len(starts)
    out = np.empty(n, dtype=np.float32)
    rows = np.empty(n, dtype=np.int64)
    use_mask = keep is not None
    keep_arr = np.ascontiguousarray(keep, dtype=np.bool_) if use_mask else np.ones(1, np.bool_)
    acc = np.empty((workers_for(n, threads), table.shape[1]), dtype=np.float32)
    starts = np.ascontiguousarray(starts, dtype=np.int64)
    lens = np.ascontiguousarray(lens, dtype=np.int64)

    def run(lo, hi, w):
        _centroid_maxsim(table, codes, starts, lens, keep_arr, use_mask, lo, hi, acc[w], out, rows)

    parallel_range(n, run, threads)
    return out, rows
