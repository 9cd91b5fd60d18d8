"""Four-stage late-interaction search over a compressed index.

1. candidate generation: passages under the top-nprobe centroids of each query token
2. centroid interaction over pruned centroids, keep ndocs
3. centroid interaction over all centroids, keep ceil(ndocs / 4)
4. residual decompression and exact MaxSim, keep k

All rankings use the total order (score desc, passage id asc).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .codec import build_lut, decompress_ranges, weight_table
from .core import (
    CandidateSet,
    CentroidSet,
    CompressedIndex,
    DimensionMismatch,
    InvertedList,
    QueryMatrix,
    SearchParams,
    validate_query,
)
from .kernels import centroid_maxsim, maxsim_embeddings

STAGE_TIMERS = ("candidate_generation", "filtering", "lookup", "decompression", "scoring")


@dataclass(frozen=True)
class CentroidScoreTable:
    S: np.ndarray               # (K, |Q|) float32
    per_centroid_max: np.ndarray

    @property
    def num_centroids(self) -> int:
        return self.S.shape[0]


@dataclass
class StageTrace:
    """Per-query counters and wall times (milliseconds) for one search."""

    stage1: int = 0
    stage2_out: int = 0
    stage3_out: int = 0
    decompressed: int = 0
    result: int = 0
    stage2_rows: int = 0
    stage3_rows: int = 0
    decompressed_tokens: int = 0
    centroid_products: int = 0
    timings: Dict[str, float] = field(default_factory=lambda: dict.fromkeys(STAGE_TIMERS, 0.0))
    total_ms: float = 0.0


def compute_centroid_scores(q: QueryMatrix, centroids: CentroidSet) -> CentroidScoreTable:
    if q.dim != centroids.dim:
        raise DimensionMismatch(f"query dim {q.dim} != centroid dim {centroids.dim}")
    S = np.ascontiguousarray(centroids.data @ q.data.T, dtype=np.float32)
    S.flags.writeable = False
    return CentroidScoreTable(S, S.max(axis=1))


def top_centroids(table: CentroidScoreTable, nprobe: int) -> np.ndarray:
    """(nprobe, |Q|) centroid ids, best first per query token; lower id wins ties."""
    order = np.argsort(-table.S, axis=0, kind="stable")
    return order[:nprobe]


def generate_candidates(table: CentroidScoreTable, ivf: InvertedList, nprobe: int,
                        num_passages: Optional[int] = None) -> CandidateSet:
    K = table.num_centroids
    if not 1 <= nprobe <= K:
        raise ValueError(f"nprobe must lie in [1, {K}], got {nprobe}")
    probed = np.unique(top_centroids(table, nprobe))
    lo = ivf.offsets[probed].astype(np.int64)
    hi = ivf.offsets[probed + 1].astype(np.int64)
    if num_passages is None:
        num_passages = int(ivf.postings.max()) + 1 if len(ivf.postings) else 0
    seen = np.zeros(num_passages, dtype=np.bool_)
    for a, b in zip(lo, hi):
        seen[ivf.postings[a:b]] = True
    return CandidateSet(np.flatnonzero(seen).astype(np.uint32))


def prune_centroids(table: CentroidScoreTable, t_cs: float) -> np.ndarray:
    return table.per_centroid_max >= np.float32(t_cs)


def centroid_interaction(candidates: CandidateSet, codes: np.ndarray, doclens: np.ndarray,
                         table: CentroidScoreTable, mask: Optional[np.ndarray] = None,
                         offsets: Optional[np.ndarray] = None,
                         threads: Optional[int] = None, trace_rows: Optional[list] = None) -> CandidateSet:
    """Approximate MaxSim with every token replaced by its centroid's score row.

    With a mask, tokens on masked-out centroids are skipped; passages left
    with no tokens score 0.
    """
    pids = candidates.passage_ids.astype(np.int64)
    if offsets is None:
        offsets = np.zeros(len(doclens) + 1, np.int64)
        np.cumsum(doclens, out=offsets[1:])
    starts = offsets[pids]
    lens = np.asarray(doclens, dtype=np.int64)[pids]
    scores, rows = centroid_maxsim(table.S, np.asarray(codes), starts, lens, mask, threads)
    if trace_rows is not None:
        trace_rows.append(int(rows.sum()))
    return CandidateSet(candidates.passage_ids, scores)


def select_top(scored: CandidateSet, n: int) -> CandidateSet:
    if n < 1:
        raise ValueError("n must be >= 1")
    ids = scored.passage_ids
    scores = scored.scores
    if len(ids) > n:
        # everything strictly above the n-th best score, plus enough of the ties
        thresh = np.partition(scores, len(scores) - n)[len(scores) - n]
        above = np.flatnonzero(scores > thresh)
        tied = np.flatnonzero(scores == thresh)
        tied = tied[np.argsort(ids[tied], kind="stable")][: n - len(above)]
        keep = np.concatenate([above, tied])
        ids, scores = ids[keep], scores[keep]
    order = np.lexsort((ids, -scores.astype(np.float64)))
    return CandidateSet(ids[order], scores[order])


def gather_tokens(index: CompressedIndex, pids: np.ndarray):
    """Source token start and length for each passage id."""
    pids = np.asarray(pids, dtype=np.int64)
    return index.offsets[pids], index.doclens[pids].astype(np.int64)


def rank_final(candidates: CandidateSet, index: CompressedIndex, q: QueryMatrix, k: int,
               threads: Optional[int] = None, trace: Optional[StageTrace] = None) -> CandidateSet:
    """Decompress only the given passages, score them exactly, keep the top k."""
    trace = trace if trace is not None else StageTrace()
    t0 = time.perf_counter()
    pids = candidates.passage_ids
    starts, lens = gather_tokens(index, pids)
    t1 = time.perf_counter()
    wt = weight_table(index.quantizer, build_lut(index.nbits))
    emb, offsets = decompress_ranges(index.centroids.data, index.codes, index.residuals, wt,
                                     starts, lens, threads=threads)
    t2 = time.perf_counter()
    scores = maxsim_embeddings(q, emb, offsets, threads)
    out = select_top(CandidateSet(pids, scores), k)
    t3 = time.perf_counter()
    trace.decompressed = len(pids)
    trace.decompressed_tokens = len(emb)
    trace.timings["lookup"] += (t1 - t0) * 1e3
    trace.timings["decompression"] += (t2 - t1) * 1e3
    trace.timings["scoring"] += (t3 - t2) * 1e3
    return out


def stage3_width(params: SearchParams) -> int:
    return math.ceil(params.ndocs / 4)


def search(q: QueryMatrix, index: CompressedIndex, params: SearchParams,
           threads: Optional[int] = None, filtering: bool = True):
    """Run the full pipeline for one query; returns ``(ranked CandidateSet, StageTrace)``.

    ``filtering=False`` skips stages 2-3 and decompresses every stage-1
    candidate, which is the baseline the centroid stages are measured against.
    """
    validate_query(q, index.dim)
    params.check_against(index.num_centroids)
    trace = StageTrace()
    t_start = time.perf_counter()

    table = compute_centroid_scores(q, index.centroids)
    trace.centroid_products += 1
    cands = generate_candidates(table, index.ivf, params.nprobe, index.num_passages)
    trace.stage1 = len(cands)
    t1 = time.perf_counter()
    trace.timings["candidate_generation"] = (t1 - t_start) * 1e3
    if len(cands) == 0:
        trace.total_ms = (time.perf_counter() - t_start) * 1e3
        return CandidateSet.empty(), trace

    if filtering:
        rows: list = []
        mask = prune_centroids(table, params.t_cs)
        s2 = centroid_interaction(cands, index.codes, index.doclens, table, mask,
                                  offsets=index.offsets, threads=threads, trace_rows=rows)
        s2 = select_top(s2, params.ndocs)
        s3 = centroid_interaction(s2, index.codes, index.doclens, table, None,
                                  offsets=index.offsets, threads=threads, trace_rows=rows)
        s3 = select_top(s3, stage3_width(params))
        trace.stage2_out, trace.stage3_out = len(s2), len(s3)
        trace.stage2_rows, trace.stage3_rows = rows
        final_in = s3
    else:
        final_in = cands
    trace.timings["filtering"] = (time.perf_counter() - t1) * 1e3

    result = rank_final(final_in, index, q, params.k, threads, trace)
    trace.result = len(result)
    trace.total_ms = (time.perf_counter() - t_start) * 1e3
    return result, trace


def centroid_only_ranking(q: QueryMatrix, index: CompressedIndex, nprobe: Optional[int] = None,
                          threads: Optional[int] = None) -> CandidateSet:
    """Rank stage-1 candidates by unpruned centroid interaction alone (no residuals)."""
    validate_query(q, index.dim)
    table = compute_centroid_scores(q, index.centroids)
    nprobe = nprobe or index.num_centroids
    cands = generate_candidates(table, index.ivf, nprobe, index.num_passages)
    if len(cands) == 0:
        return CandidateSet.empty()
    scored = centroid_interaction(cands, index.codes, index.doclens, table, None,
                                  offsets=index.offsets, threads=threads)
    return select_top(scored, len(scored))


def exhaustive_search(q: QueryMatrix, index: CompressedIndex, k: int,
                      threads: Optional[int] = None) -> CandidateSet:
    """Exact MaxSim over every decompressed non-empty passage."""
    validate_query(q, index.dim)
    pids = np.flatnonzero(index.doclens > 0).astype(np.uint32)
    if len(pids) == 0:
        return CandidateSet.empty()
    return rank_final(CandidateSet(pids), index, q, k, threads)
