"""Desk-scale analyses: centroid-only self-recall and centroid score distributions."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .core import CompressedIndex, QueryMatrix, SearchParams, validate_query
from .pipeline import (
    STAGE_TIMERS,
    centroid_only_ranking,
    compute_centroid_scores,
    exhaustive_search,
    search,
)

DEPTHS = (10, 100, 1000)
KPRIME_FACTORS = (1, 2, 5, 10, 20, 50, 100)


def kprime_grid(k: int, num_passages: int) -> List[int]:
    grid = {min(k * f, num_passages) for f in KPRIME_FACTORS}
    grid.add(num_passages)
    return sorted(g for g in grid if g >= k)


def self_recall(queries: Sequence[QueryMatrix], index: CompressedIndex,
                nprobe: Optional[int] = None, depths: Sequence[int] = DEPTHS,
                threads: Optional[int] = None) -> List[tuple]:
    """Rows (k, k', recall): mean fraction of the exact top-k found in the centroid-only top-k'."""
    n_live = int(np.count_nonzero(index.doclens))
    depths = [k for k in depths if 1 <= k <= n_live]
    if not depths or not queries:
        return []
    deepest = max(depths)
    per_query = []
    for q in queries:
        exact = exhaustive_search(q, index, deepest, threads).passage_ids
        approx = centroid_only_ranking(q, index, nprobe, threads).passage_ids
        per_query.append((exact, approx))

    rows = []
    for k in depths:
        for kp in kprime_grid(k, n_live):
            vals = []
            for exact, approx in per_query:
                top = exact[:k]
                vals.append(np.isin(top, approx[:kp]).sum() / len(top))
            rows.append((k, kp, float(np.mean(vals))))
    return rows


def centroid_cdf(q: QueryMatrix, index: CompressedIndex) -> np.ndarray:
    """(K, 2) array of sorted per-centroid max scores and their empirical CDF."""
    validate_query(q, index.dim)
    scores = np.sort(compute_centroid_scores(q, index.centroids).per_centroid_max)
    cdf = np.arange(1, len(scores) + 1, dtype=np.float64) / len(scores)
    return np.column_stack([scores.astype(np.float64), cdf])


@dataclass
class LatencyBreakdown:
    stages: Dict[str, float] = field(default_factory=dict)  # ms, min over trials of per-query means
    total: float = 0.0
    trials: int = 0
    num_queries: int = 0
    max_decompressed: int = 0
    mean_stage1: float = 0.0

    def as_dict(self) -> dict:
        return {
            "stages_ms": self.stages,
            "stage_sum_ms": sum(self.stages.values()),
            "total_ms": self.total,
            "trials": self.trials,
            "num_queries": self.num_queries,
            "max_decompressed_passages": self.max_decompressed,
            "mean_stage1_candidates": self.mean_stage1,
        }


def benchmark(queries: Sequence[QueryMatrix], index: CompressedIndex, params: SearchParams,
              trials: int = 3, threads: Optional[int] = None, filtering: bool = True) -> LatencyBreakdown:
    """Average per-query latency per trial; report the minimum average over trials.

    Each stage and the end-to-end total are minimized independently, so the
    reported stage sum never exceeds the reported total.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    per_trial = []
    max_dec, stage1 = 0, []
    for _ in range(trials):
        sums = dict.fromkeys(STAGE_TIMERS, 0.0)
        total = 0.0
        for q in queries:
            _, tr = search(q, index, params, threads, filtering=filtering)
            for key in STAGE_TIMERS:
                sums[key] += tr.timings[key]
            total += tr.total_ms
            max_dec = max(max_dec, tr.decompressed)
            stage1.append(tr.stage1)
        n = max(1, len(queries))
        per_trial.append(({k: v / n for k, v in sums.items()}, total / n))
    best_stages = {k: min(t[0][k] for t in per_trial) for k in STAGE_TIMERS}
    best_total = min(t[1] for t in per_trial)
    return LatencyBreakdown(best_stages, best_total, trials, len(queries), max_dec,
                            statistics.fmean(stage1) if stage1 else 0.0)
