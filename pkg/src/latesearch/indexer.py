"""Offline index construction: k-means centroids, codes, residual quantizer, IVF."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .codec import SUPPORTED_BITS, pack_rows
from .core import (
    MAX_PASSAGES,
    CentroidSet,
    CompressedIndex,
    CorpusEmbeddings,
    DimensionMismatch,
    InvertedList,
    LateSearchError,
    QuantizerSpec,
)
from .parallel import chunk_bounds, parallel_range

logger = logging.getLogger(__name__)

ASSIGN_CHUNK = 8192
QUANTIZER_SAMPLE_CAP = 2**20
KMEANS_SAMPLE_CAP = 2**20
SEEDING_POOL_PER_CENTROID = 64


class TooFewPoints(LateSearchError):
    pass


class EmptyCorpus(LateSearchError):
    pass


class PackingUnsupported(LateSearchError):
    pass


@dataclass(frozen=True)
class IndexConfig:
    nbits: int = 2
    num_centroids: int = 0      # 0 -> auto_num_centroids
    kmeans_iters: int = 20
    sample_fraction: Optional[float] = None  # None -> min(1, 2^20 / N)
    rng_seed: int = 0

    def __post_init__(self):
        if self.nbits not in SUPPORTED_BITS:
            raise ValueError(f"nbits must be one of {SUPPORTED_BITS}, got {self.nbits}")
        if self.kmeans_iters < 1:
            raise ValueError("kmeans_iters must be >= 1")
        if self.num_centroids < 0:
            raise ValueError("num_centroids must be >= 0")
        if self.sample_fraction is not None and not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError("sample_fraction must lie in (0, 1]")
        if not 0 <= self.rng_seed < 2**64:
            raise ValueError("rng_seed must fit in 64 bits")

    def fraction_for(self, num_embeddings: int) -> float:
        if self.sample_fraction is not None:
            return self.sample_fraction
        return min(1.0, KMEANS_SAMPLE_CAP / num_embeddings)


def auto_num_centroids(num_embeddings: int) -> int:
    """Smallest power of two at or above sqrt(N), clamped to [1, N]."""
    if num_embeddings < 1:
        raise ValueError("num_embeddings must be >= 1")
    k = 1
    while k * k < num_embeddings:
        k *= 2
    return max(1, min(k, num_embeddings))


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def _nearest(x: np.ndarray, centroids: np.ndarray, threads: Optional[int] = None):
    """Argmax-cosine centroid per row (first index wins ties) and the winning score."""
    n = len(x)
    labels = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=np.float32)
    ct = np.ascontiguousarray(centroids.T)
    # fixed chunking keeps results independent of the thread count
    blocks = [(lo, min(lo + ASSIGN_CHUNK, n)) for lo in range(0, n, ASSIGN_CHUNK)]

    def run(lo_b, hi_b, _w):
        for lo, hi in blocks[lo_b:hi_b]:
            s = x[lo:hi] @ ct
            lab = np.argmax(s, axis=1)
            labels[lo:hi] = lab
            best[lo:hi] = s[np.arange(hi - lo), lab]

    parallel_range(len(blocks), run, threads, min_chunk=1)
    return labels, best


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    first = int(rng.integers(n))
    chosen = [first]
    # squared euclidean on unit vectors = 2 - 2 cos
    dist = np.maximum(2.0 - 2.0 * (x @ x[first]).astype(np.float64), 0.0)
    for _ in range(1, k):
        total = dist.sum()
        if total <= 0:
            # fewer distinct points than k; fall back to unchosen indices
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rest[rng.integers(len(rest))])
        else:
            nxt = int(np.searchsorted(np.cumsum(dist), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        chosen.append(nxt)
        np.minimum(dist, np.maximum(2.0 - 2.0 * (x @ x[nxt]).astype(np.float64), 0.0), out=dist)
    return x[chosen].astype(np.float64)


def _cluster_means(x: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    sums = np.empty((k, x.shape[1]), dtype=np.float64)
    for j in range(x.shape[1]):
        sums[:, j] = np.bincount(labels, weights=x[:, j], minlength=k)
    return sums


def _repair_empty(x, centroids, labels, best):
    """Move each empty cluster's centroid onto the point farthest from its own centroid."""
    counts = np.bincount(labels, minlength=len(centroids))
    empty = np.flatnonzero(counts == 0)
    if empty.size == 0:
        return False
    order = np.lexsort((np.arange(len(x)), best))  # worst-fit first, lowest index on ties
    pos = 0
    for c in empty:
        while pos < len(order) and counts[labels[order[pos]]] <= 1:
            pos += 1
        if pos == len(order):
            break
        p = order[pos]
        counts[labels[p]] -= 1
        labels[p] = c
        counts[c] = 1
        best[p] = 1.0
        centroids[c] = x[p]
        pos += 1
    return True


def train_centroids(sample: np.ndarray, K: int, iters: int = 20, seed: int = 0,
                    threads: Optional[int] = None) -> CentroidSet:
    """Spherical Lloyd's k-means with k-means++ seeding.

    Centroids are renormalized after every update. Empty clusters are
    repaired by stealing the worst-fit point, and a final repair pass leaves
    every cluster non-empty over ``sample`` whenever it has K distinct rows.
    """
    x = np.ascontiguousarray(sample, dtype=np.float32)
    n = len(x)
    if n < K:
        raise TooFewPoints(f"{n} training points for {K} centroids")
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(seed)
    pool_size = min(n, SEEDING_POOL_PER_CENTROID * K)
    pool = x if pool_size == n else x[np.sort(rng.choice(n, pool_size, replace=False))]
    centroids = _normalize_rows(_kmeanspp(pool, K, rng)).astype(np.float32)

    for _ in range(iters):
        labels, best = _nearest(x, centroids, threads)
        _repair_empty(x, centroids, labels, best)
        sums = _cluster_means(x, labels, K)
        norms = np.linalg.norm(sums, axis=1)
        ok = norms > 1e-12
        centroids[ok] = (sums[ok] / norms[ok, None]).astype(np.float32)

    for _ in range(K):
        labels, best = _nearest(x, centroids, threads)
        if not _repair_empty(x, centroids, labels, best):
            break
    centroids = _normalize_rows(centroids.astype(np.float64)).astype(np.float32)
    return CentroidSet(centroids)


def assign_codes(corpus: CorpusEmbeddings, centroids: CentroidSet,
                 threads: Optional[int] = None) -> np.ndarray:
    if corpus.dim != centroids.dim:
        raise DimensionMismatch(f"corpus dim {corpus.dim} != centroid dim {centroids.dim}")
    labels, _ = _nearest(corpus.data, centroids.data, threads)
    return labels.astype(np.uint32)


def _residual_sample(corpus: CorpusEmbeddings, centroids: CentroidSet, codes: np.ndarray,
                     rng: np.random.Generator) -> np.ndarray:
    n, d = corpus.data.shape
    take = min(n, max(1, math.ceil(QUANTIZER_SAMPLE_CAP / d)))
    rows = np.arange(n) if take == n else np.sort(rng.choice(n, take, replace=False))
    res = corpus.data[rows] - centroids.data[codes[rows]]
    return res.reshape(-1)


def train_quantizer(corpus: CorpusEmbeddings, centroids: CentroidSet, codes: np.ndarray,
                    b: int, seed: int = 0) -> QuantizerSpec:
    """Quantile cutoffs and per-bucket mean weights of pooled residual components.

    Cutoff i is the (i / 2^b)-quantile under numpy's ``averaged_inverted_cdf``
    rule: nearest rank, averaging the two neighbours when the rank falls
    exactly on a boundary.
    """
    if len(codes) != corpus.num_embeddings:
        raise DimensionMismatch("codes do not match corpus rows")
    values = _residual_sample(corpus, centroids, codes, np.random.default_rng([seed, 1]))
    return fit_quantizer(values, b)


def fit_quantizer(values: np.ndarray, b: int) -> QuantizerSpec:
    nb = 1 << b
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("no residual components to fit")
    if values.min() == values.max():
        logger.warning("degenerate residuals: every component equals %g", values[0])
        v = float(values[0])
        return QuantizerSpec(np.full(nb - 1, v), np.full(nb, v))
    qs = np.arange(1, nb) / nb
    cutoffs = np.quantile(values, qs, method="averaged_inverted_cdf").astype(np.float32)
    buckets = np.searchsorted(cutoffs, values.astype(np.float32), side="right")
    counts = np.bincount(buckets, minlength=nb)
    sums = np.bincount(buckets, weights=values, minlength=nb)
    # an empty bucket sits between equal cutoffs, so its interval is a point
    edges = np.concatenate([[values.min()], cutoffs, [values.max()]])
    weights = np.where(counts > 0, sums / np.maximum(counts, 1), edges[:-1])
    return QuantizerSpec(cutoffs, weights)


def build_inverted_list(codes: np.ndarray, doclens: np.ndarray, K: int) -> InvertedList:
    codes = np.asarray(codes, dtype=np.int64)
    doclens = np.asarray(doclens, dtype=np.int64)
    if int(doclens.sum()) != len(codes):
        raise DimensionMismatch("sum(doclens) != number of codes")
    pids = np.repeat(np.arange(len(doclens), dtype=np.int64), doclens)
    # unique (centroid, passage) pairs, sorted by centroid then passage
    keys = np.unique(codes * len(doclens) + pids) if len(codes) else np.empty(0, np.int64)
    cents = keys // max(1, len(doclens))
    postings = (keys - cents * len(doclens)).astype(np.uint32)
    offsets = np.zeros(K + 1, dtype=np.uint64)
    np.cumsum(np.bincount(cents, minlength=K), out=offsets[1:])
    return InvertedList(offsets, postings)


def compress(corpus: CorpusEmbeddings, centroids: CentroidSet, codes: np.ndarray,
             quant: QuantizerSpec, threads: Optional[int] = None) -> np.ndarray:
    """Packed residual bytes for every token, computed in fixed-size blocks."""
    n, d = corpus.data.shape
    b = quant.nbits
    out = np.empty((n, b * d // 8), dtype=np.uint8)
    blocks = chunk_bounds(n, max(1, math.ceil(n / ASSIGN_CHUNK)))

    def run(lo_b, hi_b, _w):
        for lo, hi in blocks[lo_b:hi_b]:
            res = corpus.data[lo:hi] - centroids.data[codes[lo:hi]]
            out[lo:hi] = pack_rows(quant.bucketize(res), b)

    if n:
        parallel_range(len(blocks), run, threads, min_chunk=1)
    return out


def build_index(corpus: CorpusEmbeddings, cfg: IndexConfig = IndexConfig(),
                threads: Optional[int] = None) -> CompressedIndex:
    if corpus.num_passages == 0 or corpus.num_embeddings == 0:
        raise EmptyCorpus("cannot index an empty corpus")
    if corpus.num_passages >= MAX_PASSAGES:
        raise EmptyCorpus("passage IDs must fit in 32 bits")
    per = 8 // cfg.nbits
    if corpus.dim % per:
        raise PackingUnsupported(f"dim {corpus.dim} is not divisible by {per} (nbits={cfg.nbits})")

    n = corpus.num_embeddings
    K = cfg.num_centroids or auto_num_centroids(n)
    rng = np.random.default_rng([cfg.rng_seed, 0])
    take = max(K, min(n, math.ceil(cfg.fraction_for(n) * n)))
    if take > n:
        raise TooFewPoints(f"{n} embeddings for {K} centroids")
    rows = np.arange(n) if take == n else np.sort(rng.choice(n, take, replace=False))
    logger.info("training %d centroids on %d of %d embeddings", K, take, n)
    centroids = train_centroids(corpus.data[rows], K, cfg.kmeans_iters, seed=cfg.rng_seed, threads=threads)
    codes = assign_codes(corpus, centroids, threads)
    quant = train_quantizer(corpus, centroids, codes, cfg.nbits, seed=cfg.rng_seed)
    residuals = compress(corpus, centroids, codes, quant, threads)
    ivf = build_inverted_list(codes, corpus.doclens, K)
    metadata = dict(
        kmeans_iters=cfg.kmeans_iters,
        sample_fraction=cfg.fraction_for(n),
        rng_seed=cfg.rng_seed,
    )
    return CompressedIndex(centroids, codes, residuals, corpus.doclens, ivf, quant, metadata)
