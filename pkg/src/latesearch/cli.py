"""Command-line entry point: ``latesearch <command> ...``.

Exit codes: 0 ok, 1 user error (bad flags, bad inputs), 2 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Tuple

import numpy as np

from . import analysis, embedding_io, metrics, parallel, storage
from .core import LateSearchError, QueryMatrix, SearchParams
from .indexer import IndexConfig, build_index
from .pipeline import search

log = logging.getLogger("latesearch")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def load_queries(path: str, dim: int, query_doclens: str = None,
                 embed_seed: int = 0) -> Tuple[List[str], List[QueryMatrix]]:
    """Queries from JSONL text (embedded synthetically) or from an embedding file."""
    if path.endswith(".jsonl"):
        pairs = embedding_io.read_jsonl(path)
        return [qid for qid, _ in pairs], [embedding_io.embed_query(t, dim, embed_seed) for _, t in pairs]
    if not query_doclens:
        raise UsageError("binary query embeddings need --query-doclens")
    qs = embedding_io.load_query_embeddings(path, query_doclens)
    return [str(i) for i in range(len(qs))], qs


def _params(args, num_centroids: int) -> SearchParams:
    p = SearchParams.for_k(args.k, nprobe=args.nprobe, t_cs=args.tcs, ndocs=args.ndocs)
    p.check_against(num_centroids)
    return p


def cmd_embed(args) -> int:
    pairs = embedding_io.read_jsonl(args.input)
    corpus = embedding_io.embed_texts((t for _, t in pairs), args.dim, args.seed)
    embedding_io.write_embeddings(args.out_embeddings, corpus.data)
    embedding_io.write_doclens(args.out_doclens, corpus.doclens)
    if args.out_ids:
        Path(args.out_ids).write_text("".join(f"{pid}\n" for pid, _ in pairs), encoding="utf-8")
    print(f"embedded {corpus.num_passages} texts, {corpus.num_embeddings} tokens, dim {args.dim}")
    return 0


def cmd_synth(args) -> int:
    col = embedding_io.make_collection(
        args.passages, dim=args.dim, vocab_size=args.vocab, num_queries=args.queries, seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    embedding_io.write_embeddings(out / "corpus.emb", col.corpus.data)
    embedding_io.write_doclens(out / "corpus.doclens", col.corpus.doclens)
    embedding_io.write_embeddings(out / "queries.emb", np.concatenate([q.data for q in col.queries]))
    embedding_io.write_doclens(out / "queries.doclens", [q.rows for q in col.queries])
    with open(out / "qrels.tsv", "w", encoding="utf-8") as f:
        for i, p in enumerate(col.targets):
            f.write(f"{i}\t0\t{p}\t1\n")
    print(f"wrote {args.passages} passages and {args.queries} queries to {out}")
    return 0


def cmd_index(args) -> int:
    corpus = embedding_io.load_corpus(args.embeddings, args.doclens)
    cfg = IndexConfig(nbits=args.nbits, num_centroids=args.centroids, kmeans_iters=args.kmeans_iters,
                      rng_seed=args.seed)
    index = build_index(corpus, cfg, threads=args.threads)
    storage.save_index(index, args.out)
    m = storage.read_manifest(args.out)
    summary = {k: m[k] for k in ("dim", "nbits", "num_passages", "num_embeddings", "num_centroids", "rng_seed")}
    print(json.dumps(summary, sort_keys=True))
    return 0


def _run_queries(index, queries, params, threads, parallel_queries):
    if not parallel_queries:
        return [search(q, index, params, threads)[0] for q in queries]
    with ThreadPoolExecutor(max_workers=threads or parallel.get_num_threads()) as pool:
        return list(pool.map(lambda q: search(q, index, params, 1)[0], queries))


def cmd_search(args) -> int:
    index = storage.load_index(args.index, lazy=args.lazy)
    params = _params(args, index.num_centroids)
    qids, queries = load_queries(args.queries, index.dim, args.query_doclens, args.embed_seed)
    results = _run_queries(index, queries, params, args.threads, args.parallel_queries)
    with open(args.out, "w", encoding="utf-8", newline="") as f:
        for qid, res in zip(qids, results):
            for rank, (pid, score) in enumerate(zip(res.passage_ids, res.scores), 1):
                f.write(f"{qid}\t{rank}\t{int(pid)}\t{float(score):.6f}\n")
    return 0


def cmd_metrics(args) -> int:
    report = metrics.compute_metrics(metrics.read_results(args.results), metrics.read_qrels(args.qrels),
                                     args.cuts)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_selfrecall(args) -> int:
    index = storage.load_index(args.index, lazy=args.lazy)
    _, queries = load_queries(args.queries, index.dim, args.query_doclens, args.embed_seed)
    rows = analysis.self_recall(queries, index, nprobe=args.nprobe, threads=args.threads)
    with open(args.out, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["k", "kprime", "recall"])
        for k, kp, r in rows:
            w.writerow([k, kp, f"{r:.6f}"])
    return 0


def cmd_centroid_cdf(args) -> int:
    index = storage.load_index(args.index, lazy=args.lazy)
    qids, queries = load_queries(args.queries, index.dim, args.query_doclens, args.embed_seed)
    with open(args.out, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["query_id", "score", "cdf"])
        for qid, q in zip(qids, queries):
            for score, cdf in analysis.centroid_cdf(q, index):
                w.writerow([qid, f"{score:.6f}", f"{cdf:.6f}"])
    return 0


def cmd_bench(args) -> int:
    index = storage.load_index(args.index, lazy=args.lazy)
    params = _params(args, index.num_centroids)
    _, queries = load_queries(args.queries, index.dim, args.query_doclens, args.embed_seed)
    report = analysis.benchmark(queries, index, params, trials=args.trials, threads=args.threads,
                                filtering=not args.no_filter).as_dict()
    report["params"] = {"k": params.k, "nprobe": params.nprobe, "t_cs": params.t_cs, "ndocs": params.ndocs}
    report["threads"] = args.threads or parallel.get_num_threads()
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def _query_flags(p):
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True, help="queries.jsonl (text) or a query embedding file")
    p.add_argument("--query-doclens", help="per-query token counts for binary query embeddings")
    p.add_argument("--embed-seed", type=int, default=0, help="seed of the synthetic embedder for JSONL queries")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--lazy", action="store_true", help="memory-map token arrays instead of loading them")


def _search_flags(p):
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--nprobe", type=int)
    p.add_argument("--tcs", type=float)
    p.add_argument("--ndocs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="latesearch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("embed", help="embed JSONL texts with the synthetic embedder")
    p.add_argument("--input", required=True)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-embeddings", required=True)
    p.add_argument("--out-doclens", required=True)
    p.add_argument("--out-ids")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("synth", help="write a clustered synthetic corpus with queries and qrels")
    p.add_argument("--passages", type=int, default=10000)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--vocab", type=int, default=4000)
    p.add_argument("--queries", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("index", help="build and save a compressed index")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--doclens", required=True)
    p.add_argument("--nbits", type=int, choices=(1, 2, 4), required=True)
    p.add_argument("--centroids", type=int, default=0, help="0 picks a power of two near sqrt(#embeddings)")
    p.add_argument("--kmeans-iters", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="rank passages for every query; writes a TSV")
    _query_flags(p)
    _search_flags(p)
    p.add_argument("--parallel-queries", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("metrics", help="MRR@10, Recall@k and Success@5 of a results TSV")
    p.add_argument("--results", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--cuts", type=int, nargs="+", default=[10, 100, 1000])
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("selfrecall", help="recall of exact top-k inside centroid-only top-k' (CSV)")
    _query_flags(p)
    p.add_argument("--nprobe", type=int, default=None, help="default: probe every centroid")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_selfrecall)

    p = sub.add_parser("centroid-cdf", help="per-query CDF of per-centroid max scores (CSV)")
    _query_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_centroid_cdf)

    p = sub.add_parser("bench", help="per-stage latency breakdown (JSON)")
    _query_flags(p)
    _search_flags(p)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--no-filter", action="store_true", help="skip stages 2-3, decompress all candidates")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", None):
        if args.threads < 1:
            print("--threads must be >= 1", file=sys.stderr)
            return 1
        parallel.set_num_threads(args.threads)
    try:
        return args.func(args)
    except (UsageError, LateSearchError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        log.exception("internal error")
        return 2


if __name__ == "__main__":
    sys.exit(main())
