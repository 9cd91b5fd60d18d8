"""Ranking metrics against binary qrels: MRR@10, Recall@k, Success@k."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Union

from .core import LateSearchError

Qrels = Dict[str, Set[str]]
Rankings = Dict[str, List[str]]


class UnknownQueryId(LateSearchError):
    pass


def read_qrels(path: Union[str, Path], num_passages: Optional[int] = None) -> Qrels:
    """Parse TREC-style ``qid 0 pid rel`` lines or two-column ``qid pid`` lines.

    Rows with relevance 0 are dropped. When ``num_passages`` is given, every
    referenced passage id must be an integer below it.
    """
    qrels: Qrels = defaultdict(set)
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) == 4:
                qid, _, pid, rel = parts
                if float(rel) <= 0:
                    continue
            elif len(parts) == 2:
                qid, pid = parts
            else:
                raise ValueError(f"{path}:{lineno}: expected 2 or 4 columns")
            if num_passages is not None and not (pid.isdigit() and int(pid) < num_passages):
                raise ValueError(f"{path}:{lineno}: passage {pid!r} is not in the corpus")
            qrels[qid].add(pid)
    return dict(qrels)


def read_results(path: Union[str, Path]) -> Rankings:
    """Rankings from a results TSV (query_id, rank, passage_id, score)."""
    rows = defaultdict(list)
    with open(path, encoding="utf-8", newline="") as f:
        for rec in csv.reader(f, delimiter="\t"):
            if not rec:
                continue
            qid, rank, pid = rec[0], int(rec[1]), rec[2]
            rows[qid].append((rank, pid))
    return {qid: [pid for _, pid in sorted(r)] for qid, r in rows.items()}


def compute_metrics(results: Mapping[str, Sequence[str]], qrels: Mapping[str, Set[str]],
                    cuts: Iterable[int] = (10, 100, 1000)) -> Dict[str, float]:
    """Means over the queries present in ``results``.

    Every result query must have judgments; queries with judgments but no
    results are not counted.
    """
    cuts = sorted(set(int(c) for c in cuts))
    missing = [qid for qid in results if qid not in qrels]
    if missing:
        raise UnknownQueryId(f"no relevance judgments for query {missing[0]!r}")
    n = len(results)
    report: Dict[str, float] = {"num_queries": float(n)}
    if n == 0:
        return report

    mrr = success5 = 0.0
    recall = dict.fromkeys(cuts, 0.0)
    for qid, ranking in results.items():
        rel = qrels[qid]
        for rank, pid in enumerate(ranking[:10], 1):
            if pid in rel:
                mrr += 1.0 / rank
                break
        if any(pid in rel for pid in ranking[:5]):
            success5 += 1.0
        for c in cuts:
            recall[c] += len(rel.intersection(ranking[:c])) / len(rel)

    report["MRR@10"] = mrr / n
    for c in cuts:
        report[f"Recall@{c}"] = recall[c] / n
    report["Success@5"] = success5 / n
    return report
