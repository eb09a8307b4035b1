"""Ranking metrics, recall-vs-fraction-searched curves and leaf load statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

METRIC_NAMES = ("recall", "mrr", "ndcg")


def _check(relevant, k):
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        raise ValueError("relevant set is empty")


def recall_at_k(ranked, relevant, k: int) -> float:
    _check(relevant, k)
    relevant = set(relevant)
    hits = sum(1 for d in ranked[:k] if d in relevant)
    return hits / len(relevant)


def mrr_at_k(ranked, relevant, k: int) -> float:
    """Reciprocal rank of the first relevant item within the top ``k``, else 0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    for rank, d in enumerate(ranked[:k], 1):
        if d in relevant:
            return 1.0 / rank
    return 0.0


def ndcg_at_k(ranked, relevant, k: int) -> float:
    """Binary-gain nDCG with the ``1/log2(rank+1)`` discount."""
    _check(relevant, k)
    relevant = set(relevant)
    dcg = sum(1.0 / math.log2(rank + 1)
              for rank, d in enumerate(ranked[:k], 1) if d in relevant)
    ideal = sum(1.0 / math.log2(rank + 1)
                for rank in range(1, min(k, len(relevant)) + 1))
    return dcg / ideal


METRICS = {"recall": recall_at_k, "mrr": mrr_at_k, "ndcg": ndcg_at_k}


def expected_docs_per_leaf(leaf_map) -> float:
    """Sum over leaves of ``(c_i / total) * c_i``, ``c_i`` the leaf's size.

    ``total`` counts assignments, so with ``d2l > 1`` it is ``d2l * N``.
    """
    counts = np.array([len(d) for d in leaf_map.assignments.values()], dtype=np.float64)
    total = counts.sum()
    if total == 0:
        raise ValueError("empty leaf map")
    return float((counts * counts).sum() / total)


@dataclass(frozen=True)
class CurvePoint:
    beam: int
    mean_visited_fraction: float
    metric_name: str
    metric_value: float


CURVE_COLUMNS = ("beam", "mean_visited_fraction", "metric_name", "metric_value")


def evaluate_beam(index, query_base, relevant, beam: int, k: int, metric_names=("recall",)):
    """Mean visited fraction and mean metrics at one beam width.

    ``index`` exposes ``search(query_base, beam, k)`` returning
    ``[(ranked, candidates)]``; ``relevant[i]`` holds the relevant doc
    indices of query row ``i``.  Rows with no relevant docs are skipped.
    """
    keep = [i for i, rel in enumerate(relevant) if rel]
    if not keep:
        raise ValueError("no queries with relevant documents")
    results = index.search(np.asarray(query_base)[keep], beam, k)
    visited = np.mean([c.visited_fraction for _, c in results])
    values = {}
    for name in metric_names:
        fn = METRICS[name]
        scores = [fn([d for d, _ in ranked], relevant[i], k)
                  for i, (ranked, _) in zip(keep, results)]
        values[name] = float(np.mean(scores))
    return float(visited), values


def curve(index, query_base, relevant, beams, k: int, metric_name: str = "recall") -> list:
    if list(beams) != sorted(beams):
        raise ValueError("beams must be sorted ascending")
    points = []
    for beam in beams:
        visited, values = evaluate_beam(index, query_base, relevant, beam, k, (metric_name,))
        points.append(CurvePoint(int(beam), visited, f"{metric_name}@{k}", values[metric_name]))
    return points


def curve_to_csv(points) -> str:
    lines = [",".join(CURVE_COLUMNS)]
    for p in points:
        lines.append(f"{p.beam},{p.mean_visited_fraction:.9f},{p.metric_name},{p.metric_value:.9f}")
    return "\n".join(lines) + "\n"


def best_within_budget(points, max_fraction: float):
    """Highest metric among points visiting at most ``max_fraction`` of the corpus."""
    ok = [p for p in points if p.mean_visited_fraction <= max_fraction]
    return max(ok, key=lambda p: (p.metric_value, -p.beam)) if ok else None
