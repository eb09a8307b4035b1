"""Leaf-to-document map, candidate retrieval and exact reranking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderParams, encode, score_matrix
from .indexer import IndexerParams, top_beta_batch, top_beta_leaves

__all__ = [
    "Candidates", "LeafMap", "TreeIndex", "build_leaf_map", "exact_search",
    "rank_scores", "rerank", "retrieve", "top_beta_leaves",
]


@dataclass(frozen=True)
class LeafMap:
    """Leaf id -> sorted tuple of doc indices; every doc sits in ``d2l`` leaves."""

    assignments: dict
    d2l: int
    total_docs: int
    n_leaves: int

    @classmethod
    def from_leaf_ids(cls, leaf_ids, n_leaves: int) -> "LeafMap":
        """Build from an ``(N, d2l)`` array of distinct leaf ids per doc."""
        leaf_ids = np.asarray(leaf_ids, dtype=np.int64)
        if leaf_ids.ndim == 1:
            leaf_ids = leaf_ids[:, None]
        n, d2l = leaf_ids.shape
        buckets: dict = {}
        for doc in range(n):
            for leaf in leaf_ids[doc]:
                buckets.setdefault(int(leaf), []).append(doc)
        assignments = {leaf: tuple(sorted(docs)) for leaf, docs in sorted(buckets.items())}
        return cls(assignments, d2l, n, n_leaves)

    def docs(self, leaf: int) -> tuple:
        return self.assignments.get(int(leaf), ())

    def counts(self) -> np.ndarray:
        c = np.zeros(self.n_leaves, dtype=np.int64)
        for leaf, docs in self.assignments.items():
            c[leaf] = len(docs)
        return c


@dataclass(frozen=True)
class Candidates:
    doc_indices: np.ndarray
    total_docs: int

    @property
    def visited_fraction(self) -> float:
        return len(self.doc_indices) / self.total_docs if self.total_docs else 0.0


def build_leaf_map(doc_base, theta: EncoderParams, phi: IndexerParams, d2l: int = 1,
                   chunk: int = 4096) -> LeafMap:
    """Send every document to its ``d2l`` most probable leaves."""
    if not 1 <= d2l <= phi.n_leaves:
        raise ValueError(f"d2l={d2l} outside [1, {phi.n_leaves}]")
    doc_base = np.asarray(doc_base)
    parts = []
    for start in range(0, len(doc_base), chunk):
        v = encode(doc_base[start:start + chunk], theta)
        ids, _ = top_beta_batch(v, phi, d2l)
        parts.append(ids)
    leaf_ids = np.concatenate(parts) if parts else np.zeros((0, d2l), dtype=np.int64)
    return LeafMap.from_leaf_ids(leaf_ids, phi.n_leaves)


def union_candidates(leaves, leaf_map: LeafMap) -> Candidates:
    lists = [leaf_map.docs(l) for l in leaves]
    lists = [np.asarray(d, dtype=np.int64) for d in lists if d]
    docs = np.unique(np.concatenate(lists)) if lists else np.zeros(0, dtype=np.int64)
    return Candidates(docs, leaf_map.total_docs)


def retrieve(query_emb, phi: IndexerParams, leaf_map: LeafMap, beta: int) -> Candidates:
    """Union of the documents stored in the query's top-``beta`` leaves."""
    leaves = [leaf for leaf, _ in top_beta_leaves(query_emb, phi, beta)]
    return union_candidates(leaves, leaf_map)


def rank_scores(doc_indices, scores, k: int) -> list:
    """Top-``k`` ``(doc_index, score)`` pairs, score descending, ties to lower index."""
    doc_indices = np.asarray(doc_indices, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((doc_indices, -scores))[:k]
    return [(int(doc_indices[i]), float(scores[i])) for i in order]


def rerank(query_emb, candidates: Candidates, doc_embs, k: int, metric: str = "cosine") -> list:
    """Score candidates against ``query_emb`` exactly and keep the best ``k``.

    ``doc_embs`` are retrieval-space document embeddings (already encoded).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    idx = candidates.doc_indices
    if len(idx) == 0:
        return []
    scores = score_matrix(np.asarray(query_emb)[None, :], np.asarray(doc_embs)[idx], metric)[0]
    return rank_scores(idx, scores, k)


def exact_search(query_emb, doc_embs, k: int, metric: str = "cosine") -> list:
    n = len(doc_embs)
    return rerank(query_emb, Candidates(np.arange(n), n), doc_embs, k, metric)


@dataclass
class TreeIndex:
    """Everything needed to answer queries against a trained tree."""

    theta: EncoderParams
    phi: IndexerParams
    leaf_map: LeafMap
    doc_embs: np.ndarray
    metric: str = "cosine"

    @classmethod
    def build(cls, doc_base, theta, phi, d2l=1, metric="cosine") -> "TreeIndex":
        leaf_map = build_leaf_map(doc_base, theta, phi, d2l)
        return cls(theta, phi, leaf_map, encode(doc_base, theta), metric)

    @property
    def max_beam(self) -> int:
        return self.phi.n_leaves

    def candidates_batch(self, query_base, beam: int) -> list:
        u = encode(query_base, self.theta)
        ids, _ = top_beta_batch(u, self.phi, beam)
        return [union_candidates(row, self.leaf_map) for row in ids]

    def search(self, query_base, beam: int, k: int):
        """Return ``[(ranked, candidates)]`` per query row."""
        query_base = np.atleast_2d(query_base)
        u = encode(query_base, self.theta)
        out = []
        for q, cands in zip(u, self.candidates_batch(query_base, beam)):
            out.append((rerank(q, cands, self.doc_embs, k, self.metric), cands))
        return out
