"""Gaussian-cluster corpora where each query is a perturbed copy of its source doc."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import EmbeddingMatrix, RelevanceJudgments


@dataclass
class SyntheticCorpus:
    docs: EmbeddingMatrix
    queries: EmbeddingMatrix
    judgments: RelevanceJudgments
    train_queries: list
    test_queries: list
    doc_cluster: np.ndarray


def make_clustered_corpus(n_docs=2048, n_clusters=32, dim=16, n_train=512, n_test=256,
                          center_scale=1.0, cluster_std=0.35, query_noise=0.4,
                          seed=0) -> SyntheticCorpus:
    rng = np.random.default_rng(seed)
    centers = center_scale * rng.standard_normal((n_clusters, dim))
    cluster = rng.integers(n_clusters, size=n_docs)
    docs = centers[cluster] + cluster_std * rng.standard_normal((n_docs, dim))

    n_q = n_train + n_test
    if n_q > n_docs:
        raise ValueError("more queries than documents")
    source = rng.choice(n_docs, size=n_q, replace=False)
    queries = docs[source] + query_noise * rng.standard_normal((n_q, dim))

    doc_ids = [f"d{i}" for i in range(n_docs)]
    query_ids = [f"q{i}" for i in range(n_q)]
    labels = {(query_ids[i], doc_ids[s]): 1 for i, s in enumerate(source)}
    return SyntheticCorpus(
        docs=EmbeddingMatrix(doc_ids, docs.astype(np.float32)),
        queries=EmbeddingMatrix(query_ids, queries.astype(np.float32)),
        judgments=RelevanceJudgments(labels),
        train_queries=query_ids[:n_train],
        test_queries=query_ids[n_train:],
        doc_cluster=cluster,
    )


def random_corpus(n_docs, n_queries, dim, seed=0):
    rng = np.random.default_rng(seed)
    docs = EmbeddingMatrix([f"d{i}" for i in range(n_docs)],
                           rng.standard_normal((n_docs, dim)).astype(np.float32))
    queries = EmbeddingMatrix([f"q{i}" for i in range(n_queries)],
                              rng.standard_normal((n_queries, dim)).astype(np.float32))
    return docs, queries
