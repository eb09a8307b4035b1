"""Disjoint baseline: siamese-only encoder, then k-means buckets with n-probe search."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderParams, encode
from .retriever import Candidates, LeafMap, rerank, union_candidates


def _sq_dists(X, C):
    d = (X * X).sum(axis=1)[:, None] - 2.0 * X @ C.T + (C * C).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


@dataclass(frozen=True)
class IvfIndex:
    centroids: np.ndarray
    assignments: LeafMap
    objective_history: tuple = field(default=(), compare=False)

    @property
    def n_lists(self) -> int:
        return self.centroids.shape[0]


def kmeans(X, L: int, iters: int = 25, seed: int = 0) -> IvfIndex:
    """k-means++ seeding followed by Lloyd iterations.

    A cluster that goes empty is moved onto the point currently farthest
    from its own centroid.  Assignment ties go to the lower centroid index.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if L > n:
        raise ValueError(f"cannot form {L} clusters from {n} points")
    if L < 1 or iters < 1:
        raise ValueError("need L >= 1 and iters >= 1")
    rng = np.random.default_rng(seed)

    C = np.empty((L, X.shape[1]))
    C[0] = X[rng.integers(n)]
    closest = _sq_dists(X, C[:1])[:, 0]
    for c in range(1, L):
        total = closest.sum()
        if total > 0:
            pick = rng.choice(n, p=closest / total)
        else:
            pick = rng.integers(n)
        C[c] = X[pick]
        closest = np.minimum(closest, _sq_dists(X, C[c:c + 1])[:, 0])

    history = []
    labels = None
    for _ in range(iters):
        D = _sq_dists(X, C)
        new_labels = np.argmin(D, axis=1)
        history.append(float(D[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        own = D[np.arange(n), labels]
        for c in range(L):
            members = labels == c
            if members.any():
                C[c] = X[members].mean(axis=0)
            else:
                far = int(np.argmax(own))
                C[c] = X[far]
                labels[far] = c
                own[far] = 0.0
    labels = np.argmin(_sq_dists(X, C), axis=1)
    return IvfIndex(C, LeafMap.from_leaf_ids(labels, L), tuple(history))


def ivf_candidates(query_emb, index: IvfIndex, n_probe: int) -> Candidates:
    if not 1 <= n_probe <= index.n_lists:
        raise ValueError(f"n_probe={n_probe} outside [1, {index.n_lists}]")
    q = np.asarray(query_emb, dtype=np.float64)[None, :]
    d = _sq_dists(q, index.centroids)[0]
    lists = np.lexsort((np.arange(index.n_lists), d))[:n_probe]
    return union_candidates(lists, index.assignments)


def ivf_retrieve(query_emb, index: IvfIndex, n_probe: int, k: int, doc_embs,
                 metric: str = "cosine") -> list:
    """Probe the ``n_probe`` closest lists and rerank their union exactly."""
    return rerank(query_emb, ivf_candidates(query_emb, index, n_probe), doc_embs, k, metric)


@dataclass
class IvfSearcher:
    theta: EncoderParams
    index: IvfIndex
    doc_embs: np.ndarray
    metric: str = "cosine"

    @classmethod
    def build(cls, doc_base, theta, n_lists, iters=25, seed=0, metric="cosine") -> "IvfSearcher":
        v = encode(doc_base, theta)
        return cls(theta, kmeans(v, n_lists, iters, seed), v, metric)

    @property
    def max_beam(self) -> int:
        return self.index.n_lists

    def search(self, query_base, beam: int, k: int):
        u = encode(np.atleast_2d(query_base), self.theta)
        out = []
        for q in u:
            cands = ivf_candidates(q, self.index, beam)
            out.append((rerank(q, cands, self.doc_embs, k, self.metric), cands))
        return out


def train_baseline(data, cfg, iters: int = 25):
    """Siamese-only encoder training followed by k-means over the encoded corpus.

    Uses the same head, optimizer budget and batching as the joint run; the
    tree terms are switched off.  Returns ``(IvfSearcher, TrainingLog)``.
    """
    from .trainer import train

    base_cfg = cfg.replace(lambda2=0.0, lambda3=0.0)
    theta, _, log = train(data, base_cfg)
    searcher = IvfSearcher.build(data.docs.data, theta, cfg.B ** cfg.H, iters, cfg.seed, cfg.metric)
    return searcher, log
