"""scikit-learn style wrappers around the joint tree index and the IVF baseline.

Documents and queries are plain arrays; relevance is given per query row as
a doc row index or an iterable of them.  After ``fit``::

    ret = EHIRetriever(B=32, epochs=50).fit(docs, queries, positives)
    scores, idx = ret.kneighbors(new_queries, n_neighbors=10, beam=4)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .data import EmbeddingMatrix, RelevanceJudgments
from .encoder import encode
from .indexer import path_forward, top_beta_batch
from .ivf import _sq_dists, train_baseline
from .retriever import TreeIndex
from .trainer import TrainConfig, TrainingData, train


def check_embeddings(X, dim=None, name="X") -> np.ndarray:
    """2-D finite float array, optionally of a given width."""
    X = check_array(X, dtype=(np.float64, np.float32), ensure_2d=True)
    if dim is not None and X.shape[1] != dim:
        raise ValueError(f"{name} has {X.shape[1]} features, expected {dim}")
    return X


def check_positives(positives, n_queries: int, n_docs: int) -> list:
    """Normalize per-query relevance to a list of non-empty index sets."""
    if len(positives) != n_queries:
        raise ValueError(f"got relevance for {len(positives)} queries, expected {n_queries}")
    out = []
    for i, p in enumerate(positives):
        rel = {int(p)} if np.isscalar(p) else {int(d) for d in p}
        if not rel:
            raise ValueError(f"query row {i} has no positive")
        bad = [d for d in rel if not 0 <= d < n_docs]
        if bad:
            raise ValueError(f"query row {i}: doc index {bad[0]} outside [0, {n_docs})")
        out.append(rel)
    return out


def _training_data(docs, queries, positives):
    doc_ids = [f"d{i}" for i in range(len(docs))]
    query_ids = [f"q{i}" for i in range(len(queries))]
    labels = {(query_ids[i], doc_ids[d]): 1 for i, rel in enumerate(positives) for d in rel}
    return TrainingData(EmbeddingMatrix(doc_ids, docs.astype(np.float32)),
                        EmbeddingMatrix(query_ids, queries.astype(np.float32)),
                        RelevanceJudgments(labels))


class _RetrieverBase(BaseEstimator):
    _config_fields = ("B", "H", "epochs", "batch_size", "gamma", "tau", "lambda1", "lambda2",
                      "lambda3", "r", "enc_lr", "idx_lr", "weight_decay", "metric",
                      "normalize", "init_gain")

    def _config(self) -> TrainConfig:
        kw = {f: getattr(self, f) for f in self._config_fields}
        return TrainConfig(seed=self.random_state, **kw)

    def fit(self, docs, queries, positives):
        docs = check_embeddings(docs, name="docs")
        queries = check_embeddings(queries, docs.shape[1], name="queries")
        positives = check_positives(positives, len(queries), len(docs))
        self._fit(_training_data(docs, queries, positives), self._config())
        self.n_features_in_ = docs.shape[1]
        self.n_docs_ = len(docs)
        return self

    def kneighbors(self, X, n_neighbors: int = 10, beam=None):
        """Return ``(scores, indices)``, each ``(n, n_neighbors)``.

        Rows with fewer candidates than ``n_neighbors`` are padded with
        ``-inf`` scores and index ``-1``.
        """
        check_is_fitted(self, "searcher_")
        X = check_embeddings(X, self.n_features_in_)
        beam = self.beam if beam is None else beam
        scores = np.full((len(X), n_neighbors), -np.inf)
        idx = np.full((len(X), n_neighbors), -1, dtype=np.int64)
        for row, (ranked, _) in enumerate(self.searcher_.search(X, beam, n_neighbors)):
            for j, (d, s) in enumerate(ranked):
                idx[row, j], scores[row, j] = d, s
        return scores, idx

    def visited_fraction(self, X, beam=None) -> np.ndarray:
        check_is_fitted(self, "searcher_")
        X = check_embeddings(X, self.n_features_in_)
        beam = self.beam if beam is None else beam
        return np.array([c.visited_fraction for _, c in self.searcher_.search(X, beam, 1)])


class EHIRetriever(_RetrieverBase):
    """Encoder head and tree index trained jointly.

    ``transform`` returns path embeddings, ``predict`` the most probable leaf.
    """

    def __init__(self, B=32, H=1, epochs=100, batch_size=64, gamma=0.3, tau=0.9,
                 lambda1=0.2, lambda2=0.8, lambda3=0.2, r=5, enc_lr=4e-4, idx_lr=0.016,
                 weight_decay=0.01, metric="cosine", normalize=True, init_gain=10.0,
                 d2l=1, beam=1, random_state=0):
        self.B = B
        self.H = H
        self.epochs = epochs
        self.batch_size = batch_size
        self.gamma = gamma
        self.tau = tau
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.r = r
        self.enc_lr = enc_lr
        self.idx_lr = idx_lr
        self.weight_decay = weight_decay
        self.metric = metric
        self.normalize = normalize
        self.init_gain = init_gain
        self.d2l = d2l
        self.beam = beam
        self.random_state = random_state

    def _config(self):
        return super()._config().replace(d2l=self.d2l)

    def _fit(self, data, cfg):
        self.encoder_, self.indexer_, self.training_log_ = train(data, cfg)
        self.searcher_ = TreeIndex.build(data.docs.data, self.encoder_, self.indexer_,
                                         cfg.d2l, cfg.metric)
        self.leaf_map_ = self.searcher_.leaf_map

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "searcher_")
        X = check_embeddings(X, self.n_features_in_)
        T, _, _ = path_forward(encode(X, self.encoder_), self.indexer_)
        return T

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "searcher_")
        X = check_embeddings(X, self.n_features_in_)
        ids, _ = top_beta_batch(encode(X, self.encoder_), self.indexer_, 1)
        return ids[:, 0]


class IVFRetriever(_RetrieverBase):
    """Siamese-trained encoder head followed by k-means lists.

    ``transform`` returns encoded embeddings, ``predict`` the closest list.
    """

    def __init__(self, B=32, H=1, epochs=100, batch_size=64, gamma=0.3, tau=0.9,
                 lambda1=0.2, lambda2=0.8, lambda3=0.2, r=5, enc_lr=4e-4, idx_lr=0.016,
                 weight_decay=0.01, metric="cosine", normalize=True, init_gain=10.0,
                 kmeans_iters=25, beam=1, random_state=0):
        self.B = B
        self.H = H
        self.epochs = epochs
        self.batch_size = batch_size
        self.gamma = gamma
        self.tau = tau
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.r = r
        self.enc_lr = enc_lr
        self.idx_lr = idx_lr
        self.weight_decay = weight_decay
        self.metric = metric
        self.normalize = normalize
        self.init_gain = init_gain
        self.kmeans_iters = kmeans_iters
        self.beam = beam
        self.random_state = random_state

    def _fit(self, data, cfg):
        self.searcher_, self.training_log_ = train_baseline(data, cfg, self.kmeans_iters)
        self.encoder_ = self.searcher_.theta
        self.cluster_centers_ = self.searcher_.index.centroids
        self.leaf_map_ = self.searcher_.index.assignments

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "searcher_")
        return encode(check_embeddings(X, self.n_features_in_), self.encoder_)

    def predict(self, X) -> np.ndarray:
        d = _sq_dists(self.transform(X), self.cluster_centers_)
        return np.argmin(d, axis=1)
