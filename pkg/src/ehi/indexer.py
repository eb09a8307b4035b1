"""Learned B-ary routing tree of height H.

Each height ``h`` (1-based) owns a residual transform ``U_h`` and a
classifier ``W_h`` acting on ``[o(i^{h-1}); ...; o(i^1); u]``: the one-hots of
the path taken so far (most recent first) followed by the retrieval
embedding ``u``.  Leaves are numbered in mixed radix, ``sum_h i^h B^(H-h)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import relu_residual_backward, softmax, softmax_backward


@dataclass
class IndexerParams:
    B: int
    H: int
    W: list
    U: list

    def __post_init__(self):
        if self.B < 2:
            raise ValueError("branching factor must be >= 2")
        if self.H < 1:
            raise ValueError("height must be >= 1")
        if len(self.W) != self.H or len(self.U) != self.H:
            raise ValueError("need one W and one U per height")
        m = self.W[0].shape[0]
        for h in range(1, self.H + 1):
            d = self.B * (h - 1) + m
            if self.W[h - 1].shape != (d, self.B):
                raise ValueError(f"W_{h} has shape {self.W[h - 1].shape}, expected {(d, self.B)}")
            if self.U[h - 1].shape != (d, d):
                raise ValueError(f"U_{h} has shape {self.U[h - 1].shape}, expected {(d, d)}")

    @classmethod
    def init(cls, dim: int, B: int, H: int, rng: np.random.Generator,
             gain: float = 1.0) -> "IndexerParams":
        """Glorot-uniform ``W_h`` (times ``gain``) and ``U_h``.

        Near-uniform initial routing tends to collapse onto a handful of
        leaves during training; a gain around 10 keeps most leaves alive.
        """
        W, U = [], []
        for h in range(1, H + 1):
            d = B * (h - 1) + dim
            a = gain * np.sqrt(6.0 / (d + B))
            W.append(rng.uniform(-a, a, size=(d, B)))
            a = np.sqrt(6.0 / (2 * d))
            U.append(rng.uniform(-a, a, size=(d, d)))
        return cls(B, H, W, U)

    @property
    def dim(self) -> int:
        return self.W[0].shape[0]

    @property
    def n_leaves(self) -> int:
        return self.B ** self.H

    def copy(self) -> "IndexerParams":
        return IndexerParams(self.B, self.H, [w.copy() for w in self.W],
                             [u.copy() for u in self.U])


@dataclass
class PathEmbedding:
    blocks: np.ndarray   # (H, B), row 0 is height H
    chosen_path: list

    @property
    def vector(self) -> np.ndarray:
        return self.blocks.ravel()


def leaf_id(path, B: int) -> int:
    out = 0
    for i in path:
        out = out * B + int(i)
    return out


def leaf_path(leaf: int, B: int, H: int) -> list:
    if not 0 <= leaf < B ** H:
        raise ValueError(f"leaf id {leaf} outside [0, {B ** H})")
    path = []
    for _ in range(H):
        leaf, i = divmod(leaf, B)
        path.append(i)
    return path[::-1]


def _level_input(u, prefix, B):
    """Stack ``[o(i^{h-1}); ...; o(i^1); u]`` for each row."""
    n, h = prefix.shape
    if h == 0:
        return u
    onehots = np.zeros((n, h * B))
    rows = np.arange(n)
    for pos in range(h):
        # position 0 holds the most recent child
        onehots[rows, pos * B + prefix[:, h - 1 - pos]] = 1.0
    return np.concatenate([onehots, u], axis=1)


def _level_probs(u, prefix, phi, h):
    x = _level_input(u, prefix, phi.B)
    pre = x @ phi.U[h - 1]
    f = x + np.maximum(pre, 0.0)
    return softmax(f @ phi.W[h - 1]), x


def child_distribution(emb, path_prefix, phi: IndexerParams):
    """Distribution over the B children of the node reached by ``path_prefix``."""
    emb = np.asarray(emb, dtype=np.float64)
    if emb.shape != (phi.dim,):
        raise ValueError(f"dimension mismatch: embedding {emb.shape}, indexer expects ({phi.dim},)")
    if len(path_prefix) >= phi.H:
        raise ValueError(f"prefix of length {len(path_prefix)} too long for height {phi.H}")
    if any(not 0 <= int(i) < phi.B for i in path_prefix):
        raise ValueError(f"child index outside [0, {phi.B})")
    prefix = np.asarray(path_prefix, dtype=np.int64).reshape(1, -1)
    p, _ = _level_probs(emb[None, :], prefix, phi, len(path_prefix) + 1)
    return p[0]


def path_forward(u, phi: IndexerParams, paths=None):
    """Batch path embeddings.

    Returns ``(T, paths, cache)`` where ``T`` has shape ``(n, B*H)`` laid out
    as ``[p^H; ...; p^1]``.  If ``paths`` is given, routing is held fixed to
    it instead of following the per-level argmax.
    """
    u = np.asarray(u, dtype=np.float64)
    n = u.shape[0]
    B, H = phi.B, phi.H
    greedy = paths is None
    if greedy:
        paths = np.zeros((n, H), dtype=np.int64)
    else:
        paths = np.asarray(paths, dtype=np.int64)
    rows = np.arange(n)
    running = np.ones(n)
    T = np.empty((n, B * H))
    levels = []
    for h in range(1, H + 1):
        x = _level_input(u, paths[:, :h - 1], B)
        pre = x @ phi.U[h - 1]
        f = x + np.maximum(pre, 0.0)
        p = softmax(f @ phi.W[h - 1])
        if greedy:
            paths[:, h - 1] = np.argmax(p, axis=1)
        col = (H - h) * B
        T[:, col:col + B] = p * running[:, None]
        levels.append((x, f, p, running))
        running = running * p[rows, paths[:, h - 1]]
    return T, paths, levels


def path_backward(grad_T, paths, levels, phi: IndexerParams):
    """Gradients of a scalar wrt ``(W list, U list, u)`` given ``dL/dT``.

    Routing (``paths``) is treated as constant.
    """
    B, H, m = phi.B, phi.H, phi.dim
    n = grad_T.shape[0]
    rows = np.arange(n)
    gW = [None] * H
    gU = [None] * H
    gu = np.zeros((n, m))
    g_running = np.zeros(n)  # dL/dP_h, P_h = prod of chosen probs through h
    for h in range(H, 0, -1):
        x, f, p, prev = levels[h - 1]
        i = paths[:, h - 1]
        col = (H - h) * B
        g_block = grad_T[:, col:col + B]
        gp = g_block * prev[:, None]
        gp[rows, i] += g_running * prev
        g_prev = (g_block * p).sum(axis=1) + g_running * p[rows, i]
        g_logits = softmax_backward(p, gp)
        gW[h - 1] = f.T @ g_logits
        g_f = g_logits @ phi.W[h - 1].T
        g_x, gU[h - 1] = relu_residual_backward(x, phi.U[h - 1], g_f)
        gu += g_x[:, -m:]
        g_running = g_prev
    return gW, gU, gu


def path_embedding(emb, phi: IndexerParams) -> PathEmbedding:
    emb = np.asarray(emb, dtype=np.float64)
    if emb.shape != (phi.dim,):
        raise ValueError(f"dimension mismatch: embedding {emb.shape}, indexer expects ({phi.dim},)")
    T, paths, _ = path_forward(emb[None, :], phi)
    return PathEmbedding(T[0].reshape(phi.H, phi.B), [int(i) for i in paths[0]])


def leaf_probability(emb, leaf: int, phi: IndexerParams) -> float:
    path = leaf_path(int(leaf), phi.B, phi.H)
    emb = np.asarray(emb, dtype=np.float64)
    prob = 1.0
    for h in range(phi.H):
        prob *= child_distribution(emb, path[:h], phi)[path[h]]
    return float(prob)


def top_beta_batch(u, phi: IndexerParams, beta: int):
    """Level-synchronous beam search for a row batch.

    Returns ``(leaf_ids, probs)``, both ``(n, min(beta, B^H))``, each row
    sorted by probability descending with ties to the lower node id.
    """
    if beta < 1:
        raise ValueError("beam must be >= 1")
    u = np.asarray(u, dtype=np.float64)
    n = u.shape[0]
    B = phi.B
    prefixes = np.zeros((n, 1, 0), dtype=np.int64)
    scores = np.ones((n, 1))
    ids = np.zeros((n, 1), dtype=np.int64)
    for h in range(1, phi.H + 1):
        k = prefixes.shape[1]
        flat_u = np.repeat(u, k, axis=0)
        flat_prefix = prefixes.reshape(n * k, h - 1)
        p, _ = _level_probs(flat_u, flat_prefix, phi, h)
        cand_scores = (scores[:, :, None] * p.reshape(n, k, B)).reshape(n, k * B)
        cand_ids = (ids[:, :, None] * B + np.arange(B)).reshape(n, k * B)
        keep = min(beta, k * B)
        order = np.lexsort((cand_ids, -cand_scores), axis=-1)[:, :keep]
        parent = order // B
        child = order % B
        prefixes = np.concatenate(
            [np.take_along_axis(prefixes, parent[:, :, None], axis=1), child[:, :, None]],
            axis=2)
        scores = np.take_along_axis(cand_scores, order, axis=1)
        ids = np.take_along_axis(cand_ids, order, axis=1)
    return ids, scores


def top_beta_leaves(emb, phi: IndexerParams, beta: int) -> list:
    emb = np.asarray(emb, dtype=np.float64)
    ids, scores = top_beta_batch(emb[None, :], phi, beta)
    return [(int(i), float(s)) for i, s in zip(ids[0], scores[0])]
