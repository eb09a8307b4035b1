"""Joint training of the encoder head and the routing tree."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Batch, EmbeddingMatrix, RelevanceJudgments, epoch_batches
from .encoder import METRICS, EncoderParams, encode, encode_backward, encode_with_cache
from .evaluation import expected_docs_per_leaf
from .indexer import IndexerParams, path_backward, path_forward, top_beta_batch
from .kernels import GradCheckReport, finite_diff_grad, relative_error
from .retriever import LeafMap, build_leaf_map, union_candidates

logger = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    B: int = 40
    H: int = 1
    beta_train: int = 1
    gamma: float = 0.3
    tau: float = 0.9
    lambda1: float = 0.2
    lambda2: float = 0.8
    lambda3: float = 0.2
    r: int = 5
    enc_lr: float = 4e-4
    idx_lr: float = 0.016
    weight_decay: float = 0.01
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    metric: str = "cosine"
    normalize: bool = True
    d2l: int = 1
    init_gain: float = 10.0

    def __post_init__(self):
        if self.B < 2 or self.H < 1:
            raise ValueError("need B >= 2 and H >= 1")
        if self.r < 1:
            raise ValueError("refresh period r must be >= 1")
        lambdas = (self.lambda1, self.lambda2, self.lambda3)
        if min(lambdas) < 0 or max(lambdas) == 0:
            raise ValueError("loss weights must be nonnegative and not all zero")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not -1 <= self.tau <= 1:
            raise ValueError("tau must lie in [-1, 1]")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.batch_size < 1 or self.epochs < 0 or self.beta_train < 1:
            raise ValueError("batch_size and beta_train must be >= 1, epochs >= 0")
        if not 1 <= self.d2l <= self.B ** self.H:
            raise ValueError("d2l must lie in [1, B^H]")
        if self.init_gain <= 0:
            raise ValueError("init_gain must be positive")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = str(value).lower()
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            kind = types[key]
            try:
                if kind == "bool":
                    if raw.lower() not in ("true", "false", "1", "0"):
                        raise ValueError(raw)
                    values[key] = raw.lower() in ("true", "1")
                elif kind == "int":
                    values[key] = int(raw)
                elif kind == "float":
                    values[key] = float(raw)
                else:
                    values[key] = raw
            except ValueError:
                raise ValueError(f"config line {lineno}: bad value {raw!r} for {key}") from None
        return cls(**values)


@dataclass
class LossBreakdown:
    siamese: float
    indexing: float
    intra_leaf: float
    total: float


@dataclass
class TrainingData:
    """Base embeddings plus judgments, with id lookups resolved once."""

    docs: EmbeddingMatrix
    queries: EmbeddingMatrix
    judgments: RelevanceJudgments
    train_queries: list = None

    def __post_init__(self):
        if self.docs.dim != self.queries.dim:
            raise ValueError("query and document embeddings differ in dim")
        self.doc_index = self.docs.index_of()
        self.query_index = self.queries.index_of()
        for q, pos in self.judgments.positives.items():
            if q not in self.query_index:
                raise ValueError(f"judged query {q} has no embedding")
            for d in pos:
                if d not in self.doc_index:
                    raise ValueError(f"judged doc {d} has no embedding")
        if self.train_queries is None:
            self.train_queries = self.judgments.queries
        self.positive_idx = {
            q: frozenset(self.doc_index[d] for d in pos)
            for q, pos in self.judgments.positives.items()}


# ---------------------------------------------------------------------------
# parameters as a flat dict, for the optimizer and gradient checks

def param_dict(theta: EncoderParams, phi: IndexerParams) -> dict:
    out = {"enc.W": theta.W, "enc.b": theta.b}
    for h in range(phi.H):
        out[f"idx.W{h + 1}"] = phi.W[h]
        out[f"idx.U{h + 1}"] = phi.U[h]
    return out


def params_from_dict(d: dict, theta: EncoderParams, phi: IndexerParams):
    theta = EncoderParams(d["enc.W"], d["enc.b"], theta.normalize)
    phi = IndexerParams(phi.B, phi.H, [d[f"idx.W{h + 1}"] for h in range(phi.H)],
                        [d[f"idx.U{h + 1}"] for h in range(phi.H)])
    return theta, phi


def _flatten(d: dict) -> np.ndarray:
    return np.concatenate([v.ravel() for v in d.values()])


def _unflatten(flat, like: dict) -> dict:
    out, pos = {}, 0
    for k, v in like.items():
        out[k] = flat[pos:pos + v.size].reshape(v.shape)
        pos += v.size
    return out


# ---------------------------------------------------------------------------
# loss

@dataclass
class _BatchArrays:
    xq: np.ndarray        # (s, m) query base embeddings
    xd: np.ndarray        # (s, m) positive doc base embeddings
    xh: np.ndarray        # (t, m) hard-negative base embeddings
    hard_rows: np.ndarray  # (t,) batch rows owning each hard negative
    pair_mask: np.ndarray  # (s, s) valid in-batch (i, j) pairs


def _batch_arrays(batch: Batch, hard_negs: dict, data: TrainingData) -> _BatchArrays:
    qs = [data.query_index[q] for q in batch.queries]
    ds = [data.doc_index[d] for d in batch.docs]
    s = len(qs)
    pair_mask = np.zeros((s, s), dtype=bool)
    for i, q in enumerate(batch.queries):
        pos = data.positive_idx[q]
        for j in range(s):
            pair_mask[i, j] = i != j and ds[j] not in pos
    rows = [i for i, q in enumerate(batch.queries) if q in hard_negs]
    hs = [data.doc_index[hard_negs[batch.queries[i]]] for i in rows]
    m = data.docs.dim
    xh = data.docs.data[hs] if hs else np.zeros((0, m))
    return _BatchArrays(data.queries.data[qs], data.docs.data[ds], xh,
                        np.asarray(rows, dtype=np.int64), pair_mask)


def _pairwise_hinge(A_left, A_right, mask, gamma, denom):
    """Mean of ``[L_i . R_j - L_i . R_i + gamma]_+`` over ``mask``.

    Returns ``(value, grad_left, grad_right, args)``.
    """
    S = A_left @ A_right.T
    args = S - np.diag(S)[:, None] + gamma
    active = mask & (args > 0)
    if denom == 0:
        return 0.0, np.zeros_like(A_left), np.zeros_like(A_right), args
    G = active / denom
    rowsum = G.sum(axis=1)
    g_left = G @ A_right - rowsum[:, None] * A_right
    g_right = G.T @ A_left - rowsum[:, None] * A_left
    return float((args * active).sum() / denom), g_left, g_right, args


def _loss_core(arr: _BatchArrays, theta, phi, cfg: TrainConfig, paths=None, gate=None):
    s = arr.xq.shape[0]
    t = arr.xh.shape[0]
    X = np.concatenate([arr.xq, arr.xd, arr.xh], axis=0)
    E, enc_cache = encode_with_cache(X, theta)
    uq, vd, vh = E[:s], E[s:2 * s], E[2 * s:]

    n_pairs = int(arr.pair_mask.sum())
    gamma = cfg.gamma

    # semantic term: in-batch pairs plus one hard negative per query that has one
    n_siam = n_pairs + t
    siam, g_uq, g_vd, siam_args = _pairwise_hinge(uq, vd, arr.pair_mask, gamma, n_siam)
    g_vh = np.zeros_like(vh)
    hard_args = np.zeros(t)
    if t:
        r = arr.hard_rows
        hard_args = (uq[r] * vh).sum(axis=1) - (uq[r] * vd[r]).sum(axis=1) + gamma
        w = (hard_args > 0) / n_siam
        siam += float((hard_args * (hard_args > 0)).sum() / n_siam)
        np.add.at(g_uq, r, w[:, None] * (vh - vd[r]))
        np.add.at(g_vd, r, -w[:, None] * uq[r])
        g_vh = w[:, None] * uq[r]

    # tree terms on path embeddings of queries and positives
    T, paths, levels = path_forward(np.concatenate([uq, vd]), phi, paths)
    tq, td = T[:s], T[s:]
    idx, g_tq, g_td_idx, idx_args = _pairwise_hinge(tq, td, arr.pair_mask, gamma, n_pairs)

    if gate is None:
        norms = np.maximum(np.linalg.norm(vd, axis=1), 1e-12)
        cos = (vd @ vd.T) / np.outer(norms, norms)
        gate = cos < cfg.tau
    intra_mask = arr.pair_mask & gate
    S = td @ td.T
    intra_args = S - np.diag(S)[:, None] + gamma
    active = intra_mask & (intra_args > 0)
    if n_pairs:
        G = active / n_pairs
        intra = float((intra_args * active).sum() / n_pairs)
        g_td_intra = G @ td + G.T @ td - 2.0 * G.sum(axis=1)[:, None] * td
    else:
        intra = 0.0
        g_td_intra = np.zeros_like(td)

    l1, l2, l3 = cfg.lambda1, cfg.lambda2, cfg.lambda3
    total = l1 * siam + l2 * idx + l3 * intra
    loss = LossBreakdown(siam, idx, intra, total)

    g_T = np.concatenate([l2 * g_tq, l2 * g_td_idx + l3 * g_td_intra])
    gW, gU, g_u_tree = path_backward(g_T, paths, levels, phi)
    g_E = np.concatenate([l1 * g_uq + g_u_tree[:s], l1 * g_vd + g_u_tree[s:], l1 * g_vh])
    gWe, gbe = encode_backward(enc_cache, g_E, theta)

    grads = {"enc.W": gWe, "enc.b": gbe}
    for h in range(phi.H):
        grads[f"idx.W{h + 1}"] = gW[h]
        grads[f"idx.U{h + 1}"] = gU[h]

    mask = arr.pair_mask
    hinge_args = np.concatenate([
        siam_args[mask], hard_args, idx_args[mask], intra_args[intra_mask]])
    aux = {"paths": paths, "gate": gate, "hinge_args": hinge_args, "levels": levels}
    return loss, grads, aux


def batch_loss(batch: Batch, hard_negs: dict, theta: EncoderParams, phi: IndexerParams,
               cfg: TrainConfig, data: TrainingData):
    """Combined loss on one minibatch and its gradients wrt every parameter.

    Per query: one encoder-space triplet against its mined hard negative
    (when present).  Per ordered in-batch pair ``(i, j)`` where ``d_j`` is
    not a positive of ``q_i``: an encoder-space triplet, a path-embedding
    triplet, and a doc-anchored path-embedding triplet gated on encoder
    cosine below ``tau``.  Each term is averaged over its triplet count.
    """
    arr = _batch_arrays(batch, hard_negs or {}, data)
    loss, grads, _ = _loss_core(arr, theta, phi, cfg)
    return loss, grads


# ---------------------------------------------------------------------------
# hard negatives

def mine_hard_negatives(queries, theta: EncoderParams, phi: IndexerParams, leaf_map: LeafMap,
                        beta_train: int, data: TrainingData, rng: np.random.Generator) -> dict:
    """Map each query to one uniformly drawn non-positive from its top leaves.

    ``queries`` is a :class:`Batch` or a list of query ids.  Queries whose
    retrieved set holds nothing but positives are left out.
    """
    if isinstance(queries, Batch):
        queries = queries.queries
    queries = list(queries)
    if not queries:
        return {}
    u = encode(data.queries.data[[data.query_index[q] for q in queries]], theta)
    leaves, _ = top_beta_batch(u, phi, beta_train)
    out = {}
    for q, row in zip(queries, leaves):
        cands = union_candidates(row, leaf_map).doc_indices
        pos = data.positive_idx.get(q, frozenset())
        pool = [int(d) for d in cands if int(d) not in pos]
        if pool:
            out[q] = data.docs.ids[pool[int(rng.integers(len(pool)))]]
    return out


# ---------------------------------------------------------------------------
# optimizer

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def init_optimizer_state(params: dict) -> dict:
    return {"t": 0,
            "m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()}}


def optimizer_step(params: dict, grads: dict, state: dict, lr, weight_decay: float = 0.0):
    """One AdamW update; ``lr`` is a float or a per-parameter dict.

    Returns new ``(params, state)``; inputs are not modified.
    """
    t = state["t"] + 1
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if not np.all(np.isfinite(g)):
            raise NonFiniteLossError(f"non-finite gradient for {k}")
        step = lr[k] if isinstance(lr, dict) else lr
        m = ADAM_BETA1 * state["m"][k] + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state["v"][k] + (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1 ** t)
        v_hat = v / (1 - ADAM_BETA2 ** t)
        p = p * (1 - step * weight_decay)
        new_params[k] = p - step * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_m[k], new_v[k] = m, v
    return new_params, {"t": t, "m": new_m, "v": new_v}


# ---------------------------------------------------------------------------
# training loop

@dataclass
class EpochLog:
    epoch: int
    siamese: float
    indexing: float
    intra_leaf: float
    total: float
    expected_docs_per_leaf: float
    wall_ms: float


LOG_COLUMNS = ("epoch", "siamese", "indexing", "intra_leaf", "total",
               "expected_docs_per_leaf", "wall_ms")


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)
    refreshes: list = field(default_factory=list)  # (epoch, expected_docs_per_leaf)

    def to_csv(self) -> str:
        lines = [",".join(LOG_COLUMNS)]
        for e in self.epochs:
            lines.append(f"{e.epoch},{e.siamese:.9g},{e.indexing:.9g},{e.intra_leaf:.9g},"
                         f"{e.total:.9g},{e.expected_docs_per_leaf:.9g},{e.wall_ms:.3f}")
        return "\n".join(lines) + "\n"


def _check_finite(loss: LossBreakdown, epoch: int):
    for name in ("siamese", "indexing", "intra_leaf", "total"):
        if not np.isfinite(getattr(loss, name)):
            raise NonFiniteLossError(f"non-finite {name} loss at epoch {epoch}")


def train(data: TrainingData, cfg: TrainConfig, theta: EncoderParams = None,
          phi: IndexerParams = None):
    """Run the epoch loop; returns ``(theta, phi, TrainingLog)``.

    The leaf map and hard negatives are rebuilt at the start of every
    ``cfg.r``-th epoch and held fixed in between.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    init_rng, batch_rng, mine_rng = (np.random.default_rng(s) for s in seeds)
    m = data.docs.dim
    if theta is None:
        theta = EncoderParams.identity(m, cfg.normalize)
    if phi is None:
        phi = IndexerParams.init(m, cfg.B, cfg.H, init_rng, cfg.init_gain)
    if cfg.batch_size > len(data.train_queries):
        raise ValueError(f"batch size {cfg.batch_size} exceeds "
                         f"{len(data.train_queries)} training queries")

    params = param_dict(theta, phi)
    lrs = {k: (cfg.enc_lr if k.startswith("enc.") else cfg.idx_lr) for k in params}
    state = init_optimizer_state(params)
    log = TrainingLog()
    leaf_map, hard_negs, load = None, {}, float("nan")

    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        if epoch % cfg.r == 0:
            leaf_map = build_leaf_map(data.docs.data, theta, phi, cfg.d2l)
            load = expected_docs_per_leaf(leaf_map)
            log.refreshes.append((epoch, load))
            hard_negs = mine_hard_negatives(data.train_queries, theta, phi, leaf_map,
                                            cfg.beta_train, data, mine_rng)
        sums = np.zeros(4)
        batches = epoch_batches(data.judgments, cfg.batch_size, batch_rng, data.train_queries)
        for batch in batches:
            loss, grads = batch_loss(batch, hard_negs, theta, phi, cfg, data)
            _check_finite(loss, epoch)
            sums += (loss.siamese, loss.indexing, loss.intra_leaf, loss.total)
            params, state = optimizer_step(params, grads, state, lrs, cfg.weight_decay)
            theta, phi = params_from_dict(params, theta, phi)
        means = sums / max(len(batches), 1)
        wall = (time.perf_counter() - start) * 1000.0
        log.epochs.append(EpochLog(epoch, *map(float, means), load, wall))
        logger.debug("epoch %d total=%.5f indexing=%.5f load=%.2f",
                     epoch, means[3], means[1], load)
    return theta, phi, log


# ---------------------------------------------------------------------------
# gradient check

def gradient_check(seed: int = 0, m: int = 8, B: int = 3, H: int = 2, batch: int = 4,
                   eps: float = 1e-4, kink_margin: float = 1e-3,
                   max_tries: int = 50) -> GradCheckReport:
    """Compare analytic loss gradients with central differences.

    Routing paths and the intra-leaf gate are frozen at the unperturbed
    point.  Instances with a hinge or ReLU argument within ``kink_margin``
    of zero are redrawn, since finite differences straddle the kink there.
    """
    cfg = TrainConfig(B=B, H=H, lambda1=0.2, lambda2=0.8, lambda3=0.2, tau=0.5,
                      batch_size=batch, d2l=1)
    for attempt in range(max_tries):
        rng = np.random.default_rng([seed, attempt])
        theta = EncoderParams(np.eye(m) + 0.3 * rng.standard_normal((m, m)),
                              0.1 * rng.standard_normal(m), normalize=True)
        phi = IndexerParams.init(m, B, H, rng)
        phi = IndexerParams(B, H, [3.0 * w for w in phi.W], phi.U)
        arr = _BatchArrays(
            xq=rng.standard_normal((batch, m)),
            xd=rng.standard_normal((batch, m)),
            xh=rng.standard_normal((batch // 2, m)),
            hard_rows=np.arange(batch // 2),
            pair_mask=~np.eye(batch, dtype=bool))
        loss, grads, aux = _loss_core(arr, theta, phi, cfg)
        kinks = [np.abs(aux["hinge_args"])]
        for h, (x, _, _, _) in enumerate(aux["levels"]):
            kinks.append(np.abs(x @ phi.U[h]).ravel())
        if min(k.min() for k in kinks if k.size) > kink_margin:
            break
    else:
        raise RuntimeError("could not draw a kink-free instance")

    params = param_dict(theta, phi)
    paths, gate = aux["paths"], aux["gate"]

    def f(flat):
        th, ph = params_from_dict(_unflatten(flat, params), theta, phi)
        return _loss_core(arr, th, ph, cfg, paths=paths, gate=gate)[0].total

    numeric = _unflatten(finite_diff_grad(f, _flatten(params), eps), params)
    errors = [(k, float(relative_error(grads[k], numeric[k], floor=1e-5).max()))
              for k in params]
    return GradCheckReport(errors)
