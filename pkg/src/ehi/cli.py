"""Command-line entry point: ``ehi {train,build-index,search,eval,curve,gradcheck}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path


from .data import DataError, load_embeddings, load_qrels
from .evaluation import METRIC_NAMES, curve, curve_to_csv, evaluate_beam
from .ivf import IvfSearcher, train_baseline
from .persistence import Artifact, ArtifactError, load_artifact, save_artifact
from .retriever import build_leaf_map
from .trainer import NonFiniteLossError, TrainConfig, TrainingData, gradient_check, train

log = logging.getLogger("ehi")


class CliError(Exception):
    def __init__(self, message, code=1):
        super().__init__(message)
        self.code = code


def _require(path, what):
    if path is None or not Path(path).exists():
        raise CliError(f"{what} not found: {path}")
    return path


def _load_config(path) -> TrainConfig:
    text = Path(_require(path, "config file")).read_text(encoding="utf-8")
    cfg = TrainConfig.from_text(text)
    seed = os.environ.get("EHI_SEED")
    if seed is not None:
        cfg = cfg.replace(seed=int(seed))
    return cfg


def _read_query_list(path):
    lines = Path(_require(path, "query list")).read_text(encoding="utf-8").split()
    return [q for q in lines if q]


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    docs = load_embeddings(_require(args.docs, "document embeddings"))
    queries = load_embeddings(_require(args.queries, "query embeddings"))
    qrels = load_qrels(_require(args.qrels, "qrels"))
    train_q = _read_query_list(args.train_queries) if args.train_queries else None
    data = TrainingData(docs, queries, qrels, train_q)
    if args.kind == "ehi":
        theta, phi, tlog = train(data, cfg)
        leaf_map = build_leaf_map(docs.data, theta, phi, cfg.d2l)
        art = Artifact("ehi", cfg, docs.ids, docs.data, theta, leaf_map, phi=phi)
    else:
        searcher, tlog = train_baseline(data, cfg)
        art = Artifact("ivf", cfg, docs.ids, docs.data, searcher.theta,
                       searcher.index.assignments, centroids=searcher.index.centroids)
    save_artifact(args.out, art)
    log_path = args.log or f"{args.out}.log.csv"
    Path(log_path).write_text(tlog.to_csv(), encoding="utf-8")
    print(f"wrote {args.out} ({art.kind}, {len(docs.ids)} docs) and {log_path}", file=sys.stderr)
    return 0


def cmd_build_index(args) -> int:
    art = load_artifact(_require(args.index, "index"))
    if args.docs:
        docs = load_embeddings(_require(args.docs, "document embeddings"))
        art.doc_ids, art.doc_base = docs.ids, docs.data
    if art.kind == "ehi":
        d2l = args.d2l or art.config.d2l
        art.leaf_map = build_leaf_map(art.doc_base, art.theta, art.phi, d2l)
        art.config = art.config.replace(d2l=d2l)
    else:
        searcher = IvfSearcher.build(art.doc_base, art.theta, art.centroids.shape[0],
                                     args.iters, art.config.seed, art.config.metric)
        art.centroids = searcher.index.centroids
        art.leaf_map = searcher.index.assignments
    save_artifact(args.out, art)
    return 0


def _check_beam(beam, searcher):
    if not 1 <= beam <= searcher.max_beam:
        raise CliError(f"beam {beam} outside [1, {searcher.max_beam}]")


def cmd_search(args) -> int:
    art = load_artifact(_require(args.index, "index"))
    queries = load_embeddings(_require(args.queries, "query embeddings"))
    if queries.count == 0:
        raise CliError("no queries")
    searcher = art.searcher()
    _check_beam(args.beam, searcher)
    out = sys.stdout
    for qid, (ranked, _) in zip(queries.ids, searcher.search(queries.data, args.beam, args.k)):
        for rank, (doc, score) in enumerate(ranked, 1):
            out.write(f"{qid}\t{rank}\t{art.doc_ids[doc]}\t{score:.9f}\n")
    return 0


def _eval_inputs(args):
    art = load_artifact(_require(args.index, "index"))
    queries = load_embeddings(_require(args.queries, "query embeddings"))
    qrels = load_qrels(_require(args.qrels, "qrels"))
    doc_index = {d: i for i, d in enumerate(art.doc_ids)}
    rows, relevant = [], []
    for i, qid in enumerate(queries.ids):
        pos = qrels.positives.get(qid)
        if not pos:
            continue
        rel = {doc_index[d] for d in pos if d in doc_index}
        if rel:
            rows.append(i)
            relevant.append(rel)
    if not rows:
        raise CliError("no queries")
    return art, queries.data[rows], relevant


def cmd_eval(args) -> int:
    art, qbase, relevant = _eval_inputs(args)
    searcher = art.searcher()
    _check_beam(args.beam, searcher)
    names = METRIC_NAMES if args.metric == "all" else (args.metric,)
    visited, values = evaluate_beam(searcher, qbase, relevant, args.beam, args.k, names)
    sys.stdout.write("beam,mean_visited_fraction,metric_name,metric_value\n")
    for name in names:
        sys.stdout.write(f"{args.beam},{visited:.9f},{name}@{args.k},{values[name]:.9f}\n")
    return 0


def cmd_curve(args) -> int:
    art, qbase, relevant = _eval_inputs(args)
    searcher = art.searcher()
    beams = sorted(int(b) for b in args.beams.split(",")) if args.beams else \
        [b for b in (2 ** i for i in range(64)) if b < searcher.max_beam] + [searcher.max_beam]
    for b in beams:
        _check_beam(b, searcher)
    text = curve_to_csv(curve(searcher, qbase, relevant, beams, args.k, args.metric))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    report = gradient_check(seed=args.seed, eps=args.eps)
    print(report.format())
    ok = report.max_rel_error < args.tol
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ehi", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an index and write an artifact")
    t.add_argument("--config", required=True)
    t.add_argument("--docs", required=True)
    t.add_argument("--queries", required=True)
    t.add_argument("--qrels", required=True)
    t.add_argument("--train-queries", help="file of query ids to train on (default: all judged)")
    t.add_argument("--kind", choices=("ehi", "ivf"), default="ehi")
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("build-index", help="re-assign documents with a trained artifact")
    b.add_argument("--index", required=True)
    b.add_argument("--docs")
    b.add_argument("--d2l", type=int)
    b.add_argument("--iters", type=int, default=25)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_index)

    s = sub.add_parser("search", help="top-k search; TSV query-id, rank, doc-id, score")
    s.add_argument("--index", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--beam", type=int, default=1)
    s.add_argument("--k", type=int, default=10)
    s.set_defaults(func=cmd_search)

    for name, func in (("eval", cmd_eval), ("curve", cmd_curve)):
        e = sub.add_parser(name)
        e.add_argument("--index", required=True)
        e.add_argument("--queries", required=True)
        e.add_argument("--qrels", required=True)
        e.add_argument("--k", type=int, default=10)
        if name == "eval":
            e.add_argument("--beam", type=int, default=1)
            e.add_argument("--metric", choices=METRIC_NAMES + ("all",), default="all")
        else:
            e.add_argument("--beams", help="comma-separated, e.g. 1,2,4 (default: powers of 2)")
            e.add_argument("--metric", choices=METRIC_NAMES, default="recall")
            e.add_argument("--out")
        e.set_defaults(func=func)

    g = sub.add_parser("gradcheck", help="compare analytic and numeric loss gradients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--eps", type=float, default=1e-4)
    g.add_argument("--tol", type=float, default=1e-3)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CliError, DataError, ArtifactError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "code", 1)


if __name__ == "__main__":
    sys.exit(main())
