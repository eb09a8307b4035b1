import struct
import time

import numpy as np
import pytest

from ehi.cli import main
from ehi.data import EmbeddingMatrix, save_embeddings, save_qrels
from ehi.persistence import MAGIC
from ehi.synthetic import make_clustered_corpus
from oracles import brute_force_topk

CONFIG = "B = 4\nH = 2\nepochs = 6\nbatch_size = 32\nr = 2\n"


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    c = make_clustered_corpus(n_docs=300, n_clusters=8, dim=8, n_train=96, n_test=48, seed=2)
    save_embeddings(d / "docs.bin", c.docs)
    save_embeddings(d / "queries.bin", c.queries)
    save_qrels(d / "qrels.tsv", c.judgments)
    (d / "train.txt").write_text("\n".join(c.train_queries) + "\n")
    (d / "cfg.txt").write_text(CONFIG)
    return d, c


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def train_args(d, out, kind="ehi"):
    return ["train", "--config", d / "cfg.txt", "--docs", d / "docs.bin",
            "--queries", d / "queries.bin", "--qrels", d / "qrels.tsv",
            "--train-queries", d / "train.txt", "--kind", kind, "--out", out]


class TestEndToEnd:
    def test_all_commands(self, workdir, capsys):
        d, c = workdir
        start = time.perf_counter()
        for kind in ("ehi", "ivf"):
            art = d / f"smoke.{kind}"
            assert run(capsys, *train_args(d, art, kind))[0] == 0
            assert (d / f"smoke.{kind}.log.csv").exists()
            code, out, _ = run(capsys, "search", "--index", art, "--queries", d / "queries.bin",
                               "--beam", 2, "--k", 3)
            assert code == 0
            rows = [line.split("\t") for line in out.splitlines()]
            assert len(rows) == 3 * c.queries.count
            assert [r[1] for r in rows[:3]] == ["1", "2", "3"]
            code, out, _ = run(capsys, "eval", "--index", art, "--queries", d / "queries.bin",
                               "--qrels", d / "qrels.tsv", "--beam", 2)
            assert code == 0 and out.splitlines()[0] == \
                "beam,mean_visited_fraction,metric_name,metric_value"
            code, out, _ = run(capsys, "curve", "--index", art, "--queries", d / "queries.bin",
                               "--qrels", d / "qrels.tsv", "--beams", "1,2,16")
            assert code == 0 and len(out.splitlines()) == 4
            assert run(capsys, "build-index", "--index", art, "--d2l", 2,
                       "--out", d / f"re.{kind}")[0] == 0
        code, out, _ = run(capsys, "gradcheck")
        assert code == 0 and "PASS" in out
        assert time.perf_counter() - start < 60

    def test_full_beam_matches_brute_force(self, workdir, capsys):
        d, c = workdir
        art = d / "full.ehi"
        run(capsys, *train_args(d, art))
        # identity head: retrieval space is the normalized base space when untrained
        (d / "zero.txt").write_text(CONFIG.replace("epochs = 6", "epochs = 0"))
        args = train_args(d, d / "zero.ehi")
        args[2] = d / "zero.txt"
        assert run(capsys, *args)[0] == 0
        code, out, _ = run(capsys, "search", "--index", d / "zero.ehi",
                           "--queries", d / "queries.bin", "--beam", 16, "--k", 10)
        got = {}
        for line in out.splitlines():
            q, _, doc, _ = line.split("\t")
            got.setdefault(q, []).append(int(doc[1:]))
        docs = c.docs.data.astype(np.float64)
        for i, q in enumerate(c.queries.ids):
            assert got[q] == brute_force_topk(c.queries.data[i].astype(np.float64), docs, 10)

    def test_k_beyond_corpus(self, workdir, capsys):
        d, c = workdir
        run(capsys, *train_args(d, d / "k.ivf", "ivf"))
        small = EmbeddingMatrix(["x"], c.queries.data[:1])
        save_embeddings(d / "one.bin", small)
        code, out, _ = run(capsys, "search", "--index", d / "k.ivf", "--queries", d / "one.bin",
                           "--beam", 16, "--k", 1000)
        assert code == 0 and len(out.splitlines()) == c.docs.count

    def test_deterministic(self, workdir, capsys):
        d, _ = workdir
        run(capsys, *train_args(d, d / "a.ehi"))
        run(capsys, *train_args(d, d / "b.ehi"))
        assert (d / "a.ehi").read_bytes() == (d / "b.ehi").read_bytes()

    def test_seed_env_override(self, workdir, capsys, monkeypatch):
        d, _ = workdir
        run(capsys, *train_args(d, d / "s0.ehi"))
        monkeypatch.setenv("EHI_SEED", "17")
        run(capsys, *train_args(d, d / "s17.ehi"))
        assert (d / "s0.ehi").read_bytes() != (d / "s17.ehi").read_bytes()
        assert b"seed = 17" in (d / "s17.ehi").read_bytes()

    def test_full_beam_eval_equals_exact(self, workdir, capsys):
        d, _ = workdir
        art = d / "ev.ehi"
        run(capsys, *train_args(d, art))
        _, out, _ = run(capsys, "curve", "--index", art, "--queries", d / "queries.bin",
                        "--qrels", d / "qrels.tsv", "--beams", "16")
        rows = out.splitlines()
        assert len(rows) == 2 and rows[1].startswith("16,1.000000000,recall@10,")


class TestErrors:
    def test_missing_qrels(self, workdir, capsys):
        d, _ = workdir
        args = train_args(d, d / "x.ehi")
        args[args.index("--qrels") + 1] = d / "missing.tsv"
        code, _, err = run(capsys, *args)
        assert code == 1 and "missing.tsv" in err

    def test_bad_config(self, workdir, capsys):
        d, _ = workdir
        (d / "bad.txt").write_text("B = 4\nwat = 1\n")
        args = train_args(d, d / "x.ehi")
        args[2] = d / "bad.txt"
        code, _, err = run(capsys, *args)
        assert code == 1 and "unknown key" in err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss(self, workdir, capsys):
        d, _ = workdir
        (d / "nan.txt").write_text(CONFIG + "enc_lr = 1e308\nidx_lr = 1e308\n")
        args = train_args(d, d / "x.ehi")
        args[2] = d / "nan.txt"
        assert run(capsys, *args)[0] == 2

    def test_version_mismatch(self, workdir, capsys):
        d, _ = workdir
        run(capsys, *train_args(d, d / "v.ehi"))
        raw = bytearray((d / "v.ehi").read_bytes())
        raw[len(MAGIC):len(MAGIC) + 4] = struct.pack("<I", 7)
        (d / "v7.ehi").write_bytes(bytes(raw))
        code, _, err = run(capsys, "search", "--index", d / "v7.ehi", "--queries", d / "queries.bin")
        assert code == 1 and "version" in err

    def test_empty_query_file(self, workdir, capsys):
        d, _ = workdir
        run(capsys, *train_args(d, d / "e.ehi"))
        save_embeddings(d / "empty.bin", EmbeddingMatrix([], np.zeros((0, 8), np.float32)))
        code, _, err = run(capsys, "curve", "--index", d / "e.ehi", "--queries", d / "empty.bin",
                           "--qrels", d / "qrels.tsv")
        assert code == 1 and "no queries" in err

    def test_beam_out_of_range(self, workdir, capsys):
        d, _ = workdir
        run(capsys, *train_args(d, d / "b.ivf", "ivf"))
        code, _, err = run(capsys, "search", "--index", d / "b.ivf",
                           "--queries", d / "queries.bin", "--beam", 99)
        assert code == 1 and "beam" in err
