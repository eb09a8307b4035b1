import struct

import numpy as np
import pytest

from ehi.data import (MAGIC, Batch, DataError, EmbeddingMatrix, RelevanceJudgments,
                      epoch_batches, load_embeddings, load_qrels, parse_qrels,
                      sample_minibatch, save_embeddings, save_qrels)


def _write_raw(path, count, dim, floats, ids):
    header = MAGIC + struct.pack("<QQ", count, dim)
    path.write_bytes(header + np.asarray(floats, "<f4").tobytes())
    (path.parent / (path.name + ".ids")).write_text("".join(i + "\n" for i in ids))


class TestEmbeddings:
    def test_round_trip_is_byte_identical(self, tmp_path, rng):
        m = EmbeddingMatrix(["a", "b", "c"], rng.standard_normal((3, 4)).astype(np.float32))
        save_embeddings(tmp_path / "e.bin", m)
        back = load_embeddings(tmp_path / "e.bin")
        assert back.ids == m.ids
        np.testing.assert_array_equal(back.data, m.data)
        save_embeddings(tmp_path / "f.bin", back)
        assert (tmp_path / "e.bin").read_bytes() == (tmp_path / "f.bin").read_bytes()

    def test_shape_passthrough(self, tmp_path):
        _write_raw(tmp_path / "e.bin", 2, 3, np.arange(6), ["a", "b"])
        m = load_embeddings(tmp_path / "e.bin")
        assert (m.count, m.dim) == (2, 3)

    def test_short_payload(self, tmp_path):
        m = EmbeddingMatrix(["a", "b"], np.zeros((2, 3), np.float32))
        save_embeddings(tmp_path / "e.bin", m)
        raw = (tmp_path / "e.bin").read_bytes()
        (tmp_path / "e.bin").write_bytes(raw[:-4])
        with pytest.raises(DataError, match="payload size mismatch"):
            load_embeddings(tmp_path / "e.bin")

    def test_nan_rejected(self, tmp_path):
        _write_raw(tmp_path / "e.bin", 2, 3, [np.nan, 0, 0, 0, 0, 0], ["a", "b"])
        with pytest.raises(DataError, match="non-finite value at row 0"):
            load_embeddings(tmp_path / "e.bin")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "e.bin").write_bytes(b"nope")
        with pytest.raises(DataError, match="malformed header"):
            load_embeddings(tmp_path / "e.bin")

    def test_duplicate_ids(self):
        with pytest.raises(DataError):
            EmbeddingMatrix(["a", "a"], np.zeros((2, 2), np.float32))

    def test_data_is_read_only(self):
        m = EmbeddingMatrix(["a"], np.zeros((1, 2)))
        with pytest.raises(ValueError):
            m.data[0, 0] = 1.0


class TestQrels:
    def test_positive_and_negative(self):
        j = parse_qrels(["q1\td1\t1\n", "q1\td2\t-1\n"])
        assert j.positives == {"q1": ("d1",)}
        assert j.negatives("q1") == ["d2"]

    def test_conflicting_label(self):
        with pytest.raises(DataError, match=r"conflicting label for \(q1,d1\)"):
            parse_qrels(["q1\td1\t1", "q1\td1\t-1"])

    def test_query_without_positive(self):
        with pytest.raises(DataError, match="query q1 has no positive"):
            parse_qrels(["q1\td2\t-1"])

    def test_bad_label(self):
        with pytest.raises(DataError, match="not in"):
            parse_qrels(["q1\td1\t2"])

    def test_round_trip(self, tmp_path):
        j = RelevanceJudgments({("q1", "d1"): 1, ("q1", "d2"): -1, ("q2", "d3"): 1})
        save_qrels(tmp_path / "q.tsv", j)
        assert load_qrels(tmp_path / "q.tsv").triples == j.triples


class TestSampling:
    @pytest.fixture
    def judgments(self):
        return RelevanceJudgments({(f"q{i}", f"d{i}"): 1 for i in range(10)})

    def test_exhaustive_draw(self, judgments):
        b = sample_minibatch(judgments, 10, np.random.default_rng(3))
        assert sorted(b.queries) == sorted(judgments.queries)

    def test_same_seed_same_batch(self, judgments):
        a = sample_minibatch(judgments, 4, np.random.default_rng(9))
        b = sample_minibatch(judgments, 4, np.random.default_rng(9))
        assert a == b

    def test_positive_frequency(self):
        j = RelevanceJudgments({("q", "d1"): 1, ("q", "d2"): 1})
        rng = np.random.default_rng(0)
        picks = [sample_minibatch(j, 1, rng).docs[0] for _ in range(10000)]
        assert abs(picks.count("d1") / 10000 - 0.5) < 0.05

    def test_oversized_batch(self, judgments):
        with pytest.raises(DataError, match="exceeds query count"):
            sample_minibatch(judgments, 11, np.random.default_rng(0))

    def test_epoch_partition(self, judgments):
        batches = epoch_batches(judgments, 4, np.random.default_rng(0))
        assert [b.size for b in batches] == [4, 4, 2]
        seen = [q for b in batches for q in b.queries]
        assert sorted(seen) == sorted(judgments.queries)

    def test_distinct_queries(self):
        with pytest.raises(DataError):
            Batch([("q", "d1"), ("q", "d2")])
