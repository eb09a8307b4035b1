import math

import numpy as np
import pytest

from ehi.evaluation import (CurvePoint, best_within_budget, curve, curve_to_csv,
                            expected_docs_per_leaf, mrr_at_k, ndcg_at_k, recall_at_k)
from ehi.retriever import LeafMap
from oracles import metric_reference


class TestRecall:
    def test_all_found(self):
        assert recall_at_k([3, 1, 2], {1, 3}, 3) == 1.0

    def test_none_found(self):
        assert recall_at_k([4, 5], {1}, 2) == 0.0

    def test_half(self):
        assert recall_at_k([1, 9, 2, 8], {1, 2, 3, 4}, 4) == 0.5

    def test_empty_relevant(self):
        with pytest.raises(ValueError):
            recall_at_k([1], set(), 1)


class TestMrr:
    def test_first(self):
        assert mrr_at_k([1, 2], {1}, 10) == 1.0

    def test_third(self):
        assert mrr_at_k([5, 6, 1], {1}, 10) == pytest.approx(1 / 3)

    def test_cutoff(self):
        assert mrr_at_k(list(range(20, 30)) + [1], {1}, 10) == 0.0


class TestNdcg:
    def test_ideal(self):
        assert ndcg_at_k([1, 2], {1}, 10) == 1.0

    def test_rank_two(self):
        assert abs(ndcg_at_k([0, 1], {1}, 10) - 1 / math.log2(3)) < 1e-12

    def test_none(self):
        assert ndcg_at_k([0, 2], {1}, 2) == 0.0

    def test_against_reference(self, rng):
        for _ in range(200):
            n = int(rng.integers(1, 30))
            ranked = list(rng.permutation(50)[:n])
            relevant = set(rng.choice(50, size=int(rng.integers(1, 8)), replace=False).tolist())
            k = int(rng.integers(1, 20))
            r, m, g = metric_reference(ranked, relevant, k)
            assert recall_at_k(ranked, relevant, k) == r
            assert mrr_at_k(ranked, relevant, k) == m
            assert abs(ndcg_at_k(ranked, relevant, k) - g) < 1e-9


class TestLoad:
    def test_uniform(self):
        lm = LeafMap.from_leaf_ids(np.repeat(np.arange(4), 5), 4)
        assert expected_docs_per_leaf(lm) == 5.0

    def test_single_leaf(self):
        assert expected_docs_per_leaf(LeafMap.from_leaf_ids(np.zeros(7, int), 3)) == 7.0

    def test_hand_example(self):
        assert expected_docs_per_leaf(LeafMap.from_leaf_ids([0, 0, 0, 1], 2)) == 2.5

    def test_lower_bound(self, rng):
        for _ in range(50):
            L = int(rng.integers(1, 10))
            ids = rng.integers(L, size=int(rng.integers(1, 100)))
            assert expected_docs_per_leaf(LeafMap.from_leaf_ids(ids, L)) >= len(ids) / L - 1e-12


class _Fixed:
    """Searcher stub returning canned rankings, with visited = beam / 10."""

    def __init__(self, rankings):
        self.rankings = rankings

    def search(self, query_base, beam, k):
        from ehi.retriever import Candidates
        c = Candidates(np.arange(beam), 10)
        return [([(d, 0.0) for d in self.rankings[int(row[0])][beam][:k]], c)
                for row in query_base]


class TestCurve:
    def test_single_query_single_beam(self):
        stub = _Fixed({0: {2: [4, 1, 7]}})
        pts = curve(stub, np.array([[0.0]]), [{1}], [2], 3, "mrr")
        assert pts == [CurvePoint(2, 0.2, "mrr@3", 0.5)]

    def test_csv(self):
        text = curve_to_csv([CurvePoint(1, 0.25, "recall@10", 0.5)])
        assert text == "beam,mean_visited_fraction,metric_name,metric_value\n" \
                       "1,0.250000000,recall@10,0.500000000\n"

    def test_unsorted_beams(self):
        with pytest.raises(ValueError):
            curve(_Fixed({}), np.zeros((1, 1)), [{1}], [2, 1], 3)

    def test_budget(self):
        pts = [CurvePoint(1, 0.1, "r", 0.5), CurvePoint(2, 0.2, "r", 0.9)]
        assert best_within_budget(pts, 0.15).beam == 1
        assert best_within_budget(pts, 0.05) is None
