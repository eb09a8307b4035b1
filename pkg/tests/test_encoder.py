import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ehi.encoder import (EncoderParams, encode, encode_backward, encode_with_cache,
                         score_matrix, similarity, triplet_loss, triplet_loss_grad)
from ehi.kernels import finite_diff_grad


class TestEncode:
    def test_identity_head(self):
        np.testing.assert_array_equal(encode([1.0, 2.0], EncoderParams.identity(2, False)), [1, 2])

    def test_normalized(self):
        np.testing.assert_allclose(encode([3.0, 4.0], EncoderParams.identity(2)), [0.6, 0.8])

    @settings(max_examples=30)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_unit_norm(self, seed):
        rng = np.random.default_rng(seed)
        theta = EncoderParams(rng.standard_normal((5, 5)), rng.standard_normal(5))
        v = encode(rng.standard_normal((7, 5)), theta)
        np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-5)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            encode(np.ones(3), EncoderParams.identity(2))

    @pytest.mark.parametrize("normalize", [True, False])
    def test_backward(self, rng, normalize):
        x = rng.standard_normal((4, 3))
        W, b = rng.standard_normal((3, 3)), rng.standard_normal(3)
        g = rng.standard_normal((4, 3))
        theta = EncoderParams(W, b, normalize)
        _, cache = encode_with_cache(x, theta)
        gW, gb = encode_backward(cache, g, theta)
        f_W = lambda w: float((encode(x, EncoderParams(w.reshape(3, 3), b, normalize)) * g).sum())
        f_b = lambda v: float((encode(x, EncoderParams(W, v, normalize)) * g).sum())
        np.testing.assert_allclose(gW.ravel(), finite_diff_grad(f_W, W), atol=1e-6)
        np.testing.assert_allclose(gb, finite_diff_grad(f_b, b), atol=1e-6)


class TestSimilarity:
    def test_self(self):
        assert similarity([0.3, -2.0], [0.3, -2.0]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert similarity([1.0, 0.0], [0.0, 5.0]) == 0.0

    def test_half_angle(self):
        assert abs(similarity([1.0, 0.0], [1.0, 1.0]) - 1 / np.sqrt(2)) < 1e-6

    def test_dot(self):
        assert similarity([1.0, 2.0], [3.0, 4.0], "dot") == 11.0

    def test_zero_vector(self):
        with pytest.raises(ValueError, match="zero vector"):
            similarity([0.0, 0.0], [1.0, 0.0])

    def test_score_matrix_matches_pairwise(self, rng):
        q, d = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
        S = score_matrix(q, d)
        for i in range(3):
            for j in range(5):
                assert S[i, j] == pytest.approx(similarity(q[i], d[j]), abs=1e-12)


class TestTripletLoss:
    # q = e1, so q.d is the first coordinate of d
    q = np.array([1.0, 0.0])

    def test_margin_satisfied(self):
        assert triplet_loss(self.q, [0.7, 0.1], [0.2, 0.5], 0.3) == 0.0

    def test_violation(self):
        assert triplet_loss(self.q, [0.5, 0.0], [0.6, 0.0], 0.3) == pytest.approx(0.4)

    def test_identical_docs(self, rng):
        d = rng.standard_normal(2)
        assert triplet_loss(self.q, d, d, 0.3) == pytest.approx(0.3)

    def test_bounds_for_unit_vectors(self, rng):
        for _ in range(100):
            q, a, b = (v / np.linalg.norm(v) for v in rng.standard_normal((3, 4)))
            assert 0.0 <= triplet_loss(q, a, b, 0.3) <= 2.3

    def test_grad(self, rng):
        q, a, b = rng.standard_normal((3, 4))
        gq, ga, gb = triplet_loss_grad(q, a, b, gamma=10.0)
        np.testing.assert_allclose(gq, finite_diff_grad(lambda z: triplet_loss(z, a, b, 10.0), q), atol=1e-8)
        np.testing.assert_allclose(ga, -q)
        np.testing.assert_allclose(gb, q)

    def test_grad_zero_when_inactive(self):
        grads = triplet_loss_grad(self.q, [0.9, 0.0], [0.1, 0.0], 0.3)
        for g in grads:
            np.testing.assert_array_equal(g, 0.0)
