import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from evenet.evidential import EvidenceField, beliefs, evidence_to_alpha, expected_probabilities, uncertainty

evidence_arrays = hnp.arrays(
    np.float64,
    st.tuples(st.integers(2, 8), st.integers(1, 5)),
    elements=st.floats(0, 1e6, allow_nan=False),
)


class TestAlpha:
    def test_shift(self):
        np.testing.assert_array_equal(evidence_to_alpha(np.zeros(3)), [1, 1, 1])
        np.testing.assert_array_equal(evidence_to_alpha(np.array([1.0, 2.0, 3.0])), [2, 3, 4])

    def test_order_preserved(self):
        e = np.random.default_rng(42).exponential(size=(4, 10))
        assert evidence_to_alpha(e).min() == 1 + e.min()


class TestBeliefs:
    def test_zero_evidence(self):
        bf = beliefs(np.zeros(3))
        np.testing.assert_array_equal(bf.beliefs, 0.0)
        assert bf.uncertainty == 1.0

    def test_worked_example(self):
        bf = beliefs(np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(bf.beliefs, [1 / 9, 2 / 9, 3 / 9], rtol=1e-15)
        np.testing.assert_allclose(bf.uncertainty, 3 / 9, rtol=1e-15)
        np.testing.assert_allclose(bf.strength, 9.0)

    def test_large_evidence(self):
        assert beliefs(np.array([1e6, 0.0, 0.0])).uncertainty < 1e-5

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            beliefs(np.ones((1, 4)))

    @given(evidence_arrays)
    def test_partition_and_uncertainty(self, e):
        bf = beliefs(e)
        n = e.shape[0]
        np.testing.assert_allclose(bf.beliefs.sum(axis=0) + bf.uncertainty, 1.0, atol=1e-6)
        np.testing.assert_allclose(bf.uncertainty, n / (e.sum(axis=0) + n), atol=1e-6)
        assert (bf.uncertainty > 0).all() and (bf.uncertainty <= 1).all()

    @given(evidence_arrays, st.floats(1.01, 100))
    def test_scaling_lowers_uncertainty(self, e, c):
        e = e + 1e-3
        assert (uncertainty(c * e) < uncertainty(e)).all()

    def test_argmax_agrees(self):
        rng = np.random.default_rng(42)
        e = rng.exponential(size=(5, 1000))
        a = e + 1
        assert (np.argmax(beliefs(e).beliefs, 0) == np.argmax(e, 0)).all()
        assert (np.argmax(expected_probabilities(a), 0) == np.argmax(e, 0)).all()
        assert (beliefs(e).labels() == np.argmax(e, 0)).all()


class TestExpectedProbabilities:
    def test_symmetric(self):
        np.testing.assert_allclose(expected_probabilities(np.ones(4)), 0.25)

    def test_worked(self):
        np.testing.assert_allclose(expected_probabilities(np.array([2.0, 3.0, 4.0])), [2 / 9, 3 / 9, 4 / 9])

    @given(evidence_arrays)
    def test_sums_to_one(self, e):
        np.testing.assert_allclose(expected_probabilities(e + 1).sum(axis=0), 1.0, atol=1e-6)


class TestEvidenceField:
    def test_rejects_negative_and_nan(self):
        with pytest.raises(ValueError):
            EvidenceField(np.array([[-1.0], [0.0]]))
        with pytest.raises(ValueError):
            EvidenceField(np.array([[np.nan], [0.0]]))

    def test_volume_roundtrip(self):
        e = np.random.default_rng(42).exponential(size=(3, 2, 2, 2)).astype(np.float32)
        f = EvidenceField(e, "md")
        g = EvidenceField.from_volume(f.to_volume(), "md")
        np.testing.assert_array_equal(f.evidence, g.evidence)
        assert f.n_classes == 3 and f.spatial_shape == (2, 2, 2)
