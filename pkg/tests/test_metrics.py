import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import pair_count_auc
from qhml.errors import ShapeError, UndefinedMetricError
from qhml.metrics import EvalRecord, aggregate_cv, auc, response_auc


class TestAUC:
    def test_separated(self):
        assert auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0

    def test_all_ties(self):
        assert auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5

    def test_interleaved(self):
        scores, labels = [0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]
        assert pair_count_auc(scores, labels) == 0.75
        assert auc(scores, labels) == 0.75

    @pytest.mark.parametrize("labels", [[1, 1, 1], [0, 0]])
    def test_single_class(self, labels):
        with pytest.raises(UndefinedMetricError):
            auc(np.arange(len(labels)), labels)

    def test_shape(self):
        with pytest.raises(ShapeError):
            auc([1, 2, 3], [0, 1])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 200), st.integers(0, 2**32 - 1), st.booleans())
    def test_matches_pair_counting(self, n, seed, coarse):
        r = np.random.default_rng(seed)
        labels = r.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = r.integers(0, 5, n).astype(float) if coarse else r.normal(size=n)
        assert auc(scores, labels) == pytest.approx(pair_count_auc(scores, labels), abs=1e-12)

    def test_monotone_invariance_and_complement(self, rng):
        s = rng.normal(size=80)
        y = rng.integers(0, 2, 80)
        assert auc(np.exp(3 * s) + 1, y) == pytest.approx(auc(s, y), abs=1e-15)
        assert auc(-s, y) == pytest.approx(1 - auc(s, y), abs=1e-15)

    def test_response_orientation(self):
        # responders have the lowest predicted log(IC50)
        assert response_auc([-0.9, -0.5, 0.3, 0.8], [True, True, False, False]) == 1.0


class TestAggregate:
    def test_identical(self):
        mean, best = aggregate_cv([[0.5, 0.7, 0.6]] * 3)
        np.testing.assert_allclose(mean, [0.5, 0.7, 0.6], rtol=1e-15)
        assert best == 1

    def test_first_best(self):
        mean, best = aggregate_cv([[0.5, 0.7], [0.7, 0.5]])
        np.testing.assert_allclose(mean, [0.6, 0.6])
        assert best == 0

    def test_mixed_lengths(self):
        with pytest.raises(ShapeError):
            aggregate_cv([[0.5, 0.6], [0.5]])

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate_cv([])

    def test_bounds(self, rng):
        traces = rng.uniform(size=(50, 100))
        mean, _ = aggregate_cv([EvalRecord("d", "c", i // 5, i % 5, list(t)) for i, t in enumerate(traces)])
        assert np.all(mean >= traces.min(axis=0)) and np.all(mean <= traces.max(axis=0))

    def test_record_best(self):
        rec = EvalRecord("d", "c", 0, 0, [0.5, 0.8, 0.8, 0.6])
        assert (rec.best_auc, rec.best_epoch) == (0.8, 1)
