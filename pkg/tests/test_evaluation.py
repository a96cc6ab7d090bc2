import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from herdcast.dataset import SampleSet
from herdcast.evaluation import (LayoutMismatchError, argmax_predictions, classification_metrics,
                                 confusion_matrix, cross_evaluate, metrics_csv)


def sample_set(n=10, T=25, F=48, horizon=16, stride=2, y=None):
    y = np.zeros(n, dtype=int) if y is None else np.asarray(y)
    z = np.zeros(len(y), dtype=int)
    return SampleSet(np.zeros((len(y), T, F)), y, z, np.array(["a"] * len(y), dtype=object), z, z, horizon, stride)


class Constant:
    def __init__(self, k, **meta):
        self.k = k
        self.model_ = type("M", (), {"metadata": meta, "n_features": 48})()

    def predict(self, X):
        return np.full(len(X), self.k)


def test_confusion_counts():
    cm = confusion_matrix([0, 1, 2], [0, 1, 1])
    expected = np.zeros((5, 5), dtype=int)
    expected[0, 0] = expected[1, 1] = expected[1, 2] = 1
    np.testing.assert_array_equal(cm, expected)


def test_perfect_predictions_diagonal():
    y = np.arange(5).repeat(3)
    cm = confusion_matrix(y, y)
    np.testing.assert_array_equal(cm, 3 * np.eye(5, dtype=int))
    rep = classification_metrics(cm)
    assert rep.accuracy == rep.precision == rep.recall == rep.f1 == 1.0


def test_confusion_errors():
    with pytest.raises(ValueError, match="length"):
        confusion_matrix([0, 1], [0])
    with pytest.raises(ValueError):
        confusion_matrix([5], [0])


def test_argmax_ties_to_lowest_index():
    np.testing.assert_array_equal(argmax_predictions([[0.4, 0.4, 0.2], [0.1, 0.45, 0.45]]), [0, 1])


def test_binary_example():
    rep = classification_metrics(np.array([[1, 1], [0, 2]]))
    assert rep.accuracy == 0.75
    np.testing.assert_allclose(rep.per_class_precision, [1.0, 2 / 3], atol=1e-15)
    np.testing.assert_allclose(rep.per_class_recall, [0.5, 1.0], atol=1e-15)
    assert abs(rep.f1 - (2 / 3 + 4 / 5) / 2) < 1e-9


def test_empty_matrix_rejected():
    with pytest.raises(ValueError):
        classification_metrics(np.zeros((5, 5)))


def test_absent_classes_excluded_from_macro():
    cm = np.zeros((5, 5), dtype=int)
    cm[0, 0] = 3
    cm[1, 0] = 1
    rep = classification_metrics(cm)
    assert rep.recall == pytest.approx(0.5)
    assert rep.per_class_precision[2] == 0.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=25, max_size=25).filter(lambda v: sum(v) > 0))
def test_prevalence_weighted_recall_and_f1_bounds(cells):
    cm = np.array(cells).reshape(5, 5)
    rep = classification_metrics(cm)
    row = cm.sum(axis=1)
    assert rep.accuracy == pytest.approx(float((rep.per_class_recall * row).sum() / row.sum()), abs=1e-12)
    present = row > 0
    f1 = rep.per_class_f1[present]
    assert f1.min() - 1e-12 <= rep.f1 <= f1.max() + 1e-12
    for v in (rep.accuracy, rep.precision, rep.recall, rep.f1):
        assert 0.0 <= v <= 1.0


def test_metrics_invariant_to_sample_order(rng):
    y = rng.integers(0, 5, 200)
    p = rng.integers(0, 5, 200)
    perm = rng.permutation(200)
    a = classification_metrics(confusion_matrix(p, y))
    b = classification_metrics(confusion_matrix(p[perm], y[perm]))
    assert (a.accuracy, a.f1) == (b.accuracy, b.f1)


def test_constant_predictor_on_balanced_set():
    s = sample_set(y=np.arange(5).repeat(4))
    cross = cross_evaluate({"c": Constant(3, horizon=16, stride=2)}, {"d": [s, s]})
    assert cross.mean("c", "d") == pytest.approx(0.20)
    assert cross.sd("c", "d") == 0.0
    assert "20.00" in cross.table()


def test_layout_mismatch_names_field():
    with pytest.raises(LayoutMismatchError, match="horizon") as info:
        cross_evaluate({"c": Constant(0, horizon=8, stride=2)}, {"d": [sample_set()]})
    assert info.value.field == "horizon"
    with pytest.raises(LayoutMismatchError, match="n_features"):
        cross_evaluate({"c": Constant(0, horizon=16, stride=2)}, {"d": [sample_set(F=12)]})


def test_metrics_csv_row():
    rep = classification_metrics(np.array([[1, 1], [0, 2]]))
    lines = metrics_csv([("m", "t", rep)]).splitlines()
    assert lines[0].startswith("model,test_set,accuracy")
    assert lines[1] == "m,t,0.750000,0.833333,0.750000,0.733333,4,macro"
