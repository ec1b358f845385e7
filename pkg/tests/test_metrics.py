import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rumorssl.metrics import aggregate_runs, confusion_matrix, confusion_metrics, report_from_confusion, results_csv
from rumorssl.numcore import ContractError


def expand(cm):
    """Prediction and label vectors realizing a [predicted, actual] confusion matrix."""
    preds, labels = [], []
    for p in range(cm.shape[0]):
        for a in range(cm.shape[1]):
            preds += [p] * int(cm[p, a])
            labels += [a] * int(cm[p, a])
    return np.array(preds), np.array(labels)


def test_perfect_predictions():
    r = confusion_metrics([0, 1, 1, 0, 2], [0, 1, 1, 0, 2], 3)
    assert r.accuracy == 1.0
    assert all(m.precision == m.recall == m.f1 == 1.0 for m in r.per_class)


def test_constant_predictor_on_balanced_binary():
    r = confusion_metrics([0] * 6, [0, 1] * 3, 2)
    assert r.accuracy == 0.5
    assert r.per_class[1].recall == 0.0 and r.per_class[1].precision == 0.0
    assert r.per_class[1].no_predictions and not r.per_class[0].no_predictions


def test_hand_confusion():
    cm = np.array([[3, 1], [2, 4]])
    r = confusion_metrics(*expand(cm), 2)
    assert np.array_equal(r.confusion, cm)
    assert r.accuracy == pytest.approx(0.7)
    c0 = r.per_class[0]
    assert c0.precision == pytest.approx(0.75) and c0.recall == pytest.approx(0.6)
    assert c0.f1 == pytest.approx(2 / 3)
    assert c0.support == 5


def test_errors():
    with pytest.raises(ContractError):
        confusion_metrics([0, 1], [0], 2)
    with pytest.raises(ContractError):
        confusion_metrics([], [], 2)


def test_aggregate_examples():
    assert aggregate_runs([0.8] * 4)[2] == "0.800±0.000"
    mean, std, cell = aggregate_runs([0.9, 1.0])
    # population std; the sample estimate would be 0.0707
    assert cell == "0.950±0.050" and std == pytest.approx(0.05)
    assert aggregate_runs([0.948, 0.958])[2] == "0.953±0.005"
    with pytest.raises(ContractError):
        aggregate_runs([])


def test_report_serializes_to_plain_json_types():
    r = confusion_metrics([0, 0, 1], [0, 1, 1], 2)
    json.dumps(r.to_dict(["non-rumor", "rumor"]))


def test_results_csv():
    text = results_csv([{"split": 0, "accuracy": 0.5}, {"split": 1, "accuracy": 0.75}])
    rows = list(csv.DictReader(io.StringIO(text)))
    assert rows == [{"split": "0", "accuracy": "0.5"}, {"split": "1", "accuracy": "0.75"}]
    assert results_csv([]) == ""


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=60))
def test_confusion_invariants(pairs):
    preds, labels = map(np.array, zip(*pairs))
    r = confusion_metrics(preds, labels, 3)
    cm = confusion_matrix(preds, labels, 3)
    assert cm.sum() == len(pairs) and cm.min() >= 0
    assert r.accuracy == pytest.approx(np.trace(cm) / cm.sum())
    weighted = sum(m.recall * m.support for m in r.per_class) / len(pairs)
    assert weighted == pytest.approx(r.accuracy)
    assert report_from_confusion(cm).accuracy == r.accuracy


@given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.randoms())
def test_aggregation_is_order_invariant(accs, rnd):
    shuffled = accs[:]
    rnd.shuffle(shuffled)
    a, b = aggregate_runs(accs), aggregate_runs(shuffled)
    assert a[0] == pytest.approx(b[0], abs=1e-12) and a[1] == pytest.approx(b[1], abs=1e-12)
