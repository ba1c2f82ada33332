import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from looktrack.encoding import MatchResult
from looktrack.metrics import ClassificationReport, classification_metrics, tracking_metrics


def test_perfect_separation():
    r = classification_metrics([1, 0], [0.9, 0.1])
    assert (r.accuracy, r.precision, r.recall) == (1.0, 1.0, 1.0)


def test_hand_counted_report():
    r = ClassificationReport(tp=1, fp=1, tn=8, fn=0, threshold=0.5)
    assert r.precision == 0.5 and r.recall == 1.0 and r.accuracy == 0.9


def test_counts_from_probabilities():
    labels = [1, 1, 0, 0, 0, 0, 0, 0, 0, 0]
    probs = [0.7, 0.2, 0.6, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1]
    r = classification_metrics(labels, probs)
    assert (r.tp, r.fp, r.tn, r.fn) == (1, 1, 7, 1)


def test_all_negative_predictions_give_zero_precision():
    r = classification_metrics([1, 0, 1], [0.1, 0.2, 0.3])
    assert r.precision == 0.0 and r.recall == 0.0


def test_threshold_is_inclusive():
    assert classification_metrics([1], [0.5]).tp == 1
    assert classification_metrics([1], [0.5], threshold=0.51).fn == 1


def test_bad_inputs():
    with pytest.raises(ValueError):
        classification_metrics([], [])
    with pytest.raises(ValueError):
        classification_metrics([1, 0], [0.5])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.floats(0, 1)), min_size=1, max_size=40),
       st.floats(0, 1), st.floats(0, 1))
def test_recall_monotone_in_threshold(pairs, t1, t2):
    labels, probs = zip(*pairs)
    lo, hi = sorted((t1, t2))
    a, b = classification_metrics(labels, probs, lo), classification_metrics(labels, probs, hi)
    assert b.recall <= a.recall
    for r in (a, b):
        assert r.tp + r.fn == sum(labels)
        assert r.tp + r.fp + r.tn + r.fn == len(labels)
        assert 0 <= r.accuracy <= 1 and 0 <= r.precision <= 1 and 0 <= r.recall <= 1


def result(n_sim, n_found, hits, true_hits):
    return MatchResult(n_simulated=n_sim, n_reconstructed=n_found, n_found=n_found,
                       n_predicted_hits=hits, n_true_predicted_hits=true_hits, matches=[])


def test_tracking_efficiency_and_fake_rate():
    rep = tracking_metrics([result(10, 7, 40, 30)])
    assert rep.efficiency == 0.7
    assert rep.fake_hit_rate == pytest.approx(0.25)


def test_tracking_pools_events():
    rep = tracking_metrics([result(4, 4, 20, 20), result(6, 3, 20, 10)])
    assert rep.efficiency == 0.7 and rep.fake_hit_rate == 0.25 and rep.n_events == 2


def test_no_predictions_means_no_fakes():
    assert tracking_metrics([result(3, 0, 0, 0)]).fake_hit_rate == 0.0


def test_tracking_errors():
    with pytest.raises(ValueError):
        tracking_metrics([])
    with pytest.raises(ValueError):
        tracking_metrics([result(0, 0, 0, 0)])
