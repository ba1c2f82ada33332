import math

import numpy as np
import pytest
from sklearn.base import clone

from looktrack.estimators import (
    LootTracker,
    SeedTrackClassifier,
    TrainingError,
    group_by_length,
    simulated_batches,
)
from looktrack.simulator import SimConfig, generate_event, generate_seed_candidates

TINY = SimConfig(width=16, height=16, half_x=8, half_y=8, min_tracks=2, max_tracks=4,
                 station_z=(1000.0, 1001.0, 1002.0, 1003.0, 1004.0), cone_half_angle=math.atan(7.5 / 1004))
SEQ_SIM = SimConfig(station_z=(100.0, 125.0, 150.0, 175.0, 200.0), cone_half_angle=math.atan(31.5 / 200))


def tiny_tracker(**kw):
    params = dict(sim_config=TINY, epochs=2, batches_per_epoch=2, batch_size=2, coord_filters=4,
                  filters=(4, 4, 8, 8), n_eval_events=3)
    params.update(kw)
    return LootTracker(**params)


def test_params_round_trip_through_clone():
    est = tiny_tracker(learning_rate=0.01)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert SeedTrackClassifier(epochs=3).set_params(batch_size=7).batch_size == 7


def test_threaded_and_inline_batches_agree():
    inline = list(simulated_batches(TINY, 5, 1, 4, 3, threaded=False))
    threaded = list(simulated_batches(TINY, 5, 1, 4, 3, threaded=True))
    assert inline == threaded and len(inline) == 4


def test_fit_predict_shapes():
    est = tiny_tracker().fit()
    assert len(est.loss_history_) == 4
    assert all(np.isfinite(v) and v > 0 for v in est.loss_history_)
    assert [r["epoch"] for r in est.history_] == [1, 2]
    events = [generate_event(TINY, np.random.default_rng(i)) for i in range(3)]
    grid = est.predict_grid(events)
    assert grid.shape == (3, 16, 16, 9)
    for reco in est.predict(events):
        assert reco.ndim == 3 and reco.shape[1:] == (5, 2)
    assert 0.0 <= est.score(events) <= 1.0


def test_fit_on_given_events():
    events = [generate_event(TINY, np.random.default_rng(i)) for i in range(5)]
    est = tiny_tracker(epochs=1).fit(events)
    assert len(est.loss_history_) == 3


def test_fit_is_reproducible():
    a = tiny_tracker().fit()
    b = tiny_tracker(deterministic=False).fit()
    assert a.loss_history_ == b.loss_history_


def test_loss_drops_quickly():
    est = tiny_tracker(epochs=5, batches_per_epoch=6, batch_size=4, n_eval_events=0, learning_rate=0.01).fit()
    assert est.history_[-1]["loss"] < 0.5 * est.loss_history_[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_the_batch():
    with pytest.raises(TrainingError) as info:
        tiny_tracker(learning_rate=1e308, epochs=1, batches_per_epoch=6).fit()
    assert info.value.batch and len(info.value.batch) == 2


def test_unfitted_predict_raises():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        tiny_tracker().predict([generate_event(TINY, np.random.default_rng(0))])


def test_input_validation():
    with pytest.raises(ValueError):
        tiny_tracker().predict([])
    with pytest.raises(TypeError):
        SeedTrackClassifier().fit([1, 2])
    with pytest.raises(ValueError):
        tiny_tracker(epochs=0).fit()


def seeds(n_events=3, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_events):
        out += generate_seed_candidates(generate_event(SEQ_SIM, rng), SEQ_SIM, (4.0, 4.0))
    return out


def test_seed_classifier_fit_and_outputs():
    data = seeds()
    clf = SeedTrackClassifier(sim_config=SEQ_SIM, epochs=2, batch_size=32, conv_filters=8, gru_units=(8, 4))
    clf.fit(data)
    assert len(clf.history_) == 2 and all(np.isfinite(clf.loss_history_))
    proba = clf.predict_proba(data)
    lengths = np.array([s.length for s in data])
    assert np.isnan(proba[lengths == 2]).all()
    ok = proba[lengths > 2]
    assert np.allclose(ok.sum(axis=1), 1.0) and ((ok >= 0) & (ok <= 1)).all()
    ell = clf.predict_ellipse(data)
    assert np.isnan(ell[lengths == 6]).all()
    assert (ell[lengths < 6, 2:] > 0).all()
    reports = clf.report_by_length(data)
    assert set(reports) == {3, 4, 5, 6}
    assert set(np.unique(clf.predict(data[:5]))) <= {0, 1}


def test_ghost_only_training_leaves_ellipse_head_untouched():
    ghosts = [s for s in seeds() if s.label == 0 and s.length <= 5]
    clf = SeedTrackClassifier(sim_config=SEQ_SIM, epochs=1, batch_size=16, conv_filters=8, gru_units=(8, 4))
    before = clf._build().reg_head.w.data.copy()
    clf.fit(ghosts)
    # Adam moves nothing that never received a gradient
    np.testing.assert_array_equal(clf.model_.reg_head.w.data, before)


def test_group_by_length():
    data = seeds(1)
    groups = group_by_length(data)
    assert sum(len(v) for v in groups.values()) == len(data)
    assert all(data[i].length == k for k, idx in groups.items() for i in idx)
