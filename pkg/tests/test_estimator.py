"""Scikit-learn API surface: params, cloning, validation, fit/predict."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from amnet.audio import Clip, featurize
from amnet.data import synth_class_template
from amnet.estimator import (AffinityMixupDetector, LogMelExtractor, as_clip,
                             check_features, check_label_sets)


def rng(seed=0):
    return np.random.default_rng(seed)


def toy_features(n=10, t=16, seed=0):
    """Separable two-class toy: class decides which mel bands light up."""
    r = rng(seed)
    X, y = [], []
    for i in range(n):
        label = i % 2
        arr = r.normal(size=(t, 64)) * 0.1
        arr[:, label * 20:label * 20 + 8] += 3.0
        X.append(arr)
        y.append(("hum",) if label == 0 else ("buzz",))
    return X, y


# ---------------------------------------------------------------------- #
# validation helpers
# ---------------------------------------------------------------------- #


def test_check_features_accepts_single_array():
    out = check_features(np.zeros((8, 64)))
    assert len(out) == 1


def test_check_features_rejects_bad_shapes():
    with pytest.raises(ValueError, match="feature array"):
        check_features([np.zeros((8, 32))])
    with pytest.raises(ValueError, match="4 frames"):
        check_features([np.zeros((2, 64))])
    with pytest.raises(ValueError, match="NaN"):
        check_features([np.full((8, 64), np.nan)])


def test_check_label_sets_from_iterables():
    sets, classes = check_label_sets([("a", "b"), ("b",)], 2)
    assert classes == ("a", "b")
    assert sets == [("a", "b"), ("b",)]


def test_check_label_sets_from_binary_matrix():
    y = np.array([[1, 0], [1, 1]])
    sets, classes = check_label_sets(y, 2)
    assert classes == (0, 1)
    assert sets == [(0,), (0, 1)]


def test_check_label_sets_rejects_mismatched_counts():
    with pytest.raises(ValueError):
        check_label_sets([("a",)], 2)


def test_as_clip_accepts_pairs():
    clip = as_clip((np.zeros(100), 44100))
    assert isinstance(clip, Clip)
    with pytest.raises(TypeError):
        as_clip(42)


# ---------------------------------------------------------------------- #
# LogMelExtractor
# ---------------------------------------------------------------------- #


def test_extractor_transform_matches_featurize():
    samples = synth_class_template(0, 1.0, 44100, seed=1)
    clip = Clip(id="x", samples=samples, sample_rate=44100)
    extractor = LogMelExtractor()
    out = extractor.fit_transform([clip])
    assert len(out) == 1
    assert np.array_equal(out[0], featurize(clip).frames.data)


def test_extractor_get_params_roundtrip():
    extractor = LogMelExtractor(sample_rate=44100)
    assert extractor.get_params() == {"sample_rate": 44100}
    cloned = clone(extractor)
    assert cloned.get_params() == extractor.get_params()


# ---------------------------------------------------------------------- #
# AffinityMixupDetector
# ---------------------------------------------------------------------- #


def test_detector_sklearn_params_and_clone():
    det = AffinityMixupDetector(tau=0.5, max_epochs=3)
    params = det.get_params()
    assert params["tau"] == 0.5
    cloned = clone(det)
    assert cloned.get_params() == params
    det.set_params(tau=2.0)
    assert det.tau == 2.0


def test_detector_not_fitted_error():
    det = AffinityMixupDetector()
    with pytest.raises(NotFittedError):
        det.predict([np.zeros((16, 64))])


def test_detector_fit_predict_cycle():
    X, y = toy_features(n=10, t=16)
    det = AffinityMixupDetector(max_epochs=8, lr=1e-3, batch_size=4,
                                val_fraction=0.2, random_state=0)
    assert det.fit(X, y) is det
    assert det.classes_ == ["buzz", "hum"]
    proba = det.predict_proba(X[:3])
    assert proba.shape == (3, 2)
    assert proba.min() >= 0.0 and proba.max() <= 1.0
    tags = det.predict(X[:3])
    assert tags.shape == (3, 2)
    assert set(np.unique(tags)) <= {0, 1}
    frames = det.predict_frames(X[:2])
    assert frames[0].shape == (16, 2)
    events = det.predict_events(X[:2])
    assert isinstance(events, list) and len(events) == 2
    score = det.score(X, y)
    assert 0.0 <= score <= 1.0
    assert len(det.history_) == 8


def test_detector_rejects_unseen_label_at_fit():
    X, _ = toy_features(n=4)
    det = AffinityMixupDetector(max_epochs=1)
    with pytest.raises(ValueError):
        det.fit(X, [(), (), (), ()])


def test_detector_deterministic_given_state():
    X, y = toy_features(n=8, t=16)
    a = AffinityMixupDetector(max_epochs=3, batch_size=4, random_state=5).fit(X, y)
    b = AffinityMixupDetector(max_epochs=3, batch_size=4, random_state=5).fit(X, y)
    assert np.array_equal(a.predict_proba(X[:2]), b.predict_proba(X[:2]))


def test_detector_placement_none_trains_baseline():
    X, y = toy_features(n=6, t=16)
    det = AffinityMixupDetector(max_epochs=2, batch_size=3, placement=())
    det.fit(X, y)
    assert not any(name.startswith("am.") for name in det.model_.params.tensors)
