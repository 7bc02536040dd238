import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from groupnet.cli.data import make_shapes
from groupnet.estimator import GroupNetClassifier, GroupNetSegmenter

TINY = dict(K=2, channels=(4, 4), strides=(1, 2), stem_channels=4, stem_stride=1, epochs=2, batch_size=16)


def stripes(n=64, seed=0):
    """Vertical vs horizontal bars; learnable by a tiny network."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    X = 0.2 * rng.normal(size=(n, 8, 8))
    X[y == 0, :, ::2] += 1.0
    X[y == 1, ::2, :] += 1.0
    return X, np.where(y == 0, "vertical", "horizontal")


def test_params_roundtrip_and_clone():
    est = GroupNetClassifier(**TINY)
    params = est.get_params()
    assert params["K"] == 2 and params["decomposition"] == "soft"
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(K=3, lr=0.01)
    assert est.K == 3 and est.lr == 0.01


def test_segmenter_params_include_num_classes():
    seg = GroupNetSegmenter(num_classes=5, **TINY)
    assert seg.get_params()["num_classes"] == 5
    assert clone(seg).get_params() == seg.get_params()


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        GroupNetClassifier(**TINY).predict(np.zeros((2, 8, 8)))


def test_classifier_fit_predict():
    X, y = stripes()
    est = GroupNetClassifier(**TINY, lr=0.01).fit(X, y)
    assert set(est.classes_) == {"horizontal", "vertical"}
    pred = est.predict(X)
    assert pred.dtype == est.classes_.dtype and set(pred) <= set(est.classes_)
    proba = est.predict_proba(X[:5])
    assert proba.shape == (5, 2) and np.allclose(proba.sum(axis=1), 1.0)
    assert est.score(X, y) > 0.8
    assert est.history_.records


def test_classifier_input_validation():
    X, y = stripes(16)
    est = GroupNetClassifier(**TINY).fit(X, y)
    with pytest.raises(ValueError, match="image shape"):
        est.predict(np.zeros((2, 6, 6)))
    with pytest.raises(ValueError):
        GroupNetClassifier(**TINY).fit(X[:, 0], y)
    with pytest.raises(ValueError):
        GroupNetClassifier(**TINY).fit(X, y[:-1])
    with pytest.raises(ValueError, match="strides"):
        GroupNetClassifier(**{**TINY, "strides": (1,)}).fit(X, y)


def test_classifier_is_seeded():
    X, y = stripes(32)
    a = GroupNetClassifier(**TINY, random_state=3).fit(X, y).predict_proba(X)
    b = GroupNetClassifier(**TINY, random_state=3).fit(X, y).predict_proba(X)
    assert np.array_equal(a, b)


def test_packed_model_matches_estimator():
    X, y = stripes(32)
    est = GroupNetClassifier(**{**TINY, "dtype": "float64"}).fit(X, y)
    packed = est.to_packed()
    got = packed(X[:, None])
    want = est.model_.predict_logits(X[:, None] - est.mean_)
    assert np.max(np.abs(got - want)) < 1e-9


def test_segmenter_fit_score():
    X, Y = make_shapes(24, size=12, seed=0, scales=(2, 3, 4))
    seg = GroupNetSegmenter(**{**TINY, "strides": (1, 1)}).fit(X, Y)
    assert seg.num_classes_ == 5
    pred = seg.predict(X[:3])
    assert pred.shape == (3, 12, 12) and pred.max() < 5
    assert 0.0 <= seg.score(X, Y) <= 1.0
    with pytest.raises(ValueError, match="masks"):
        seg.fit(X, Y[:, :5])
