import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from transmot import TransMOTTracker
from transmot.synth import ScenarioConfig, synth_generate


@pytest.fixture(scope="module")
def bundles():
    return [synth_generate(ScenarioConfig(num_targets=3, num_frames=12, feature_dim=4, seed=s)) for s in (0, 1)]


def test_params_round_trip():
    est = TransMOTTracker(d_model=8, n_heads=2, tau_a=0.4)
    params = est.get_params()
    assert params["d_model"] == 8 and params["tau_a"] == 0.4 and params["n_steps"] == 4000
    est.set_params(lr=0.01)
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        TransMOTTracker().predict([])


def test_fit_predict_score(bundles):
    est = TransMOTTracker(d_model=8, n_heads=2, history=3, n_steps=15, seed=2).fit(bundles)
    assert est.train_result_.steps == 15 and est.n_samples_ == 18
    preds = est.predict(bundles[:1])
    assert len(preds) == 1 and preds[0]
    assert {r.frame for r in preds[0]} <= set(range(1, 13))
    assert 0.0 <= est.score(bundles) <= 1.0


def test_fit_is_deterministic(bundles):
    a = TransMOTTracker(d_model=8, n_heads=2, history=3, n_steps=5).fit(bundles)
    b = clone(a).fit(bundles)
    for k, t in a.model_.parameters().items():
        assert np.array_equal(t.data, b.model_.parameters()[k].data)


def test_feature_dimension_checks(bundles):
    with pytest.raises(ValueError):
        TransMOTTracker().fit([])
    other = synth_generate(ScenarioConfig(num_targets=2, num_frames=6, feature_dim=6))
    with pytest.raises(ValueError):
        TransMOTTracker(n_steps=1).fit([bundles[0], other])
    est = TransMOTTracker(d_model=8, n_heads=2, history=3, n_steps=1).fit(bundles)
    with pytest.raises(ValueError):
        est.predict([other])
