import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from peerfx.estimator import PeerEffectsCountRegressor
from peerfx.simulate import builtin_dgp, simulate_dataset


@pytest.fixture(scope="module")
def sim():
    return simulate_dataset(builtin_dgp("A", S=2, n_s=150, seed=2))


def test_params_roundtrip():
    est = PeerEffectsCountRegressor(R=50, switch="bic", switch_grid=[1, 2])
    assert est.get_params()["switch_grid"] == [1, 2]
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est


def test_fit_predict_score(sim):
    est = PeerEffectsCountRegressor(R=100).fit(sim.X, sim.y, network=sim.net)
    assert est.converged_ and est.alpha_.shape == (1, 1) and est.n_features_in_ == 2
    pred = est.predict(sim.X, network=sim.net)
    assert pred.shape == (sim.net.n,) and np.all((pred >= 0) & (pred <= 100))
    proba = est.predict_proba(sim.X, network=sim.net)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-10)
    assert np.isfinite(est.score(sim.X, sim.y, network=sim.net))


def test_bic_selection(sim):
    est = PeerEffectsCountRegressor(R=100, switch="bic", switch_grid=[1, 2, 3],
                                    variance=False).fit(sim.X, sim.y, network=sim.net)
    assert est.switch_ in (1, 2, 3) and len(est.selection_table_) == 3


def test_input_validation(sim):
    est = PeerEffectsCountRegressor(R=100)
    with pytest.raises(TypeError, match="GroupedNetwork"):
        est.fit(sim.X, sim.y)
    with pytest.raises(ValueError, match="nonnegative integers"):
        est.fit(sim.X, sim.y - 0.5, network=sim.net)
    with pytest.raises(ValueError, match="exceeds R"):
        PeerEffectsCountRegressor(R=1).fit(sim.X, sim.y, network=sim.net)
    with pytest.raises(ValueError, match="agents"):
        est.fit(sim.X[:10], sim.y[:10], network=sim.net)
    with pytest.raises(NotFittedError):
        est.predict(sim.X, network=sim.net)
