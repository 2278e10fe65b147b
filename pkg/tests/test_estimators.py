import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.model_selection import GridSearchCV

from flashlla.baselines import local_linear_estimate, nadaraya_watson_estimate
from flashlla.estimators import GlobalLinearRegressor, LocalLinearRegressor, NadarayaWatsonRegressor
from conftest import rand

ALL = [NadarayaWatsonRegressor, LocalLinearRegressor, GlobalLinearRegressor]


@pytest.mark.parametrize("cls", ALL)
def test_params_and_clone(cls):
    est = cls()
    params = est.get_params()
    c = clone(est)
    assert c.get_params() == params
    with pytest.raises(NotFittedError):
        est.predict(np.zeros((2, 2)))


@pytest.mark.parametrize("cls", ALL)
def test_fit_predict_shapes(cls):
    X, y = rand(0, 30, 2), rand(1, 30)
    est = cls().fit(X, y)
    assert est.n_features_in_ == 2
    assert est.predict(X[:4]).shape == (4,)
    Y = rand(2, 30, 3)
    assert cls().fit(X, Y).predict(X[:4]).shape == (4, 3)
    with pytest.raises(ValueError):
        est.predict(np.zeros((2, 3)))


def test_wrappers_match_functions():
    X, y = rand(3, 40, 2), rand(4, 40)
    x0 = rand(5, 6, 2)
    ll = LocalLinearRegressor(bandwidth=0.7, ridge=0.01).fit(X, y).predict(x0)
    np.testing.assert_allclose(ll, local_linear_estimate(X, y[:, None], x0, 0.7, 0.01)[:, 0], rtol=1e-14)
    nw = NadarayaWatsonRegressor(bandwidth=0.7).fit(X, y).predict(x0)
    np.testing.assert_allclose(nw, nadaraya_watson_estimate(X, y[:, None], x0, 0.7)[:, 0], rtol=1e-14)


def test_global_linear_attributes():
    X = rand(6, 20, 3)
    y = 1.5 + X @ np.array([1.0, -2.0, 0.5])
    est = GlobalLinearRegressor().fit(X, y)
    np.testing.assert_allclose(est.coef_.ravel(), [1.0, -2.0, 0.5], atol=1e-12)
    np.testing.assert_allclose(est.intercept_, [1.5], atol=1e-12)
    assert est.score(X, y) == pytest.approx(1.0)


def test_bad_bandwidth():
    with pytest.raises(ValueError):
        NadarayaWatsonRegressor(bandwidth=0.0).fit(rand(0, 5, 1), rand(1, 5))


def test_grid_search():
    X = rand(7, 60, 1)
    y = np.sin(3 * X[:, 0])
    gs = GridSearchCV(LocalLinearRegressor(), {"bandwidth": [0.01, 0.1, 10.0]}, cv=3).fit(X, y)
    assert gs.best_params_["bandwidth"] in (0.01, 0.1)
