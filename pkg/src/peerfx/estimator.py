"""scikit-learn style wrapper around the NPL estimator.

The network is not part of ``X``; it is passed to ``fit``/``predict`` as the
keyword argument ``network`` (a :class:`~peerfx.network.GroupedNetwork`).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .estimate import NplSettings, PeerData, npl_estimate, select_cost_switch
from .model import choice_probabilities, solve_equilibrium
from .network import GroupedNetwork, build_design


def check_network(network, n_samples: int) -> GroupedNetwork:
    if not isinstance(network, GroupedNetwork):
        raise TypeError("network must be a GroupedNetwork (see peerfx.network.build_network)")
    if network.n != n_samples:
        raise ValueError(f"network has {network.n} agents but X has {n_samples} rows")
    return network


def check_counts(y, R: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError("y must be one-dimensional")
    if (y < 0).any() or not np.all(np.equal(np.mod(y, 1), 0)):
        raise ValueError("y must contain nonnegative integers")
    if R is not None and y.max() > R:
        raise ValueError(f"y contains {int(y.max())} which exceeds R={R}")
    return y.astype(int)


class PeerEffectsCountRegressor(RegressorMixin, BaseEstimator):
    """Count-outcome peer-effects model estimated by nested pseudo-likelihood.

    Parameters
    ----------
    R : int or None
        Largest admissible count. ``None`` uses the largest observed count.
    switch : int or "bic"
        Cost switch point; ``1`` gives evenly spaced cut points. With
        ``"bic"`` every value in ``switch_grid`` is fitted and the BIC
        minimizer kept.
    switch_grid : sequence of int or None
        Candidates for ``switch="bic"`` (defaults to ``1..15``).
    fixed_effects : bool
        Replace the intercept by subnetwork dummies.
    tol_inner, tol_outer, max_outer : NPL settings.
    variance : bool
        Compute the sandwich covariance after fitting.
    """

    def __init__(self, R=None, switch=1, switch_grid=None, fixed_effects=False,
                 tol_inner=1e-6, tol_outer=1e-6, max_outer=200, variance=True):
        self.R = R
        self.switch = switch
        self.switch_grid = switch_grid
        self.fixed_effects = fixed_effects
        self.tol_inner = tol_inner
        self.tol_outer = tol_outer
        self.max_outer = max_outer
        self.variance = variance

    def _settings(self) -> NplSettings:
        return NplSettings(tol_inner=self.tol_inner, tol_outer=self.tol_outer,
                           max_outer=self.max_outer)

    def _data(self, X, network, y=None):
        design = build_design(network, X, fixed_effects=self.fixed_effects)
        return design, (PeerData(network, design, y) if y is not None else None)

    def fit(self, X, y, network=None):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        network = check_network(network, X.shape[0])
        y = check_counts(y, self.R)
        R = int(self.R) if self.R is not None else max(int(y.max()), 1)
        _, data = self._data(X, network, y)
        if self.switch == "bic":
            grid = list(self.switch_grid) if self.switch_grid is not None else list(range(1, 16))
            grid = [s for s in grid if s <= max(R, 1)]
            sel = select_cost_switch(data, R, grid, self._settings(), variance=self.variance)
            fit = sel.best
            self.selection_table_ = sel.table
        else:
            fit = npl_estimate(data, R, int(self.switch), self._settings(), variance=self.variance)
        self.fit_ = fit
        self.theta_ = fit.theta
        self.alpha_ = fit.theta.alpha
        self.coef_ = fit.theta.beta
        self.switch_ = fit.theta.cuts.switch
        self.R_ = R
        self.converged_ = fit.converged
        self.n_features_in_ = X.shape[1]
        return self

    def _equilibrium(self, X, network):
        check_is_fitted(self, "theta_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        network = check_network(network, X.shape[0])
        design, _ = self._data(X, network)
        if design.Z.shape[1] != self.theta_.n_beta:
            raise ValueError("prediction design does not match the fitted coefficients "
                             "(fixed effects need the same subnetworks)")
        eq = solve_equilibrium(self.theta_, network, design)
        return eq, design, network

    def predict(self, X, network=None):
        """Equilibrium expected counts."""
        return self._equilibrium(X, network)[0].ye

    def predict_proba(self, X, network=None):
        """Equilibrium choice probabilities, shape ``(n, R + 1)``."""
        eq, design, network = self._equilibrium(X, network)
        return choice_probabilities(self.theta_, network, design, eq.ye)

    def score(self, X, y, network=None, sample_weight=None):
        """Average log-probability of the observed counts at the equilibrium."""
        y = check_counts(y, self.R_)
        p = self.predict_proba(X, network)
        lp = np.log(np.maximum(p[np.arange(len(y)), y], 1e-300))
        return float(np.average(lp, weights=sample_weight))
