import warnings

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.stats import norm

from peerfx.estimate import (EstimationError, FitResult, NplSettings, PeerData, PseudoLikelihood,
                             belief_jacobian, extend_switch, map_derivatives, npl_estimate,
                             npl_variance, pseudo_loglik, select_cost_switch, total_hessian)
from peerfx.model import (CutPointSpec, Theta, choice_probabilities, expected_outcome_map,
                          solve_equilibrium)
from peerfx.network import build_design, build_network
from peerfx.simulate import DgpConfig, builtin_dgp, simulate_dataset

from conftest import random_instance


def draw_outcomes(rng, theta, net, design, u):
    p = choice_probabilities(theta, net, design, u)
    c = p.cumsum(axis=1)
    return (rng.random(net.n)[:, None] > c).sum(axis=1).clip(0, theta.R)


def random_problem(rng, n=30, M=1, R=6, S=2, switch=None):
    net, design, theta = random_instance(rng, n=n, M=M, R=R, S=S, switch=switch)
    eq = solve_equilibrium(theta, net, design, tol=1e-12)
    y = draw_outcomes(rng, theta, net, design, eq.ye)
    return PeerData(net, design, y), theta, rng.uniform(0, R, n)


def small_dgp(name="A", S=2, n_s=250, seed=0):
    return simulate_dataset(builtin_dgp(name, S=S, n_s=n_s, seed=seed))


def as_data(sim):
    return PeerData(sim.net, sim.design, sim.y)


# --- pseudo-likelihood ------------------------------------------------------

def test_binary_loglik_value():
    net = build_network(np.empty((0, 2), int), [0])
    design = build_design(net, np.zeros((1, 1)))
    theta = Theta([[0.0]], [0.3, 0.0, 0.0], CutPointSpec.evenly_spaced(1, 1.0))
    data = PeerData(net, design, [1])
    assert pseudo_loglik(theta, np.zeros(1), data) == pytest.approx(np.log(norm.cdf(0.3)))
    data0 = PeerData(net, design, [0])
    assert pseudo_loglik(theta, np.zeros(1), data0) == pytest.approx(np.log(norm.sf(0.3)))


def test_loglik_matches_probability_table(rng):
    data, theta, u = random_problem(rng, M=2, S=3)
    p = choice_probabilities(theta, data.net, data.design, u)
    direct = np.log(p[np.arange(data.n), data.y]).sum() / data.S
    assert pseudo_loglik(theta, u, data) == pytest.approx(direct, rel=1e-12)


def test_rejects_outcome_above_R(rng):
    data, theta, u = random_problem(rng, R=4)
    small = Theta(theta.alpha, theta.beta, CutPointSpec.evenly_spaced(max(data.y.max() - 1, 1), 0.5))
    with pytest.raises(ValueError, match="exceeds R"):
        PseudoLikelihood(data, small, u)


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.mark.parametrize("M,switch", [(1, 1), (1, 4), (2, 3), (2, 7)])
def test_gradient_and_hessian_match_finite_differences(rng, M, switch):
    data, theta, u = random_problem(rng, M=M, R=6, switch=switch)
    lik = PseudoLikelihood(data, theta, u)
    x = theta.to_vector()
    t = lik.evaluate(x)
    g_fd = fd_grad(lambda v: lik.evaluate(v, order=0).value, x)
    np.testing.assert_allclose(t.grad, g_fd, rtol=1e-6, atol=1e-7)
    H_fd = np.array([fd_grad(lambda v: lik.evaluate(v, order=1).grad[k], x)
                     for k in range(x.size)])
    np.testing.assert_allclose(t.hess, H_fd, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(t.hess, t.hess.T, atol=1e-12)


def test_map_derivatives_match_finite_differences(rng):
    data, theta, u = random_problem(rng, n=12, M=2, R=5, switch=3)
    dLdu, dLdth = map_derivatives(theta, data, u)
    L = lambda uu: expected_outcome_map(theta, data.net, data.design, uu)
    I = np.eye(data.n)
    Ju = np.column_stack([(L(u + 1e-6 * I[j]) - L(u - 1e-6 * I[j])) / 2e-6 for j in range(data.n)])
    np.testing.assert_allclose(dLdu.toarray(), Ju, atol=1e-7)
    x = theta.to_vector()
    Jt = np.column_stack([(expected_outcome_map(theta.from_vector(x + 1e-6 * e), data.net,
                                                data.design, u)
                           - expected_outcome_map(theta.from_vector(x - 1e-6 * e), data.net,
                                                  data.design, u)) / 2e-6
                          for e in np.eye(x.size)])
    np.testing.assert_allclose(dLdth, Jt, atol=1e-7)


def test_total_hessian_is_derivative_along_equilibrium_path(rng):
    data, theta, _ = random_problem(rng, n=20, M=2, R=5, switch=3)
    x = theta.to_vector()

    def score_on_path(v):
        th = theta.from_vector(v)
        eq = solve_equilibrium(th, data.net, data.design, tol=1e-13, max_iter=10_000)
        return PseudoLikelihood(data, th, eq.ye).evaluate(v, order=1).grad

    u0 = solve_equilibrium(theta, data.net, data.design, tol=1e-13, max_iter=10_000).ye
    H = total_hessian(theta, data, u0)
    H_fd = np.column_stack([(score_on_path(x + 1e-6 * e) - score_on_path(x - 1e-6 * e)) / 2e-6
                            for e in np.eye(x.size)])
    np.testing.assert_allclose(H, H_fd, rtol=1e-5, atol=1e-6)


def test_belief_jacobian_matches_perturbed_equilibria(rng):
    data, theta, _ = random_problem(rng, n=15, R=5)
    eq = solve_equilibrium(theta, data.net, data.design, tol=1e-13)
    J = belief_jacobian(theta, data, eq.ye)
    x = theta.to_vector()
    for k in range(x.size):
        e = 1e-6 * np.eye(x.size)[k]
        up = solve_equilibrium(theta.from_vector(x + e), data.net, data.design, tol=1e-13).ye
        dn = solve_equilibrium(theta.from_vector(x - e), data.net, data.design, tol=1e-13).ye
        np.testing.assert_allclose(J[:, k], (up - dn) / 2e-6, atol=1e-6)


# --- NPL --------------------------------------------------------------------

@pytest.fixture(scope="module")
def fit_a():
    sim = small_dgp("A", seed=3)
    data = as_data(sim)
    return data, npl_estimate(data, R=100, switch=1)


def test_npl_certificates(fit_a):
    data, fit = fit_a
    s = NplSettings()
    assert fit.converged
    lik = PseudoLikelihood(data, fit.theta, fit.u)
    assert np.max(np.abs(lik.evaluate(fit.theta.to_vector(), order=1).grad)) < s.tol_inner
    L = expected_outcome_map(fit.theta, data.net, data.design, fit.u)
    assert np.max(np.abs(L - fit.u)) < s.tol_outer
    assert fit.contraction_margin > 0


def test_estimates_near_truth(fit_a):
    _, fit = fit_a
    true = builtin_dgp("A").theta
    assert abs(fit.theta.alpha[0, 0] - true.alpha[0, 0]) < 4 * fit.se[0]
    assert np.all(np.abs(fit.theta.beta - true.beta) < 4 * fit.se[1:6])


def test_variance_symmetric_positive_definite(fit_a):
    _, fit = fit_a
    np.testing.assert_allclose(fit.vcov, fit.vcov.T, atol=0)
    assert np.linalg.eigvalsh(fit.vcov).min() > 0
    assert fit.vcov_flag == ""


def test_fit_result_roundtrip(fit_a):
    _, fit = fit_a
    back = FitResult.from_dict(fit.to_dict())
    np.testing.assert_array_equal(back.theta.to_vector(), fit.theta.to_vector())
    np.testing.assert_array_equal(back.vcov, fit.vcov)
    assert back.converged and back.param_names == fit.param_names


def test_same_input_same_output():
    data = as_data(small_dgp("A", n_s=100, seed=8))
    a = npl_estimate(data, R=100)
    b = npl_estimate(data, R=100)
    np.testing.assert_array_equal(a.theta.to_vector(), b.theta.to_vector())
    np.testing.assert_array_equal(a.vcov, b.vcov)


def test_permutation_invariance():
    sim = small_dgp("A", n_s=150, seed=2)
    data = as_data(sim)
    fit = npl_estimate(data, R=100, variance=True)
    perm = np.random.default_rng(0).permutation(data.n)
    inv = np.argsort(perm)
    edges = inv[sim.net.edges()]
    net = build_network(edges, sim.net.groups[perm], sim.net.subnet[perm])
    pdata = PeerData(net, build_design(net, sim.X[perm]), sim.y[perm])
    pfit = npl_estimate(pdata, R=100, variance=True)
    np.testing.assert_allclose(pfit.theta.to_vector(), fit.theta.to_vector(), atol=1e-6)
    np.testing.assert_allclose(pfit.se, fit.se, rtol=1e-4)


def test_no_peer_effect_recovered():
    base = builtin_dgp("A")
    theta = Theta(np.zeros((1, 1)), base.theta.beta, base.theta.cuts)
    sim = simulate_dataset(DgpConfig(S=4, n_s=250, theta=theta, seed=12))
    fit = npl_estimate(as_data(sim), R=100)
    assert abs(fit.theta.alpha[0, 0]) < 3 * fit.se[0]


def test_non_convergence_is_reported():
    data = as_data(small_dgp("A", n_s=100, seed=1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = npl_estimate(data, R=100, settings=NplSettings(max_outer=1, tol_outer=1e-12))
    assert not fit.converged and fit.vcov is None
    assert any("did not converge" in w for w in fit.warnings)
    with pytest.raises(EstimationError):
        npl_variance(fit, data)


# --- variance oracle with peer effects pinned at zero -----------------------

def ordered_probit_loglik(v, y, Z):
    """Per-observation ordered-probit log-likelihood, first cut at 0, log spacings after."""
    b, k = v[:Z.shape[1]], v[Z.shape[1]:]
    lev = np.r_[-np.inf, 0.0, np.cumsum(np.exp(k)), np.inf]
    eta = Z @ b
    with np.errstate(divide="ignore"):
        return np.log(norm.cdf(eta - lev[y]) - norm.cdf(eta - lev[y + 1]))


def ordered_probit_oracle(y, Z, R, x0):
    """Independent ordered-probit MLE with finite-difference sandwich covariances."""
    res = minimize(lambda v: -ordered_probit_loglik(v, y, Z).sum(), x0, method="BFGS",
                   options={"gtol": 1e-9})
    v, h = res.x, 1e-5
    eye = np.eye(v.size)

    def scores(w, yy):
        return np.column_stack([(ordered_probit_loglik(w + h * e, yy, Z)
                                 - ordered_probit_loglik(w - h * e, yy, Z)) / (2 * h)
                                for e in eye])

    H = np.column_stack([(scores(v + h * e, y).sum(axis=0) - scores(v - h * e, y).sum(axis=0))
                         / (2 * h) for e in eye])
    H = 0.5 * (H + H.T)
    s = scores(v, y)
    Sig = np.zeros((v.size, v.size))
    for t in range(R + 1):
        yt = np.full_like(y, t)
        p = np.exp(ordered_probit_loglik(v, yt, Z))
        st_ = np.nan_to_num(scores(v, yt))
        Sig += st_.T @ (p[:, None] * st_)
    Hinv = np.linalg.inv(H)
    return v, Hinv @ (s.T @ s) @ Hinv, Hinv @ Sig @ Hinv


def test_variance_matches_ordered_probit_when_peers_pinned():
    rng = np.random.default_rng(4)
    R = 3
    sim = simulate_dataset(DgpConfig(
        S=2, n_s=150, seed=4,
        theta=Theta([[0.0]], [0.3, 0.4, -0.2, 0.1, 0.05], CutPointSpec.evenly_spaced(R, 0.7))))
    data = as_data(sim)
    template = Theta([[0.0]], np.zeros(5), CutPointSpec(R=R, M=1, switch=R,
                                                         deltas=[[0.7, 0.7]], tail=[0.7]))
    free = np.ones(template.size, bool)
    free[0] = False
    fit = npl_estimate(data, R=R, switch=R, theta0=template, free=free,
                       settings=NplSettings(tol_inner=1e-9, tol_outer=1e-9))
    assert fit.converged and fit.theta.alpha[0, 0] == 0.0
    x0 = np.r_[fit.theta.beta, fit.theta.cuts.log_params().ravel()] + rng.normal(0, 0.01, 7)
    v, V_opg, V_exp = ordered_probit_oracle(data.y, data.design.Z, R, x0)
    np.testing.assert_allclose(fit.theta.to_vector()[1:], v, atol=1e-5)
    np.testing.assert_allclose(fit.vcov[1:, 1:], V_exp, rtol=1e-3, atol=1e-8)
    np.testing.assert_allclose(npl_variance(fit, data, meat="opg")[1:, 1:], V_opg,
                               rtol=1e-3, atol=1e-8)
    assert np.all(fit.vcov[0] == 0)


# --- cost switch ------------------------------------------------------------

def test_extend_switch_preserves_cut_points(rng):
    theta = Theta([[0.1]], [0.0], CutPointSpec(R=9, M=1, switch=3, deltas=[[0.5, 0.9]], tail=[0.4]))
    for s in (3, 5, 9, 12):
        ext = extend_switch(theta, s)
        np.testing.assert_allclose(ext.cuts.levels, theta.cuts.levels, rtol=1e-14)
    with pytest.raises(ValueError):
        extend_switch(theta, 2)


def test_switch_grid_must_start_at_one():
    data = as_data(small_dgp("A", n_s=100))
    with pytest.raises(ValueError, match="start at 1"):
        select_cost_switch(data, 100, [2, 3])


def test_single_point_grid_equals_direct_fit():
    data = as_data(small_dgp("A", n_s=100, seed=5))
    sel = select_cost_switch(data, 100, [1])
    fit = npl_estimate(data, R=100, switch=1)
    np.testing.assert_allclose(sel.best.theta.to_vector(), fit.theta.to_vector(), atol=1e-8)
    assert sel.best_switch == 1 and len(sel.table) == 1


def test_selection_prefers_flexible_cuts_when_needed():
    data = as_data(small_dgp("B", seed=1))
    sel = select_cost_switch(data, 100, range(1, 16), patience=3, variance=False)
    assert sel.best_switch > 1
    bics = {row["switch"]: row["bic"] for row in sel.table}
    assert bics[sel.best_switch] == min(bics.values())
    # each fit maximizes its pseudo-likelihood over a set containing the previous cut points
    for s in sorted(sel.fits)[1:]:
        fit, prev = sel.fits[s], sel.fits[s - 1]
        nested = pseudo_loglik(extend_switch(prev.theta, s), fit.u, data)
        assert fit.loglik >= nested - 1e-8
