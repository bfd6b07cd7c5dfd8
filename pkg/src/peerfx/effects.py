"""Marginal effects, delta-method standard errors and group-composition counterfactuals.

The direct marginal effect (DME) holds the equilibrium fixed. The total effect
lets beliefs and contextual averages adjust; the indirect effect (IME) is the
difference.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.special import ndtr

from .estimate import FitResult, PeerData
from .model import (EquilibriumState, Theta, agent_levels, density_sum, linear_index,
                    solve_equilibrium)
from .network import build_design

LOG = logging.getLogger(__name__)

EFFECT_TOL = 1e-12


class EffectsError(RuntimeError):
    pass


def _require_converged(eq: EquilibriumState):
    if not eq.converged:
        raise EffectsError("marginal effects require a converged equilibrium")


def fstar_at(theta: Theta, data: PeerData, eq: EquilibriumState) -> np.ndarray:
    eta = linear_index(theta, data.net, data.design, eq.ye)
    return density_sum(eta, agent_levels(theta, data.net), theta.R)


def peer_effect_matrix(theta: Theta, data: PeerData, fstar) -> tuple[np.ndarray, np.ndarray]:
    """``PE[g, h]`` averaged over all agents and over members of group ``g``.

    The all-agent version sums to the average peer effect across cells.
    """
    g = data.net.groups
    M = theta.M
    pe_all = np.zeros((M, M))
    pe_within = np.zeros((M, M))
    for a in range(M):
        mask = g == a
        s = fstar[mask].sum()
        pe_all[a] = theta.alpha[a] * s / data.n
        pe_within[a] = theta.alpha[a] * (s / mask.sum() if mask.any() else np.nan)
    return pe_all, pe_within


@dataclass
class VariableEffect:
    name: str
    dme: float
    ime: float
    total: float
    discrete: bool = False
    se_dme: float = float("nan")
    se_ime: float = float("nan")
    se_total: float = float("nan")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EffectsReport:
    """Average effects at given parameters; ``pe`` averages over all agents."""

    pe: np.ndarray
    pe_within: np.ndarray
    variables: list = field(default_factory=list)
    pe_se: np.ndarray | None = None
    pe_within_se: np.ndarray | None = None

    @property
    def peer_effect(self) -> float:
        """Average peer DME, ``(1/n) sum_i sum_h alpha[g_i, h] f*_i``."""
        return float(self.pe.sum())

    def variable(self, name: str) -> VariableEffect:
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"peer_effect": self.peer_effect, "pe": self.pe, "pe_within": self.pe_within,
                "pe_se": self.pe_se, "pe_within_se": self.pe_within_se,
                "variables": [v.to_dict() for v in self.variables]}


def direct_marginal_effects(theta: Theta, data: PeerData, eq: EquilibriumState) -> EffectsReport:
    """Peer and covariate DMEs: coefficient times the average of ``f*_i``."""
    _require_converged(eq)
    fstar = fstar_at(theta, data, eq)
    pe, pe_within = peer_effect_matrix(theta, data, fstar)
    d = data.design
    mean_f = float(fstar.mean())
    variables = []
    for k in range(d.K):
        b1 = theta.beta[d.own_column(k)]
        b2 = theta.beta[d.contextual_column(k)]
        name = d.names[d.own_column(k)] if d.names else f"x{k + 1}"
        variables.append(VariableEffect(name=name, dme=b1 * mean_f, ime=np.nan, total=np.nan))
        variables.append(VariableEffect(name="bar_" + name if not name.startswith("bar_") else name,
                                        dme=b2 * mean_f, ime=np.nan, total=np.nan))
    return EffectsReport(pe=pe, pe_within=pe_within, variables=variables)


def _resolvent(theta: Theta, data: PeerData, fstar):
    G = data.net.peer_matrix(theta.alpha)
    A = sp.identity(data.n, format="csc") - (sp.diags(fstar) @ G).tocsc()
    try:
        return splu(A)
    except RuntimeError:
        pass
    for s, idx in enumerate(data.net.subnet_index()):
        sub = A[idx][:, idx].toarray()
        if np.linalg.matrix_rank(sub) < len(idx):
            raise EffectsError(f"resolvent is singular in subnetwork {s}")
    raise EffectsError("resolvent is singular")


def _with_covariate(data: PeerData, k: int, values) -> PeerData:
    X = data.design.X.copy()
    X[:, k] = values
    design = build_design(data.net, X, fixed_effects=data.design.fixed_effects,
                          names=data.design.names[data.design.own_column(0):
                                                  data.design.own_column(data.design.K)])
    return PeerData(net=data.net, design=design, y=data.y)


def indirect_and_total_effects(theta: Theta, data: PeerData, eq: EquilibriumState, variable: int,
                               discrete: bool = False) -> VariableEffect:
    """Total effect of covariate ``variable`` and its DME/IME split.

    Continuous covariates use the total differential of the equilibrium with
    respect to a unit shift of the covariate for everybody. Discrete (0/1)
    covariates compare the equilibria with the covariate set to 1 and to 0 for
    everybody, re-solving the game each time.
    """
    _require_converged(eq)
    d = data.design
    k = int(variable)
    if not 0 <= k < d.K:
        raise ValueError(f"variable index {k} out of range 0..{d.K - 1}")
    b1, b2 = theta.beta[d.own_column(k)], theta.beta[d.contextual_column(k)]
    name = d.names[d.own_column(k)] if d.names else f"x{k + 1}"
    if not discrete:
        fstar = fstar_at(theta, data, eq)
        lu = _resolvent(theta, data, fstar)
        has_friends = np.asarray(data.net.weights_all.sum(axis=1)).ravel()
        dy = lu.solve(fstar * (b1 + b2 * has_friends))
        total = float(dy.mean())
        dme = float(b1 * fstar.mean())
    else:
        hi, lo = _with_covariate(data, k, 1.0), _with_covariate(data, k, 0.0)
        eq_hi = solve_equilibrium(theta, hi.net, hi.design, u0=eq.ye, tol=EFFECT_TOL, max_iter=5000)
        eq_lo = solve_equilibrium(theta, lo.net, lo.design, u0=eq.ye, tol=EFFECT_TOL, max_iter=5000)
        if not (eq_hi.converged and eq_lo.converged):
            raise EffectsError("equilibrium failed while flipping a discrete covariate")
        total = float((eq_hi.ye - eq_lo.ye).mean())
        # own-covariate switch only, beliefs and contextual averages held fixed
        eta = linear_index(theta, data.net, d, eq.ye)
        x = d.X[:, k]
        lev = agent_levels(theta, data.net)[:, 1:theta.R + 1]
        up = ndtr((eta + b1 * (1.0 - x))[:, None] - lev).sum(axis=1)
        down = ndtr((eta - b1 * x)[:, None] - lev).sum(axis=1)
        dme = float((up - down).mean())
    return VariableEffect(name=name, dme=dme, ime=total - dme, total=total, discrete=discrete)


def numerical_jacobian(fn, vec, step_scale: float = 1.0) -> np.ndarray:
    """Central differences with step ``max(1e-6, 1e-6 |theta_j|)`` times ``step_scale``."""
    vec = np.asarray(vec, dtype=float)
    f0 = np.atleast_1d(np.asarray(fn(vec), dtype=float))
    J = np.empty((f0.size, vec.size))
    for j in range(vec.size):
        h = step_scale * max(1e-6, 1e-6 * abs(vec[j]))
        e = np.zeros_like(vec)
        e[j] = h
        J[:, j] = (np.atleast_1d(fn(vec + e)) - np.atleast_1d(fn(vec - e))) / (2.0 * h)
    if not np.isfinite(J).all():
        raise EffectsError("non-finite Jacobian in the delta method")
    return J


def delta_method_se(fit: FitResult, effect_fn, step_scale: float = 1.0,
                    return_jacobian: bool = False):
    """Standard errors of ``effect_fn(theta_vector)`` from the fit covariance."""
    if fit.vcov is None:
        raise EffectsError("fit has no covariance matrix")
    J = numerical_jacobian(effect_fn, fit.theta.to_vector(), step_scale)
    V = J @ fit.vcov @ J.T
    se = np.sqrt(np.clip(np.diag(V), 0.0, None))
    return (se, J) if return_jacobian else se


def _effect_vector(theta: Theta, data: PeerData, eq: EquilibriumState, discrete) -> np.ndarray:
    rep = direct_marginal_effects(theta, data, eq)
    out = [rep.pe.ravel(), rep.pe_within.ravel()]
    for k in range(data.design.K):
        v = indirect_and_total_effects(theta, data, eq, k, discrete=k in discrete)
        ctx = rep.variables[2 * k + 1].dme
        out.append([v.dme, v.ime, v.total, ctx])
    return np.concatenate([np.ravel(o) for o in out])


def compute_effects(fit: FitResult, data: PeerData, discrete=(), se: bool = True,
                    step_scale: float = 1.0) -> EffectsReport:
    """All average effects at the estimate, with delta-method standard errors.

    ``discrete`` lists covariate indices treated as 0/1 dummies.
    """
    discrete = set(discrete)
    theta = fit.theta
    eq = solve_equilibrium(theta, data.net, data.design, u0=fit.u, tol=EFFECT_TOL, max_iter=5000)
    _require_converged(eq)
    base = _effect_vector(theta, data, eq, discrete)
    M, K = theta.M, data.design.K
    se_vec = np.full(base.size, np.nan)
    if se and fit.vcov is not None:
        def fn(vec):
            th = theta.from_vector(vec)
            e = solve_equilibrium(th, data.net, data.design, u0=eq.ye, tol=EFFECT_TOL,
                                  max_iter=5000)
            if not e.converged:
                raise EffectsError("equilibrium failed inside the delta method")
            return _effect_vector(th, data, e, discrete)
        se_vec = delta_method_se(fit, fn, step_scale)
    mm = M * M
    report = EffectsReport(pe=base[:mm].reshape(M, M), pe_within=base[mm:2 * mm].reshape(M, M),
                           pe_se=se_vec[:mm].reshape(M, M),
                           pe_within_se=se_vec[mm:2 * mm].reshape(M, M))
    d = data.design
    for k in range(K):
        o = 2 * mm + 4 * k
        name = d.names[d.own_column(k)] if d.names else f"x{k + 1}"
        report.variables.append(VariableEffect(
            name=name, dme=base[o], ime=base[o + 1], total=base[o + 2], discrete=k in discrete,
            se_dme=se_vec[o], se_ime=se_vec[o + 1], se_total=se_vec[o + 2]))
        report.variables.append(VariableEffect(
            name=f"bar_{name}", dme=base[o + 3], ime=np.nan, total=np.nan, se_dme=se_vec[o + 3]))
    return report


def peer_effect_se(fit: FitResult, data: PeerData) -> tuple[float, float]:
    """Average peer DME and its delta-method standard error."""
    theta = fit.theta
    eq = solve_equilibrium(theta, data.net, data.design, u0=fit.u, tol=EFFECT_TOL, max_iter=5000)
    _require_converged(eq)

    def fn(vec):
        th = theta.from_vector(vec)
        e = solve_equilibrium(th, data.net, data.design, u0=eq.ye, tol=EFFECT_TOL, max_iter=5000)
        return direct_marginal_effects(th, data, e).peer_effect

    value = float(fn(theta.to_vector()))
    return value, float(delta_method_se(fit, fn)[0])


# ----------------------------------------------------------------------------
# counterfactual group composition


@dataclass
class CounterfactualPoint:
    share: float
    mean: float
    se: float
    converged: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def assign_groups(n: int, share: float, target: int, other: int, order: np.ndarray) -> np.ndarray:
    """The first ``round(share * n)`` agents of ``order`` join ``target``; the rest ``other``."""
    k = int(round(share * n))
    groups = np.full(n, other, dtype=int)
    groups[order[:k]] = target
    return groups


def counterfactual(fit: FitResult, data: PeerData, shares, seed=0, assignment: str = "random",
                   target_group: int | None = None, covariate: int | None = None,
                   se: bool = True) -> list[CounterfactualPoint]:
    """Average expected outcome as the share of ``target_group`` varies.

    Friendships and other covariates stay fixed; group labels are redrawn, the
    group-split weights rebuilt and, if ``covariate`` is given, that column is
    set to the new group dummy (so its contextual average changes too). One
    random permutation is drawn per seed and shared by all shares, so the
    composition changes are nested. ``assignment="identity"`` keeps the
    observed labels and is only valid at the observed share.
    """
    theta = fit.theta
    M = theta.M
    if M > 2:
        raise ValueError("counterfactual composition supports at most two groups")
    if M == 1 and covariate is None:
        raise ValueError("with a single group, pass the covariate that holds the group dummy")
    target = M - 1 if target_group is None else int(target_group)
    other = 0 if target == M - 1 else M - 1
    n = data.n
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    order = rng.permutation(n)
    if M > 1:
        observed_member = data.net.groups == target
    else:
        observed_member = data.design.X[:, covariate] == 1.0
    observed = float(observed_member.mean())
    points = []
    for share in shares:
        share = float(share)
        if not 0.0 <= share <= 1.0:
            raise ValueError(f"share {share} outside [0, 1]")
        if assignment == "identity":
            if abs(share - observed) > 0.5 / n:
                LOG.warning("identity assignment requested at share %.4f != observed %.4f",
                            share, observed)
                points.append(CounterfactualPoint(share, np.nan, np.nan, False))
                continue
            member = observed_member
        elif assignment == "random":
            member = assign_groups(n, share, 1, 0, order) == 1
        else:
            raise ValueError("assignment must be 'random' or 'identity'")
        if M > 1:
            net = data.net.with_groups(np.where(member, target, other))
        else:
            net = data.net
        X = data.design.X.copy()
        if covariate is not None:
            X[:, covariate] = member.astype(float)
        names = data.design.names[data.design.own_column(0):data.design.own_column(data.design.K)]
        design = build_design(net, X, fixed_effects=data.design.fixed_effects, names=names)
        try:
            eq = solve_equilibrium(theta, net, design, u0=fit.u, tol=EFFECT_TOL, max_iter=5000)
        except (FloatingPointError, RuntimeError) as exc:
            LOG.warning("counterfactual at share %.3f failed: %s", share, exc)
            points.append(CounterfactualPoint(share, np.nan, np.nan, False))
            continue
        if not eq.converged:
            points.append(CounterfactualPoint(share, np.nan, np.nan, False))
            continue
        value = float(eq.ye.mean())
        sd = np.nan
        if se and fit.vcov is not None:
            def fn(vec, net=net, design=design, u0=eq.ye):
                e = solve_equilibrium(theta.from_vector(vec), net, design, u0=u0,
                                      tol=EFFECT_TOL, max_iter=5000)
                return e.ye.mean()
            try:
                sd = float(delta_method_se(fit, fn)[0])
            except EffectsError as exc:
                LOG.warning("delta method failed at share %.3f: %s", share, exc)
        points.append(CounterfactualPoint(share, value, sd, True))
    return points
