"""Nested pseudo-likelihood (NPL) estimation, sandwich variance and cost-switch selection.

For beliefs ``u`` held fixed, the pseudo-likelihood is an ordered-probit
likelihood whose index includes the peer averages of ``u``. NPL alternates a
full maximization in ``theta`` with one application of the expected-outcome
map to ``u``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.sparse.linalg import splu
from scipy.special import ndtri

from .model import (CutPointSpec, Theta, _map_from_index, agent_levels, contraction_diagnostic,
                    density_sum, log_norm_interval, norm_pdf, peer_term)
from .network import DesignMatrix, GroupedNetwork, identification_diagnostic

LOG = logging.getLogger(__name__)

PROB_FLOOR = 1e-300
_LOG_FLOOR = math.log(PROB_FLOOR)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PeerData:
    """Observed sample: network, regressors and counts."""

    net: GroupedNetwork
    design: DesignMatrix
    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y)
        if y.shape != (self.net.n,):
            raise ValueError(f"y has shape {y.shape}, expected ({self.net.n},)")
        if self.design.Z.shape[0] != self.net.n:
            raise ValueError("design and network disagree on the number of agents")
        if (y < 0).any() or not np.all(y == np.round(y)):
            raise ValueError("outcomes must be nonnegative integers")
        object.__setattr__(self, "y", y.astype(int))

    @property
    def n(self) -> int:
        return self.net.n

    @property
    def S(self) -> int:
        return self.net.S


@dataclass(frozen=True)
class NplSettings:
    tol_inner: float = 1e-6
    tol_outer: float = 1e-6
    max_outer: int = 200
    max_inner: int = 500
    u0: str = "y"
    method: str = "trust-exact"
    restarts: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.tol_inner <= 0 or self.tol_outer <= 0:
            raise ValueError("tolerances must be positive")
        if self.u0 not in ("y", "closed_form"):
            raise ValueError("u0 must be 'y' or 'closed_form'")
        if self.method not in ("trust-exact", "bfgs"):
            raise ValueError("method must be 'trust-exact' or 'bfgs'")


# ----------------------------------------------------------------------------
# pseudo-likelihood


@dataclass
class LikTerms:
    value: float
    grad: np.ndarray
    hess: np.ndarray | None
    floored: int
    scores: np.ndarray | None = None


class PseudoLikelihood:
    """Pseudo-likelihood in ``theta`` at fixed beliefs ``u``, with exact derivatives.

    All quantities are divided by the number of subnetworks ``S``.
    """

    def __init__(self, data: PeerData, template: Theta, u):
        if template.n_beta != data.design.Z.shape[1]:
            raise ValueError(f"beta has {template.n_beta} entries, design has "
                             f"{data.design.Z.shape[1]} columns")
        if data.y.max() > template.R:
            raise ValueError(f"observed outcome {data.y.max()} exceeds R={template.R}")
        u = np.asarray(u, dtype=float)
        if u.shape != (data.n,) or not np.isfinite(u).all():
            raise ValueError("u must be a finite vector with one entry per agent")
        self.data = data
        self.template = template
        self.u = u
        self.peer = data.net.peer_averages(u)  # n x M
        n, M = data.n, template.M
        g = data.net.groups
        self.D = np.zeros((n, template.size))
        self.D[np.arange(n)[:, None], g[:, None] * M + np.arange(M)[None, :]] = self.peer
        self.D[:, template.slices()["beta"]] = data.design.Z
        npg = template.cuts.n_params_per_group
        self.kcols = template.slices()["cuts"].start + g[:, None] * npg + np.arange(npg)[None, :]

    def _index(self, theta: Theta) -> np.ndarray:
        g = self.data.net.groups
        return np.einsum("ih,ih->i", theta.alpha[g], self.peer) + self.data.design.Z @ theta.beta

    def probabilities(self, theta: Theta) -> np.ndarray:
        from .model import probabilities_from_index
        return probabilities_from_index(self._index(theta), agent_levels(theta, self.data.net))

    def evaluate(self, vec, order: int = 2, scores: bool = False) -> LikTerms:
        theta = self.template.from_vector(vec)
        y, g = self.data.y, self.data.net.groups
        eta = self._index(theta)
        lev = theta.cuts.levels
        a = eta - lev[g, y]
        b = eta - lev[g, y + 1]
        logp = log_norm_interval(a, b)
        floored = int((logp < _LOG_FLOOR).sum())
        S = self.data.S
        value = float(np.maximum(logp, _LOG_FLOOR).sum() / S)
        with np.errstate(over="ignore", invalid="ignore"):
            ra = np.where(np.isfinite(a), np.exp(-0.5 * a * a - _LOG_SQRT_2PI - logp), 0.0)
            rb = np.where(np.isfinite(b), np.exp(-0.5 * b * b - _LOG_SQRT_2PI - logp), 0.0)
        J = theta.cuts.group_jacobian()  # M x (R+2) x npg
        Ja, Jb = J[g, y], J[g, y + 1]
        rows = np.arange(self.data.n)[:, None]
        da = self.D.copy()
        db = self.D.copy()
        da[rows, self.kcols] -= Ja
        db[rows, self.kcols] -= Jb
        s = ra[:, None] * da - rb[:, None] * db
        grad = s.sum(axis=0) / S
        hess = None
        if order >= 2:
            a0 = np.where(np.isfinite(a), a, 0.0)
            b0 = np.where(np.isfinite(b), b, 0.0)
            haa = -a0 * ra - ra * ra
            hbb = b0 * rb - rb * rb
            hab = ra * rb
            hess = (da.T @ (haa[:, None] * da) + db.T @ (hbb[:, None] * db)
                    + da.T @ (hab[:, None] * db) + db.T @ (hab[:, None] * da))
            # curvature of the log-spacing map: d2 gamma / d kappa2 = d gamma / d kappa
            diag = np.zeros(self.template.size)
            np.add.at(diag, self.kcols.ravel(), (-ra[:, None] * Ja + rb[:, None] * Jb).ravel())
            hess = (hess + np.diag(diag)) / S
        return LikTerms(value=value, grad=grad, hess=hess, floored=floored,
                        scores=s if scores else None)

    def eta_derivatives(self, vec):
        """Pieces needed for the cross derivative in ``(theta, u)``."""
        theta = self.template.from_vector(vec)
        y, g = self.data.y, self.data.net.groups
        eta = self._index(theta)
        lev = theta.cuts.levels
        a, b = eta - lev[g, y], eta - lev[g, y + 1]
        logp = log_norm_interval(a, b)
        with np.errstate(over="ignore", invalid="ignore"):
            ra = np.where(np.isfinite(a), np.exp(-0.5 * a * a - _LOG_SQRT_2PI - logp), 0.0)
            rb = np.where(np.isfinite(b), np.exp(-0.5 * b * b - _LOG_SQRT_2PI - logp), 0.0)
        a0 = np.where(np.isfinite(a), a, 0.0)
        b0 = np.where(np.isfinite(b), b, 0.0)
        haa, hbb, hab = -a0 * ra - ra * ra, b0 * rb - rb * rb, ra * rb
        J = theta.cuts.group_jacobian()
        rows = np.arange(self.data.n)[:, None]
        da, db = self.D.copy(), self.D.copy()
        da[rows, self.kcols] -= J[g, y]
        db[rows, self.kcols] -= J[g, y + 1]
        q = (haa + hab)[:, None] * da + (hab + hbb)[:, None] * db  # d score / d eta
        return q, ra - rb, theta


def pseudo_loglik(theta: Theta, u, data: PeerData, return_grad: bool = False):
    """Pseudo-log-likelihood ``(1/S) sum_i log P(y_i | theta, u)``."""
    terms = PseudoLikelihood(data, theta, u).evaluate(theta.to_vector(), order=1)
    if terms.floored:
        LOG.debug("%d probabilities floored at %g", terms.floored, PROB_FLOOR)
    return (terms.value, terms.grad) if return_grad else terms.value


# ----------------------------------------------------------------------------
# inner maximization


@dataclass
class InnerResult:
    vec: np.ndarray
    value: float
    grad_norm: float
    success: bool
    nit: int
    floored: int


def maximize_theta(lik: PseudoLikelihood, x0, settings: NplSettings, free=None,
                   rng: np.random.Generator | None = None) -> InnerResult:
    """Maximize the pseudo-likelihood over the coordinates flagged in ``free``."""
    x0 = np.asarray(x0, dtype=float)
    free = np.ones(x0.size, bool) if free is None else np.asarray(free, bool)
    cache = {}

    def full(z):
        x = x0.copy()
        x[free] = z
        return x

    def terms(z):
        key = z.tobytes()
        if key not in cache:
            cache.clear()
            try:
                with np.errstate(all="ignore"):
                    t = lik.evaluate(full(z), order=2 if settings.method == "trust-exact" else 1)
            except (ValueError, FloatingPointError):
                t = None
            if t is not None and not (np.isfinite(t.value) and np.isfinite(t.grad).all()):
                t = None
            if t is not None and (best_seen["t"] is None or t.value > best_seen["t"].value):
                best_seen.update(t=t, z=z.copy())
            cache[key] = t
        return cache[key]

    def fun(z):
        t = terms(z)
        if t is None:
            return np.inf, np.zeros_like(z)
        return -t.value, -t.grad[free]

    def hess(z):
        t = terms(z)
        if t is None or not np.isfinite(t.hess).all():
            return np.eye(int(free.sum())) * 1e6
        return -t.hess[np.ix_(free, free)]

    start = x0[free].copy()
    rng = np.random.default_rng(settings.seed) if rng is None else rng
    best = None
    for attempt in range(settings.restarts + 1):
        best_seen = {"t": None, "z": None}
        nit = 0
        method = settings.method if attempt < settings.restarts else "bfgs"
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                if method == "trust-exact":
                    res = minimize(fun, start, jac=True, hess=hess, method="trust-exact",
                                   options={"gtol": settings.tol_inner,
                                            "maxiter": settings.max_inner})
                else:
                    res = minimize(fun, start, jac=True, method="BFGS",
                                   options={"gtol": settings.tol_inner,
                                            "maxiter": settings.max_inner})
            z, nit = res.x, int(res.nit)
        except (ValueError, np.linalg.LinAlgError) as exc:
            LOG.info("inner optimizer raised %s", exc)
            z = best_seen["z"]
        t = terms(z) if z is not None else None
        if t is None:
            z, t = best_seen["z"], best_seen["t"]
        if t is None:
            start = x0[free] + rng.normal(scale=0.05, size=start.size)
            continue
        gnorm = float(np.max(np.abs(t.grad[free]))) if free.any() else 0.0
        out = InnerResult(vec=full(z), value=t.value, grad_norm=gnorm,
                          success=gnorm < settings.tol_inner, nit=nit, floored=t.floored)
        if best is None or (out.success and not best.success) or \
                (out.success == best.success and out.value > best.value):
            best = out
        if out.success:
            return out
        LOG.info("inner maximization failed (attempt %d, |grad| %.3g); restarting",
                 attempt + 1, gnorm)
        start = z + rng.normal(scale=0.05, size=z.size)
    if best is None:
        raise EstimationError("pseudo-likelihood could not be evaluated near the start point")
    return best


# ----------------------------------------------------------------------------
# initialization


def initial_cuts(y, R: int, M: int, switch: int) -> CutPointSpec:
    """Spacings from inverse-CDF gaps of the marginal outcome distribution."""
    y = np.asarray(y)
    surv = np.array([(y >= t).mean() for t in range(R + 2)])
    q = ndtri(np.clip(surv, 1e-4, 1 - 1e-4))
    gaps = q[1:R] - q[2:R + 1]  # spacing gamma(t) - gamma(t-1), t = 2..R
    valid = gaps[np.isfinite(gaps) & (gaps > 1e-3)]
    fill = float(np.median(valid)) if valid.size else 0.5
    gaps = np.where(np.isfinite(gaps) & (gaps > 1e-3), gaps, fill)
    n_free = min(switch, R) - 1
    free = np.tile(gaps[:n_free], (M, 1))
    tail_src = gaps[n_free:]
    observed = tail_src[: max(int(y.max()) - n_free, 1)]
    tail = np.full(M, float(np.median(observed)) if observed.size else fill)
    return CutPointSpec(R=R, M=M, switch=switch, deltas=free, tail=tail)


def initial_theta(data: PeerData, R: int, switch: int) -> Theta:
    M = data.net.M
    cuts = initial_cuts(data.y, R, M, switch)
    beta = np.zeros(data.design.Z.shape[1])
    surv1 = np.clip((data.y >= 1).mean(), 1e-4, 1 - 1e-4)
    beta[:data.design.n_intercepts] = ndtri(surv1)
    return Theta(alpha=np.zeros((M, M)), beta=beta, cuts=cuts)


# ----------------------------------------------------------------------------
# NPL


@dataclass
class FitResult:
    theta: Theta
    u: np.ndarray
    loglik: float
    bic: float
    bic_S: float
    n_params: int
    vcov: np.ndarray | None
    outer_iterations: int
    converged: bool
    fixed_point_residual: float
    grad_norm: float
    contraction_margin: float
    spacing_margin: np.ndarray
    trace: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    floored: int = 0
    vcov_flag: str = ""
    param_names: list = field(default_factory=list)
    free: np.ndarray | None = None

    @property
    def se(self) -> np.ndarray | None:
        return None if self.vcov is None else np.sqrt(np.clip(np.diag(self.vcov), 0, None))

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.to_dict(),
            "param_names": self.param_names,
            "estimate": self.theta.to_vector(),
            "se": self.se,
            "vcov": None if self.vcov is None else self.vcov.ravel(),
            "vcov_flag": self.vcov_flag,
            "loglik": self.loglik, "bic": self.bic, "bic_S": self.bic_S,
            "n_params": self.n_params,
            "outer_iterations": self.outer_iterations, "converged": self.converged,
            "fixed_point_residual": self.fixed_point_residual, "grad_norm": self.grad_norm,
            "contraction_margin": self.contraction_margin,
            "spacing_margin": self.spacing_margin,
            "floored_probabilities": self.floored,
            "trace": self.trace, "warnings": self.warnings,
            "u": self.u,
            "free": None if self.free is None else self.free.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        theta = Theta.from_dict(d["theta"])
        P = theta.size
        vcov = None if d.get("vcov") is None else np.asarray(d["vcov"], float).reshape(P, P)
        return cls(theta=theta, u=np.asarray(d["u"], float), loglik=d["loglik"], bic=d["bic"],
                   bic_S=d["bic_S"], n_params=d["n_params"], vcov=vcov,
                   outer_iterations=d["outer_iterations"], converged=d["converged"],
                   fixed_point_residual=d["fixed_point_residual"], grad_norm=d["grad_norm"],
                   contraction_margin=d["contraction_margin"],
                   spacing_margin=np.asarray(d["spacing_margin"], float),
                   trace=d.get("trace", []), warnings=d.get("warnings", []),
                   floored=d.get("floored_probabilities", 0), vcov_flag=d.get("vcov_flag", ""),
                   param_names=d.get("param_names", []),
                   free=None if d.get("free") is None else np.asarray(d["free"], bool))


def _bic(loglik, k, n, S):
    return -2.0 * S * loglik + k * math.log(n), -2.0 * S * loglik + k * math.log(max(S, 1))


def npl_estimate(data: PeerData, R: int, switch: int = 1, settings: NplSettings | None = None,
                 theta0: Theta | None = None, u0=None, variance: bool = True,
                 check_identification: bool = True, free=None) -> FitResult:
    """Estimate ``theta`` by NPL and (optionally) its sandwich covariance.

    ``theta0``/``u0`` warm-start the iteration. ``free`` is an optional boolean
    mask over the parameter vector; coordinates outside it stay at their
    ``theta0`` values (e.g. peer effects pinned at zero). The reported pair
    ``(theta_k, u_{k-1})`` satisfies both fixed-point certificates: ``theta_k``
    maximizes the pseudo-likelihood at ``u_{k-1}`` and ``u_{k-1}`` is within
    ``tol_outer`` of ``L(theta_k, u_{k-1})``.
    """
    settings = settings or NplSettings()
    net, design = data.net, data.design
    if check_identification:
        rep = identification_diagnostic(net, design)
        if rep.verdict == "FAIL":
            warnings.warn("identification diagnostic FAILS; estimates may be meaningless",
                          stacklevel=2)
    if theta0 is None:
        theta = initial_theta(data, R, switch)
        no_peers = np.ones(theta.size, bool)
        no_peers[theta.slices()["alpha"]] = False
        lik = PseudoLikelihood(data, theta, np.zeros(data.n))
        inner = maximize_theta(lik, theta.to_vector(), settings, free=no_peers)
        theta = theta.from_vector(inner.vec)
    else:
        theta = theta0
        if theta.R != R or theta.cuts.switch != switch or theta.M != net.M:
            raise ValueError("theta0 does not match R, switch or the number of groups")
    if free is not None:
        free = np.asarray(free, bool)
        if free.shape != (theta.size,):
            raise ValueError(f"free mask must have {theta.size} entries")
    if u0 is not None:
        u = np.asarray(u0, dtype=float).copy()
    elif settings.u0 == "y":
        u = data.y.astype(float)
    else:
        u = _map_from_index(design.Z @ theta.beta, agent_levels(theta, net), R)

    vec = theta.to_vector()
    rng = np.random.default_rng(settings.seed)
    trace, notes = [], []
    converged, inner, last_value = False, None, -np.inf
    residual = np.inf
    k = 0
    for k in range(1, settings.max_outer + 1):
        lik = PseudoLikelihood(data, theta, u)
        inner = maximize_theta(lik, vec, settings, free=free, rng=rng)
        new_theta = theta.from_vector(inner.vec)
        eta = peer_term(new_theta, net, u) + design.Z @ new_theta.beta
        u_new = _map_from_index(eta, agent_levels(new_theta, net), R)
        if not np.isfinite(u_new).all():
            raise EstimationError(f"non-finite expected outcomes at NPL iteration {k}")
        residual = float(np.max(np.abs(u_new - u)))
        dtheta = float(np.max(np.abs(inner.vec - vec)))
        trace.append({"iteration": k, "loglik": inner.value, "theta_change": dtheta,
                      "u_change": residual, "inner_iterations": inner.nit,
                      "grad_norm": inner.grad_norm})
        if inner.value < last_value - 1e-8:
            notes.append(f"pseudo-likelihood decreased at iteration {k} "
                         f"({last_value:.10g} -> {inner.value:.10g})")
        last_value = inner.value
        theta, vec = new_theta, inner.vec
        if max(dtheta, residual) < settings.tol_outer and inner.success:
            converged = True
            break
        u = u_new
    else:
        notes.append(f"NPL did not converge in {settings.max_outer} iterations")

    if converged:
        if not (residual < settings.tol_outer and inner.grad_norm < settings.tol_inner):
            raise EstimationError("NPL certificates failed despite convergence")
    if inner is not None and not inner.success:
        notes.append("inner maximization did not reach the gradient tolerance")
    contraction = contraction_diagnostic(theta)
    spacing_margin = theta.cuts.min_spacing() - theta.alpha.sum(axis=1)
    if (spacing_margin <= 0).any():
        notes.append("estimated cut-point spacing does not exceed the summed peer effects")
    bic, bic_S = _bic(inner.value, theta.size, data.n, data.S)
    fit = FitResult(theta=theta, u=u, loglik=inner.value, bic=bic, bic_S=bic_S,
                    n_params=theta.size, vcov=None, outer_iterations=k, converged=converged,
                    fixed_point_residual=residual, grad_norm=inner.grad_norm,
                    contraction_margin=contraction.margin, spacing_margin=spacing_margin,
                    trace=trace, warnings=notes, floored=inner.floored,
                    param_names=theta.param_names(design.names), free=free)
    for msg in notes:
        LOG.debug(msg)
    if not converged:
        LOG.warning("NPL did not converge (last change %.3g)", residual)
    if variance and converged:
        fit.vcov, fit.vcov_flag = npl_variance(fit, data, return_flag=True)
    return fit


# ----------------------------------------------------------------------------
# variance


def map_derivatives(theta: Theta, data: PeerData, u) -> tuple[sp.csr_matrix, np.ndarray]:
    """``dL/du`` (sparse n x n) and ``dL/dtheta`` (n x P) of the expected-outcome map."""
    net, R = data.net, theta.R
    lik = PseudoLikelihood(data, theta, u)
    eta = lik._index(theta)
    levels = agent_levels(theta, net)
    fstar = density_sum(eta, levels, R)
    G = net.peer_matrix(theta.alpha)
    dLdu = sp.csr_matrix(sp.diags(fstar) @ G)
    dLdth = fstar[:, None] * lik.D
    dens = norm_pdf(eta[:, None] - levels[:, 1:R + 1])  # n x R
    J = theta.cuts.group_jacobian()[:, 1:R + 1, :]  # M x R x npg
    g = net.groups
    kpart = -np.einsum("it,itk->ik", dens, J[g])
    rows = np.arange(data.n)[:, None]
    dLdth[rows, lik.kcols] += kpart
    return dLdu, dLdth


def belief_jacobian(theta: Theta, data: PeerData, u) -> np.ndarray:
    """``du/dtheta`` from the implicit-function system at the fixed point."""
    dLdu, dLdth = map_derivatives(theta, data, u)
    A = sp.identity(data.n, format="csc") - dLdu.tocsc()
    try:
        lu = splu(A)
    except RuntimeError as exc:
        raise EstimationError("fixed-point system (I - dL/du) is singular") from exc
    return lu.solve(dLdth)


def expected_score_covariance(lik: PseudoLikelihood, vec) -> np.ndarray:
    """``(1/S) sum_i sum_t p_it s_it s_it'``: score covariance under the model."""
    theta = lik.template.from_vector(vec)
    data = lik.data
    g = data.net.groups
    eta = lik._index(theta)
    lev = theta.cuts.levels
    J = theta.cuts.group_jacobian()
    rows = np.arange(data.n)[:, None]
    out = np.zeros((theta.size, theta.size))
    for t in range(theta.R + 1):
        a, b = eta - lev[g, t], eta - lev[g, t + 1]
        logp = log_norm_interval(a, b)
        p = np.exp(logp)
        if p.max() < 1e-16:
            continue
        with np.errstate(over="ignore", invalid="ignore"):
            ra = np.where(np.isfinite(a) & (p > 0), np.exp(-0.5 * a * a - _LOG_SQRT_2PI - logp), 0.0)
            rb = np.where(np.isfinite(b) & (p > 0), np.exp(-0.5 * b * b - _LOG_SQRT_2PI - logp), 0.0)
        s = (ra - rb)[:, None] * lik.D
        s[rows, lik.kcols] += -ra[:, None] * J[g, t] + rb[:, None] * J[g, t + 1]
        out += s.T @ (p[:, None] * s)
    return out / data.S


def total_hessian(theta: Theta, data: PeerData, u, lik: PseudoLikelihood | None = None,
                  terms: LikTerms | None = None) -> np.ndarray:
    """``H1 + H2``: derivative of the score along the equilibrium path ``u(theta)``.

    ``H1`` is the Hessian of the pseudo-likelihood in ``theta`` at fixed ``u``;
    ``H2`` adds the effect of ``theta`` on the beliefs through the fixed point.
    """
    vec = theta.to_vector()
    lik = PseudoLikelihood(data, theta, u) if lik is None else lik
    terms = lik.evaluate(vec, order=2) if terms is None else terms
    q, w, _ = lik.eta_derivatives(vec)
    G = data.net.peer_matrix(theta.alpha)
    cross = np.asarray((G.T @ q).T)  # P x n
    g = data.net.groups
    M = theta.M
    for gg in range(M):
        for h in range(M):
            cross[gg * M + h] += data.net.to_group[h].T @ (w * (g == gg))
    cross /= data.S
    return terms.hess + cross @ belief_jacobian(theta, data, u)


def npl_variance(fit: FitResult, data: PeerData, meat: str = "expected",
                 return_flag: bool = False):
    """Sandwich covariance ``H^{-1} Sigma H^{-T} / S`` with ``H`` from :func:`total_hessian`.

    ``meat`` is ``"expected"`` (score covariance under the fitted model) or
    ``"opg"`` (outer product of the observed scores).
    """
    if not fit.converged:
        raise EstimationError("variance requires a converged fit")
    theta, u = fit.theta, fit.u
    vec = theta.to_vector()
    lik = PseudoLikelihood(data, theta, u)
    terms = lik.evaluate(vec, order=2, scores=(meat == "opg"))
    H = total_hessian(theta, data, u, lik, terms)
    if meat == "opg":
        Sigma = terms.scores.T @ terms.scores / data.S
    elif meat == "expected":
        Sigma = expected_score_covariance(lik, vec)
    else:
        raise ValueError("meat must be 'expected' or 'opg'")
    free = np.ones(vec.size, bool) if fit.free is None else np.asarray(fit.free, bool)
    H, Sigma = H[np.ix_(free, free)], Sigma[np.ix_(free, free)]
    flag = ""
    try:
        cond = np.linalg.cond(H)
        if not np.isfinite(cond) or cond > 1e14:
            raise np.linalg.LinAlgError
        Hinv = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        Hinv = np.linalg.pinv(H)
        flag = "singular bread; pseudo-inverse used"
        LOG.warning(flag)
    V = np.zeros((vec.size, vec.size))
    V[np.ix_(free, free)] = Hinv @ Sigma @ Hinv.T / data.S
    V = 0.5 * (V + V.T)
    return (V, flag) if return_flag else V


# ----------------------------------------------------------------------------
# cost-switch selection


@dataclass
class SwitchSelection:
    best: FitResult
    table: list
    fits: dict

    @property
    def best_switch(self) -> int:
        return self.best.theta.cuts.switch


def extend_switch(theta: Theta, switch: int) -> Theta:
    """Same cut points, parameterized with a later switch (tail becomes free spacings)."""
    c = theta.cuts
    if switch < c.switch:
        raise ValueError("can only extend the switch point")
    sp_ = c.spacings()
    n_free = min(switch, c.R) - 1
    tail = c.tail if c.has_tail else sp_[:, -1] if sp_.shape[1] else c.tail
    cuts = CutPointSpec(R=c.R, M=c.M, switch=switch, deltas=sp_[:, :n_free], tail=tail)
    return Theta(alpha=theta.alpha, beta=theta.beta, cuts=cuts)


def select_cost_switch(data: PeerData, R: int, grid, settings: NplSettings | None = None,
                       patience: int | None = None, variance: bool = True) -> SwitchSelection:
    """Fit every switch value in ``grid`` (warm-started) and keep the BIC minimizer.

    BIC is ``-2 S loglik + k log(n)``; the ``log(S)`` variant is also tabulated.
    With ``patience`` set, the scan stops after that many consecutive values
    fail to improve the BIC.
    """
    grid = sorted(int(v) for v in grid)
    if not grid or grid[0] != 1:
        raise ValueError("the switch grid must start at 1")
    settings = settings or NplSettings()
    table, fits = [], {}
    best, prev, stale = None, None, 0
    for s in grid:
        theta0 = extend_switch(prev.theta, s) if prev is not None else None
        u0 = prev.u if prev is not None else None
        try:
            fit = npl_estimate(data, R, s, settings, theta0=theta0, u0=u0, variance=False,
                               check_identification=prev is None)
        except EstimationError as exc:
            LOG.warning("switch %d failed: %s", s, exc)
            table.append({"switch": s, "loglik": float("nan"), "bic": float("nan"),
                          "bic_S": float("nan"), "converged": False})
            continue
        fits[s] = fit
        table.append({"switch": s, "loglik": fit.loglik, "bic": fit.bic, "bic_S": fit.bic_S,
                      "n_params": fit.n_params, "converged": fit.converged})
        if fit.converged:
            prev = fit
            if best is None or fit.bic < best.bic:
                best, stale = fit, 0
            else:
                stale += 1
        if patience is not None and stale >= patience:
            break
    if best is None:
        raise EstimationError("no switch value produced a converged fit")
    if variance:
        best.vcov, best.vcov_flag = npl_variance(best, data, return_flag=True)
    return SwitchSelection(best=best, table=table, fits=fits)
