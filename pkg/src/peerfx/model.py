"""Structural count-outcome model with group-heterogeneous peer effects.

The private shock is standard normal. For an agent ``i`` of group ``g`` facing
beliefs ``u`` about everyone's expected outcome, the latent index is

    eta_i(u) = sum_h alpha[g, h] * (W^{g h} u)_i + z_i' beta

and ``P(y_i = t) = Phi(eta_i - gamma_g(t)) - Phi(eta_i - gamma_g(t + 1))``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import log_ndtr, ndtr

from .network import DesignMatrix, GroupedNetwork

LOG = logging.getLogger(__name__)

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.exp(-0.5 * x * x - _LOG_SQRT_2PI)
    return np.where(np.isfinite(x), out, 0.0)


def norm_interval(a, b):
    """``Phi(a) - Phi(b)`` for ``a >= b`` without cancellation in the upper tail."""
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    with np.errstate(invalid="ignore"):
        upper = (a + b) > 0
    return np.where(upper, ndtr(-b) - ndtr(-a), ndtr(a) - ndtr(b))


def log_norm_interval(a, b):
    """``log(Phi(a) - Phi(b))`` for ``a >= b``; ``-inf`` when the interval is empty."""
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    with np.errstate(invalid="ignore"):
        upper = (a + b) > 0
    hi = np.where(upper, -b, a)
    lo = np.where(upper, -a, b)
    lhi, llo = log_ndtr(hi), log_ndtr(lo)
    with np.errstate(invalid="ignore", divide="ignore"):
        d = llo - lhi  # <= 0
        d = np.where(np.isnan(d), -np.inf, d)
        tail = np.where(d > -np.log(2.0), np.log(-np.expm1(d)), np.log1p(-np.exp(d)))
    return lhi + tail


@dataclass(frozen=True)
class CutPointSpec:
    """Per-group thresholds from a cost that is free up to ``switch`` and quadratic after.

    ``gamma_g(1) = 0``; for ``2 <= r <= switch`` the spacing
    ``gamma_g(r) - gamma_g(r-1)`` is ``deltas[g, r-2]``; beyond ``switch`` every
    spacing equals ``tail[g]``. ``switch = 1`` gives evenly spaced cut points.
    """

    R: int
    M: int
    switch: int
    deltas: np.ndarray
    tail: np.ndarray

    def __post_init__(self):
        if self.R < 1:
            raise ValueError("R must be a positive integer")
        if self.switch < 1:
            raise ValueError("switch must be >= 1")
        deltas = np.asarray(self.deltas, dtype=float).reshape(self.M, self.n_free)
        tail = np.asarray(self.tail, dtype=float).reshape(self.M)
        if (deltas <= 0).any() or (self.has_tail and (tail <= 0).any()):
            raise ValueError("cut-point spacings must be strictly positive")
        object.__setattr__(self, "deltas", deltas)
        object.__setattr__(self, "tail", tail)

    @property
    def n_free(self) -> int:
        return min(self.switch, self.R) - 1

    @property
    def has_tail(self) -> bool:
        return self.R > self.switch

    @property
    def n_params_per_group(self) -> int:
        return self.n_free + int(self.has_tail)

    @classmethod
    def from_spacings(cls, R: int, switch: int, spacings, tail) -> "CutPointSpec":
        """Build from per-group spacing lists (``M x (switch-1)``) and tail spacings."""
        tail = np.atleast_1d(np.asarray(tail, dtype=float))
        M = tail.shape[0]
        n_free = min(switch, R) - 1
        spacings = np.asarray(spacings, dtype=float).reshape(M, -1)[:, :n_free]
        return cls(R=R, M=M, switch=switch, deltas=spacings, tail=tail)

    @classmethod
    def evenly_spaced(cls, R: int, spacing, M: int = 1) -> "CutPointSpec":
        spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (M,)).copy()
        return cls(R=R, M=M, switch=1, deltas=np.zeros((M, 0)), tail=spacing)

    def spacings(self) -> np.ndarray:
        """M x (R-1) matrix of ``gamma_g(r) - gamma_g(r-1)`` for r = 2..R."""
        out = np.empty((self.M, self.R - 1))
        out[:, :self.n_free] = self.deltas
        out[:, self.n_free:] = self.tail[:, None]
        return out

    @cached_property
    def levels(self) -> np.ndarray:
        """M x (R+2) matrix of ``gamma_g(r)`` for r = 0..R+1 (infinite at both ends)."""
        out = np.empty((self.M, self.R + 2))
        out[:, 0] = -np.inf
        out[:, 1] = 0.0
        out[:, 2:self.R + 1] = np.cumsum(self.spacings(), axis=1)
        out[:, self.R + 1] = np.inf
        return out

    @cached_property
    def jacobian(self) -> np.ndarray:
        """``d gamma_g(r) / d kappa`` with kappa the group's log-spacings, shape (R+2, P_g).

        The same matrix applies to every group after scaling by that group's
        spacings; see :meth:`group_jacobian`. Because each level is a sum of
        exponentials of distinct parameters, the second derivative is diagonal
        and equals the first.
        """
        r = np.arange(self.R + 2)
        cols = []
        for k in range(2, self.n_free + 2):
            cols.append(((r >= k) & (r <= self.R)).astype(float))
        if self.has_tail:
            cols.append(np.where(r <= self.R, np.maximum(r - self.switch, 0), 0).astype(float))
        return np.column_stack(cols) if cols else np.zeros((self.R + 2, 0))

    def group_jacobian(self) -> np.ndarray:
        """Shape (M, R+2, P_g): derivative of each group's levels w.r.t. its own log-spacings."""
        scale = np.empty((self.M, self.n_params_per_group))
        scale[:, :self.n_free] = self.deltas
        if self.has_tail:
            scale[:, -1] = self.tail
        return self.jacobian[None, :, :] * scale[:, None, :]

    def log_params(self) -> np.ndarray:
        out = np.empty((self.M, self.n_params_per_group))
        out[:, :self.n_free] = np.log(self.deltas)
        if self.has_tail:
            out[:, -1] = np.log(self.tail)
        return out

    def with_log_params(self, kappa) -> "CutPointSpec":
        kappa = np.asarray(kappa, dtype=float).reshape(self.M, self.n_params_per_group)
        with np.errstate(over="ignore"):
            ek = np.exp(kappa)
        tail = ek[:, -1] if self.has_tail else self.tail
        return CutPointSpec(R=self.R, M=self.M, switch=self.switch,
                            deltas=ek[:, :self.n_free], tail=tail)

    def min_spacing(self) -> np.ndarray:
        sp_ = self.spacings()
        return sp_.min(axis=1) if sp_.shape[1] else np.full(self.M, np.inf)


def gamma_eval(cuts: CutPointSpec, g: int, r: int) -> float:
    if not 0 <= g < cuts.M:
        raise ValueError(f"group {g} out of range 0..{cuts.M - 1}")
    if not 0 <= r <= cuts.R + 1:
        raise ValueError(f"threshold index {r} out of range 0..{cuts.R + 1}")
    return float(cuts.levels[g, r])


@dataclass(frozen=True)
class Theta:
    """Parameter vector: ``alpha`` (M x M, row = own group), ``beta`` and cut points.

    The flat vector used by the optimizer is
    ``[alpha row-major, beta, log-spacings of group 0, ..., group M-1]``.
    """

    alpha: np.ndarray
    beta: np.ndarray
    cuts: CutPointSpec

    def __post_init__(self):
        alpha = np.atleast_2d(np.asarray(self.alpha, dtype=float))
        if alpha.shape != (self.cuts.M, self.cuts.M):
            raise ValueError(f"alpha must be {self.cuts.M}x{self.cuts.M}")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).ravel())

    @property
    def M(self) -> int:
        return self.cuts.M

    @property
    def R(self) -> int:
        return self.cuts.R

    @property
    def n_alpha(self) -> int:
        return self.M * self.M

    @property
    def n_beta(self) -> int:
        return self.beta.shape[0]

    @property
    def size(self) -> int:
        return self.n_alpha + self.n_beta + self.M * self.cuts.n_params_per_group

    def slices(self) -> dict:
        a, b = self.n_alpha, self.n_alpha + self.n_beta
        return {"alpha": slice(0, a), "beta": slice(a, b), "cuts": slice(b, self.size)}

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.alpha.ravel(), self.beta, self.cuts.log_params().ravel()])

    def from_vector(self, vec) -> "Theta":
        vec = np.asarray(vec, dtype=float)
        s = self.slices()
        return Theta(alpha=vec[s["alpha"]].reshape(self.M, self.M), beta=vec[s["beta"]],
                     cuts=self.cuts.with_log_params(vec[s["cuts"]]))

    def param_names(self, beta_names=None) -> list[str]:
        names = [f"alpha[{g + 1},{h + 1}]" for g in range(self.M) for h in range(self.M)]
        beta_names = list(beta_names) if beta_names else [f"beta[{k}]" for k in range(self.n_beta)]
        names += beta_names
        for g in range(self.M):
            names += [f"log_delta[{g + 1},{r}]" for r in range(2, self.cuts.n_free + 2)]
            if self.cuts.has_tail:
                names.append(f"log_tail[{g + 1}]")
        return names

    def to_dict(self) -> dict:
        c = self.cuts
        return {
            "R": c.R, "M": c.M, "switch": c.switch,
            "alpha": self.alpha.ravel().tolist(),
            "beta": self.beta.tolist(),
            "log_spacings": np.log(c.deltas).tolist(),
            "tail_spacings": c.tail.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Theta":
        M, R, switch = int(d["M"]), int(d["R"]), int(d["switch"])
        cuts = CutPointSpec(R=R, M=M, switch=switch,
                            deltas=np.exp(np.asarray(d["log_spacings"], float).reshape(M, -1)),
                            tail=np.asarray(d["tail_spacings"], float))
        return cls(alpha=np.asarray(d["alpha"], float).reshape(M, M),
                   beta=np.asarray(d["beta"], float), cuts=cuts)


def peer_term(theta: Theta, net: GroupedNetwork, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    avg = net.peer_averages(u)
    return np.einsum("ih,ih->i", theta.alpha[net.groups], avg)


def linear_index(theta: Theta, net: GroupedNetwork, design: DesignMatrix, u) -> np.ndarray:
    """``eta_i(u)``: peer term plus ``z_i' beta``."""
    if design.Z.shape[1] != theta.n_beta:
        raise ValueError(f"beta has {theta.n_beta} entries, design has {design.Z.shape[1]} columns")
    eta = peer_term(theta, net, u) + design.Z @ theta.beta
    bad = ~np.isfinite(eta)
    if bad.any():
        raise FloatingPointError(f"non-finite linear index for agent {int(np.argmax(bad))}")
    return eta


def agent_levels(theta: Theta, net: GroupedNetwork) -> np.ndarray:
    return theta.cuts.levels[net.groups]


def probabilities_from_index(eta, levels) -> np.ndarray:
    A = eta[:, None] - levels
    return norm_interval(A[:, :-1], A[:, 1:])


def choice_probabilities(theta: Theta, net: GroupedNetwork, design: DesignMatrix, ye) -> np.ndarray:
    """n x (R+1) matrix of ``P(y_i = t)`` given beliefs ``ye``."""
    eta = linear_index(theta, net, design, ye)
    return probabilities_from_index(eta, agent_levels(theta, net))


def best_response(theta: Theta, g: int, eta_base, eps):
    """Optimal count: the number of thresholds ``gamma_g(1..R)`` at or below ``eta + eps``."""
    inner = theta.cuts.levels[g, 1:theta.R + 1]
    v = np.asarray(eta_base, dtype=float) + np.asarray(eps, dtype=float)
    out = np.searchsorted(inner, v, side="right")
    return int(out) if np.ndim(out) == 0 else out


def _map_from_index(eta, levels, R):
    return ndtr(eta[:, None] - levels[:, 1:R + 1]).sum(axis=1)


def expected_outcome_map(theta: Theta, net: GroupedNetwork, design: DesignMatrix, u) -> np.ndarray:
    """``L(u)_i = sum_{t=1}^R Phi(eta_i(u) - gamma_{g_i}(t))``."""
    eta = linear_index(theta, net, design, u)
    return _map_from_index(eta, agent_levels(theta, net), theta.R)


def density_sum(eta, levels, R) -> np.ndarray:
    """``f*_i = sum_{t=1}^R phi(eta_i - gamma(t))``."""
    return norm_pdf(eta[:, None] - levels[:, 1:R + 1]).sum(axis=1)


@dataclass
class EquilibriumState:
    ye: np.ndarray
    eta: np.ndarray
    levels: np.ndarray = field(repr=False)
    residual: float
    iterations: int
    converged: bool

    @cached_property
    def probs(self) -> np.ndarray:
        return probabilities_from_index(self.eta, self.levels)

    @property
    def fstar(self) -> np.ndarray:
        return density_sum(self.eta, self.levels, self.levels.shape[1] - 2)


class EquilibriumError(RuntimeError):
    pass


def closed_form_no_peers(theta: Theta, net: GroupedNetwork, design: DesignMatrix) -> np.ndarray:
    eta = design.Z @ theta.beta
    return _map_from_index(eta, agent_levels(theta, net), theta.R)


def solve_equilibrium(theta: Theta, net: GroupedNetwork, design: DesignMatrix, u0=None,
                      tol: float = 1e-9, max_iter: int = 1000) -> EquilibriumState:
    """Iterate ``u <- L(u)`` until the sup-norm update falls below ``tol``.

    Returns a state with ``converged=False`` if ``max_iter`` is exhausted.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    levels = agent_levels(theta, net)
    zb = design.Z @ theta.beta
    u = closed_form_no_peers(theta, net, design) if u0 is None else np.asarray(u0, float).copy()
    residual, it = np.inf, 0
    for it in range(1, max_iter + 1):
        eta = peer_term(theta, net, u) + zb
        new = _map_from_index(eta, levels, theta.R)
        if not np.isfinite(new).all():
            raise EquilibriumError(f"non-finite expected outcome at iteration {it}")
        residual = float(np.max(np.abs(new - u))) if u.size else 0.0
        u = new
        if residual < tol:
            break
    converged = residual < tol
    if not converged:
        LOG.warning("equilibrium not converged after %d iterations (residual %.3g)", it, residual)
    eta = peer_term(theta, net, u) + zb
    return EquilibriumState(ye=u, eta=eta, levels=levels, residual=residual,
                            iterations=it, converged=converged)


def _golden_max(f, lo, hi, tol=1e-10):
    """Golden-section maximization of a vectorized ``f`` on each bracket ``[lo_k, hi_k]``."""
    a, b = np.array(lo, dtype=float), np.array(hi, dtype=float)
    c, d = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    # floor the tolerance at a few ulps: at large |x| the float spacing exceeds ``tol``
    for _ in range(200):
        if np.all(b - a <= np.maximum(tol, 16 * np.spacing(np.abs(a) + np.abs(b)))):
            break
        left = fc > fd
        a, b = np.where(left, a, c), np.where(left, d, b)
        c_new = np.where(left, b - GOLDEN * (b - a), d)
        d_new = np.where(left, c, a + GOLDEN * (b - a))
        fc_old, fd_old = fc, fd
        fresh = f(np.where(left, c_new, d_new))
        fc = np.where(left, fresh, fd_old)
        fd = np.where(left, fc_old, fresh)
        c, d = c_new, d_new
    x = 0.5 * (a + b)
    return x, f(x)


def density_comb_max(levels_inner: np.ndarray, n_grid: int = 4096) -> tuple[float, float]:
    """``max_u sum_t phi(u - gamma(t))`` by grid pre-scan and golden-section refinement."""
    lo, hi = levels_inner[0] - 10.0, levels_inner[-1] + 10.0

    def comb(u):
        return norm_pdf(np.asarray(u)[:, None] - levels_inner[None, :]).sum(axis=1)

    # the maximum lies within 10 of some cut point; grid only those windows so that a
    # few outlying cut points do not stretch the step
    starts, ends = [lo], [levels_inner[0] + 10.0]
    for g in levels_inner[1:]:
        if g - 10.0 <= ends[-1]:
            ends[-1] = g + 10.0
        else:
            starts.append(g - 10.0)
            ends.append(g + 10.0)
    starts, ends = np.array(starts), np.array(ends)
    step = min(float((ends - starts).sum()) / (n_grid - 1), 0.05)
    grid = np.concatenate([np.linspace(a, b, int(np.ceil((b - a) / step)) + 1)
                           for a, b in zip(starts, ends)])
    vals = comb(grid)
    # refine every grid peak that could hide the true maximum (curvature of the comb is
    # at most R * phi(0), so a peak cannot lose more than half that times step**2 on the grid)
    slack = 0.5 * len(levels_inner) * norm_pdf(0.0) * step ** 2
    inner = (vals[1:-1] >= vals[:-2]) & (vals[1:-1] >= vals[2:])
    peaks = np.flatnonzero(np.concatenate([[vals[0] >= vals[1]], inner, [vals[-1] >= vals[-2]]]))
    peaks = peaks[vals[peaks] >= vals.max() - slack]
    xs, fs = _golden_max(comb, np.maximum(lo, grid[peaks] - step),
                         np.minimum(hi, grid[peaks] + step))
    worse = fs < vals[peaks]
    xs, fs = np.where(worse, grid[peaks], xs), np.where(worse, vals[peaks], fs)
    k = int(np.argmax(fs))
    return float(fs[k]), float(xs[k])


@dataclass
class ContractionReport:
    bound_per_group: np.ndarray
    limit_per_group: np.ndarray
    alpha_row_sums: np.ndarray
    margin: float
    passed: bool

    @property
    def kappa(self) -> float:
        """Upper bound on the contraction modulus of the expected-outcome map."""
        return float(np.max(np.abs(self.alpha_row_sums) * self.bound_per_group))

    def to_dict(self) -> dict:
        return {"bound_per_group": self.bound_per_group.tolist(),
                "limit_per_group": self.limit_per_group.tolist(),
                "alpha_row_sums": self.alpha_row_sums.tolist(),
                "margin": self.margin, "pass": self.passed}


def contraction_diagnostic(theta: Theta) -> ContractionReport:
    """Check ``sum_h alpha[g, h] < 1 / max_u sum_t phi(u - gamma_g(t))`` for every group."""
    R = theta.R
    bounds = np.array([density_comb_max(theta.cuts.levels[g, 1:R + 1])[0]
                       for g in range(theta.M)])
    limits = 1.0 / bounds
    sums = theta.alpha.sum(axis=1)
    margins = limits - sums
    return ContractionReport(bound_per_group=bounds, limit_per_group=limits,
                             alpha_row_sums=sums, margin=float(margins.min()),
                             passed=bool((margins > 0).all()))


def conditional_moments(theta: Theta, net: GroupedNetwork, design: DesignMatrix,
                        eq: EquilibriumState) -> tuple[np.ndarray, np.ndarray]:
    """Per-agent mean and variance of the outcome at the equilibrium ``eq``."""
    if not eq.converged:
        raise EquilibriumError("conditional moments require a converged equilibrium")
    R = theta.R
    eta = linear_index(theta, net, design, eq.ye)
    F = ndtr(eta[:, None] - agent_levels(theta, net)[:, 1:R + 1])
    mean = F.sum(axis=1)
    second = F @ (2.0 * np.arange(1, R + 1) - 1.0)
    return mean, second - mean ** 2


def check_contraction_or_warn(theta: Theta) -> ContractionReport:
    rep = contraction_diagnostic(theta)
    if not rep.passed:
        warnings.warn(f"contraction condition fails (margin {rep.margin:.4g}); "
                      "the equilibrium may not be unique", stacklevel=2)
    return rep
