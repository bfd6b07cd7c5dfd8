"""Synthetic data from the equilibrium of the count-outcome game.

Random numbers come from numpy's ``Philox`` counter-based bit generator,
seeded through ``SeedSequence`` so streams reproduce across platforms.
Independent replications use :func:`replication_seeds`.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io
from .model import (CutPointSpec, EquilibriumState, Theta, best_response,
                    contraction_diagnostic, solve_equilibrium)
from .network import DesignMatrix, GroupedNetwork, build_design, build_network

LOG = logging.getLogger(__name__)

# Spacings gamma(r) - gamma(r-1), r = 2..13, of the semiparametric design
# when the own-group peer sum is 0.25; the tail spacing is 0.255.
SEMIPARAMETRIC_SPACINGS = np.array(
    [2.050, 1.250, 0.850, 0.700, 0.500, 0.400, 0.330, 0.300, 0.290, 0.280, 0.270, 0.260])
SEMIPARAMETRIC_TAIL = 0.255
DEFAULT_BETA = np.array([2.0, 1.5, -1.2, 0.5, -0.9])


def make_rng(seed) -> np.random.Generator:
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


def replication_seeds(seed: int, reps: int) -> list[np.random.SeedSequence]:
    """Independent child seed sequences; replication ``r`` always gets child ``r``."""
    return np.random.SeedSequence(seed).spawn(reps)


@dataclass(frozen=True)
class DgpConfig:
    """Data-generating process: network, covariates and structural parameters.

    Covariates are ``x1 ~ Uniform(x1_bounds)`` and ``x2 ~ Poisson(x2_rate)``.
    Each agent draws a friend count uniformly on ``degree_bounds`` (capped at
    ``n_s - 1``) and picks friends without replacement in its subnetwork.
    ``group_rule`` is ``"single"`` or ``"x1_threshold"`` (group 0 iff
    ``x1 <= group_threshold``).
    """

    S: int
    n_s: int
    theta: Theta
    x1_bounds: tuple = (0.0, 5.0)
    x2_rate: float = 2.0
    degree_bounds: tuple = (0, 10)
    group_rule: str = "single"
    group_threshold: float = 2.5
    seed: object = 0
    name: str = "custom"

    def __post_init__(self):
        lo, hi = self.degree_bounds
        if not 0 <= lo <= hi:
            raise ValueError("degree bounds must satisfy 0 <= lo <= hi")
        if lo > self.n_s - 1:
            raise ValueError("minimum degree exceeds n_s - 1")
        if self.group_rule not in ("single", "x1_threshold"):
            raise ValueError(f"unknown group rule {self.group_rule!r}")
        M_rule = 1 if self.group_rule == "single" else 2
        if self.theta.M != M_rule:
            raise ValueError(f"group rule {self.group_rule!r} needs M={M_rule}")
        if self.theta.n_beta != 5:
            raise ValueError("beta must hold intercept, x1, x2, bar x1, bar x2")

    @property
    def n(self) -> int:
        return self.S * self.n_s

    def to_dict(self) -> dict:
        return {"name": self.name, "S": self.S, "n_s": self.n_s, "theta": self.theta.to_dict(),
                "x1_bounds": list(self.x1_bounds), "x2_rate": self.x2_rate,
                "degree_bounds": list(self.degree_bounds), "group_rule": self.group_rule,
                "group_threshold": self.group_threshold,
                "seed": self.seed if isinstance(self.seed, (int, type(None))) else str(self.seed)}


def semiparametric_cuts(alpha: np.ndarray, R: int = 100) -> CutPointSpec:
    """Per-group cut points of the semiparametric design.

    The listed spacings correspond to a cost function; with own-group peer sum
    ``a_g`` the spacing is ``listed - 0.25 + a_g`` and the tail spacing is
    ``0.005 + a_g``. For a single group with ``alpha = 0.25`` this reproduces
    the listed values exactly.
    """
    a = np.asarray(alpha, dtype=float).sum(axis=1)
    spac = SEMIPARAMETRIC_SPACINGS[None, :] - 0.25 + a[:, None]
    tail = SEMIPARAMETRIC_TAIL - 0.25 + a
    return CutPointSpec.from_spacings(R=R, switch=13, spacings=spac, tail=tail)


def builtin_dgp(name: str, S: int = 8, n_s: int = 250, seed=0, R: int = 100) -> DgpConfig:
    """Return one of the four designs ``A``, ``B``, ``C``, ``D``."""
    name = str(name).upper()
    if name == "A":
        alpha = np.array([[0.25]])
        cuts = CutPointSpec.evenly_spaced(R, 0.55)
        rule = "single"
    elif name == "B":
        alpha = np.array([[0.25]])
        cuts = semiparametric_cuts(alpha, R)
        rule = "single"
    elif name == "C":
        alpha = np.array([[0.3, 0.15], [0.1, 0.15]])
        cuts = semiparametric_cuts(alpha, R)
        rule = "x1_threshold"
    elif name == "D":
        alpha = np.array([[0.4, -0.1], [0.2, 0.1]])
        cuts = semiparametric_cuts(alpha, R)
        rule = "x1_threshold"
    else:
        raise ValueError(f"unknown DGP {name!r}; expected one of A, B, C, D")
    theta = Theta(alpha=alpha, beta=DEFAULT_BETA.copy(), cuts=cuts)
    return DgpConfig(S=S, n_s=n_s, theta=theta, group_rule=rule, seed=seed, name=name)


@dataclass
class SimulatedData:
    net: GroupedNetwork
    design: DesignMatrix
    X: np.ndarray
    y: np.ndarray
    theta: Theta
    equilibrium: EquilibriumState
    contraction_ok: bool
    config: DgpConfig = field(repr=False)


def draw_network(rng: np.random.Generator, S: int, n_s: int, degree_bounds) -> np.ndarray:
    lo, hi = degree_bounds
    hi = min(hi, n_s - 1)
    src, dst = [], []
    for s in range(S):
        base = s * n_s
        deg = rng.integers(lo, hi + 1, size=n_s)
        for i in range(n_s):
            if deg[i] == 0:
                continue
            fr = rng.choice(n_s - 1, size=deg[i], replace=False)
            fr = fr + (fr >= i)  # skip self
            src.append(np.full(deg[i], base + i))
            dst.append(base + fr)
    if not src:
        return np.empty((0, 2), dtype=int)
    return np.column_stack([np.concatenate(src), np.concatenate(dst)])


def draw_covariates(rng: np.random.Generator, cfg: DgpConfig) -> np.ndarray:
    x1 = rng.uniform(cfg.x1_bounds[0], cfg.x1_bounds[1], size=cfg.n)
    x2 = rng.poisson(cfg.x2_rate, size=cfg.n).astype(float)
    return np.column_stack([x1, x2])


def assign_groups(cfg: DgpConfig, X: np.ndarray) -> np.ndarray:
    if cfg.group_rule == "single":
        return np.zeros(X.shape[0], dtype=int)
    return (X[:, 0] > cfg.group_threshold).astype(int)


def simulate_dataset(cfg: DgpConfig, rng: np.random.Generator | None = None,
                     tol: float = 1e-10, max_iter: int = 5000) -> SimulatedData:
    """Draw covariates and a network, solve the equilibrium and draw outcomes."""
    rng = make_rng(cfg.seed) if rng is None else rng
    rep = contraction_diagnostic(cfg.theta)
    if not rep.passed:
        warnings.warn(f"true parameters fail the contraction condition (margin {rep.margin:.4g})",
                      stacklevel=2)
    X = draw_covariates(rng, cfg)
    edges = draw_network(rng, cfg.S, cfg.n_s, cfg.degree_bounds)
    groups = assign_groups(cfg, X)
    subnet = np.repeat(np.arange(cfg.S), cfg.n_s)
    net = build_network(edges, groups, subnet, M=cfg.theta.M)
    design = build_design(net, X)
    eq = solve_equilibrium(cfg.theta, net, design, tol=tol, max_iter=max_iter)
    if not eq.converged:
        raise RuntimeError(f"equilibrium did not converge (residual {eq.residual:.3g} "
                           f"after {eq.iterations} iterations)")
    eps = rng.standard_normal(cfg.n)
    y = np.empty(cfg.n, dtype=int)
    for g in range(cfg.theta.M):
        mask = groups == g
        y[mask] = best_response(cfg.theta, g, eq.eta[mask], eps[mask])
    return SimulatedData(net=net, design=design, X=X, y=y, theta=cfg.theta, equilibrium=eq,
                         contraction_ok=rep.passed, config=cfg)


def with_seed(cfg: DgpConfig, seed) -> DgpConfig:
    return replace(cfg, seed=seed)


def write_dataset(sim: SimulatedData, out_dir) -> dict:
    """Write ``nodes.csv``, ``edges.csv`` and ``truth.json``; return their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"nodes": out / "nodes.csv", "edges": out / "edges.csv", "truth": out / "truth.json"}
    io.write_nodes(paths["nodes"], sim.net.subnet, sim.net.groups, sim.X, sim.y)
    io.write_edges(paths["edges"], sim.net.edges())
    io.write_json(paths["truth"], {
        "theta": sim.theta.to_dict(),
        "ye": sim.equilibrium.ye,
        "contraction_ok": sim.contraction_ok,
        "config": sim.config.to_dict(),
    })
    return {k: str(v) for k, v in paths.items()}
