"""Monte Carlo replication harness.

Replication ``r`` of a run with seed ``s`` uses child ``r`` of
``SeedSequence(s)``, so any single replication can be reproduced in
isolation and results do not depend on the worker count.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .effects import (EFFECT_TOL, EffectsError, delta_method_se, direct_marginal_effects,
                      fstar_at, peer_effect_matrix)
from .estimate import EstimationError, NplSettings, PeerData, npl_estimate, select_cost_switch
from .model import solve_equilibrium
from .simulate import builtin_dgp, make_rng, replication_seeds, simulate_dataset

LOG = logging.getLogger(__name__)

Z95 = 1.959963984540054


@dataclass
class Welford:
    """Streaming mean and variance."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def update(self, x: float) -> None:
        self.count += 1
        d = x - self.mean
        self.mean += d / self.count
        self.m2 += d * (x - self.mean)

    @property
    def var(self) -> float:
        return self.m2 / (self.count - 1) if self.count > 1 else float("nan")

    @property
    def sd(self) -> float:
        return math.sqrt(self.var) if self.count > 1 else float("nan")


@dataclass(frozen=True)
class McSpec:
    dgp: str = "A"
    S: int = 2
    n_s: int = 250
    reps: int = 100
    seed: int = 0
    R: int = 100
    estimators: tuple = ("quadratic", "semiparametric")
    switch_grid: tuple = tuple(range(1, 16))
    patience: int | None = None
    coverage: bool = False
    settings: NplSettings = field(default_factory=NplSettings)


def _pe_and_se(fit, data, with_se: bool):
    theta = fit.theta
    eq = solve_equilibrium(theta, data.net, data.design, u0=fit.u, tol=EFFECT_TOL, max_iter=5000)
    rep = direct_marginal_effects(theta, data, eq)
    fstar = fstar_at(theta, data, eq)
    x1 = float(theta.beta[data.design.own_column(0)] * fstar.mean())
    out = {"pe": rep.pe.ravel().tolist(), "peer_effect": rep.peer_effect, "x1": x1,
           "switch": theta.cuts.switch, "converged": fit.converged}
    if with_se and fit.vcov is not None:
        M = theta.M

        def fn(vec):
            th = theta.from_vector(vec)
            e = solve_equilibrium(th, data.net, data.design, u0=eq.ye, tol=EFFECT_TOL,
                                  max_iter=5000)
            pe, _ = peer_effect_matrix(th, data, fstar_at(th, data, e))
            return np.concatenate([pe.ravel(), [pe.sum()]])
        se = delta_method_se(fit, fn)
        out["pe_se"] = se[:M * M].tolist()
        out["peer_effect_se"] = float(se[-1])
    return out


def run_replication(spec: McSpec, rep: int, seed_seq=None) -> dict:
    seed_seq = replication_seeds(spec.seed, rep + 1)[rep] if seed_seq is None else seed_seq
    cfg = builtin_dgp(spec.dgp, spec.S, spec.n_s, seed=seed_seq, R=spec.R)
    sim = simulate_dataset(cfg, make_rng(seed_seq))
    data = PeerData(sim.net, sim.design, sim.y)
    truth_rep = direct_marginal_effects(sim.theta, data, sim.equilibrium)
    fstar = fstar_at(sim.theta, data, sim.equilibrium)
    row = {"rep": rep, "truth": {"pe": truth_rep.pe.ravel().tolist(),
                                 "peer_effect": truth_rep.peer_effect,
                                 "x1": float(sim.theta.beta[1] * fstar.mean())},
           "y_max": int(sim.y.max())}
    for est in spec.estimators:
        try:
            if est == "quadratic":
                fit = npl_estimate(data, spec.R, 1, spec.settings, variance=spec.coverage)
            elif est == "semiparametric":
                grid = [s for s in spec.switch_grid if s <= max(int(sim.y.max()), 1)]
                fit = select_cost_switch(data, spec.R, grid, spec.settings,
                                         patience=spec.patience, variance=spec.coverage).best
            else:
                raise ValueError(f"unknown estimator {est!r}")
            row[est] = _pe_and_se(fit, data, spec.coverage)
        except (EstimationError, EffectsError, FloatingPointError) as exc:
            LOG.warning("replication %d (%s) failed: %s", rep, est, exc)
            row[est] = {"converged": False, "error": str(exc)}
    if spec.coverage:
        for est in spec.estimators:
            r = row[est]
            if "peer_effect_se" in r:
                half = Z95 * r["peer_effect_se"]
                r["covered"] = bool(abs(r["peer_effect"] - row["truth"]["peer_effect"]) <= half)
    return row


def _run_one(args):
    spec, rep, seed_seq = args
    return run_replication(spec, rep, seed_seq)


def run_montecarlo(spec: McSpec, threads: int = 1, progress=None) -> list[dict]:
    seeds = replication_seeds(spec.seed, spec.reps)
    jobs = [(spec, r, seeds[r]) for r in range(spec.reps)]
    rows = []
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for row in pool.map(_run_one, jobs):
                rows.append(row)
                if progress:
                    progress(row)
    else:
        for job in jobs:
            row = _run_one(job)
            rows.append(row)
            if progress:
                progress(row)
    return rows


def summarize(rows: list[dict], estimators) -> list[dict]:
    """Mean/sd per estimator and quantity, plus the average replication-level truth."""
    table = []
    if not rows:
        return table
    M2 = len(rows[0]["truth"]["pe"])
    quantities = ["peer_effect", "x1"] + ([f"pe[{k}]" for k in range(M2)] if M2 > 1 else [])

    def get(d, q):
        if q.startswith("pe["):
            return d["pe"][int(q[3:-1])]
        return d[q]

    for q in quantities:
        truth = Welford()
        for r in rows:
            truth.update(get(r["truth"], q))
        for est in estimators:
            acc, cov = Welford(), Welford()
            failed = 0
            for r in rows:
                e = r.get(est, {})
                if not e.get("converged"):
                    failed += 1
                    continue
                acc.update(get(e, q))
                if q == "peer_effect" and "covered" in e:
                    cov.update(float(e["covered"]))
            table.append({"quantity": q, "estimator": est, "truth": truth.mean,
                          "mean": acc.mean, "sd": acc.sd, "reps": acc.count, "failed": failed,
                          "coverage": cov.mean if cov.count else float("nan")})
    return table


def write_table(path, table: list[dict]) -> None:
    cols = ["quantity", "estimator", "truth", "mean", "sd", "reps", "failed", "coverage"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in table:
            w.writerow({k: row[k] for k in cols})
