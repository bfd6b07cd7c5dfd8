"""Command-line interface: ``peerfx <command> [options]``.

Commands: simulate, estimate, effects, counterfactual, diagnose, montecarlo.
Exit status is 0 on success, 1 on input errors and 2 when an estimation or
equilibrium computation fails to converge. Set ``PEERFX_LOG`` (DEBUG, INFO,
WARNING, ...) to control logging.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, io
from .effects import compute_effects, counterfactual
from .estimate import EstimationError, FitResult, NplSettings, PeerData, npl_estimate, \
    select_cost_switch
from .model import Theta, best_response, solve_equilibrium
from .montecarlo import McSpec, run_montecarlo, summarize, write_table
from .network import NetworkError, build_design, build_network, identification_diagnostic
from .simulate import builtin_dgp, make_rng, simulate_dataset, write_dataset

LOG = logging.getLogger("peerfx")

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 1, 2


class NonConvergence(RuntimeError):
    pass


def parse_grid(text: str) -> list[int]:
    """``"1:15"`` (inclusive range) or ``"1,2,5"``."""
    text = text.strip()
    try:
        if ":" in text:
            lo, hi = (int(v) for v in text.split(":"))
            return list(range(lo, hi + 1))
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}; use '1:15' or '1,2,3'") from None


def parse_shares(text: str) -> list[float]:
    try:
        if ":" in text:
            lo, hi, steps = text.split(":")
            return np.linspace(float(lo), float(hi), int(steps)).tolist()
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"bad shares {text!r}; use '0,0.5,1' or 'lo:hi:count'") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="peerfx", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"peerfx {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, need_y=False):
        sp.add_argument("--config", type=Path, help="JSON file of option defaults (flags win)")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        if data:
            sp.add_argument("--nodes", type=Path, required=True,
                            help=f"node CSV ({io.NODE_SCHEMA})")
            sp.add_argument("--edges", type=Path, required=True,
                            help=f"edge CSV ({io.EDGE_SCHEMA})")
            sp.add_argument("--fixed-effects", action="store_true")

    def npl_opts(sp):
        sp.add_argument("--R", type=int, default=None, help="largest count (default: max y)")
        sp.add_argument("--switch-grid", type=parse_grid, default=[1],
                        help="cost switch values, e.g. '1:15' (BIC picks the best)")
        sp.add_argument("--tol-inner", type=float, default=1e-6)
        sp.add_argument("--tol-outer", type=float, default=1e-6)
        sp.add_argument("--max-outer", type=int, default=200)

    s = sub.add_parser("simulate", help="simulate a built-in design or outcomes on a given network")
    common(s, data=False)
    s.add_argument("--dgp", choices=list("ABCD"), help="built-in design")
    s.add_argument("--S", type=int, default=8)
    s.add_argument("--ns", type=int, default=250)
    s.add_argument("--R", type=int, default=100)
    s.add_argument("--nodes", type=Path, help="node CSV; y column optional")
    s.add_argument("--edges", type=Path)
    s.add_argument("--theta", type=Path, help="theta JSON (required with --nodes)")

    s = sub.add_parser("estimate", help="NPL estimation")
    common(s)
    npl_opts(s)

    s = sub.add_parser("effects", help="marginal effects with delta-method SEs")
    common(s)
    s.add_argument("--fit", type=Path, required=True, help="fit.json from 'estimate'")
    s.add_argument("--discrete", type=parse_grid, default=[],
                   help="1-based covariate indices treated as 0/1 dummies")

    s = sub.add_parser("counterfactual", help="vary the share of one group")
    common(s)
    s.add_argument("--fit", type=Path, required=True)
    s.add_argument("--shares", type=parse_shares, required=True)
    s.add_argument("--covariate", type=int, default=None,
                   help="1-based covariate index holding the group dummy")
    s.add_argument("--assignment", choices=["random", "identity"], default="random")
    s.add_argument("--no-se", action="store_true")

    s = sub.add_parser("diagnose", help="identification diagnostics")
    common(s)
    s.add_argument("--contextual", type=int, default=None,
                   help="1-based covariate index for the contextual-effect condition")

    s = sub.add_parser("montecarlo", help="Monte Carlo replications of a built-in design")
    common(s, data=False)
    s.add_argument("--dgp", choices=list("ABCD"), required=True)
    s.add_argument("--S", type=int, default=8)
    s.add_argument("--ns", type=int, default=250)
    s.add_argument("--reps", type=int, default=100)
    s.add_argument("--R", type=int, default=100)
    s.add_argument("--switch-grid", type=parse_grid, default=list(range(1, 16)))
    s.add_argument("--tol-inner", type=float, default=1e-6)
    s.add_argument("--tol-outer", type=float, default=1e-6)
    s.add_argument("--patience", type=int, default=None,
                   help="stop the switch scan after this many non-improving values")
    s.add_argument("--coverage", action="store_true", help="also compute CI coverage")
    return p


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            cfg = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(cfg) - known
        if unknown:
            parser.error(f"unknown config keys: {sorted(unknown)}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        args = parser.parse_args(argv)
    return args


# ----------------------------------------------------------------------------


def _load(args, require_y: bool):
    for path in (args.nodes, args.edges):
        if not path.exists():
            raise io.InputError(f"{path}: file not found")
    nodes = io.read_nodes(args.nodes, require_y=require_y)
    edges = io.read_edges(args.edges, nodes.index())
    net = build_network(edges, nodes.groups, nodes.subnet, M=len(nodes.group_labels))
    design = build_design(net, nodes.X, fixed_effects=getattr(args, "fixed_effects", False),
                          names=nodes.names)
    data = PeerData(net, design, nodes.y) if nodes.y is not None else None
    return nodes, net, design, data


def _mapping(nodes) -> dict:
    return {"node_ids": nodes.ids, "subnet_labels": nodes.subnet_labels,
            "group_labels": nodes.group_labels}


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(args, out: Path, extra=None) -> None:
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
              if k not in ("out", "config")}
    inputs = {k: {"path": str(v), "sha256": _file_digest(v)}
              for k, v in vars(args).items()
              if isinstance(v, Path) and k not in ("out", "config") and v.exists()}
    io.write_json(out / "manifest.json", {
        "command": args.command, "seed": args.seed, "config": config,
        "config_hash": io.config_hash(config), "version": __version__, "inputs": inputs,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(), **(extra or {})})


def cmd_simulate(args) -> int:
    if args.dgp:
        cfg = builtin_dgp(args.dgp, args.S, args.ns, seed=args.seed, R=args.R)
        sim = simulate_dataset(cfg)
        paths = write_dataset(sim, args.out)
    else:
        if not (args.nodes and args.edges and args.theta):
            raise io.InputError("simulate needs --dgp, or --nodes, --edges and --theta")
        theta = Theta.from_dict(io.read_json(args.theta))
        nodes, net, design, _ = _load(args, require_y=False)
        eq = solve_equilibrium(theta, net, design, tol=1e-10, max_iter=5000)
        if not eq.converged:
            raise NonConvergence("equilibrium did not converge")
        eps = make_rng(args.seed).standard_normal(net.n)
        y = np.empty(net.n, dtype=int)
        for g in range(theta.M):
            m = net.groups == g
            y[m] = best_response(theta, g, eq.eta[m], eps[m])
        args.out.mkdir(parents=True, exist_ok=True)
        io.write_nodes(args.out / "nodes.csv", net.subnet, net.groups, nodes.X, y, ids=nodes.ids)
        io.write_edges(args.out / "edges.csv", net.edges(), ids=nodes.ids)
        io.write_json(args.out / "truth.json", {"theta": theta.to_dict(), "ye": eq.ye,
                                                **_mapping(nodes)})
        paths = {"nodes": str(args.out / "nodes.csv")}
    print(f"wrote {paths['nodes']}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    nodes, net, design, data = _load(args, require_y=True)
    R = args.R if args.R is not None else max(int(data.y.max()), 1)
    settings = NplSettings(tol_inner=args.tol_inner, tol_outer=args.tol_outer,
                           max_outer=args.max_outer, seed=args.seed)
    grid = [s for s in args.switch_grid if s <= R]
    if len(grid) == 1:
        fit = npl_estimate(data, R, grid[0], settings)
        table = [{"switch": grid[0], "loglik": fit.loglik, "bic": fit.bic, "bic_S": fit.bic_S,
                  "n_params": fit.n_params, "converged": fit.converged}]
    else:
        sel = select_cost_switch(data, R, grid, settings)
        fit, table = sel.best, sel.table
    out = fit.to_dict()
    out.update({"switch_table": table, "design_columns": list(design.names),
                "n": data.n, "S": data.S, **_mapping(nodes)})
    io.write_json(args.out / "fit.json", out)
    print(f"loglik {fit.loglik:.6f}  bic {fit.bic:.3f}  switch {fit.theta.cuts.switch}  "
          f"converged {fit.converged}")
    for name, est, se in zip(fit.param_names, fit.theta.to_vector(),
                             fit.se if fit.se is not None else [np.nan] * fit.n_params):
        print(f"  {name:<22s} {est: .6f}  ({se:.6f})")
    if not fit.converged:
        raise NonConvergence("NPL did not converge")
    return EXIT_OK


def _load_fit(path: Path) -> FitResult:
    if not path.exists():
        raise io.InputError(f"{path}: file not found")
    return FitResult.from_dict(io.read_json(path))


def cmd_effects(args) -> int:
    nodes, net, design, data = _load(args, require_y=True)
    fit = _load_fit(args.fit)
    if fit.theta.n_beta != design.Z.shape[1]:
        raise io.InputError("fit.json does not match the design (check --fixed-effects)")
    discrete = [k - 1 for k in args.discrete]
    rep = compute_effects(fit, data, discrete=discrete)
    io.write_json(args.out / "effects.json", rep.to_dict())
    print(f"peer effect {rep.peer_effect:.6f}")
    for v in rep.variables:
        print(f"  {v.name:<10s} dme {v.dme: .5f} ({v.se_dme:.5f})  total {v.total: .5f}")
    return EXIT_OK


def cmd_counterfactual(args) -> int:
    nodes, net, design, data = _load(args, require_y=True)
    fit = _load_fit(args.fit)
    cov = args.covariate - 1 if args.covariate is not None else None
    points = counterfactual(fit, data, args.shares, seed=args.seed, assignment=args.assignment,
                            covariate=cov, se=not args.no_se)
    with open(args.out / "counterfactual.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["share", "mean", "se", "converged"])
        for p in points:
            w.writerow([repr(p.share), repr(p.mean), repr(p.se), int(p.converged)])
    for p in points:
        print(f"  share {p.share:.3f}  mean {p.mean:.5f}  se {p.se:.5f}")
    if not all(p.converged for p in points):
        raise NonConvergence("some counterfactual equilibria failed")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    nodes, net, design, _ = _load(args, require_y=False)
    ctx = args.contextual - 1 if args.contextual is not None else None
    rep = identification_diagnostic(net, design, contextual_index=ctx)
    io.write_json(args.out / "diagnostics.json", {**rep.to_dict(), **_mapping(nodes)})
    print(f"verdict {rep.verdict}: A {rep.condition_a}, B {rep.condition_b}, C {rep.condition_c}")
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    settings = NplSettings(tol_inner=args.tol_inner, tol_outer=args.tol_outer, seed=args.seed)
    spec = McSpec(dgp=args.dgp, S=args.S, n_s=args.ns, reps=args.reps, seed=args.seed, R=args.R,
                  switch_grid=tuple(args.switch_grid), patience=args.patience,
                  coverage=args.coverage, settings=settings)
    rows = run_montecarlo(spec, threads=args.threads)
    table = summarize(rows, spec.estimators)
    write_table(args.out / "mc_table.csv", table)
    io.write_json(args.out / "mc_replications.json", rows)
    for r in table:
        print(f"  {r['quantity']:<12s} {r['estimator']:<15s} truth {r['truth']:.3f} "
              f"mean {r['mean']:.3f} sd {r['sd']:.3f}")
    if any(r["failed"] for r in table):
        raise NonConvergence("some replications failed")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "effects": cmd_effects,
            "counterfactual": cmd_counterfactual, "diagnose": cmd_diagnose,
            "montecarlo": cmd_montecarlo}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("PEERFX_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = parse_args(argv)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](args)
    except (io.InputError, NetworkError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_INPUT
    except (NonConvergence, EstimationError) as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        code = EXIT_NONCONVERGED
    if args.out.exists():
        write_manifest(args, args.out, {"exit_status": code})
    return code


if __name__ == "__main__":
    sys.exit(main())
