"""Command-line front end.

    trendex <subcommand> [--config FILE] [--seed U64] [--out DIR] [--threads K] ...

Subcommands: fundmat, validate, simulate, exclude, density, converge,
example.  Exit code 0 on pass, 2 when an acceptance-style check fails,
1 on error.  Model configs use the JSON format of trendex.config.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import chains, harness
from .config import load_model
from .density import SpatialGrid
from .errors import TrendexError
from .exclusion import exclude_chain
from .fundmat import TimeGrid, build_discrete, exp_bound_residual, solve_continuous
from .models import ProbeBox, chain_from_model, validate_conditions

PASS, FAIL, ERROR = 0, 2, 1


def _add_common(p: argparse.ArgumentParser, config_required: bool = True):
    p.add_argument("--config", required=config_required, help="model config JSON")
    p.add_argument("--seed", type=int, default=0, help="64-bit random seed")
    p.add_argument("--out", default="trendex-out", help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads")


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_fundmat(args) -> int:
    model = load_model(args.config)
    out = _outdir(args)
    grid = TimeGrid(args.n, model.horizon)
    cont = solve_continuous(model.b, grid, refinement=args.refinement)
    disc = build_discrete(model.b, grid)
    cont.to_csv(out / "phi_continuous.csv")
    disc.to_csv(out / "phi_discrete.csv")
    gap = float(np.max(np.abs(cont.phi - disc.phi)))
    print(f"wrote phi_continuous.csv, phi_discrete.csv (n={args.n}); "
          f"max |Phi - Phi_n| = {gap:.6g}; adjoint gap = {cont.adjoint_gap:.3g}")
    if args.exp_bound:
        lhs, rhs = exp_bound_residual(model.b(0.0), args.n)
        print(f"exp bound at n={args.n}: lhs={lhs:.6g} rhs={rhs:.6g} "
              f"({'ok' if lhs <= rhs else 'VIOLATED'})")
        if lhs > rhs:
            return FAIL
    return PASS


def _cmd_validate(args) -> int:
    model = load_model(args.config)
    chain = chain_from_model(model, args.n)
    half = args.probe_halfwidth
    probe = ProbeBox(model.x0 - half, model.x0 + half)
    report = validate_conditions(model, chain, probe)
    print(report.summary())
    return PASS if report.passed else FAIL


def _cmd_simulate(args) -> int:
    model = load_model(args.config)
    spec = chain_from_model(model, args.n)
    stream = chains.RandomStream(seed=args.seed)
    ens = chains.simulate_chain(spec, args.paths, stream)
    out = _outdir(args)
    if args.format == "csv":
        path = out / "ensemble.csv"
        chains.ensemble_to_csv(ens, path)
    else:
        path = out / "ensemble.tdxe"
        chains.ensemble_to_binary(ens, path)
    print(f"wrote {path} ({args.paths} paths, n={args.n})")
    return PASS


def _cmd_exclude(args) -> int:
    model = load_model(args.config)
    spec = chain_from_model(model, args.n)
    excluded = exclude_chain(spec)
    orig, exc = chains.simulate_coupled(spec, excluded, args.paths,
                                        chains.RandomStream(seed=args.seed))
    residual = chains.coupling_residual(orig, exc, excluded.phi_n)
    out = _outdir(args)
    excluded.phi_n.to_csv(out / "phi_n.csv")
    with open(out / "residual.csv", "w") as fh:
        fh.write("n,paths,max_relative_residual\n")
        fh.write(f"{args.n},{args.paths},%.17g\n" % residual)
    print(f"conjugation residual over {args.paths} paths: {residual:.3e} "
          f"(tolerance {args.tolerance:g})")
    return PASS if residual <= args.tolerance else FAIL


def _cmd_density(args) -> int:
    from .density import evolve_chain_density, transform_density

    model = load_model(args.config)
    if model.dim != 1:
        print("density evolution is 1-d only", file=sys.stderr)
        return ERROR
    config = harness.ConvergenceConfig(model=model, n_list=[args.n, 2 * args.n],
                                       target_points=args.points, threads=args.threads)
    excluded = {n: exclude_chain(chain_from_model(model, n)) for n in (args.n, 2 * args.n)}
    ex_grid, target = harness._plan_grids_1d(config, excluded)
    field_ex = evolve_chain_density(excluded[args.n].base, ex_grid)
    field = transform_density(field_ex, excluded[args.n].phi_n, 0.0, model.horizon,
                              direction="restore", target_grid=target)
    out = _outdir(args)
    field_ex.to_csv(out / "density_excluded.csv")
    field.to_csv(out / "density.csv")
    print(f"wrote density.csv ({args.points} points); mass = {field.integral():.6f}")
    return PASS


def _cmd_converge(args) -> int:
    model = load_model(args.config)
    n_list = [int(v) for v in args.n_list.split(",")]
    limit = None
    if args.limit == "vasicek":
        from .density import vasicek_density

        cfg = __import__("json").loads(Path(args.config).read_text())
        if cfg.get("builtin") != "vasicek":
            print("--limit vasicek needs a vasicek builtin config", file=sys.stderr)
            return ERROR
        limit = lambda y: vasicek_density(cfg["alpha"], cfg["beta"], cfg["sigma"],
                                          0.0, model.horizon, cfg["x0"], y)
    config = harness.ConvergenceConfig(
        model=model, n_list=n_list, s_prime=args.sprime, limit_density=limit,
        seed=args.seed, threads=args.threads, out_dir=str(_outdir(args)),
    )
    report = harness.run_convergence_study(config)
    for i, n in enumerate(report.n_list):
        print(f"n={n:5d}  forward={report.dist_forward[i]:.6e}  "
              f"pullback={report.dist_pullback[i]:.6e}")
    print(f"slope forward={report.slope_forward:.3f} pullback={report.slope_pullback:.3f}  "
          f"monotone={report.monotone_forward and report.monotone_pullback}")
    if report.pipeline == "kde":
        return PASS
    return PASS if report.passed() else FAIL


def _cmd_example(args) -> int:
    result = harness.run_example(args.name, out_dir=args.out, seed=args.seed)
    for k, v in sorted(result.metrics.items()):
        print(f"{k} = {v:.6g}")
    print(f"example {result.name}: {'pass' if result.passed else 'FAIL'}")
    return PASS if result.passed else FAIL


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trendex", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fundmat", help="build and export fundamental matrices")
    _add_common(p)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--refinement", type=int, default=100)
    p.add_argument("--exp-bound", action="store_true",
                   help="also check the constant-coefficient exponential bound")
    p.set_defaults(fn=_cmd_fundmat)

    p = sub.add_parser("validate", help="check the model/chain conditions")
    _add_common(p)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--probe-halfwidth", type=float, default=1.0)
    p.set_defaults(fn=_cmd_validate)

    p = sub.add_parser("simulate", help="simulate a chain ensemble")
    _add_common(p)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--paths", type=int, default=1000)
    p.add_argument("--format", choices=["csv", "binary"], default="csv")
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("exclude", help="trend exclusion + conjugation residual")
    _add_common(p)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--paths", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-11)
    p.set_defaults(fn=_cmd_exclude)

    p = sub.add_parser("density", help="evolve and transform the chain density")
    _add_common(p)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--points", type=int, default=2001)
    p.set_defaults(fn=_cmd_density)

    p = sub.add_parser("converge", help="run a density-convergence study")
    _add_common(p)
    p.add_argument("--n-list", default="8,16,32,64,128")
    p.add_argument("--sprime", type=int, default=2)
    p.add_argument("--limit", choices=["self", "vasicek"], default="self")
    p.set_defaults(fn=_cmd_converge)

    p = sub.add_parser("example", help="reproduce a worked example")
    _add_common(p, config_required=False)
    p.add_argument("name", choices=["vasicek", "heston", "koo-linton"])
    p.set_defaults(fn=_cmd_example)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except TrendexError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ERROR


if __name__ == "__main__":
    sys.exit(main())
