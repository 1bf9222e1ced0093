"""Command-line interface.

Subcommands:
- run: full pipeline (simulate, extract, project, add noise, invert, report).
- simulate: forward simulation only, dumping the boundary time series.
- invert: reconstruct from a previously dumped boundary series CSV.
- truncation-study: mode-compression error of the simulated rate field.
- list-cases: show registered coefficient fields.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .forward_sim import SpaceGrid, dump_series_csv, load_series_csv
from .fourier_data import add_noise, dump_fourier_csv, project
from .inversion import ReconstructionConfig, reconstruct
from .time_basis import build_basis


def _add_common(parser):
    parser.add_argument("--case", default=None,
                        help="coefficient field name or alias (default bump)")
    parser.add_argument("--config", default=None,
                        help="flat key = value config file")
    parser.add_argument("--noise", type=float, default=None, metavar="DELTA",
                        help="relative noise level delta")
    parser.add_argument("--seed", type=int, default=None,
                        help="noise RNG seed")
    parser.add_argument("--out", default=None,
                        help="output directory for reports and field dumps")
    parser.add_argument("--iters", type=int, default=None, metavar="P",
                        help="corrector iteration cap p_max")


def _config_from_args(args, **extra) -> harness.RunConfig:
    mapping = {}
    if args.config:
        mapping = harness.parse_config_file(args.config)
    overrides = dict(
        case=args.case,
        delta=args.noise,
        seed=args.seed,
        out=args.out,
        p_max=args.iters,
    )
    overrides.update(extra)
    return harness.build_run_config(mapping, **overrides)


def _print_report(report: harness.RunReport):
    m = report.metrics
    print(f"case {report.case}: stopped={report.stopped} "
          f"after {report.n_correctors} corrector step(s)")
    print(f"  max c = {m['max_comp']:.4f} at {tuple(m['argmax_comp'])} "
          f"(true {m['max_true']:.4f}); rel max error "
          f"{m['rel_max_error'] * 100:.2f}%")
    if m["min_true"] < 0:
        print(f"  min c = {m['min_comp']:.4f} at {tuple(m['argmin_comp'])} "
              f"(true {m['min_true']:.4f})")
    for region in m["regions"]:
        print(f"  {region['label']}: {region['kind']} "
              f"{region['computed']:.4f} vs true {region['true_value']:.4f} "
              f"({region['rel_error'] * 100:.2f}%)")
    if report.conv_history:
        tail = ", ".join(f"{e:.2e}" for e in report.conv_history[-3:])
        print(f"  convergence history tail: {tail}")
    for path in report.files:
        print(f"  wrote {path}")


def cmd_run(args):
    cfg = _config_from_args(args)
    report = harness.run_pipeline(cfg)
    _print_report(report)
    return 0


def cmd_simulate(args):
    cfg = _config_from_args(args)
    series, extras = harness.simulate_case(cfg)
    out = Path(cfg.out) if cfg.out else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{extras['case'].name}_boundary_series.csv"
    dump_series_csv(series, path)
    print(f"simulated case {extras['case'].name} "
          f"({cfg.n_1}x{cfg.n_1} grid, {cfg.n_t} time nodes)")
    print(f"  wrote {path}")
    return 0


def cmd_invert(args):
    cfg = _config_from_args(args)
    series = load_series_csv(args.series)
    basis = build_basis(cfg.T, cfg.n_modes)
    data = project(series, basis)
    if cfg.delta != 0.0:
        data = add_noise(data, cfg.delta, cfg.seed)
    grid = SpaceGrid(R=series.grid.R, n=series.grid.n)
    rcfg = ReconstructionConfig(
        eps=cfg.eps, p_max=cfg.p_max, stop_tol=cfg.stop_tol, rtol=cfg.rtol,
        maxiter=cfg.maxiter, strategy=cfg.strategy)
    result = reconstruct(data, basis, grid, None, rcfg)
    print(f"inverted {args.series}: stopped={result.stopped} "
          f"after {result.n_correctors} corrector step(s)")
    print(f"  max c = {result.c.max():.4f}, min c = {result.c.min():.4f}")
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "c_comp.csv"
        harness.dump_field_csv(result.c, grid, path)
        print(f"  wrote {path}")
        if cfg.dump_data:
            path = out / "boundary_modes.csv"
            dump_fourier_csv(data, path)
            print(f"  wrote {path}")
    return 0


def cmd_truncation_study(args):
    cfg = _config_from_args(args)
    n_list = [int(tok) for tok in args.modes.split(",")] if args.modes \
        else (5, 10, 25)
    study = harness.truncation_study(cfg, n_list)
    print(f"truncation study, case {study['case']}, t = {cfg.T}:")
    for n in study["n_list"]:
        print(f"  N = {n:3d}: sup error {study['sup_errors'][n]:.6e}")
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "truncation_study.json"
        path.write_text(json.dumps(harness._jsonable(study), indent=2) + "\n")
        print(f"  wrote {path}")
    return 0


def cmd_list_cases(args):
    for name, aliases, summary in harness.list_cases():
        alias_str = ", ".join(aliases)
        print(f"{name} ({alias_str}): {summary}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="heatcoef",
        description="reconstruct a parabolic zeroth-order coefficient "
                    "from lateral Cauchy data")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="full pipeline with metrics report")
    _add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sim = sub.add_parser("simulate", help="forward simulation only")
    _add_common(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_inv = sub.add_parser("invert", help="invert a dumped boundary series")
    p_inv.add_argument("series", help="boundary series CSV from `simulate`")
    _add_common(p_inv)
    p_inv.set_defaults(func=cmd_invert)

    p_tr = sub.add_parser("truncation-study",
                          help="mode-compression error study")
    _add_common(p_tr)
    p_tr.add_argument("--modes", default=None,
                      help="comma-separated mode counts (default 5,10,25)")
    p_tr.set_defaults(func=cmd_truncation_study)

    p_ls = sub.add_parser("list-cases", help="show registered test cases")
    p_ls.set_defaults(func=cmd_list_cases)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except harness.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
