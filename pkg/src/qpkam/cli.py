"""Command line front end.

Structured results go to stdout as JSON; tables go to CSV files (UTF-8,
header row).  Failures exit nonzero with a machine-readable error document
on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import langer, oscint
from .dynamics import compare_flows, evolve_direct, evolve_reduced, reduced_initial
from .errors import ConfigError, QpkamError
from .harness import (
    config_from_doc,
    csv_text,
    dumps_canonical,
    load_config,
    qpmatrix_from_doc,
    run,
    threshold,
    torus_from_doc,
)
from .kam import assemble_problem
from .potential import PotentialSpec
from .spectrum import Grid, solve_spectrum, weyl_fit


def _emit(doc: dict) -> None:
    sys.stdout.write(dumps_canonical(doc))


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    Path(path).write_text(csv_text(header, rows), encoding="utf-8")


def _add_potential_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ell", type=float, default=2.0)
    p.add_argument("--c0", type=float, default=1.0)
    p.add_argument("--R0", type=float, default=1.0)
    p.add_argument(
        "--w-coeffs",
        type=str,
        default="",
        help="comma-separated inverse-square correction coefficients",
    )
    p.add_argument("--L", type=float, required=True, help="half-width of the grid")
    p.add_argument("--n-pts", type=int, required=True, help="grid points (odd)")
    p.add_argument("-J", "--basis-size", type=int, required=True)


def _basis_from_args(args) -> tuple:
    w_coeffs = tuple(
        float(v) for v in args.w_coeffs.split(",") if v.strip()
    )
    spec = PotentialSpec(ell=args.ell, c0=args.c0, R0=args.R0, w_coeffs=w_coeffs)
    grid = Grid(L=args.L, n_pts=args.n_pts)
    return spec, grid, solve_spectrum(spec, grid, args.basis_size)


def _cmd_spectrum(args) -> int:
    spec, grid, basis = _basis_from_args(args)
    out = {"lambdas": [float(v) for v in basis.lambdas]}
    if args.basis_size >= 10:
        lo = max(1, min(args.basis_size // 3, args.basis_size - 9))
        out["weyl"] = weyl_fit(basis, (lo, args.basis_size))
    if args.csv:
        _write_csv(
            args.csv,
            ["j", "lambda"],
            [[j + 1, float(v)] for j, v in enumerate(basis.lambdas)],
        )
    _emit(out)
    return 0


def _cmd_langer_check(args) -> int:
    spec, grid, basis = _basis_from_args(args)
    n_values = list(range(args.n_min, args.n_max + 1, args.n_step))
    rows = langer.langer_scan(spec, basis, n_values)
    xs = np.array([r["X"] for r in rows])
    errs = np.array([r["e_sup"] for r in rows])
    slope, intercept = np.polyfit(np.log(xs), np.log(errs), 1)
    out = {
        "slope": float(slope),
        "expected_slope": -(spec.ell + 1.0),
        "X_range": [float(xs.min()), float(xs.max())],
        "n_values": n_values,
    }
    if args.csv:
        cols = ["n", "lam", "X", "e_sup", "e_l2", "Cn"]
        _write_csv(args.csv, cols, [[r[c] for c in cols] for r in rows])
    _emit(out)
    return 0


def _cmd_oscint_scan(args) -> int:
    spec, grid, basis = _basis_from_args(args)
    w = oscint.WeightSpec(mu=args.mu)
    n_values = list(range(args.n_min, args.n_max + 1, args.n_step))
    rows = oscint.scan(w, args.k, int(spec.ell), basis, n_values)
    out = {
        "k": args.k,
        "mu": args.mu,
        "rows": len(rows),
        "diag_fit": oscint.exponent_fit(w, args.k, basis, n_values),
    }
    if args.csv:
        cols = ["m", "n", "k", "re", "im", "abs", "bound"]
        _write_csv(args.csv, cols, [[r[c] for c in cols] for r in rows])
    _emit(out)
    return 0


def _cmd_kam_run(args) -> int:
    cfg = load_config(args.config)
    report = run(cfg)
    kam = report["stages"]["kam"]
    out = {
        "config": report["config"],
        "levels": kam["levels"],
        "lambdas_inf": kam["lambdas_inf"],
        "reducibility_residual": kam["reducibility_residual"],
        "U_deviation": kam["u_deviation"],
        "unitarity_defect": kam["unitarity_defect"],
        "stop_reason": kam["stop_reason"],
        "converged": kam["converged"],
        "flags": kam["flags"],
        "transform": kam["transform"],
    }
    if args.levels_csv:
        cols = ["l", "eps_l", "norm_Pl", "s_l", "min_divisor"]
        _write_csv(
            args.levels_csv,
            cols,
            [[lv.get(c) for c in cols] for lv in kam["levels"]],
        )
    if args.out:
        Path(args.out).write_text(dumps_canonical(out), encoding="utf-8")
    else:
        _emit(out)
    return 0


def _cmd_measure(args) -> int:
    cfg = load_config(args.config)
    if cfg.omega_grid is None:
        raise ConfigError("measure needs a config with omega_grid")
    report = run(cfg)
    rows = report["stages"]["measure"]["rows"]
    if args.csv:
        cols = [
            "gamma",
            "excluded_fraction",
            "first_family_fraction",
            "second_family_fraction",
        ]
        _write_csv(args.csv, cols, [[r[c] for c in cols] for r in rows])
    _emit({"rows": rows})
    return 0


def _cmd_dynamics(args) -> int:
    try:
        doc = json.loads(Path(args.from_run).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read run report: {e}", code="unreadable")
    except json.JSONDecodeError as e:
        raise ConfigError(f"run report is not valid JSON: {e}", code="bad-json")
    cfg = config_from_doc(doc["config"])
    basis = solve_spectrum(cfg.potential, cfg.grid, cfg.basis_size)
    a0, p0, _ = assemble_problem(
        basis,
        cfg.w,
        nu=cfg.nu,
        mu_exp=cfg.mu,
        eps=cfg.eps,
        N=cfg.truncation,
        K_phi=cfg.K_phi,
        ell=cfg.potential.ell,
    )
    u_total = qpmatrix_from_doc(doc["transform"]["u_total"])
    mus_inf = tuple(
        torus_from_doc(rows, cfg.n_freq, cfg.K_phi)
        for rows in doc["transform"]["mus_inf"]
    )
    lambdas_inf = tuple(float(v) for v in doc["lambdas_inf"])
    omega = cfg.omega
    T = args.T_periods * 2.0 * np.pi / abs(omega[0])
    x0 = np.zeros(cfg.truncation, dtype=complex)
    x0[args.x0_index - 1] = 1.0
    sob = tuple(float(s) for s in args.sobolev_s.split(",") if s.strip())
    direct = evolve_direct(
        a0, p0, 1.0, omega, x0, T, args.dt,
        samples=args.samples, sobolev=(0.0,) + sob,
    )
    y0 = reduced_initial(u_total, x0)
    reduced = evolve_reduced(
        lambdas_inf, mus_inf, omega, y0, T, direct.times, sobolev=(0.0,) + sob
    )
    comp = compare_flows(direct, reduced, u_total, omega)
    cols = ["t", "deviation"] + [f"norm_s{s:g}" for s in sob]
    rows = [
        [float(t), float(comp["deviation"][i])]
        + [float(direct.norms[s][i]) for s in sob]
        for i, t in enumerate(comp["times"])
    ]
    _write_csv(args.csv, cols, rows)
    _emit(
        {
            "T": T,
            "dt": direct.dt,
            "norm_drift": direct.norm_drift,
            "max_deviation": comp["max_deviation"],
            "sobolev_report": comp["sobolev_report"],
            "csv": args.csv,
        }
    )
    return 0


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    report = run(cfg)
    _emit(report)
    return 0


def _cmd_threshold(args) -> int:
    _emit(threshold(args.ell))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qpkam",
        description="reducibility experiments for quasi-periodically forced "
        "anharmonic oscillators",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("spectrum", help="eigenvalues and growth-law fit")
    _add_potential_args(p)
    p.add_argument("--csv", help="write (j, lambda) table here")
    p.set_defaults(func=_cmd_spectrum)

    p = sub.add_parser("langer-check", help="turning-point approximation errors")
    _add_potential_args(p)
    p.add_argument("--n-min", type=int, required=True)
    p.add_argument("--n-max", type=int, required=True)
    p.add_argument("--n-step", type=int, default=1)
    p.add_argument("--csv", help="write per-mode error table here")
    p.set_defaults(func=_cmd_langer_check)

    p = sub.add_parser("oscint-scan", help="weighted eigenfunction overlaps")
    _add_potential_args(p)
    p.add_argument("--mu", type=float, required=True, help="weight growth")
    p.add_argument("--k", type=float, required=True, help="oscillation frequency")
    p.add_argument("--n-min", type=int, required=True)
    p.add_argument("--n-max", type=int, required=True)
    p.add_argument("--n-step", type=int, default=1)
    p.add_argument("--csv", help="write overlap table here")
    p.set_defaults(func=_cmd_oscint_scan)

    p = sub.add_parser("kam-run", help="iterate one configured problem")
    p.add_argument("--config", required=True)
    p.add_argument("--levels-csv", help="write per-level table here")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.set_defaults(func=_cmd_kam_run)

    p = sub.add_parser("measure", help="excluded-frequency fractions")
    p.add_argument("--config", required=True, help="config with omega_grid")
    p.add_argument("--csv", help="write per-gamma fractions here")
    p.set_defaults(func=_cmd_measure)

    p = sub.add_parser("dynamics", help="direct vs reduced propagation")
    p.add_argument("--from-run", required=True, help="kam-run report JSON")
    p.add_argument("--x0-index", type=int, default=1)
    p.add_argument("--T-periods", type=float, default=1000.0)
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--samples", type=int, default=1500)
    p.add_argument("--sobolev-s", default="1,2")
    p.add_argument("--csv", default="dynamics.csv")
    p.set_defaults(func=_cmd_dynamics)

    p = sub.add_parser("run", help="full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("threshold", help="admissible weight-growth bound")
    p.add_argument("--ell", type=float, required=True)
    p.set_defaults(func=_cmd_threshold)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except QpkamError as e:
        sys.stderr.write(json.dumps(e.to_json(), sort_keys=True) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
