"""Experiment configuration, pipeline orchestration and report emission.

One JSON document describes an experiment end to end; ``run`` executes the
stages (potential checks, spectrum, coupling assembly, iteration or measure
scan, dynamics) and produces one JSON report plus CSV tables.  Everything
is deterministic: the same config yields byte-identical output, and random
seeds never enter the numerical path.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import compare_flows, evolve_direct, evolve_reduced, reduced_initial
from .errors import ConfigError, QpkamError, ValidationError
from .kam import (
    BETA_DEFAULT,
    IOTA_DEFAULT,
    IterationSchedule,
    TrigPerturbation,
    assemble_problem,
    reducibility_residual,
    resonance_filter,
    run_iteration,
)
from .matrices import QPMatrix, TorusFunction
from .potential import PotentialSpec, verify_assumptions
from .spectrum import Grid, SpectralBasis, solve_spectrum, weyl_fit

SCHEMA_VERSION = 1

BRANCH_SWITCH = 4.0 / 3.0


def threshold(ell: float) -> dict:
    """Admissible weight-growth bound as a function of the potential power.

    Two expressions compete: ell - 2/3 for small powers and
    (sqrt(4 ell^2 - 2 ell + 1) - 1)/2 beyond the switch at ell = 4/3.
    Returns both, the minimum, and which branch is active.
    """
    ell = float(ell)
    if ell <= 1.0:
        raise ValidationError(
            f"threshold needs ell > 1, got {ell}", code="ell-domain"
        )
    first = ell - 2.0 / 3.0
    second = (math.sqrt(4.0 * ell * ell - 2.0 * ell + 1.0) - 1.0) / 2.0
    branch = "first" if ell < BRANCH_SWITCH else "second"
    return {
        "value": min(first, second),
        "branch": branch,
        "first_branch": first,
        "second_branch": second,
    }


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs, loadable from a single JSON file."""

    potential: PotentialSpec
    grid: Grid
    basis_size: int
    truncation: int
    K_phi: int
    n_freq: int
    nu: float
    mu: float
    eps: float
    w: TrigPerturbation
    schedule: IterationSchedule
    omega: tuple | None = None
    omega_grid: dict | None = None
    dynamics: dict | None = None
    seed: int = 0
    output: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        gate = threshold(self.potential.ell)["value"]
        if not self.mu < gate:
            raise ConfigError(
                f"weight growth mu={self.mu} reaches the admissible bound "
                f"{gate:.6f} at ell={self.potential.ell}",
                code="mu-too-large",
                bound=gate,
            )
        if self.truncation > self.basis_size:
            raise ConfigError(
                f"truncation {self.truncation} exceeds basis size "
                f"{self.basis_size}",
                code="truncation-exceeds-basis",
            )
        if self.w.K_phi > self.K_phi:
            raise ConfigError(
                f"perturbation modes reach {self.w.K_phi}, algebra cutoff "
                f"is {self.K_phi}",
                code="cutoff-too-small",
            )
        if self.w.n_freq != self.n_freq:
            raise ConfigError(
                f"perturbation lives on a {self.w.n_freq}-torus, config "
                f"says {self.n_freq}",
                code="torus-mismatch",
            )
        if (self.omega is None) == (self.omega_grid is None):
            raise ConfigError(
                "exactly one of omega / omega_grid must be set",
                code="omega-ambiguous",
            )
        if self.omega is not None:
            object.__setattr__(
                self, "omega", tuple(float(v) for v in self.omega)
            )
            if len(self.omega) != self.n_freq:
                raise ConfigError(
                    f"omega has {len(self.omega)} components, n_freq is "
                    f"{self.n_freq}",
                    code="omega-shape",
                )
        if self.eps < 0.0:
            raise ConfigError("eps must be nonnegative", code="bad-eps")


def torus_to_doc(f: TorusFunction) -> list:
    rows = []
    for l in sorted(f.coeffs):
        c = f.coeffs[l]
        rows.append({"l": list(l), "re": float(c.real), "im": float(c.imag)})
    return rows


def torus_from_doc(rows, n_freq: int, K_phi: int) -> TorusFunction:
    coeffs = {
        tuple(int(v) for v in r["l"]): complex(r["re"], r.get("im", 0.0))
        for r in rows
    }
    return TorusFunction(n_freq, K_phi, coeffs)


def _harmonics_doc(table: dict) -> list:
    return [{"k": k, "modes": torus_to_doc(table[k])} for k in sorted(table)]


def _harmonics_from_doc(rows, n_freq: int, K_phi: int) -> dict:
    return {
        int(r["k"]): torus_from_doc(r["modes"], n_freq, K_phi)
        for r in rows
    }


def config_to_doc(cfg: ExperimentConfig) -> dict:
    sched = cfg.schedule
    doc = {
        "schema_version": SCHEMA_VERSION,
        "potential": {
            "ell": cfg.potential.ell,
            "c0": cfg.potential.c0,
            "R0": cfg.potential.R0,
            "w_coeffs": list(cfg.potential.w_coeffs),
        },
        "grid": {"L": cfg.grid.L, "n_pts": cfg.grid.n_pts},
        "basis_size": cfg.basis_size,
        "truncation": cfg.truncation,
        "K_phi": cfg.K_phi,
        "n_freq": cfg.n_freq,
        "perturbation": {
            "nu": cfg.nu,
            "mu": cfg.mu,
            "eps": cfg.eps,
            "K_phi": cfg.w.K_phi,
            "sins": _harmonics_doc(cfg.w.sins),
            "coss": _harmonics_doc(cfg.w.coss),
        },
        "schedule": {
            "eps0": sched.eps0,
            "s0": sched.s0,
            "gamma0": sched.gamma0,
            "K_base": sched.K_base,
            "tau": sched.tau,
            "a3_proxy": sched.a3_proxy,
            "l_max": sched.l_max,
            "stop_tol": sched.stop_tol,
            "beta": sched.beta,
            "iota": sched.iota,
        },
        "omega": list(cfg.omega) if cfg.omega is not None else None,
        "omega_grid": cfg.omega_grid,
        "dynamics": cfg.dynamics,
        "seed": cfg.seed,
        "output": cfg.output,
    }
    return doc


def config_from_doc(doc: dict) -> ExperimentConfig:
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"schema_version {version!r} not supported (expected "
            f"{SCHEMA_VERSION})",
            code="schema-version",
        )
    pot = doc["potential"]
    spec = PotentialSpec(
        ell=pot["ell"],
        c0=pot["c0"],
        R0=pot["R0"],
        w_coeffs=tuple(pot.get("w_coeffs", ())),
    )
    grid = Grid(L=doc["grid"]["L"], n_pts=doc["grid"]["n_pts"])
    pert = doc["perturbation"]
    n_freq = int(doc["n_freq"])
    w_k = int(pert.get("K_phi", doc["K_phi"]))
    w = TrigPerturbation(
        n_freq=n_freq,
        K_phi=w_k,
        sins=_harmonics_from_doc(pert.get("sins", []), n_freq, w_k),
        coss=_harmonics_from_doc(pert.get("coss", []), n_freq, w_k),
    )
    sd = doc["schedule"]
    schedule = IterationSchedule(
        eps0=sd["eps0"],
        s0=sd["s0"],
        gamma0=sd["gamma0"],
        K_base=int(sd.get("K_base", 1)),
        tau=sd.get("tau", 7.5),
        a3_proxy=sd.get("a3_proxy"),
        l_max=int(sd.get("l_max", 12)),
        stop_tol=sd.get("stop_tol", 1e-10),
        n_freq=n_freq,
        beta=sd.get("beta", BETA_DEFAULT),
        iota=sd.get("iota", IOTA_DEFAULT),
    )
    omega = doc.get("omega")
    return ExperimentConfig(
        potential=spec,
        grid=grid,
        basis_size=int(doc["basis_size"]),
        truncation=int(doc["truncation"]),
        K_phi=int(doc["K_phi"]),
        n_freq=n_freq,
        nu=float(pert["nu"]),
        mu=float(pert["mu"]),
        eps=float(pert["eps"]),
        w=w,
        schedule=schedule,
        omega=tuple(omega) if omega is not None else None,
        omega_grid=doc.get("omega_grid"),
        dynamics=doc.get("dynamics"),
        seed=int(doc.get("seed", 0)),
        output=doc.get("output", {}),
    )


def dumps_canonical(doc: dict) -> str:
    """The one JSON encoding used everywhere: sorted keys, two-space indent."""
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def serialize_config(cfg: ExperimentConfig) -> str:
    return dumps_canonical(config_to_doc(cfg))


def parse_config(text: str) -> ExperimentConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}", code="bad-json")
    return config_from_doc(doc)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}", code="unreadable")
    return parse_config(text)


def qpmatrix_to_doc(m: QPMatrix) -> dict:
    blocks = []
    for l in sorted(m.coeffs):
        b = m.coeffs[l]
        blocks.append(
            {
                "l": list(l),
                "re": [[float(v) for v in row] for row in b.real],
                "im": [[float(v) for v in row] for row in b.imag],
            }
        )
    return {"n_freq": m.n_freq, "K_phi": m.K_phi, "N": m.N, "blocks": blocks}


def qpmatrix_from_doc(doc: dict) -> QPMatrix:
    coeffs = {}
    for row in doc["blocks"]:
        coeffs[tuple(int(v) for v in row["l"])] = np.asarray(
            row["re"], dtype=float
        ) + 1j * np.asarray(row["im"], dtype=float)
    return QPMatrix(doc["n_freq"], doc["K_phi"], doc["N"], coeffs)


@contextmanager
def _stage(name: str):
    try:
        yield
    except QpkamError as e:
        e.detail.setdefault("stage", name)
        raise


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    return obj


def _basic_period(omega: tuple) -> float:
    return 2.0 * math.pi / abs(omega[0])


def run(cfg: ExperimentConfig, *, basis: SpectralBasis | None = None) -> dict:
    """Execute the configured pipeline and return the report document.

    Stage outputs accumulate under ``stages``; any stage failure is
    re-raised with the stage name attached to the error detail.  When the
    config names output paths, the report JSON and CSV tables are also
    written there.  A pre-built basis may be injected to share the
    eigensolve across runs; it must match the config's potential and grid.
    """
    report: dict = {
        "schema_version": SCHEMA_VERSION,
        "config": config_to_doc(cfg),
        "stages": {},
    }
    stages = report["stages"]
    tables: dict[str, tuple[list[str], list[list]]] = {}

    with _stage("potential"):
        xs = cfg.grid.x()
        shape = verify_assumptions(cfg.potential, xs[np.abs(xs) >= cfg.potential.R0])
        stages["potential"] = _jsonable(shape)

    with _stage("spectrum"):
        if basis is None:
            basis = solve_spectrum(cfg.potential, cfg.grid, cfg.basis_size)
        elif basis.lambdas.size < cfg.basis_size:
            raise ConfigError(
                f"injected basis has {basis.lambdas.size} modes, config "
                f"needs {cfg.basis_size}",
                code="basis-too-small",
            )
        spectrum_out = {"lambdas": basis.lambdas[: cfg.basis_size]}
        if cfg.basis_size >= 10:
            j_lo = max(1, min(cfg.basis_size // 3, cfg.basis_size - 9))
            spectrum_out["weyl"] = weyl_fit(basis, (j_lo, cfg.basis_size))
        stages["spectrum"] = _jsonable(spectrum_out)
        tables["spectrum"] = (
            ["j", "lambda"],
            [[j + 1, float(v)] for j, v in enumerate(basis.lambdas[: cfg.basis_size])],
        )

    with _stage("assembly"):
        a0, p0, asm = assemble_problem(
            basis,
            cfg.w,
            nu=cfg.nu,
            mu_exp=cfg.mu,
            eps=cfg.eps,
            N=cfg.truncation,
            K_phi=cfg.K_phi,
            ell=cfg.potential.ell,
        )
        stages["assembly"] = _jsonable(asm)

    if cfg.omega_grid is not None:
        with _stage("measure"):
            og = cfg.omega_grid
            grid_pts = np.linspace(
                float(og["start"]), float(og["stop"]), int(og["count"])
            )
            rows = []
            for gamma in og["gammas"]:
                out = resonance_filter(
                    a0.lambdas,
                    grid_pts,
                    gamma=float(gamma),
                    tau=float(og.get("tau", cfg.schedule.tau)),
                    K_max=int(og["K_max"]),
                    iota=float(og.get("iota", cfg.schedule.iota)),
                    n_freq=cfg.n_freq,
                )
                rows.append(
                    {
                        "gamma": float(gamma),
                        "excluded_fraction": out["excluded_fraction"],
                        "first_family_fraction": out["first_family_fraction"],
                        "second_family_fraction": out["second_family_fraction"],
                    }
                )
            stages["measure"] = _jsonable({"rows": rows})
            tables["measure"] = (
                [
                    "gamma",
                    "excluded_fraction",
                    "first_family_fraction",
                    "second_family_fraction",
                ],
                [
                    [
                        r["gamma"],
                        r["excluded_fraction"],
                        r["first_family_fraction"],
                        r["second_family_fraction"],
                    ]
                    for r in rows
                ],
            )
        return _finish(report, tables, cfg)

    with _stage("kam"):
        res = run_iteration(a0, p0, cfg.omega, cfg.schedule)
        residual = reducibility_residual(res, a0, p0, cfg.omega)
        stages["kam"] = _jsonable(
            {
                "levels": res.levels,
                "lambdas_inf": list(res.lambdas_inf),
                "reducibility_residual": residual,
                "u_deviation": res.u_deviation,
                "unitarity_defect": res.unitarity_defect,
                "stop_reason": res.stop_reason,
                "converged": res.converged,
                "flags": res.flags,
                "transform": {
                    "u_total": qpmatrix_to_doc(res.U_total),
                    "mus_inf": [torus_to_doc(m) for m in res.mus_inf],
                },
            }
        )
        level_cols = [
            "l",
            "eps_l",
            "norm_Pl",
            "s_l",
            "sigma_l",
            "gamma_l",
            "min_divisor",
            "contraction_quad",
            "contraction_43",
            "hermitian_defect",
        ]
        tables["levels"] = (
            level_cols,
            [[lv.get(c) for c in level_cols] for lv in res.levels],
        )

    if cfg.dynamics is not None:
        with _stage("dynamics"):
            dyn = cfg.dynamics
            T = float(dyn.get("T_periods", 1000)) * _basic_period(cfg.omega)
            x0 = np.zeros(cfg.truncation, dtype=complex)
            x0[int(dyn.get("x0_index", 1)) - 1] = 1.0
            sob = tuple(float(s) for s in dyn.get("sobolev", (1.0, 2.0)))
            direct = evolve_direct(
                a0,
                p0,
                1.0,
                cfg.omega,
                x0,
                T,
                dyn.get("dt"),
                samples=int(dyn.get("samples", 1500)),
                sobolev=(0.0,) + sob,
            )
            y0 = reduced_initial(res.U_total, x0)
            reduced = evolve_reduced(
                res.lambdas_inf,
                res.mus_inf,
                cfg.omega,
                y0,
                T,
                direct.times,
                sobolev=(0.0,) + sob,
            )
            comp = compare_flows(direct, reduced, res.U_total, cfg.omega)
            stages["dynamics"] = _jsonable(
                {
                    "T": T,
                    "dt": direct.dt,
                    "norm_drift": direct.norm_drift,
                    "max_deviation": comp["max_deviation"],
                    "sobolev_report": comp["sobolev_report"],
                }
            )
            cols = ["t", "deviation"] + [f"norm_s{s:g}" for s in sob]
            rows = []
            for i, t in enumerate(comp["times"]):
                rows.append(
                    [float(t), float(comp["deviation"][i])]
                    + [float(direct.norms[s][i]) for s in sob]
                )
            tables["dynamics"] = (cols, rows)

    return _finish(report, tables, cfg)


def csv_text(header: list[str], rows: list[list]) -> str:
    """Render one table: comma-separated, header row, repr-exact floats."""
    out = [",".join(header)]
    for row in rows:
        cells = []
        for v in row:
            if v is None:
                cells.append("")
            elif isinstance(v, float):
                cells.append(repr(v))
            else:
                cells.append(str(v))
        out.append(",".join(cells))
    return "\n".join(out) + "\n"


def _finish(report: dict, tables: dict, cfg: ExperimentConfig) -> dict:
    report["tables"] = {name: {"columns": t[0]} for name, t in tables.items()}
    out = cfg.output or {}
    tables_dir = out.get("tables_dir")
    if tables_dir is not None:
        d = Path(tables_dir)
        d.mkdir(parents=True, exist_ok=True)
        for name, (header, rows) in tables.items():
            (d / f"{name}.csv").write_text(
                csv_text(header, rows), encoding="utf-8"
            )
    path = out.get("report")
    if path is not None:
        Path(path).write_text(dumps_canonical(report), encoding="utf-8")
    return report
