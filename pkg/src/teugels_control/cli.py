"""Batch front-end: config parsing, subcommands, machine-readable artifacts.

Subcommands
    simulate   driving-noise construction: basis, increments, covariation
    solve      forward ensemble under a fixed control, with diagnostics
    optimize   full optimal-control pipeline on the interval example
    check      property suite (orthogonality, gradient, duality, rates)

Config files are TOML with a strict schema: unknown keys are rejected and
missing physical parameters are errors (defaults exist only for tolerances
and outputs).  All artifacts are CSV (RFC-4180) or JSON with stable key
order; floats are printed with 17 significant digits so reruns diff clean.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import cauchy as cx
from . import control as ctrl
from . import galerkin as gk
from . import levy as lv
from . import teugels as tg

__all__ = ["main", "load_config", "ConfigError"]

FLOAT_FMT = ".17g"


class ConfigError(ValueError):
    """Configuration failed validation; the message names the field."""


# ---------------------------------------------------------------------------
# config schema

_SCHEMA = {
    "levy": {"a": float, "sigma": float, "jump_family": str, "atoms": list,
             "intensity": float, "tail_rate": float},
    "teugels": {"k_max": int, "rank_tolerance": float},
    "grid": {"horizon": float, "steps": int},
    "space": {"kind": str, "n": int, "length": float},
    "coefficients": {"a": float, "b": float, "c": float, "eta": float,
                     "rho": float, "gammas": list, "xi_amplitude": float,
                     "kappa": float, "bound": float},
    "truncation": {"m": int},
    "ensemble": {"paths": int, "seed": int},
    "control": {"u0": str, "max_iters": int, "gradient_tol": float,
                "lower": float, "upper": float},
    "outputs": {"directory": str, "formats": list},
}

_REQUIRED = {
    "levy": ("a", "sigma", "jump_family"),
    "grid": ("horizon", "steps"),
    "space": ("n", "length"),
    "ensemble": ("paths", "seed"),
}

_DEFAULTS = {
    "teugels": {"k_max": 4, "rank_tolerance": tg.DEFAULT_RANK_TOLERANCE},
    "space": {"kind": "hat"},
    "control": {"u0": "zero", "max_iters": 500, "gradient_tol": 1e-7},
    "outputs": {"directory": "out", "formats": ["csv", "json"]},
    "coefficients": {"b": 0.0, "c": 0.0, "eta": 0.0, "rho": 0.0,
                     "gammas": [], "xi_amplitude": 0.0, "kappa": 0.1,
                     "bound": 10.0},
}


def load_config(path: str | Path) -> dict:
    """Parse and validate a TOML experiment config; strict on unknown keys."""
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: not valid TOML: {exc}") from exc
    cfg: dict = {}
    for section, body in raw.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"section [{section}] must be a table")
        out = dict(_DEFAULTS.get(section, {}))
        for key, value in body.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            want = _SCHEMA[section][key]
            if want is float and isinstance(value, int):
                value = float(value)
            if not isinstance(value, want) or isinstance(value, bool):
                raise ConfigError(
                    f"{section}.{key}: expected {want.__name__}, "
                    f"got {type(value).__name__}")
            out[key] = value
        cfg[section] = out
    for section, keys in _REQUIRED.items():
        if section not in cfg:
            raise ConfigError(f"missing required section [{section}]")
        for key in keys:
            if key not in cfg[section]:
                raise ConfigError(f"missing required field {section}.{key}")
    for section, defaults in _DEFAULTS.items():
        cfg.setdefault(section, dict(defaults))
    _validate_numeric(cfg)
    return cfg


def _validate_numeric(cfg: dict) -> None:
    def require(cond: bool, field: str, msg: str):
        if not cond:
            raise ConfigError(f"{field}: {msg}")

    require(cfg["levy"]["sigma"] >= 0, "levy.sigma", "must be >= 0")
    family = cfg["levy"]["jump_family"]
    require(family in ("none", "point_masses", "two_sided_exponential"),
            "levy.jump_family",
            "must be none | point_masses | two_sided_exponential")
    if family == "point_masses":
        require("atoms" in cfg["levy"], "levy.atoms",
                "required for jump_family = point_masses")
    if family == "two_sided_exponential":
        for key in ("intensity", "tail_rate"):
            require(key in cfg["levy"], f"levy.{key}",
                    "required for jump_family = two_sided_exponential")
    require(cfg["grid"]["horizon"] > 0, "grid.horizon", "must be > 0")
    require(cfg["grid"]["steps"] >= 1, "grid.steps", "must be >= 1")
    require(cfg["space"]["n"] >= 1, "space.n", "must be >= 1")
    require(cfg["space"]["length"] > 0, "space.length", "must be > 0")
    require(cfg["space"]["kind"] == "hat", "space.kind", "only 'hat' exists")
    require(1 <= cfg["teugels"]["k_max"] <= tg.K_MAX_HARD_CAP,
            "teugels.k_max", f"must be in 1..{tg.K_MAX_HARD_CAP}")
    require(cfg["ensemble"]["paths"] >= 1, "ensemble.paths", "must be >= 1")
    if "truncation" in cfg and "m" in cfg["truncation"]:
        require(cfg["truncation"]["m"] >= 0, "truncation.m", "must be >= 0")
    require(cfg["control"]["u0"] in ("zero", "random"), "control.u0",
            "must be zero | random")
    require(cfg["coefficients"]["kappa"] > 0, "coefficients.kappa",
            "must be > 0")


def build_triplet(cfg: dict) -> lv.LevyTriplet:
    sec = cfg["levy"]
    family = sec["jump_family"]
    if family == "none":
        nu = None
    elif family == "point_masses":
        nu = lv.FinitePointMasses(tuple(tuple(a) for a in sec["atoms"]))
    else:
        nu = lv.TwoSidedExponential(sec["intensity"], sec["tail_rate"])
    return lv.LevyTriplet(drift_a=sec["a"], gaussian_sigma=sec["sigma"],
                          jump_measure=nu)


def build_coefficients(cfg: dict) -> cx.CauchyCoefficients:
    sec = cfg["coefficients"]
    if "a" not in sec:
        raise ConfigError("missing required field coefficients.a")
    length = cfg["space"]["length"]
    amp = sec["xi_amplitude"]
    return cx.CauchyCoefficients(
        length=length, a=sec["a"], b=sec["b"], c=sec["c"], eta=sec["eta"],
        rho=sec["rho"], gammas=tuple(float(g) for g in sec["gammas"]),
        xi=lambda z: amp * np.sin(np.pi * np.asarray(z) / length),
        kappa=sec["kappa"], bound=sec["bound"])


# ---------------------------------------------------------------------------
# serialization helpers

def _fmt(x) -> str:
    return format(float(x), FLOAT_FMT)


def write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, (float, np.floating))
                             else v for v in row])


def write_json(path: Path, obj) -> None:
    def clean(o):
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        if isinstance(o, (bool, np.bool_)):
            return bool(o)
        if isinstance(o, (np.floating, float)):
            return float(format(float(o), FLOAT_FMT))
        if isinstance(o, (np.integer, int)):
            return int(o)
        if isinstance(o, np.ndarray):
            return clean(o.tolist())
        return o

    with open(path, "w") as fh:
        json.dump(clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# noise pipeline shared by the subcommands

def _noise_pipeline(cfg: dict):
    triplet = build_triplet(cfg)
    grid = lv.TimeGrid(cfg["grid"]["horizon"], cfg["grid"]["steps"])
    bundles = lv.simulate_bundle(triplet, grid, cfg["ensemble"]["paths"],
                                 cfg["ensemble"]["seed"])
    functional = tg.build_moment_functional(triplet, cfg["teugels"]["k_max"])
    basis = tg.orthonormalize(functional, cfg["teugels"]["rank_tolerance"])
    moments = [lv.nu_moment(triplet.jump_measure, k)
               for k in range(1, basis.dim + 1)]
    increments = tg.teugels_increments(basis, bundles, lv.mean_rate(triplet),
                                       moments)
    return triplet, grid, bundles, basis, increments


def cmd_simulate(cfg: dict, out: Path, quiet: bool) -> int:
    _, _, bundles, basis, increments = _noise_pipeline(cfg)
    write_csv(out / "paths.csv",
              ["path", "step", "dW", "dW_levy", "jump_sizes"],
              lv.bundle_to_rows(bundles))
    write_csv(out / "basis.csv",
              [f"c{k + 1}" for k in range(basis.c.shape[1])],
              [list(row) for row in basis.c])
    rows = ((p, n, *increments.dH[p, n, :])
            for p in range(increments.dH.shape[0])
            for n in range(increments.dH.shape[1]))
    write_csv(out / "increments.csv",
              ["path", "step"] + [f"dH{i + 1}" for i in range(basis.dim)],
              rows)
    cov = tg.realized_covariation(increments)
    report = cov.to_dict()
    report["max_orthogonality_deviation_se"] = cov.max_orthogonality_deviation()
    write_json(out / "covariation.json", report)
    ok = cov.max_orthogonality_deviation() < 4.0
    if not quiet:
        print(f"simulate: basis dim {basis.dim}, covariation max deviation "
              f"{cov.max_orthogonality_deviation():.2f} se "
              f"({'ok' if ok else 'FAIL'})")
    return 0 if ok else 1


def _build_example(cfg: dict):
    coeffs = build_coefficients(cfg)
    problem, spec, space = cx.build_problem(coeffs, cfg["space"]["n"],
                                            cfg["grid"]["horizon"])
    return coeffs, problem, spec, space


def _truncation(cfg: dict, basis_dim: int, problem) -> int:
    m = cfg.get("truncation", {}).get("m", basis_dim)
    m = min(m, basis_dim, len(problem.sigmas))
    problem.sigmas = problem.sigmas[:m]
    return m


def cmd_solve(cfg: dict, out: Path, quiet: bool) -> int:
    _, grid, bundles, basis, increments = _noise_pipeline(cfg)
    _, problem, spec, space = _build_example(cfg)
    m = _truncation(cfg, basis.dim, problem)
    noise = gk.driving_noise(bundles, increments, m)
    coercivity = gk.check_coercivity(problem, horizon=grid.horizon)
    u = np.zeros((grid.steps, space.n))
    traj = gk.solve_ensemble(problem, noise, u)
    rows = ((p, k, *traj.X[p, k, :])
            for p in range(traj.n_paths)
            for k in range(grid.steps + 1))
    write_csv(out / "trajectory.csv",
              ["path", "node"] + [f"x{i + 1}" for i in range(space.n)], rows)
    ito = gk.ito_energy_residual(traj, problem)
    apriori = gk.apriori_estimate_check(traj, problem)
    diag = {
        "coercivity_margin": coercivity.worst_margin,
        "coercivity_passed": bool(coercivity.passed),
        "ito_residual_max": float(np.max(ito)),
        "apriori_lhs": apriori.lhs,
        "apriori_rhs": apriori.rhs,
        "apriori_ratio": apriori.ratio,
        "truncation": m,
    }
    write_json(out / "diagnostics.json", diag)
    ok = coercivity.passed and np.all(np.isfinite(traj.X))
    if not quiet:
        print(f"solve: coercivity margin {coercivity.worst_margin:.3e}, "
              f"ito residual {np.max(ito):.3e} ({'ok' if ok else 'FAIL'})")
    return 0 if ok else 1


def cmd_optimize(cfg: dict, out: Path, quiet: bool) -> int:
    coeffs = build_coefficients(cfg)
    run_cfg = cx.RunConfig(
        coefficients=coeffs,
        triplet=build_triplet(cfg),
        horizon=cfg["grid"]["horizon"],
        steps=cfg["grid"]["steps"],
        space_dim=cfg["space"]["n"],
        k_max=cfg["teugels"]["k_max"],
        truncation=cfg.get("truncation", {}).get("m"),
        n_paths=cfg["ensemble"]["paths"],
        seed=cfg["ensemble"]["seed"],
        max_iters=cfg["control"]["max_iters"],
        gradient_tol=cfg["control"]["gradient_tol"],
        rank_tolerance=cfg["teugels"]["rank_tolerance"],
    )
    report = cx.run(run_cfg)
    write_json(out / "report.json", report.to_dict())
    write_csv(out / "control.csv",
              ["node"] + [f"u{i + 1}" for i in range(report.control.shape[1])],
              ((k, *report.control[k]) for k in range(report.control.shape[0])))
    write_csv(out / "history.csv", ["iter", "J"],
              ((i, J) for i, J in enumerate(report.cost_history)))
    ok = report.optimizer_status == "converged"
    if not quiet:
        print(f"optimize: status {report.optimizer_status}, "
              f"J* = {report.optimal_cost:.6g}, "
              f"|G|/|G0| = {report.final_gradient_norm / max(report.initial_gradient_norm, 1e-300):.2e}, "
              f"stationarity residual {report.stationarity_residual:.3f}")
    return 0 if ok else 1


def cmd_check(cfg: dict, out: Path, quiet: bool) -> int:
    rng = np.random.default_rng(cfg["ensemble"]["seed"])
    _, grid, bundles, basis, increments = _noise_pipeline(cfg)
    _, problem, spec, space = _build_example(cfg)
    m = _truncation(cfg, basis.dim, problem)
    noise = gk.driving_noise(bundles, increments, m)
    results = {}

    cov = tg.realized_covariation(increments)
    results["orthogonality_4se"] = cov.max_orthogonality_deviation() < 4.0

    coercivity = gk.check_coercivity(problem, horizon=grid.horizon)
    results["coercivity"] = bool(coercivity.passed)

    u = ctrl.ControlGrid(values=np.zeros((grid.steps, space.n)),
                         gram_U=space.gram_H, dt=grid.dt)
    traj = gk.solve_ensemble(problem, noise, u.values)
    adj = ctrl.pathwise_adjoint(problem, traj, u.values, spec,
                                gram_U=space.gram_H)
    # gradient vs central finite differences at random coordinates
    worst = 0.0
    for _ in range(5):
        k = int(rng.integers(grid.steps))
        i = int(rng.integers(space.n))
        eps = 1e-5
        up = u.values.copy(); up[k, i] += eps
        um = u.values.copy(); um[k, i] -= eps
        Jp = ctrl.cost(gk.solve_ensemble(problem, noise, up), up, spec)
        Jm = ctrl.cost(gk.solve_ensemble(problem, noise, um), um, spec)
        fd = (Jp - Jm) / (2.0 * eps)
        exact = float((space.gram_H @ adj.gradient[k])[i]) * grid.dt
        worst = max(worst, abs(fd - exact) / max(abs(fd), abs(exact), 1e-12))
    results["gradient_vs_fd_1e-6"] = worst <= 1e-6

    worst_dual = 0.0
    for _ in range(3):
        direction = rng.standard_normal(u.values.shape)
        res = ctrl.duality_check(problem, traj, u.values, direction, spec, adj)
        worst_dual = max(worst_dual, res["relative"])
    results["duality_1e-10"] = worst_dual <= 1e-10

    # first-order variation rates over shrinking perturbation sizes
    direction = rng.standard_normal(u.values.shape)
    Y = ctrl.variation_solve(problem, traj, u.values, direction)
    eps_list = [1e-1, 1e-2, 1e-3]
    first, second = [], []
    for eps in eps_list:
        traj_eps = gk.solve_ensemble(problem, noise, u.values + eps * direction)
        diff = traj_eps.X - traj.X
        first.append(np.sqrt(space.norm_h_sq(diff).max(axis=1).mean()))
        rem = diff - eps * Y.X
        second.append(np.sqrt(space.norm_h_sq(rem).max(axis=1).mean()))
    le = np.log(eps_list)
    slope1 = np.polyfit(le, np.log(np.maximum(first, 1e-300)), 1)[0]
    results["variation_rate_first_order"] = bool(slope1 >= 0.95)
    results["variation_remainder_small"] = bool(
        max(second) <= 1e-8 * max(first))

    write_json(out / "checks.json",
               {"results": results, "gradient_rel_err": worst,
                "duality_rel_err": worst_dual,
                "covariation_max_se": cov.max_orthogonality_deviation()})
    ok = all(results.values())
    if not quiet:
        for name, passed in sorted(results.items()):
            print(f"check {name}: {'pass' if passed else 'FAIL'}")
    return 0 if ok else 1


COMMANDS = {"simulate": cmd_simulate, "solve": cmd_solve,
            "optimize": cmd_optimize, "check": cmd_check}


def main(argv: list | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="teugels-control",
        description="Simulation and optimal control of evolution equations "
                    "driven by Brownian and Teugels-martingale noise.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML experiment config")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--paths", type=int, default=None,
                       help="ensemble-size override")
        p.add_argument("--quiet", action="store_true")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg["ensemble"]["seed"] = args.seed
    if args.paths is not None:
        cfg["ensemble"]["paths"] = args.paths
    out = Path(args.out if args.out is not None
               else cfg["outputs"]["directory"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        return COMMANDS[args.command](cfg, out, args.quiet)
    except (ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
