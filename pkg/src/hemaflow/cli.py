"""Command line interface: config ingestion, run orchestration, reports.

Three subcommands:

* ``run <config>``                solve and emit the solution table,
* ``experiment <kind> <config>``  run one verification experiment,
* ``check <config>``              validate the config and print the model
                                  constants (tau0, Lipschitz l, margin).

The configuration is a single strict JSON document: unknown keys are
rejected with their path so that a misspelled rate cannot silently fall
back to a default. Exit codes: 0 pass or skip, 2 configuration or
precondition failure, 3 solver non-convergence, 4 verdict failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments as xp
from .errors import (ConfigurationError, ConvergenceError, DomainError,
                     HemaflowError, PreconditionError)
from .kernels import Kernels
from .params import (ConstantReintroduction, CustomMaturityMap,
                     CustomVelocity, HillReintroduction, LinearMaturityMap,
                     ModelParams, PowerLawVelocity, RateFunctions,
                     SeparableKernel, SeparableUniformKernel)
from .solver import InitialHistory, Solver, WarmupData

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_VERDICT = 4

EXPERIMENT_KINDS = ("uniqueness", "extinction", "invariance", "positivity",
                    "resolvent", "picard-rate")


# ---------------------------------------------------------------------------
# strict config validation
# ---------------------------------------------------------------------------

def _reject_unknown(obj: dict, allowed, path: str) -> None:
    for key in obj:
        if key not in allowed:
            raise ConfigurationError(f"{path}.{key}: unknown key")


def _need(obj: dict, key: str, path: str):
    if key not in obj:
        raise ConfigurationError(f"{path}.{key}: required key missing")
    return obj[key]


def _number(val, path: str) -> float:
    if not isinstance(val, (int, float)) or isinstance(val, bool):
        raise ConfigurationError(f"{path}: expected a number, got {val!r}")
    return float(val)


def _poly(coeffs, path: str):
    if not (isinstance(coeffs, list) and coeffs and
            all(isinstance(c, (int, float)) for c in coeffs)):
        raise ConfigurationError(f"{path}: expected a list of coefficients")
    arr = np.asarray(coeffs, dtype=float)

    def f(m):
        m = np.asarray(m, dtype=float)
        out = np.zeros(m.shape)
        for c in arr[::-1]:
            out = out * m + c
        return out
    return f


def _scalar_field(spec, path: str):
    """A constant or polynomial-in-m field from config."""
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        return float(spec)
    if isinstance(spec, dict):
        _reject_unknown(spec, {"const", "poly"}, path)
        if "const" in spec and "poly" in spec:
            raise ConfigurationError(f"{path}: give either const or poly, not both")
        if "const" in spec:
            return _number(spec["const"], f"{path}.const")
        if "poly" in spec:
            return _poly(spec["poly"], f"{path}.poly")
    raise ConfigurationError(f"{path}: expected a number, {{const}}, or {{poly}}")


def _build_velocity(spec: dict, path: str):
    _reject_unknown(spec, {"alpha", "p", "table"}, path)
    if "table" in spec:
        tab = spec["table"]
        _reject_unknown(tab, {"m", "V"}, f"{path}.table")
        m = np.asarray(_need(tab, "m", f"{path}.table"), dtype=float)
        v = np.asarray(_need(tab, "V", f"{path}.table"), dtype=float)
        if m.size != v.size or m.size < 4:
            raise ConfigurationError(f"{path}.table: m and V must match, length >= 4")
        from scipy.interpolate import PchipInterpolator
        interp = PchipInterpolator(m, v)
        return CustomVelocity(V=interp, V_prime=interp.derivative(), name="table")
    alpha = _number(_need(spec, "alpha", path), f"{path}.alpha")
    p = _number(spec.get("p", 1.0), f"{path}.p")
    return PowerLawVelocity(alpha=alpha, p=p)


def _build_maturity(spec: dict, path: str):
    _reject_unknown(spec, {"c", "table"}, path)
    if "table" in spec:
        tab = spec["table"]
        _reject_unknown(tab, {"m", "g"}, f"{path}.table")
        m = np.asarray(_need(tab, "m", f"{path}.table"), dtype=float)
        gv = np.asarray(_need(tab, "g", f"{path}.table"), dtype=float)
        if m.size != gv.size or m.size < 4:
            raise ConfigurationError(f"{path}.table: m and g must match, length >= 4")
        from scipy.interpolate import PchipInterpolator
        fwd = PchipInterpolator(m, gv)
        inv = PchipInterpolator(gv, m)
        return CustomMaturityMap(g=fwd, g_inv=inv, name="table")
    return LinearMaturityMap(c=_number(_need(spec, "c", path), f"{path}.c"))


def _build_beta(spec: dict, path: str):
    _reject_unknown(spec, {"form", "beta0", "theta", "n", "lipschitz"}, path)
    form = _need(spec, "form", path)
    if form == "hill":
        return HillReintroduction(
            beta0=_scalar_field(spec.get("beta0", 1.0), f"{path}.beta0"),
            theta=_number(spec.get("theta", 1.0), f"{path}.theta"),
            n=_number(spec.get("n", 1.0), f"{path}.n"))
    if form == "constant":
        return ConstantReintroduction(
            beta0=_scalar_field(spec.get("beta0", 0.0), f"{path}.beta0"))
    if form == "custom":
        # callables are not expressible in JSON; reject with the contract's
        # reason so a missing Lipschitz declaration surfaces as config error
        raise ConfigurationError(
            f"{path}: custom reintroduction laws need library construction "
            "with a declared Lipschitz constant")
    raise ConfigurationError(f"{path}.form: unknown form {form!r}")


def _build_kernel(spec: dict, tau_lower: float, tau_upper: float, path: str):
    _reject_unknown(spec, {"form", "kappa", "density", "taper"}, path)
    form = spec.get("form", "uniform")
    kappa = _scalar_field(spec.get("kappa", 1.0), f"{path}.kappa")
    taper = _number(spec.get("taper", 0.02), f"{path}.taper")
    if form == "uniform":
        if "density" in spec:
            raise ConfigurationError(f"{path}.density: not allowed for uniform form")
        return SeparableUniformKernel(tau_lower=tau_lower, tau_upper=tau_upper,
                                      kappa=kappa, taper=taper)
    if form == "separable":
        dens = spec.get("density")
        if not isinstance(dens, dict) or "poly" not in dens:
            raise ConfigurationError(f"{path}.density: expected {{poly: [...]}}")
        rho = _poly(dens["poly"], f"{path}.density.poly")
        return SeparableKernel(tau_lower=tau_lower, tau_upper=tau_upper,
                               kappa=kappa, age_density=rho, taper=taper)
    raise ConfigurationError(f"{path}.form: unknown form {form!r}")


def build_params(cfg: dict) -> ModelParams:
    model = _need(cfg, "model", "config")
    _reject_unknown(model, {"velocity", "g", "delta", "gamma", "beta", "k",
                            "tau_lower", "tau_upper"}, "model")
    tau_lower = _number(_need(model, "tau_lower", "model"), "model.tau_lower")
    tau_upper = _number(_need(model, "tau_upper", "model"), "model.tau_upper")
    if not tau_lower < tau_upper:
        raise ConfigurationError(
            "model.tau_lower: must be strictly below model.tau_upper")
    return ModelParams(
        velocity=_build_velocity(_need(model, "velocity", "model"), "model.velocity"),
        maturity=_build_maturity(_need(model, "g", "model"), "model.g"),
        rates=RateFunctions(
            delta=_scalar_field(model.get("delta", 0.0), "model.delta"),
            gamma=_scalar_field(model.get("gamma", 0.0), "model.gamma")),
        reintroduction=_build_beta(_need(model, "beta", "model"), "model.beta"),
        division=_build_kernel(model.get("k", {}), tau_lower, tau_upper, "model.k"))


def build_grid(cfg: dict, solver_args: dict) -> None:
    grid = cfg.get("grid", {})
    _reject_unknown(grid, {"m_nodes", "dt_divisor"}, "grid")
    solver_args["m_nodes"] = int(grid.get("m_nodes", 512))
    solver_args["dt_divisor"] = int(grid.get("dt_divisor", 64))


# ---------------------------------------------------------------------------
# history construction
# ---------------------------------------------------------------------------

_HISTORY_KINDS = {"zero", "constant", "poly_m", "bump", "sum", "random", "warmup"}


def _history_profile(spec: dict, path: str):
    """Maturity profile callable from one history term."""
    kind = _need(spec, "kind", path)
    if kind == "zero":
        _reject_unknown(spec, {"kind"}, path)
        return lambda m: np.zeros(np.shape(m))
    if kind == "constant":
        _reject_unknown(spec, {"kind", "value"}, path)
        v = _number(_need(spec, "value", path), f"{path}.value")
        return lambda m: np.full(np.shape(m), v)
    if kind == "poly_m":
        _reject_unknown(spec, {"kind", "coeffs"}, path)
        return _poly(_need(spec, "coeffs", path), f"{path}.coeffs")
    if kind == "bump":
        _reject_unknown(spec, {"kind", "center", "width", "amplitude"}, path)
        return xp.smooth_bump(
            _number(_need(spec, "center", path), f"{path}.center"),
            _number(_need(spec, "width", path), f"{path}.width"),
            _number(_need(spec, "amplitude", path), f"{path}.amplitude"))
    if kind == "sum":
        _reject_unknown(spec, {"kind", "terms"}, path)
        terms = [_history_profile(t, f"{path}.terms[{i}]")
                 for i, t in enumerate(_need(spec, "terms", path))]
        return lambda m: sum(f(m) for f in terms)
    raise ConfigurationError(f"{path}.kind: unknown history kind {kind!r}")


def build_history(spec: dict, solver: Solver, seed: int, path: str = "run.history"):
    if not isinstance(spec, dict):
        raise ConfigurationError(f"{path}: expected an object")
    kind = _need(spec, "kind", path)
    if kind not in _HISTORY_KINDS:
        raise ConfigurationError(f"{path}.kind: unknown history kind {kind!r}")
    if kind == "random":
        _reject_unknown(spec, {"kind", "level"}, path)
        phi = xp.random_nonneg_history(seed, level=float(spec.get("level", 0.05)))
        return InitialHistory.from_callable(phi, solver.grid)
    if kind == "warmup":
        _reject_unknown(spec, {"kind", "Gamma", "N0"}, path)
        gamma0 = _scalar_field(spec.get("Gamma", 0.0), f"{path}.Gamma")
        n0 = _scalar_field(spec.get("N0", 0.0), f"{path}.N0")
        gamma_fn = gamma0 if callable(gamma0) else (lambda m: np.full(np.shape(m), gamma0))
        n0_fn = n0 if callable(n0) else (lambda m: np.full(np.shape(m), n0))
        data = WarmupData(Gamma=lambda m, a: gamma_fn(m) + 0.0 * np.asarray(a),
                          N0=n0_fn)
        return solver.warmup(data)
    allowed = {"kind", "value", "coeffs", "center", "width", "amplitude",
               "terms", "time_factor"}
    _reject_unknown(spec, allowed, path)
    tf = spec.get("time_factor")
    profile = _history_profile({k: v for k, v in spec.items() if k != "time_factor"},
                               path)
    if tf is None:
        phi = lambda t, m: profile(m) + 0.0 * np.asarray(t)
    else:
        _reject_unknown(tf, {"amplitude", "omega", "phase"}, f"{path}.time_factor")
        amp = _number(tf.get("amplitude", 0.0), f"{path}.time_factor.amplitude")
        omega = _number(tf.get("omega", 1.0), f"{path}.time_factor.omega")
        phase = _number(tf.get("phase", 0.0), f"{path}.time_factor.phase")
        phi = lambda t, m: profile(m) * (1.0 + amp * np.sin(omega * np.asarray(t) + phase))
    return InitialHistory.from_callable(phi, solver.grid)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigurationError("config root must be an object")
    _reject_unknown(cfg, {"model", "grid", "run", "experiment"}, "config")
    return cfg


def _make_solver(cfg: dict) -> Solver:
    params = build_params(cfg)
    solver_args: dict = {}
    build_grid(cfg, solver_args)
    return Solver(params, **solver_args)


def _run_section(cfg: dict) -> dict:
    run = cfg.get("run", {})
    _reject_unknown(run, {"horizon", "emit", "seed", "history", "warmup"}, "run")
    return run


def cmd_run(cfg: dict, out_dir: Path, seed_override=None) -> int:
    solver = _make_solver(cfg)
    run = _run_section(cfg)
    horizon = _number(run.get("horizon", 5.0 * solver.grid.tau_upper), "run.horizon")
    seed = int(run.get("seed", 0)) if seed_override is None else seed_override
    emit = run.get("emit", ["N"])
    if not isinstance(emit, list) or not set(emit) <= {"N", "P", "residuals"}:
        raise ConfigurationError("run.emit: expected a list drawn from [N, P, residuals]")
    hist_spec = run.get("history", {"kind": "zero"})
    history = build_history(hist_spec, solver, seed)

    t0 = time.perf_counter()
    field = solver.solve(history, horizon)
    if "P" in emit:
        wu = run.get("warmup", {})
        gamma0 = _scalar_field(wu.get("Gamma", 0.0), "run.warmup.Gamma") if wu else 0.0
        g_fn = gamma0 if callable(gamma0) else (lambda m: np.full(np.shape(m), gamma0))
        data = WarmupData(Gamma=lambda m, a: g_fn(m) + 0.0 * np.asarray(a),
                          N0=lambda m: history.values[0][np.searchsorted(
                              solver.grid.m_nodes, np.asarray(m)).clip(0, solver.grid.m_nodes.size - 1)])
        field = solver.proliferating(field, data)
    wall = time.perf_counter() - t0

    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "solution.csv"
    field.to_csv(csv_path)
    field.save(out_dir / "solution")
    if "residuals" in emit:
        stats = solver.residual_stats(field)
        field.metadata["residuals"] = stats
        with open(out_dir / "residuals.json", "w") as fh:
            json.dump(stats, fh, indent=2)
    meta = field.metadata
    print(f"wrote {csv_path}")
    print(f"  N in [{field.N.min():.6g}, {field.N.max():.6g}]  "
          f"slices {field.times.size} x nodes {field.m.size}")
    print(f"  windows {len(meta['windows'])}, max Picard iterations "
          f"{meta['max_iterations']}, wall {wall:.2f} s")
    return EXIT_OK


def _experiment_section(cfg: dict, kind: str) -> dict:
    exp = cfg.get("experiment")
    if exp is None:
        raise ConfigurationError("experiment: section required for this command")
    _reject_unknown(exp, {"kind", "b", "perturbation", "control", "n_runs",
                          "lambdas", "n_w", "horizon"}, "experiment")
    cfg_kind = exp.get("kind", kind)
    if cfg_kind != kind:
        raise ConfigurationError(
            f"experiment.kind: config says {cfg_kind!r} but the command asked "
            f"for {kind!r}")
    return exp


def cmd_experiment(kind: str, cfg: dict, out_dir: Path, threads: int,
                   seed_override=None) -> int:
    exp = _experiment_section(cfg, kind)
    out_dir.mkdir(parents=True, exist_ok=True)
    run = _run_section(cfg)
    seed = int(run.get("seed", 0)) if seed_override is None else seed_override

    if kind == "resolvent":
        solver = _make_solver(cfg)
        lambdas = exp.get("lambdas", [0.1, 1.0, 10.0])
        n_w = int(exp.get("n_w", 100))
        rng = np.random.default_rng(seed)
        reports = []
        verdict = True
        for i in range(n_w):
            c = rng.normal(size=4)
            k = rng.uniform(1.0, 6.0)
            w = (lambda c, k: lambda m: c[0] + c[1] * np.asarray(m)
                 + c[2] * np.asarray(m) ** 2 + c[3] * np.sin(k * np.asarray(m)))(c, k)
            for lam in lambdas:
                rep = xp.resolvent_check(solver.flow, w, float(lam))
                verdict = verdict and rep.verdict
                reports.append(rep.to_dict())
        payload = {"kind": "resolvent", "n_w": n_w, "lambdas": lambdas,
                   "verdict": bool(verdict), "checks": len(reports)}
        with open(out_dir / "report.json", "w") as fh:
            json.dump(payload, fh, indent=2)
        print(f"resolvent: {len(reports)} checks, "
              f"verdict {'PASS' if verdict else 'FAIL'}")
        return EXIT_OK if verdict else EXIT_VERDICT

    solver = _make_solver(cfg)
    hist_spec = run.get("history", {"kind": "zero"})
    horizon = exp.get("horizon")
    horizon = None if horizon is None else _number(horizon, "experiment.horizon")

    if kind == "picard-rate":
        history = build_history(hist_spec, solver, seed)
        T = horizon if horizon is not None else 5.0 * solver.grid.tau_upper
        field = solver.solve(history, T)
        report = xp.picard_rate_check(field)
    elif kind == "positivity":
        n_runs = int(exp.get("n_runs", 20))
        report = xp.exp_positivity(solver, n_runs=n_runs, seed=seed,
                                   horizon=horizon)
    else:
        b = _number(_need(exp, "b", "experiment"), "experiment.b")
        history = build_history(hist_spec, solver, seed)
        if kind == "uniqueness":
            pert_spec = _need(exp, "perturbation", "experiment")
            pert = _history_profile(pert_spec, "experiment.perturbation")
            phi2 = InitialHistory(times=history.times.copy(),
                                  values=history.values + pert(solver.grid.m_nodes)[None, :],
                                  upper=None if history.upper is None else history.upper.copy())
            report = xp.exp_uniqueness(solver, history, phi2, b,
                                       horizon=horizon, threads=threads)
            _write_profile(out_dir / "divergence.csv", report.times, report.divergence,
                           "t,sup_diff")
        elif kind == "extinction":
            control = None
            if "control" in exp:
                cspec = exp["control"]
                cprof = _history_profile(cspec, "experiment.control")
                control = InitialHistory(times=history.times.copy(),
                                         values=history.values + cprof(solver.grid.m_nodes)[None, :],
                                         upper=None)
            report = xp.exp_extinction(solver, history, b, control_phi=control,
                                       horizon=horizon, threads=threads)
            _write_profile(out_dir / "population.csv", report.times,
                           report.sup_profile, "t,sup_N")
        elif kind == "invariance":
            report = xp.exp_invariance(solver, history, b, horizon=horizon)
            if not report.skipped:
                _write_profile(out_dir / "ratio.csv", report.times,
                               report.sup_ratio, "t,sup_ratio")
        else:
            raise ConfigurationError(f"experiment.kind: unknown kind {kind!r}")

    xp.write_report(report, out_dir / "report.json", out_dir / "report.txt")
    print(report.to_text())
    if getattr(report, "skipped", False):
        return EXIT_OK
    return EXIT_OK if report.verdict else EXIT_VERDICT


def _write_profile(path, times, values, header):
    np.savetxt(path, np.column_stack([times, values]), fmt="%.17g",
               delimiter=",", header=header, comments="")


def cmd_check(cfg: dict) -> int:
    params = build_params(cfg)
    kern = Kernels(params)
    tau0 = kern.flow.tau0()
    margin = kern.invariance_margin()
    ok = params.tau_lower > tau0
    print(f"model digest      : {params.digest()}")
    print(f"tau0              : {tau0:.9g}")
    print(f"tau_lower > tau0  : {'yes' if ok else 'NO'} "
          f"(tau_lower = {params.tau_lower:g})")
    print(f"lipschitz l       : {margin.l:.9g}")
    print(f"decay floor I     : {margin.I:.9g}")
    print(f"zeta_tilde        : {margin.zeta_tilde:.9g}")
    print(f"invariance lhs    : {margin.lhs:.9g}")
    print(f"margin satisfied  : {'yes' if margin.satisfied else 'no'}"
          + (f"  ({margin.note})" if margin.note else ""))
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hemaflow",
        description="maturity-structured blood cell production model")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--threads", type=int, default=1,
                        help="parallel solves for multi-run experiments")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="solve and emit the solution table")
    p_run.add_argument("config")
    p_exp = sub.add_parser("experiment", help="run a verification experiment")
    p_exp.add_argument("kind", choices=EXPERIMENT_KINDS)
    p_exp.add_argument("config")
    p_chk = sub.add_parser("check", help="validate config and print constants")
    p_chk.add_argument("config")

    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config)
        if args.command == "run":
            return cmd_run(cfg, Path(args.out), seed_override=args.seed)
        if args.command == "experiment":
            return cmd_experiment(args.kind, cfg, Path(args.out), args.threads,
                                  seed_override=args.seed)
        return cmd_check(cfg)
    except (ConfigurationError, DomainError, PreconditionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except HemaflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
