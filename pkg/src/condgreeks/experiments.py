"""Experiment drivers behind the CLI subcommands.

Each driver takes a resolved RunConfig and an output directory, writes one
CSV with a fixed header plus ``<command>.manifest.json``, and returns a
summary dict. Nothing time-dependent goes into the files, so feeding a
manifest back as the config reproduces the CSV byte for byte.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from . import __version__
from .black_scholes import BsConfig, bs_functionals, bs_model, bs_oracle_price, bs_oracle_vega
from .conditional import estimate_L, kernel_baseline_L
from .config import RunConfig
from .errors import ConfigError, IllConditionedError
from .greeks import calibration_objective, compare_methods, conditional_greek, sgd_minimize
from .sde import build_grid
from .weak_derivative import BranchLaw, hj_property_suite, variance_vs_horizon

HEADERS = {
    "price": ["estimator", "N", "estimate", "stderr", "ci_lo", "ci_hi", "oracle", "abs_err"],
    "convergence": ["estimator", "N", "rep", "estimate", "abs_err"],
    "variance-scaling": ["estimator", "T", "M", "N", "var", "var_ci_lo", "var_ci_hi", "mean"],
    "greek": ["method", "N", "L", "L_stderr", "dL", "dL_stderr", "dL_ci_lo", "dL_ci_hi",
              "oracle_vega", "abs_err", "dE1", "dE1_stderr", "dE2", "dE2_stderr"],
    "sgd": ["iter", "theta", "L_hat", "dL_hat", "dL_stderr"],
    "hj-check": ["property", "value", "tolerance", "passed", "detail"],
}

CSV_NAMES = {
    "price": "price.csv",
    "convergence": "convergence.csv",
    "variance-scaling": "variance.csv",
    "greek": "greek.csv",
    "sgd": "sgd_trace.csv",
    "hj-check": "hj_check.csv",
}


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"row has {len(row)} fields, header has {len(header)}")
            w.writerow([_fmt(v) for v in row])


def write_manifest(out: Path, command: str, cfg: RunConfig, csv_name: str) -> Path:
    path = out / f"{command}.manifest.json"
    body = {
        "command": command,
        "version": __version__,
        "master_seed": cfg.mc.master_seed,
        "shards": cfg.mc.shards,
        "csv": csv_name,
        "config": cfg.to_dict(),
    }
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def _finish(command: str, cfg: RunConfig, out: Path, rows) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / CSV_NAMES[command]
    write_csv(path, HEADERS[command], rows)
    write_manifest(out, command, cfg, CSV_NAMES[command])
    return path


def bs_config(cfg: RunConfig, T: float | None = None, M: int | None = None) -> BsConfig:
    b = cfg.bs
    return BsConfig(S0=b.S0, r=b.r, theta=b.theta, T=cfg.grid.T if T is None else T, K=b.K, s=b.s,
                    M=cfg.grid.M if M is None else M)


def _bandwidth(cfg: RunConfig):
    bw = cfg.estimator.bandwidth
    return None if bw == "auto" else float(bw)


def loglog_slope(x, y) -> float:
    x, y = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def run_price(cfg: RunConfig, out: Path) -> dict:
    bs = bs_config(cfg)
    model, grid = bs_model(bs), bs.grid()
    F = bs_functionals(bs, grid)
    mc = cfg.mc
    oracle = bs_oracle_price(bs)
    est = estimate_L(model, grid, F.problem, mc.N, mc.master_seed, (0,), mc.block_size, mc.shards)
    rows = [_price_row("malliavin", est, oracle)]
    if cfg.estimator.method == "kernel":
        kb = kernel_baseline_L(model, grid, F.ell, F.g, mc.N, _bandwidth(cfg), mc.master_seed, (0,),
                               mc.block_size, mc.shards)
        rows.append(_price_row("kernel", kb, oracle))
    path = _finish("price", cfg, out, rows)
    return {"csv": str(path), "oracle": oracle,
            "rows": [dict(zip(HEADERS["price"], r)) for r in rows]}


def _price_row(name, est, oracle):
    lo, hi = est.ci95
    return [name, est.n, est.value, est.stderr, lo, hi, oracle, abs(est.value - oracle)]


def run_convergence(cfg: RunConfig, out: Path) -> dict:
    """Absolute error against the oracle for every (N, rep).

    The denominator guard is off here: small-N replications are part of the
    error distribution being measured.
    """
    bs = bs_config(cfg)
    model, grid = bs_model(bs), bs.grid()
    F = bs_functionals(bs, grid)
    mc, conv = cfg.mc, cfg.convergence
    oracle = bs_oracle_price(bs)
    methods = ["malliavin"] + (["kernel"] if conv.kernel or cfg.estimator.method == "kernel" else [])
    rows = []
    errors = {m: {} for m in methods}
    for i, N in enumerate(conv.N_list):
        for rep in range(conv.reps):
            ns = (1, i, rep)
            for m in methods:
                if m == "malliavin":
                    est = estimate_L(model, grid, F.problem, N, mc.master_seed, ns, mc.block_size, mc.shards,
                                     guard=False)
                else:
                    est = kernel_baseline_L(model, grid, F.ell, F.g, N, _bandwidth(cfg), mc.master_seed, ns,
                                            mc.block_size, mc.shards)
                err = abs(est.value - oracle)
                rows.append([m, N, rep, est.value, err])
                errors[m].setdefault(N, []).append(err)
    path = _finish("convergence", cfg, out, rows)
    summary = {"csv": str(path), "oracle": oracle, "methods": {}}
    for m in methods:
        Ns = sorted(errors[m])
        rmse = [math.sqrt(float(np.mean(np.square(errors[m][N])))) for N in Ns]
        entry = {"N": Ns, "rmse": rmse}
        if len(Ns) >= 2:
            entry["slope"] = loglog_slope(Ns, rmse)
        summary["methods"][m] = entry
    return summary


def bs_terminal_family(cfg: RunConfig):
    """(model, grid, C = X_M) for horizon T at the configured step size."""
    dt = cfg.variance.dt

    def make(T: float):
        M = int(round(T / dt))
        if M < 2 or abs(M * dt - T) > 1e-9 * T:
            raise ConfigError(f"variance.T_list entry {T} is not a multiple (>= 2) of variance.dt={dt}")
        bs = bs_config(cfg, T=T, M=M)
        return bs_model(bs), build_grid(T, M), lambda model, path: path.states[..., -1]

    return make


def run_variance_scaling(cfg: RunConfig, out: Path) -> dict:
    var, mc = cfg.variance, cfg.mc
    table = variance_vs_horizon(bs_terminal_family(cfg), var.T_list, var.N, mc.master_seed, var.estimators,
                                cfg.gradient.branch_law, var.bootstrap, mc.block_size, mc.shards)
    rows = [[r.estimator, r.T, r.M, r.N, r.var, r.var_ci_lo, r.var_ci_hi, r.mean] for r in table]
    path = _finish("variance-scaling", cfg, out, rows)
    summary = {"csv": str(path), "theta": cfg.bs.theta, "exact_mean": {}, "estimators": {}}
    for name in var.estimators:
        sub = [r for r in table if r.estimator == name]
        entry = {"T": [r.T for r in sub], "var": [r.var for r in sub], "mean": [r.mean for r in sub]}
        if len(sub) >= 2:
            entry["slope"] = loglog_slope(entry["T"], entry["var"])
            entry["ratio_last_first"] = sub[-1].var / sub[0].var
        summary["estimators"][name] = entry
    # d/dtheta E[X_T] = -theta T for the log-price
    summary["exact_mean"] = {str(T): -cfg.bs.theta * T for T in var.T_list}
    return summary


def _greek_row(res, oracle):
    lo, hi = res.dL_ci95
    return [res.method, res.n, res.L, res.L_stderr, res.dL, res.dL_stderr, lo, hi, oracle,
            abs(res.dL - oracle), res.dE1.mean, res.dE1.stderr, res.dE2.mean, res.dE2.stderr]


def run_greek(cfg: RunConfig, out: Path) -> dict:
    bs = bs_config(cfg)
    model, grid = bs_model(bs), bs.grid()
    F = bs_functionals(bs, grid)
    mc = cfg.mc
    law = BranchLaw.named(cfg.gradient.branch_law, grid.M)
    oracle = bs_oracle_vega(bs)
    args = (model, grid, F.problem, mc.N)
    rest = dict(master_seed=mc.master_seed, branch_law=law, namespace=(2,), block_size=mc.block_size,
                workers=mc.shards)
    cmp = None
    if cfg.greek.compare:
        cmp = compare_methods(*args, **rest)
        results = {"wd": cmp.wd, "score": cmp.score}
        order = [cfg.gradient.method] + [m for m in ("wd", "score") if m != cfg.gradient.method]
    else:
        results = {cfg.gradient.method: conditional_greek(*args, cfg.gradient.method, **rest)}
        order = [cfg.gradient.method]
    rows = [_greek_row(results[m], oracle) for m in order]
    path = _finish("greek", cfg, out, rows)
    main = results[order[0]]
    tol = max(0.05 * abs(oracle), 3.0 * main.dL_half_width)
    summary = {"csv": str(path), "method": order[0], "oracle_vega": oracle, "dL": main.dL,
               "dL_stderr": main.dL_stderr, "tolerance": tol, "within_tolerance": bool(abs(main.dL - oracle) <= tol)}
    if cmp is not None:
        summary.update(method_gap=cmp.gap, method_gap_stderr=cmp.gap_stderr, methods_agree=bool(cmp.agree()))
    return summary


def run_sgd(cfg: RunConfig, out: Path) -> dict:
    sg, mc = cfg.sgd, cfg.mc
    base = bs_config(cfg)
    grid = base.grid()
    target = bs_oracle_price(BsConfig(base.S0, base.r, sg.theta_star, base.T, base.K, base.s, base.M))
    F = bs_functionals(base, grid)

    def make_model(theta):
        return bs_model(BsConfig(base.S0, base.r, theta, base.T, base.K, base.s, base.M))

    objective = calibration_objective(make_model, grid, lambda theta: F.problem, target, cfg.gradient.method,
                                      mc.master_seed, BranchLaw.named(cfg.gradient.branch_law, grid.M),
                                      mc.block_size, mc.shards)
    try:
        trace = sgd_minimize(objective, sg.theta0, sg.step, sg.iters, sg.N, (sg.box_lo, sg.box_hi), sg.decreasing)
    except IllConditionedError as exc:
        # keep the partial trace on disk before giving up
        partial = exc.diagnostics.get("trace")
        if partial is not None:
            _finish("sgd", cfg, out, list(partial.rows()))
        raise
    path = _finish("sgd", cfg, out, list(trace.rows()))
    final = trace.theta[-1]
    return {"csv": str(path), "target_L": target, "theta_star": sg.theta_star, "theta_final": final,
            "abs_err": abs(final - sg.theta_star)}


def run_hj_check(cfg: RunConfig, out: Path) -> dict:
    hj = cfg.hj_check
    checks = hj_property_suite(hj.dm, hj.ds, hj.m, hj.s, tuple(hj.h))
    rows = [[c.name, c.value, c.tolerance, c.passed, c.detail] for c in checks]
    path = _finish("hj-check", cfg, out, rows)
    return {"csv": str(path), "checks": [dict(zip(HEADERS["hj-check"], r)) for r in rows],
            "failed": [c.name for c in checks if not c.passed]}


COMMANDS = {
    "price": run_price,
    "convergence": run_convergence,
    "variance-scaling": run_variance_scaling,
    "greek": run_greek,
    "sgd": run_sgd,
    "hj-check": run_hj_check,
}
