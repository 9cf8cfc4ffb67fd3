"""Batch entry point: ``lqrep {replicate,verify,oracle,bonds} --config FILE``.

Exit status: 0 success, 1 invalid configuration or arguments, 2 a checked
property failed, 3 numerical failure (singular matrix, quadrature, rank).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time

import numpy as np

from .config import ConfigError, load_config
from .finance import KernelConditionError, bond_curve, bond_grid, write_accumulation_csv, write_bond_csv
from .kernels import Deterministic, LinearWiener, regression_check, validate_kf
from .mathcore import QuadratureError, SingularityError
from .oracle import MAX_DEPTH, RankDeficientError, oracle_vs_formula
from .replicator import (
    admissibility_report,
    control_at,
    lagrangian,
    min_cost_closed_form,
    perturbation_optimality,
    replicate,
    riccati_build,
    saddle_check,
)
from .sde import sample_ensemble

__all__ = ["main", "InvariantFailure", "run_replicate", "run_verify", "run_oracle", "run_bonds", "dumps"]

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_LADDER = (64, 256, 1024)
DEFAULT_DEPTHS = (4, 6, 8, 10)


class InvariantFailure(RuntimeError):
    """One or more checked properties failed; ``names`` lists them."""

    def __init__(self, names):
        super().__init__("failed: " + ", ".join(names))
        self.names = list(names)


# -- output helpers --------------------------------------------------------

def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x) or math.isinf(x):
            return json.dumps(str(x))
        text = format(x, ".17g")
        return text if any(ch in text for ch in ".en") else text + ".0"
    if x is None:
        return "null"
    return json.dumps(x)


def dumps(obj, indent=2, _level=0):
    """JSON text with insertion-ordered keys and 17-significant-digit
    floats, so equal results serialise to equal bytes."""
    pad, inner = " " * (indent * _level), " " * (indent * (_level + 1))
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(_fmt(v) for v in seq) + "]"
        return "[\n" + ",\n".join(inner + dumps(v, indent, _level + 1) for v in seq) + "\n" + pad + "]"
    return _fmt(obj)


def _write(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text if text.endswith("\n") else text + "\n")


def _g(x):
    return format(float(x), ".17g")


def write_paths_csv(run, path):
    """One row per path: target, terminal state, residual, cost and the
    terminal dual value."""
    n = run.f.shape[1]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["path_id"] + [f"f_{k}" for k in range(n)] + [f"x_T_{k}" for k in range(n)]
                     + [f"residual_{k}" for k in range(n)] + ["cost"] + [f"mu_T_{k}" for k in range(n)])
        res = run.residual
        for p in range(run.M):
            out.writerow([p] + [_g(v) for v in run.f[p]] + [_g(v) for v in run.x_T[p]]
                         + [_g(v) for v in res[p]] + [_g(run.cost[p])] + [_g(v) for v in run.mu_T[p]])


def write_trajectories_csv(run, path):
    """Retained paths, one row per node: ``path_id, i, t_i`` then the dual,
    control and state components (control left blank at ``T``)."""
    grid = run.grid
    n = run.f.shape[1]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["path_id", "i", "t_i"] + [f"mu_{k}" for k in range(n)]
                     + [f"u_{k}" for k in range(n)] + [f"x_{k}" for k in range(n)])
        if run.traj_mu is None:
            return
        for j, pid in enumerate(run.traj_ids):
            for i in range(grid.N + 1):
                u = run.traj_u[j, i] if i < grid.N else [None] * n
                out.writerow([int(pid), i, _g(grid.nodes[i])] + [_g(v) for v in run.traj_mu[j, i]]
                             + ["" if v is None else _g(v) for v in u] + [_g(v) for v in run.traj_x[j, i]])


def _header(cfg, command):
    return {"schema": SCHEMA_VERSION, "command": command, "fingerprint": cfg.fingerprint(), "seed": cfg.seed}


# -- shared run logic ------------------------------------------------------

def _simulate(cfg, steps, workers, riccati_weight=None, paths=None):
    sim = cfg.block("simulation")
    system, weight, payoff = cfg.system(), cfg.weight(), cfg.payoff()
    grid = cfg.grid(steps)
    M = int(paths if paths is not None else sim.get("paths", 1000))
    ens = sample_ensemble(grid, M, system.d, cfg.seed)
    t0 = time.perf_counter()
    ric = riccati_build(system, riccati_weight or weight, grid)
    true_ric = ric if riccati_weight is None else riccati_build(system, weight, grid)
    t1 = time.perf_counter()
    run = replicate(system, weight, payoff, grid, ens, riccati=ric, keep=int(cfg.block("output").get("keep", 32)),
                    block_size=int(sim.get("block_size", 1024)), workers=workers,
                    scheme=sim.get("scheme", "cell"))
    t2 = time.perf_counter()
    return {"system": system, "weight": weight, "payoff": payoff, "grid": grid, "ensemble": ens,
            "riccati": ric, "true_riccati": true_ric, "run": run, "timing": (t1 - t0, t2 - t1)}


def run_replicate(cfg, out_dir, *, workers=1, ladder=None):
    """Replicate at the configured grid (and optionally a refinement
    ladder); write ``summary.json``, ``paths.csv``, ``trajectories.csv``."""
    t_start = time.perf_counter()
    steps = int(cfg.block("simulation").get("steps", 256))
    ladder = list(ladder) if ladder else [steps]
    rmse, timings = {}, {}
    main = None
    for N in ladder:
        res = _simulate(cfg, N, workers)
        rmse[str(N)] = res["run"].residual_rmse
        timings[str(N)] = {"riccati_build": res["timing"][0], "simulation": res["timing"][1]}
        if N == ladder[-1]:
            main = res
    run, ric, payoff = main["run"], main["true_riccati"], main["payoff"]
    J = min_cost_closed_form(ric, payoff)
    L, L_se, c, c_se = lagrangian(run)
    summary = _header(cfg, "replicate")
    summary.update({
        "application": cfg.application,
        "paths": run.M,
        "steps": main["grid"].N,
        "scheme": run.scheme,
        "mu_bar": run.mu_bar.tolist(),
        "J_star": J,
        "mc_cost": run.mean_cost,
        "mc_cost_se": run.cost_se,
        "lagrangian": L,
        "lagrangian_se": L_se,
        "constraint_term": c,
        "constraint_term_se": c_se,
        "residual_rmse": rmse,
        "admissibility": admissibility_report(run),
    })
    if cfg.application in ("cash", "dividend"):
        m = run.x_T[:, 0]
        summary["accumulation"] = {
            "rate": float(main["system"].A[0, 0]),
            "target_mean": float(payoff.mean()[0]),
            "mean_accumulated": float(m.mean()),
            "mean_accumulated_se": float(m.std(ddof=1) / np.sqrt(m.size)) if m.size > 1 else 0.0,
        }
    os.makedirs(out_dir, exist_ok=True)
    _write(os.path.join(out_dir, "summary.json"), dumps(summary))
    write_paths_csv(run, os.path.join(out_dir, "paths.csv"))
    write_trajectories_csv(run, os.path.join(out_dir, "trajectories.csv"))
    if cfg.application in ("cash", "dividend"):
        from .finance import CashPlan

        plan = CashPlan(rate=summary["accumulation"]["rate"], payoff=payoff, weight=main["weight"], run=run, J_star=J)
        write_accumulation_csv(plan, os.path.join(out_dir, "accumulation.csv"))
    timings["total"] = time.perf_counter() - t_start
    _write(os.path.join(out_dir, "timings.json"), dumps(timings))
    return summary


def _check(name, ok, **detail):
    return {"name": name, "ok": bool(ok), **detail}


def run_verify(cfg, out_dir=None, *, ladder=DEFAULT_LADDER, workers=1, riccati_weight=None,
               check_paths=20000):
    """Run the property suite over a refinement ladder.

    ``riccati_weight`` replaces the weight used for the Riccati cache only,
    which lets the suite be tested against a deliberately mismatched run.
    Returns the report; raises :class:`InvariantFailure` if any check fails
    (after the report is written).
    """
    if cfg.application == "bonds":
        raise ConfigError("application.kind", "use the bonds command for bond curves")
    t_start = time.perf_counter()
    ladder = sorted(int(N) for N in ladder)
    if len(ladder) < 2:
        raise ConfigError("ladder", "need at least two grid sizes")
    results = [_simulate(cfg, N, workers, riccati_weight) for N in ladder]
    last = results[-1]
    run, payoff, system, weight = last["run"], last["payoff"], last["system"], last["weight"]
    J = min_cost_closed_form(last["true_riccati"], payoff)
    stochastic = not isinstance(payoff, Deterministic)
    checks = []

    rmse = [r["run"].residual_rmse for r in results]
    scale = max(1.0, float(np.abs(run.f).max()))
    if all(v <= 1e-12 * scale for v in rmse):
        checks.append(_check("residual RMSE strictly decreasing", True, values=rmse, note="all at rounding level"))
    else:
        checks.append(_check("residual RMSE strictly decreasing", all(b < a for a, b in zip(rmse, rmse[1:])),
                             values=rmse))

    if stochastic:
        z = np.abs(run.mu_node_mean - run.mu_bar) / np.maximum(run.mu_node_se, 1e-300)
        ok = bool(np.all((z <= 3.0) | (np.abs(run.mu_node_mean - run.mu_bar) <= 1e-12)))
        checks.append(_check("mu martingale", ok, max_z=float(z[1:].max())))
    else:
        spread = float(np.abs(run.mu_node_mean - run.mu_bar).max() + run.mu_node_se.max())
        checks.append(_check("mu constant", spread <= 1e-12 * max(1.0, float(np.abs(run.mu_bar).max())),
                             spread=spread))

    tol = 3.0 * run.cost_se + 1e-6 * max(1.0, abs(J))
    checks.append(_check("cost consistency", abs(run.mean_cost - J) <= tol, mc_cost=run.mean_cost,
                         mc_cost_se=run.cost_se, J_star=J))

    L, L_se, c, c_se = lagrangian(run)
    half = 0.5 * run.mean_cost
    dual_ok = abs(L - half) <= 3.0 * L_se + 1e-12 and abs(c) <= 3.0 * c_se + 1e-9
    checks.append(_check("duality", dual_ok, lagrangian=L, lagrangian_se=L_se, half_cost=half,
                         constraint_term=c, constraint_term_se=c_se))

    mid = results[len(results) // 2]
    sub = sample_ensemble(mid["grid"], min(run.M, check_paths), system.d, cfg.seed)
    scheme = run.scheme
    pert = perturbation_optimality(system, weight, payoff, mid["grid"], sub, riccati=mid["riccati"], scheme=scheme)
    checks.append(_check("perturbation optimality", all(r["ok"] for r in pert),
                         worst=min(r["increase"] for r in pert), directions=len(pert)))
    sad = saddle_check(system, weight, payoff, mid["grid"], sub, riccati=mid["riccati"], scheme=scheme)
    checks.append(_check("saddle inequality",
                         all(r["ok"] for r in sad["multiplier_side"] + sad["control_side"])))

    worst = 0.0
    if run.traj_mu is not None:
        ric = last["riccati"]
        for i in range(run.grid.N):
            u, psi = control_at(ric, weight, system, run.traj_mu[:, i], float(run.grid.nodes[i]))
            gam = weight.gamma(float(run.grid.nodes[i]))
            grad = psi @ system.b - u @ gam.T
            worst = max(worst, float(np.abs(grad).max() / max(1.0, np.abs(psi @ system.b).max())))
    checks.append(_check("pointwise maximum condition", worst <= 1e-10, max_gradient=worst))

    decay = np.linalg.eigvalsh(last["riccati"].cell_Q).min()
    checks.append(_check("R Loewner decay", decay >= -1e-10, min_eigenvalue=float(decay)))

    adm = admissibility_report(run)
    checks.append(_check("admissibility finite", adm["finite"], **adm))

    kf_ens = sample_ensemble(last["grid"], min(run.M, check_paths), system.d, cfg.seed)
    kf = validate_kf(payoff, kf_ens, 0.5 * system.T)
    checks.append(_check("kernel condition", kf["finite"] and not kf["divergent"],
                         sup_estimate=kf["sup_estimate"], sup_se=kf["sup_se"], loglog_slope=kf["loglog_slope"]))
    if stochastic:
        probe = np.linspace(0, mid["grid"].N - 1, 7).astype(int)[1:-1]
        reg = regression_check(payoff, sub, probe)
        checks.append(_check("kernel regression", all(r["agree"] for r in reg), nodes=[r["node"] for r in reg]))

    report = _header(cfg, "verify")
    report.update({
        "ladder": ladder,
        "scheme": scheme,
        "mu_bar": run.mu_bar.tolist(),
        "J_star": J,
        "mc_cost": {str(N): r["run"].mean_cost for N, r in zip(ladder, results)},
        "mc_cost_se": {str(N): r["run"].cost_se for N, r in zip(ladder, results)},
        "residual_rmse": {str(N): v for N, v in zip(ladder, rmse)},
        "checks": checks,
    })
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write(os.path.join(out_dir, "summary.json"), dumps(report))
        _write(os.path.join(out_dir, "timings.json"), dumps({"total": time.perf_counter() - t_start}))
    failed = [c["name"] for c in checks if not c["ok"]]
    if failed:
        raise InvariantFailure(failed)
    return report


def run_oracle(cfg, out_dir=None, *, depths=DEFAULT_DEPTHS):
    """Lattice optimum against the continuous optimum at each depth."""
    system, weight, payoff = cfg.system(), cfg.weight(), cfg.payoff()
    if system.n != 1 or system.d != 1:
        raise ConfigError("system", "oracle comparisons need a scalar system (n = d = 1)")
    if not isinstance(payoff, (Deterministic, LinearWiener)):
        raise ConfigError("payoff.family", "oracle comparisons support deterministic and linear-wiener targets")
    depths = [int(d) for d in depths]
    for d in depths:
        if not 1 <= d <= MAX_DEPTH:
            raise ConfigError("depths", f"lattice depth must lie in [1, {MAX_DEPTH}], got {d}")
    grading = cfg.block("simulation").get("grading")
    reports = [oracle_vs_formula(system, weight, payoff, d, gamma=grading) for d in depths]
    gaps = [r["gap"] for r in reports]
    non_increasing = all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))
    out = _header(cfg, "oracle")
    out.update({"reports": reports, "gap_non_increasing": non_increasing})
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write(os.path.join(out_dir, "oracle.json"), dumps(out))
    if not non_increasing:
        raise InvariantFailure(["oracle gap non-increasing"])
    return out


def run_bonds(cfg, out_dir, *, workers=1):
    """Short-rate curve for the configured maturities; writes
    ``bonds.csv`` and ``summary.json``."""
    if cfg.application != "bonds":
        raise ConfigError("application.kind", "the bonds command needs application.kind = \"bonds\"")
    t0 = time.perf_counter()
    spec = cfg.bond_spec()
    sim = cfg.block("simulation")
    grid = bond_grid(spec)
    ens = sample_ensemble(grid, int(sim.get("paths", 1000)), 1, cfg.seed)
    try:
        res = bond_curve(spec, ens, block_size=int(sim.get("block_size", 1024)), workers=workers,
                         keep=int(cfg.block("output").get("keep", 32)), scheme=sim.get("scheme", "cell"))
    except KernelConditionError as exc:
        raise InvariantFailure([f"kernel condition ({exc})"]) from exc
    summary = _header(cfg, "bonds")
    summary.update(res.summary())
    summary["kernel_sup_estimate"] = [r["sup_estimate"] for r in res.kf_reports]
    os.makedirs(out_dir, exist_ok=True)
    _write(os.path.join(out_dir, "summary.json"), dumps(summary))
    write_bond_csv(res, os.path.join(out_dir, "bonds.csv"))
    _write(os.path.join(out_dir, "timings.json"), dumps({"total": time.perf_counter() - t0}))
    if not res.in_unit_interval:
        raise InvariantFailure(["discounted bond prices in (0, 1)"])
    return summary


# -- argument handling -----------------------------------------------------

def _int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _u64(text):
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("thread count must be at least 1")
    return v


def build_parser():
    parser = argparse.ArgumentParser(prog="lqrep", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("replicate", "simulate the optimal replicating control"),
                       ("verify", "run the property suite over a refinement ladder"),
                       ("oracle", "compare exact lattice optima with the continuous optimum"),
                       ("bonds", "generate a short-rate curve from bond targets")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--seed", type=_u64, help="override simulation.seed")
        p.add_argument("--out", help="output directory (default: output.directory or ./out)")
        p.add_argument("--threads", type=_positive, default=1, help="worker threads; never changes results")
        if name in ("replicate", "verify"):
            p.add_argument("--ladder", type=_int_list, help="grid sizes, e.g. 64,256,1024")
        if name == "oracle":
            p.add_argument("--depths", type=_int_list, default=list(DEFAULT_DEPTHS),
                           help="lattice depths, e.g. 4,6,8,10")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = args.out or cfg.block("output").get("directory", "out")
        if args.command == "replicate":
            summary = run_replicate(cfg, out, workers=args.threads, ladder=args.ladder)
            print(f"mu_bar={summary['mu_bar']} J*={summary['J_star']:.6g} "
                  f"cost={summary['mc_cost']:.6g}+-{summary['mc_cost_se']:.2g}")
        elif args.command == "verify":
            report = run_verify(cfg, out, ladder=args.ladder or DEFAULT_LADDER, workers=args.threads)
            for c in report["checks"]:
                print(f"{c['name']}: pass")
        elif args.command == "oracle":
            report = run_oracle(cfg, out, depths=args.depths)
            for r in report["reports"]:
                print(f"depth {r['depth']}: oracle {r['oracle_cost']:.6g} formula {r['formula_cost']:.6g} "
                      f"gap {r['gap']:.3g}")
        else:
            summary = run_bonds(cfg, out, workers=args.threads)
            print(f"mean xi_hat={summary['mean_xi_hat']} telescoping error={summary['telescoping_error']:.3g}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantFailure as exc:
        for name in exc.names:
            print(f"{name}: FAIL", file=sys.stderr)
        return EXIT_INVARIANT
    except (SingularityError, QuadratureError, RankDeficientError, OverflowError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
