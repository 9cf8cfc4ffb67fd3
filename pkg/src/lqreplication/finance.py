"""Cash accumulation, dividend plans and short-rate curves built on the
replication engine.

Everything is simulated under the pricing measure, where the equity price
is a martingale.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .kernels import AsianAverage, Deterministic, EuropeanCall, GBMTerminal, LognormalIncrement, validate_kf
from .replicator import DEFAULT_BLOCK, make_system, mean_se, min_cost_closed_form, replicate, riccati_build
from .sde import build_grid, concat_grids
from .weights import make_weight

__all__ = [
    "KernelConditionError",
    "CashPlan",
    "cash_plan",
    "dividend_plan",
    "BondCurveSpec",
    "make_bond_spec",
    "bond_grid",
    "ShortRateResult",
    "bond_curve",
    "write_bond_csv",
    "write_accumulation_csv",
]

CASH_FAMILIES = (GBMTerminal, EuropeanCall, AsianAverage)


class KernelConditionError(ValueError):
    """A target's kernel fails the finite second-moment check near the
    end of its interval."""


@dataclass(eq=False)
class CashPlan:
    """Optimal deposit plan whose accumulated value matches the target.

    ``accumulated`` is ``int_0^T exp(r(T-t)) u(t) dt`` on every path and
    ``target`` the realised payoff; ``run`` keeps the full replication
    output (deposit densities for the retained paths live in
    ``run.traj_u``).
    """

    rate: float
    payoff: object
    weight: object
    run: object
    J_star: float

    @property
    def accumulated(self):
        return self.run.x_T[:, 0]

    @property
    def target(self):
        return self.run.f[:, 0]

    @property
    def residual_rmse(self):
        return self.run.residual_rmse

    def mean_accumulated(self):
        m, se = mean_se(self.accumulated)
        return float(m), float(se)

    def summary(self):
        m, se = self.mean_accumulated()
        return {
            "rate": self.rate,
            "target_mean": float(self.payoff.mean()[0]),
            "mean_accumulated": m,
            "mean_accumulated_se": se,
            "residual_rmse": self.residual_rmse,
            "mean_cost": self.run.mean_cost,
            "cost_se": self.run.cost_se,
            "J_star": self.J_star,
        }


def cash_plan(market, payoff, weight, r, grid, ensemble, *, block_size=DEFAULT_BLOCK,
              workers=1, keep=32, scheme="cell"):
    """Deposit density ``u`` with ``int_0^T exp(r(T-t)) u dt = f`` and least
    ``E int Gamma u^2 dt``.

    The account is the scalar plant ``dx/dt = r x + u`` started at zero.
    ``payoff`` must be one of the equity families driven by ``market``.
    """
    if not isinstance(payoff, CASH_FAMILIES):
        raise ValueError(f"cash plans take GBMTerminal, EuropeanCall or AsianAverage targets, "
                         f"not {type(payoff).__name__}")
    if payoff.market is not market:
        raise ValueError("payoff is driven by a different market")
    if not r >= 0:
        raise ValueError("interest rate must be non-negative")
    system = make_system(r, 1.0, 0.0, weight.T, d=ensemble.d)
    ric = riccati_build(system, weight, grid)
    run = replicate(system, weight, payoff, grid, ensemble, riccati=ric, keep=keep,
                    block_size=block_size, workers=workers, scheme=scheme)
    return CashPlan(rate=float(r), payoff=payoff, weight=weight, run=run,
                    J_star=min_cost_closed_form(ric, payoff))


def dividend_plan(market, weight, grid, ensemble, c=0.05, **kwargs):
    """Dividend flow paying in total the fraction ``c`` of the terminal
    equity price, with no interest on the account."""
    if c < 0:
        raise ValueError("dividend proportion must be non-negative")
    return cash_plan(market, GBMTerminal(c, market), weight, 0.0, grid, ensemble, **kwargs)


@dataclass(frozen=True, eq=False)
class BondCurveSpec:
    """Maturities ``0 < T_1 < ... < T_K`` and one positive target per
    interval ``[T_{k-1}, T_k]``.

    Each target is either a positive constant or a pair ``(theta, eta)``
    meaning ``exp(theta + eta (w(T_k) - w(T_{k-1})))``. Every interval gets
    its own penalty weight vanishing at its right end.
    """

    maturities: tuple
    targets: tuple
    alpha: float = 0.75
    steps: int = 256
    kind: str = "pure-power"
    T1_fraction: float = 1.0
    component: int = 0

    @property
    def K(self):
        return len(self.maturities)

    @property
    def lengths(self):
        return np.diff(np.concatenate([[0.0], self.maturities]))

    def weight(self, k):
        L = float(self.lengths[k])
        T1 = L * self.T1_fraction if self.kind == "plateau-power" else None
        return make_weight(self.kind, self.alpha, L, 1.0, T1)

    def payoff(self, k):
        """Target of interval ``k`` on its local clock ``[0, T_k - T_{k-1}]``."""
        tgt = self.targets[k]
        if np.ndim(tgt) == 0:
            return Deterministic(float(tgt))
        theta, eta = tgt
        return LognormalIncrement(float(theta), float(eta), 0.0, float(self.lengths[k]), self.component)


def make_bond_spec(maturities, targets, alpha=0.75, steps=256, kind="pure-power", T1_fraction=1.0,
                   component=0):
    """Validate and build a :class:`BondCurveSpec`.

    Maturities must be positive and strictly increasing; constant targets
    must be positive (a non-positive integrated rate would put the
    discounted bond price outside (0, 1)).
    """
    mats = tuple(float(m) for m in np.atleast_1d(maturities))
    if not mats:
        raise ValueError("need at least one maturity")
    if mats[0] <= 0 or np.any(np.diff(mats) <= 0):
        raise ValueError(f"maturities must be positive and strictly increasing, got {list(mats)}")
    targets = tuple(targets)
    if len(targets) != len(mats):
        raise ValueError(f"{len(mats)} maturities but {len(targets)} targets")
    for k, tgt in enumerate(targets):
        if np.ndim(tgt) == 0:
            if not float(tgt) > 0:
                raise ValueError(f"target {k} must be positive, got {tgt}")
        elif len(tgt) != 2 or not np.all(np.isfinite(tgt)):
            raise ValueError(f"lognormal target {k} needs finite (theta, eta)")
    if int(steps) != steps or steps < 2:
        raise ValueError("steps per interval must be an integer >= 2")
    spec = BondCurveSpec(maturities=mats, targets=targets, alpha=float(alpha), steps=int(steps),
                         kind=kind, T1_fraction=float(T1_fraction), component=int(component))
    for k in range(spec.K):
        spec.weight(k)
    return spec


def _local_grids(spec):
    return [build_grid(spec.steps, float(L), weight=spec.weight(k)) for k, L in enumerate(spec.lengths)]


def bond_grid(spec):
    """Global grid: each interval graded towards its own maturity."""
    return concat_grids(_local_grids(spec))


@dataclass(eq=False)
class ShortRateResult:
    """Per-path integrated rates and reconstructed discounted bond prices.

    ``f``, ``int_r`` and ``xi_hat`` have shape ``(M, K)``; ``rate_paths``
    holds ``r(t_i)`` at the left nodes of the global grid for the retained
    paths.
    """

    spec: BondCurveSpec
    f: np.ndarray
    int_r: np.ndarray
    xi_hat: np.ndarray
    grid: object
    rate_paths: np.ndarray
    runs: list = field(default_factory=list, repr=False)
    kf_reports: list = field(default_factory=list, repr=False)

    @property
    def telescoping_error(self):
        """max over paths and k of ``|sum_{j<=k} f_j + log xi_hat_k|``."""
        return float(np.abs(np.cumsum(self.f, axis=1) + np.log(self.xi_hat)).max())

    @property
    def in_unit_interval(self):
        return bool(np.all((self.xi_hat > 0) & (self.xi_hat < 1)))

    def residual_rmse(self):
        return np.sqrt(np.mean((self.int_r - self.f) ** 2, axis=0))

    def summary(self):
        return {
            "maturities": list(self.spec.maturities),
            "mean_f": self.f.mean(axis=0).tolist(),
            "mean_xi_hat": self.xi_hat.mean(axis=0).tolist(),
            "residual_rmse": self.residual_rmse().tolist(),
            "telescoping_error": self.telescoping_error,
            "xi_hat_in_unit_interval": self.in_unit_interval,
        }


def bond_curve(spec, ensemble, *, block_size=DEFAULT_BLOCK, workers=1, keep=32, kf_paths=2000,
               scheme="cell"):
    """Short rate ``r`` whose integral over each interval replicates the
    interval's target.

    The scalar engine (``A = 0``, ``b = 1``) runs once per interval on the
    interval's own clock, reading the same Wiener paths as the global
    ``ensemble`` (built on :func:`bond_grid`). Before each run the target's
    kernel is checked on the second half of the interval.

    Raises
    ------
    KernelConditionError
        If a kernel's second moment is non-finite or grows without bound
        towards the interval's end.
    """
    grids = _local_grids(spec)
    full = concat_grids(grids)
    if ensemble.grid.N != full.N or not np.allclose(ensemble.grid.nodes, full.nodes, rtol=0, atol=1e-12):
        raise ValueError("ensemble is not on the bond grid")
    M = ensemble.M
    f = np.empty((M, spec.K))
    int_r = np.empty((M, spec.K))
    rates, runs, reports = [], [], []
    start = 0
    for k, g in enumerate(grids):
        window = ensemble.window(start, start + g.N, g)
        payoff = spec.payoff(k)
        probe = replace(window, M=min(M, kf_paths))
        rep = validate_kf(payoff, probe, 0.5 * g.T, block_size=block_size)
        reports.append(rep)
        if not rep["finite"] or rep["divergent"]:
            raise KernelConditionError(f"interval {k + 1}: kernel second moment is not bounded near "
                                       f"maturity {spec.maturities[k]} (log-log slope "
                                       f"{rep['loglog_slope']:.3g})")
        system = make_system(0.0, 1.0, 0.0, g.T, d=ensemble.d)
        weight = spec.weight(k)
        run = replicate(system, weight, payoff, g, window, keep=keep, block_size=block_size,
                        workers=workers, scheme=scheme)
        f[:, k] = run.f[:, 0]
        int_r[:, k] = run.x_T[:, 0]
        rates.append(run.traj_u[:, :, 0] if run.traj_u is not None else np.zeros((0, g.N)))
        runs.append(run)
        start += g.N
    xi_hat = np.exp(-np.cumsum(int_r, axis=1))
    return ShortRateResult(spec=spec, f=f, int_r=int_r, xi_hat=xi_hat, grid=full,
                           rate_paths=np.concatenate(rates, axis=1), runs=runs, kf_reports=reports)


def write_bond_csv(result, path):
    """Rows ``path_id, k, f_k, int_r, xi_hat_k`` with maturities numbered
    from 1."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["path_id", "k", "f_k", "int_r", "xi_hat_k"])
        for p in range(result.f.shape[0]):
            for k in range(result.spec.K):
                out.writerow([p, k + 1, repr(float(result.f[p, k])), repr(float(result.int_r[p, k])),
                              repr(float(result.xi_hat[p, k]))])


def write_accumulation_csv(plan, path):
    """Rows ``path_id, target, accumulated, residual``."""
    acc, tgt = plan.accumulated, plan.target
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["path_id", "target", "accumulated", "residual"])
        for p in range(acc.size):
            out.writerow([p, repr(float(tgt[p])), repr(float(acc[p])), repr(float(acc[p] - tgt[p]))])
