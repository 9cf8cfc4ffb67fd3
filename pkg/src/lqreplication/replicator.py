"""Optimal replication of a terminal target by an adapted, absolutely
continuous state.

The plant is ``dx/dt = A x + b u`` with ``x(0) = a`` and the constraint
``x(T) = f``. The minimiser of ``E int u' Gamma u dt`` is

    u(t) = Gamma(t)^{-1} b' exp(A'(T-t)) mu(t),
    mu(t) = R(0)^{-1}(E f - exp(AT) a) + int_0^t R(s)^{-1} k_f(s) dw(s),

with ``Q(t) = exp(A(T-t)) b Gamma(t)^{-1} b' exp(A'(T-t))`` and
``R(s) = int_s^T Q``.

Two discretisations on a :class:`~lqreplication.sde.TimeGrid` are
available. Both keep the random factor mu frozen at the left node of each
cell, so the control stays adapted.

``"cell"`` (default)
    The deterministic factor ``Gamma(s)^{-1} b' exp(A'(T-s))`` is applied
    exactly across the cell, so a cell pushes the state by
    ``exp(-A(T-t_{i+1})) (R_i - R_{i+1}) mu_i`` at cost
    ``mu_i' (R_i - R_{i+1}) mu_i``. The dual step uses
    ``R_{i+1}^{-1} k_f(t_i) dw_i`` (``R_{N-1}^{-1}`` on the last step).
    Then ``x(T) = E f + sum_{i<N-1} k_f(t_i) dw_i`` exactly: the scheme is
    the discrete optimum, and only the last increment (which no adapted
    control can see) is left unreplicated.
``"left"``
    The control value ``u(t_i)`` is held on the cell; the dual step uses
    ``R_i^{-1}``; cost is the left Riemann sum of ``u' Gamma u``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .mathcore import QuadratureSpec, SingularityError, cumulative_singular, integrate_singular, mat_exp, phi1, solve_spd

__all__ = [
    "SystemSpec",
    "make_system",
    "RiccatiWeights",
    "riccati_build",
    "dual_init",
    "simulate_dual",
    "control_at",
    "controls",
    "integrate_state",
    "integrate_dual_state",
    "cost",
    "dual_cost",
    "min_cost_closed_form",
    "ReplicationRun",
    "replicate",
    "lagrangian",
    "admissibility_report",
    "perturbation_optimality",
    "saddle_check",
    "mean_se",
]

DEFAULT_BLOCK = 1024


def mean_se(values):
    """Sample mean and its standard error along axis 0."""
    values = np.asarray(values, dtype=float)
    m = values.shape[0]
    mean = values.mean(axis=0)
    if m < 2:
        return mean, np.zeros_like(mean)
    return mean, values.std(axis=0, ddof=1) / np.sqrt(m)


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """Plant ``dx/dt = A x + b u`` on ``[0, T]`` from ``x(0) = a``,
    driven by a ``d``-dimensional Wiener filtration."""

    A: np.ndarray
    b: np.ndarray
    a: np.ndarray
    T: float
    d: int = 1

    @property
    def n(self):
        return self.a.size

    @property
    def is_autonomous_zero(self):
        return not np.any(self.A)


def make_system(A, b, a, T, d=1):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    a = np.atleast_1d(np.asarray(a, dtype=float))
    n = a.size
    if A.shape != (n, n) or b.shape != (n, n):
        raise ValueError(f"A and b must be {n}x{n} to match the initial state")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b)) and np.all(np.isfinite(a))):
        raise ValueError("system matrices must be finite")
    if np.linalg.cond(b) >= 1e12:
        raise ValueError("b must be invertible (condition number below 1e12)")
    if not T > 0:
        raise ValueError("T must be positive")
    if int(d) != d or d < 1:
        raise ValueError("noise dimension d must be a positive integer")
    for arr in (A, b, a):
        arr.setflags(write=False)
    return SystemSpec(A=A, b=b, a=a, T=float(T), d=int(d))


class RiccatiWeights:
    """Q(t) and R(s) = int_s^T Q for a system and penalty weight, with R
    cached at the nodes of ``grid`` (``R_nodes[-1]`` is the zero matrix)."""

    def __init__(self, system, weight, grid, quad=None):
        if not np.isclose(grid.T, system.T, rtol=1e-12, atol=0) or not np.isclose(weight.T, system.T, rtol=1e-12, atol=0):
            raise ValueError("grid, weight and system must share the terminal time")
        if weight.n != system.n:
            raise ValueError("weight dimension differs from the state dimension")
        self.system = system
        self.weight = weight
        self.grid = grid
        self.quad = quad or QuadratureSpec(alpha=weight.alpha)
        self._breaks = [system.T - bp for bp in weight.breakpoints]
        self.R_nodes, cells = cumulative_singular(self.Q_remaining, self.quad, grid.remaining,
                                                  self._breaks, return_cells=True)
        self.R_nodes = 0.5 * (self.R_nodes + np.swapaxes(self.R_nodes, 1, 2))
        self.cell_Q = 0.5 * (cells + np.swapaxes(cells, 1, 2))     # R_i - R_{i+1}
        self._check_nodes()

        A, b, rem = system.A, system.b, grid.remaining
        self.exp_remaining = mat_exp(A.T, rem)             # exp(A'(T - t_i))
        gam_inv = weight.gamma_inv_remaining(rem[:-1])
        self.feedback = gam_inv @ b.T @ self.exp_remaining[:-1]   # u_i = F_i mu_i
        self.gamma_nodes = weight.gamma_remaining(rem[:-1])
        self.step_exp = mat_exp(A, grid.dt)
        self.step_input = phi1(A, grid.dt) @ b
        self.terminal_map = np.swapaxes(self.exp_remaining[1:], 1, 2) @ self.step_input
        self.cell_push = mat_exp(-A, rem[1:]) @ self.cell_Q
        self.R_inv = np.stack([
            solve_spd(self.R_nodes[i], np.eye(system.n), at=float(grid.nodes[i]))
            for i in range(grid.N)
        ])
        self._cell_extras = None

    def dual_gain(self, scheme="cell"):
        """Matrices multiplying ``k_f(t_i) dw_i`` in the dual recursion."""
        if scheme == "left":
            return self.R_inv
        if scheme != "cell":
            raise ValueError(f"unknown scheme {scheme!r}")
        return np.concatenate([self.R_inv[1:], self.R_inv[-1:]])

    def cell_extras(self):
        """Cell integrals used by the admissibility diagnostics:
        ``int g |u|^2`` as a quadratic form in mu, ``int 1/g`` and the
        control direction at the cell midpoint."""
        if self._cell_extras is None:
            sys, w, grid = self.system, self.weight, self.grid
            Gi_b = w.G_inv @ sys.b.T

            def energy(tau):
                E = mat_exp(sys.A, tau) if np.any(sys.A) else np.eye(sys.n)[None]
                core = Gi_b.T @ Gi_b
                return w.g_inv_remaining(tau)[:, None, None] * (E @ core @ np.swapaxes(E, -1, -2))

            _, e_cells = cumulative_singular(energy, self.quad, grid.remaining, self._breaks, return_cells=True)
            rem = grid.remaining
            mid = 0.5 * (rem[:-1] + rem[1:])
            direction = Gi_b @ mat_exp(sys.A.T, mid)
            ginv = w.g_inv_integral_remaining(rem[1:], rem[:-1])
            self._cell_extras = (e_cells, ginv, direction)
        return self._cell_extras

    def _check_nodes(self):
        for i in range(self.grid.N):
            eig = np.linalg.eigvalsh(self.R_nodes[i])
            if eig[0] <= 0:
                raise SingularityError(f"R is not positive definite at s={self.grid.nodes[i]!r}")

    def Q_remaining(self, tau):
        """Q at time-to-go ``tau`` (1-d array), shape ``(m, n, n)``."""
        A, b = self.system.A, self.system.b
        gi = self.weight.gamma_inv_remaining(tau)
        if not np.any(A):
            return b @ gi @ b.T
        E = mat_exp(A, tau)
        return E @ b @ gi @ b.T @ np.swapaxes(E, 1, 2)

    def Q(self, t):
        return self.Q_remaining(self.system.T - np.atleast_1d(np.asarray(t, dtype=float)))

    def R_remaining(self, tau):
        """R at arbitrary times-to-go (any order), shape ``(m, n, n)``."""
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        uniq, inv = np.unique(tau, return_inverse=True)
        desc = uniq[::-1]
        if desc[-1] < 0 or desc[0] > self.system.T:
            raise ValueError("time-to-go outside [0, T]")
        vals = cumulative_singular(self.Q_remaining, self.quad, desc, self._breaks)[::-1]
        return vals[inv.ravel()]

    def R(self, s):
        """R(s) evaluated on demand by singular quadrature."""
        s = float(s)
        return integrate_singular(self.Q_remaining, self.quad, s, self.system.T, self.weight.breakpoints)


def riccati_build(system, weight, grid, quad=None):
    return RiccatiWeights(system, weight, grid, quad)


def _target_gap(riccati, payoff):
    sys = riccati.system
    return payoff.mean() - mat_exp(sys.A, sys.T) @ sys.a


def dual_init(riccati, payoff, system=None):
    """mu_bar = R(0)^{-1}(E f - exp(AT) a)."""
    gap = _target_gap(riccati, payoff)
    return solve_spd(riccati.R_nodes[0], gap, at=float(riccati.grid.nodes[0]))


def simulate_dual(riccati, payoff, block, mu_bar=None, scheme="cell"):
    """Adapted sums ``mu(t_{i+1}) = mu(t_i) + R^{-1} k_f(t_i) dw_i``, with R
    taken at the node the scheme prescribes (see the module docstring).

    Returns ``mu`` of shape ``(B, N+1, n)`` and the dual kernel of shape
    ``(B, N, n, d)``.
    """
    if mu_bar is None:
        mu_bar = dual_init(riccati, payoff)
    k = payoff.kernel(block)
    khat = np.einsum("inm,bimd->bind", riccati.dual_gain(scheme), k)
    incr = np.einsum("bind,bid->bin", khat, block.dw)
    B, N, n = incr.shape
    mu = np.empty((B, N + 1, n))
    mu[:, 0] = mu_bar
    np.cumsum(incr, axis=1, out=mu[:, 1:])
    mu[:, 1:] += mu_bar
    return mu, khat


def control_at(riccati, weight, system, mu, t):
    """Control and adjoint at a single time ``t < T``.

    Returns ``(u, psi)`` with ``psi = exp(A'(T-t)) mu`` and
    ``u = Gamma(t)^{-1} b' psi``; ``mu`` may carry leading path axes.
    """
    if not t < system.T:
        raise ValueError(f"control is defined for t < T={system.T}")
    tau = system.T - t
    psi = np.asarray(mu, dtype=float) @ mat_exp(system.A, tau)  # row form of exp(A' tau) mu
    u = psi @ system.b @ weight.gamma_inv_remaining(np.array(tau)).T
    return u, psi


def controls(riccati, mu, weight=None):
    """Node controls ``u_i = Gamma_i^{-1} b' exp(A'(T-t_i)) mu_i`` for
    ``mu`` of shape ``(B, N+1, n)``; returns ``(B, N, n)``."""
    feedback = riccati.feedback
    if weight is not None and weight is not riccati.weight:
        sys, rem = riccati.system, riccati.grid.remaining[:-1]
        feedback = weight.gamma_inv_remaining(rem) @ sys.b.T @ riccati.exp_remaining[:-1]
    return np.einsum("inm,bim->bin", feedback, mu[:, :-1])


def integrate_state(system, u, grid, step_exp=None, step_input=None):
    """Exact flow for controls held constant on each cell:
    ``x_{i+1} = exp(A dt_i) x_i + (int_0^{dt_i} exp(As) ds) b u_i``.

    ``u`` has shape ``(B, N, n)``; returns ``x`` of shape ``(B, N+1, n)``.
    """
    u = np.asarray(u, dtype=float)
    B, N, n = u.shape
    if N != grid.N:
        raise ValueError("controls must be given at the N left nodes")
    if step_input is None:
        step_input = phi1(system.A, grid.dt) @ system.b
    x = np.empty((B, N + 1, n))
    x[:, 0] = system.a
    pushed = np.einsum("inm,bim->bin", step_input, u)
    if system.is_autonomous_zero:
        np.cumsum(pushed, axis=1, out=x[:, 1:])
        x[:, 1:] += system.a
        return x
    if step_exp is None:
        step_exp = mat_exp(system.A, grid.dt)
    for i in range(N):
        x[:, i + 1] = x[:, i] @ step_exp[i].T + pushed[:, i]
    return x


def cost(u, weight, grid):
    """Left-endpoint sums ``sum_i u_i' Gamma(t_i) u_i dt_i`` per path."""
    gam = weight.gamma_remaining(grid.remaining[:-1])
    return np.einsum("bin,inm,bim,i->b", u, gam, u, grid.dt)


def integrate_dual_state(riccati, mu):
    """State under the cell scheme: ``x_{i+1} = exp(A dt_i) x_i +
    exp(-A(T-t_{i+1})) (R_i - R_{i+1}) mu_i``; returns ``(B, N+1, n)``."""
    sys = riccati.system
    B, N1, n = mu.shape
    x = np.empty((B, N1, n))
    x[:, 0] = sys.a
    pushed = np.einsum("inm,bim->bin", riccati.cell_push, mu[:, :-1])
    if sys.is_autonomous_zero:
        np.cumsum(pushed, axis=1, out=x[:, 1:])
        x[:, 1:] += sys.a
        return x
    for i in range(N1 - 1):
        x[:, i + 1] = x[:, i] @ riccati.step_exp[i].T + pushed[:, i]
    return x


def dual_cost(riccati, mu):
    """Exact cost of the cell scheme, ``sum_i mu_i' (R_i - R_{i+1}) mu_i``."""
    return np.einsum("bin,inm,bim->b", mu[:, :-1], riccati.cell_Q, mu[:, :-1])


def min_cost_closed_form(riccati, payoff):
    """Optimal value ``E int u' Gamma u dt`` in closed form:

        (E f - e^{AT} a)' R(0)^{-1} (E f - e^{AT} a)
            + int_0^T tr(R(t)^{-1} E[k_f(t) k_f(t)']) dt.

    The second term is integrated with the singular quadrature, R being
    evaluated on demand at the quadrature nodes.
    """
    gap = _target_gap(riccati, payoff)
    R0 = riccati.R_nodes[0]
    first = float(gap @ solve_spd(R0, gap, at=0.0))
    T = riccati.system.T
    if not np.any(payoff.second_moment(np.linspace(0.0, T, 9)[:-1])):
        return first

    def integrand(tau):
        R = riccati.R_remaining(tau)
        S = payoff.second_moment(T - tau)
        return np.trace(np.linalg.solve(R, S), axis1=1, axis2=2)

    second = integrate_singular(integrand, riccati.quad, 0.0, T, riccati.weight.breakpoints)
    return first + float(second)


@dataclass(eq=False)
class ReplicationRun:
    """Outcome of a Monte Carlo replication over a path ensemble.

    Per-path arrays are indexed by path id. Full trajectories are kept for
    the first ``traj_ids.size`` paths only.
    """

    grid: object
    seed: int
    mu_bar: np.ndarray
    f: np.ndarray
    x_T: np.ndarray
    mu_T: np.ndarray
    cost: np.ndarray
    g_energy: np.ndarray
    abs_int: np.ndarray
    mu_node_sum: np.ndarray
    mu_node_sumsq: np.ndarray
    scheme: str = "cell"
    traj_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    traj_mu: np.ndarray | None = None
    traj_u: np.ndarray | None = None
    traj_x: np.ndarray | None = None

    @property
    def M(self):
        return self.cost.size

    @property
    def residual(self):
        return self.x_T - self.f

    @property
    def residual_rmse(self):
        return float(np.sqrt(np.mean((self.residual ** 2).sum(axis=1))))

    @property
    def mean_cost(self):
        return float(self.cost.mean())

    @property
    def cost_se(self):
        return float(mean_se(self.cost)[1])

    @property
    def mu_node_mean(self):
        return self.mu_node_sum / self.M

    @property
    def mu_node_se(self):
        M = self.M
        mean = self.mu_node_mean
        var = np.maximum(self.mu_node_sumsq / M - mean ** 2, 0.0) * M / max(M - 1, 1)
        return np.sqrt(var / M)


SCHEMES = ("cell", "left")


class _Context:
    """Per-run constants shared read-only by all path blocks.

    ``riccati`` drives the dual recursion; ``plant`` carries the cell
    integrals of the weight actually used by the controls. They coincide
    unless a mismatched cache is supplied on purpose.
    """

    def __init__(self, riccati, weight, payoff, mu_bar, keep, scheme):
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
        self.riccati = riccati
        self.weight = weight
        self.payoff = payoff
        self.mu_bar = mu_bar
        self.keep = keep
        self.scheme = scheme
        grid = riccati.grid
        if weight is riccati.weight:
            self.plant = riccati
        else:
            self.plant = RiccatiWeights(riccati.system, weight, grid, QuadratureSpec(alpha=weight.alpha))
        self.g_nodes = weight.g_remaining(grid.remaining[:-1])
        self.gamma_nodes = self.plant.gamma_nodes
        if scheme == "cell":
            self.energy_cells, self.ginv_cells, self.direction = self.plant.cell_extras()

    def run_block(self, block):
        ric, plant, grid = self.riccati, self.plant, self.riccati.grid
        mu, _ = simulate_dual(ric, self.payoff, block, self.mu_bar, self.scheme)
        u = controls(plant, mu)
        dt = grid.dt
        if self.scheme == "cell":
            x = integrate_dual_state(plant, mu)
            path_cost = dual_cost(plant, mu)
            g_energy = np.einsum("bin,inm,bim->b", mu[:, :-1], self.energy_cells, mu[:, :-1])
            speed = np.linalg.norm(np.einsum("inm,bim->bin", self.direction, mu[:, :-1]), axis=2)
            abs_int = (speed * self.ginv_cells).sum(axis=1) ** 2
        else:
            x = integrate_state(ric.system, u, grid, ric.step_exp, ric.step_input)
            path_cost = np.einsum("bin,inm,bim,i->b", u, self.gamma_nodes, u, dt)
            g_energy = ((u ** 2).sum(axis=2) * self.g_nodes * dt).sum(axis=1)
            abs_int = (np.sqrt((u ** 2).sum(axis=2)) * dt).sum(axis=1) ** 2
        out = {
            "f": self.payoff.realize(block),
            "x_T": x[:, -1],
            "mu_T": mu[:, -1],
            "cost": path_cost,
            "g_energy": g_energy,
            "abs_int": abs_int,
            "mu_sum": mu.sum(axis=0),
            "mu_sumsq": (mu ** 2).sum(axis=0),
        }
        kept = block.path_ids < self.keep
        if kept.any():
            out["traj"] = (block.path_ids[kept], mu[kept], u[kept], x[kept])
        return out


def _check_inputs(system, weight, payoff, grid, ensemble, riccati):
    if ensemble.grid is not grid and not np.array_equal(ensemble.grid.nodes, grid.nodes):
        raise ValueError("ensemble grid differs from the run grid")
    if ensemble.d != system.d:
        raise ValueError(f"ensemble noise dimension {ensemble.d} differs from system d={system.d}")
    if payoff.n != system.n:
        raise ValueError(f"target dimension {payoff.n} differs from state dimension {system.n}")
    payoff.validate(grid, system.d)
    if riccati is not None and riccati.grid is not grid and not np.array_equal(riccati.grid.nodes, grid.nodes):
        raise ValueError("Riccati cache was built on a different grid")


def _map_blocks(fn, ensemble, block_size, workers):
    starts = range(0, ensemble.M, block_size)

    def job(start):
        return fn(ensemble.block(start, min(start + block_size, ensemble.M)))

    if workers <= 1:
        return [job(s) for s in starts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, starts))


def replicate(system, weight, payoff, grid, ensemble, *, riccati=None, quad=None,
              keep=32, block_size=DEFAULT_BLOCK, workers=1, scheme="cell"):
    """Simulate the optimal replicating control over an ensemble.

    Paths are processed in blocks of fixed size; ``workers`` threads share
    the blocks and results are reduced in block order, so the output does
    not depend on the worker count. A prebuilt ``riccati`` cache may be
    supplied: it then drives mu_bar and the dual recursion, while the
    controls and their cost always use ``weight``.

    ``scheme`` selects the time discretisation, see the module docstring.
    """
    _check_inputs(system, weight, payoff, grid, ensemble, riccati)
    if riccati is None:
        riccati = riccati_build(system, weight, grid, quad)
    mu_bar = dual_init(riccati, payoff)
    ctx = _Context(riccati, weight, payoff, mu_bar, keep, scheme)
    parts = _map_blocks(ctx.run_block, ensemble, block_size, workers)

    cat = {k: np.concatenate([p[k] for p in parts]) for k in ("f", "x_T", "mu_T", "cost", "g_energy", "abs_int")}
    mu_sum = np.zeros_like(parts[0]["mu_sum"])
    mu_sumsq = np.zeros_like(mu_sum)
    for p in parts:
        mu_sum += p["mu_sum"]
        mu_sumsq += p["mu_sumsq"]
    traj = [p["traj"] for p in parts if "traj" in p]
    run = ReplicationRun(grid=grid, seed=ensemble.seed, mu_bar=mu_bar, mu_node_sum=mu_sum,
                         mu_node_sumsq=mu_sumsq, scheme=scheme, **cat)
    if traj:
        run.traj_ids = np.concatenate([t[0] for t in traj])
        run.traj_mu, run.traj_u, run.traj_x = (np.concatenate([t[j] for t in traj]) for j in (1, 2, 3))
    return run


def lagrangian(run, mu=None):
    """Monte Carlo ``L(u, mu) = 1/2 E int u' Gamma u + E mu'(f - x(T))``.

    ``mu`` defaults to the run's own terminal dual value. Returns
    ``(L, se, constraint_term, constraint_se)``.
    """
    mu = run.mu_T if mu is None else np.asarray(mu, dtype=float)
    if mu.shape != run.f.shape:
        raise ValueError("multiplier sample does not match the run's ensemble")
    constraint = (mu * (run.f - run.x_T)).sum(axis=1)
    L, L_se = mean_se(0.5 * run.cost + constraint)
    c, c_se = mean_se(constraint)
    return float(L), float(L_se), float(c), float(c_se)


def admissibility_report(run):
    """Finite-moment diagnostics for the simulated control."""
    e, e_se = mean_se(run.g_energy)
    a, a_se = mean_se(run.abs_int)
    return {
        "g_energy": float(e),
        "g_energy_se": float(e_se),
        "abs_integral_sq": float(a),
        "abs_integral_sq_se": float(a_se),
        "finite": bool(np.isfinite(e) and np.isfinite(a)),
    }


def _direction(rng, grid, n, d):
    """Random smooth adapted direction v_i = a(t_i) + D(t_i) w(t_i)."""
    k = np.arange(1, 4)
    phase = np.pi * np.outer(grid.nodes[:-1] / grid.T, k)
    ca = rng.normal(size=(3, n))
    cD = rng.normal(size=(3, n, d))
    drift = np.sin(phase) @ ca                               # (N, n)
    load = np.einsum("ik,knd->ind", np.cos(phase), cD)       # (N, n, d)
    return drift, load


def _apply_direction(direction, block):
    drift, load = direction
    return drift[None] + np.einsum("ind,bid->bin", load, block.w[:, :-1])


def _pairings(riccati, weight, scheme):
    """Matrices giving ``int u' Gamma v`` and ``int v' Gamma v`` on each
    cell for a direction v held constant per cell: returns ``(P, H, on_mu)``
    where the cross term is ``s_i' P_i v_i`` with ``s = mu`` if ``on_mu``
    else ``s = u``, and the quadratic term is ``v_i' H_i v_i``."""
    grid = riccati.grid
    if scheme == "cell":
        gint = weight.g_integral_remaining(grid.remaining[1:], grid.remaining[:-1])
        return riccati.terminal_map, gint[:, None, None] * weight.G, True
    if scheme != "left":
        raise ValueError(f"unknown scheme {scheme!r}")
    gam = weight.gamma_remaining(grid.remaining[:-1]) * grid.dt[:, None, None]
    return gam, gam, False


def _zero_replicating(v, terminal_map):
    """Adjust the last control so that sum_i W_i v_i = 0 on every path."""
    head = np.einsum("inm,bim->bn", terminal_map[:-1], v[:, :-1])
    v = v.copy()
    v[:, -1] = -np.linalg.solve(terminal_map[-1], head.T).T
    return v


def perturbation_optimality(system, weight, payoff, grid, ensemble, *, riccati=None,
                            n_dirs=20, eps=(-0.5, -0.1, 0.1, 0.5), seed=0,
                            block_size=DEFAULT_BLOCK, z=3.0, scheme="cell"):
    """Check cost(u + eps v) >= cost(u) for random adapted directions v that
    leave x(T) unchanged on every path.

    Returns one record per (direction, eps) with the mean cost increase,
    its standard error and a pass flag (increase >= -z SE).
    """
    _check_inputs(system, weight, payoff, grid, ensemble, riccati)
    if riccati is None:
        riccati = riccati_build(system, weight, grid)
    mu_bar = dual_init(riccati, payoff)
    rng = np.random.default_rng(seed)
    dirs = [_direction(rng, grid, system.n, system.d) for _ in range(n_dirs)]
    P, H, on_mu = _pairings(riccati, weight, scheme)

    def job(block):
        mu, _ = simulate_dual(riccati, payoff, block, mu_bar, scheme)
        s = mu[:, :-1] if on_mu else controls(riccati, mu, weight)
        cross, quad = [], []
        for dvec in dirs:
            v = _zero_replicating(_apply_direction(dvec, block), riccati.terminal_map)
            cross.append(np.einsum("bin,inm,bim->b", s, P, v))
            quad.append(np.einsum("bin,inm,bim->b", v, H, v))
        return np.array(cross), np.array(quad)

    parts = _map_blocks(job, ensemble, block_size, 1)
    cross = np.concatenate([p[0] for p in parts], axis=1)
    quad = np.concatenate([p[1] for p in parts], axis=1)
    records = []
    for j in range(n_dirs):
        for e in eps:
            diff = 2 * e * cross[j] + e * e * quad[j]
            m, se = mean_se(diff)
            scale = abs(e * e * quad[j].mean())
            records.append({
                "direction": j,
                "eps": float(e),
                "increase": float(m),
                "se": float(se),
                "ok": bool(m >= -z * se - 1e-12 * max(scale, 1e-300)),
            })
    return records


def saddle_check(system, weight, payoff, grid, ensemble, *, riccati=None, n_dirs=10,
                 eps=0.25, seed=0, block_size=DEFAULT_BLOCK, z=3.0, scheme="cell"):
    """Saddle inequalities ``L(u*, mu) <= L(u*, mu*) <= L(u, mu*)``.

    Left side: random square-integrable terminal multipliers mu. Right side:
    random adapted perturbations ``u = u* + eps v`` (not constrained to
    keep x(T)). Each check passes within ``z`` standard errors.
    """
    _check_inputs(system, weight, payoff, grid, ensemble, riccati)
    if riccati is None:
        riccati = riccati_build(system, weight, grid)
    mu_bar = dual_init(riccati, payoff)
    rng = np.random.default_rng(seed)
    dirs = [_direction(rng, grid, system.n, system.d) for _ in range(n_dirs)]
    mults = [(rng.normal(size=system.n), rng.normal(size=(system.n, system.d))) for _ in range(n_dirs)]
    P, H, on_mu = _pairings(riccati, weight, scheme)

    def job(block):
        mu, _ = simulate_dual(riccati, payoff, block, mu_bar, scheme)
        u = controls(riccati, mu, weight)
        if scheme == "cell":
            x = integrate_dual_state(riccati, mu)
        else:
            x = integrate_state(system, u, grid, riccati.step_exp, riccati.step_input)
        s = mu[:, :-1] if on_mu else u
        gap = payoff.realize(block) - x[:, -1]
        left, right = [], []
        for (c0, C), dvec in zip(mults, dirs):
            zeta = c0 + block.w[:, -1] @ C.T
            left.append((zeta * gap).sum(axis=1))
            v = _apply_direction(dvec, block)
            moved = np.einsum("inm,bim->bn", riccati.terminal_map, v)
            right.append(eps * np.einsum("bin,inm,bim->b", s, P, v)
                         + 0.5 * eps ** 2 * np.einsum("bin,inm,bim->b", v, H, v)
                         - eps * (mu[:, -1] * moved).sum(axis=1))
        return np.array(left), np.array(right)

    parts = _map_blocks(job, ensemble, block_size, 1)
    left = np.concatenate([p[0] for p in parts], axis=1)
    right = np.concatenate([p[1] for p in parts], axis=1)
    out = {"multiplier_side": [], "control_side": []}
    for j in range(n_dirs):
        m, se = mean_se(left[j])
        out["multiplier_side"].append({"delta": float(m), "se": float(se), "ok": bool(m <= z * se + 1e-12)})
        m, se = mean_se(right[j])
        out["control_side"].append({"delta": float(m), "se": float(se), "ok": bool(m >= -z * se - 1e-12)})
    return out

