"""Exact discrete-time ground truth on a binomial lattice.

The adapted, equality-constrained LQ problem is solved directly as a dense
KKT system, with no use of the continuous-time formulas. Decisions live on
the lattice nodes of levels ``0 .. N-1``; a decision at level ``i`` is
shared by the ``2**(N-i)`` paths passing through that node.

Paths are numbered ``0 .. 2**N - 1``. Step ``i`` moves up (``+sqrt(dt_i)``)
when bit ``N-1-i`` of the path number is set, so the ancestor of path ``p``
at level ``i`` is ``p >> (N - i)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .kernels import Deterministic, LinearWiener
from .mathcore import mat_exp
from .sde import TimeGrid, build_grid

__all__ = [
    "MAX_DEPTH",
    "RankDeficientError",
    "Lattice",
    "build_lattice",
    "OracleProblem",
    "OracleSolution",
    "make_problem",
    "solve_constrained_lq",
    "solve_soft_penalty",
    "random_feasible_costs",
    "formula_control_cost",
    "lattice_grid",
    "oracle_vs_formula",
]

MAX_DEPTH = 12


class RankDeficientError(np.linalg.LinAlgError):
    """The stacked terminal constraints cannot all be met."""


@dataclass(frozen=True, eq=False)
class Lattice:
    """Binomial tree of depth ``N`` on the steps of a time grid."""

    grid: object
    N: int

    @property
    def dt(self):
        return self.grid.dt

    @property
    def n_paths(self):
        return 1 << self.N

    @property
    def n_decisions(self):
        """Number of decision nodes, levels ``0 .. N-1``."""
        return (1 << self.N) - 1

    def level_size(self, i):
        return 1 << i

    def ancestors(self, paths, level):
        return np.asarray(paths) >> (self.N - level)

    def increments(self):
        """Per-path increments ``xi_i = +-sqrt(dt_i)``, shape ``(2**N, N)``."""
        p = np.arange(self.n_paths)[:, None]
        bits = (p >> (self.N - 1 - np.arange(self.N))[None, :]) & 1
        return (2 * bits - 1) * np.sqrt(self.dt)[None, :]

    def walk(self, level):
        """Walk value ``w(t_level)`` at each node of ``level``."""
        if level == 0:
            return np.zeros(1)
        leaves = self.increments()[:, :level].sum(axis=1)
        return leaves[:: 1 << (self.N - level)]


def lattice_grid(depth, T, gamma=None, weight=None):
    """Graded grid for a lattice of ``depth`` steps; unlike
    :func:`~lqreplication.sde.build_grid` a single step is allowed."""
    if depth >= 2:
        return build_grid(depth, T, gamma=gamma, weight=weight)
    if depth != 1:
        raise ValueError("lattice needs at least one step")
    return TimeGrid(nodes=np.array([0.0, float(T)]), remaining=np.array([float(T), 0.0]), gamma=gamma)


def build_lattice(grid, N=None):
    """Lattice over the ``N`` steps of ``grid`` (``N`` defaults to grid.N).

    Depth is capped at :data:`MAX_DEPTH` since the tree has ``2**N`` paths.
    """
    N = grid.N if N is None else int(N)
    if N != grid.N:
        raise ValueError(f"depth {N} does not match the grid's {grid.N} steps")
    if N < 1:
        raise ValueError("lattice needs at least one step")
    if N > MAX_DEPTH:
        raise ValueError(f"lattice depth {N} exceeds the cap of {MAX_DEPTH}")
    return Lattice(grid=grid, N=N)


@dataclass(frozen=True, eq=False)
class OracleProblem:
    """Discrete problem: minimise ``E sum_i u_i' Gamma_i u_i dt_i`` subject
    to ``x_{i+1} = x_i + (A x_i + b u_i) dt_i``, ``x_0 = a`` and ``x_N = f``
    on every path.

    ``target`` holds one row per path, shape ``(2**N, n)``.
    """

    A: np.ndarray
    b: np.ndarray
    a: np.ndarray
    lattice: Lattice
    gamma: np.ndarray  # (N, n, n)
    target: np.ndarray  # (2**N, n)

    @property
    def n(self):
        return self.a.size

    @property
    def N(self):
        return self.lattice.N


def make_problem(system, weight, lattice, target, match_gamma=True):
    """Assemble an :class:`OracleProblem`.

    Parameters
    ----------
    system : SystemSpec
    weight : PenaltyWeight
    lattice : Lattice
    target : array_like or callable
        Per-path targets ``(2**N, n)``, or one row per level-``N-1`` node
        ``(2**(N-1), n)``, or a callable ``target(lattice)`` returning either.
    match_gamma : bool
        If true each cell uses the constant ``dt_i G / int_cell g^{-1}``, which
        has the same inverse integral as the continuous weight over the
        cell; otherwise ``Gamma(t_i)`` is sampled at the left node.
    """
    grid = lattice.grid
    if not np.isclose(grid.T, system.T, rtol=1e-12, atol=0):
        raise ValueError("lattice grid and system must share the terminal time")
    if weight.n != system.n:
        raise ValueError("weight dimension differs from the state dimension")
    if match_gamma:
        ginv = weight.g_inv_integral_remaining(grid.remaining[1:], grid.remaining[:-1])
        gamma = (grid.dt / ginv)[:, None, None] * weight.G
    else:
        gamma = weight.gamma_remaining(grid.remaining[:-1])
    f = target(lattice) if callable(target) else target
    f = np.asarray(f, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape == (lattice.n_paths // 2, system.n):
        f = np.repeat(f, 2, axis=0)
    elif f.shape == (1, system.n):
        f = np.repeat(f, lattice.n_paths, axis=0)
    if f.shape != (lattice.n_paths, system.n):
        raise ValueError(f"target must have shape ({lattice.n_paths}, {system.n}), got {f.shape}")
    return OracleProblem(A=np.asarray(system.A), b=np.asarray(system.b), a=np.asarray(system.a),
                         lattice=lattice, gamma=gamma, target=f)


@dataclass
class OracleSolution:
    """Exact minimiser of an :class:`OracleProblem`.

    ``u[i]`` holds the level-``i`` decisions, shape ``(2**i, n)``;
    ``multipliers`` are the KKT multipliers of the constraints at the
    level-``N-1`` nodes, and ``mu`` rescales them to conditional terms,
    ``mu_q = -lambda_q / (2 P(q))``.
    """

    u: list
    cost: float
    kkt_residual: float
    constraint_residual: float
    multipliers: np.ndarray
    mu: np.ndarray


def _terminal_blocks(prob):
    """``x_N = x_free + sum_i Phi_{i+1} b dt_i u_i`` with Euler factors."""
    n, N, dt = prob.n, prob.N, prob.lattice.dt
    step = np.eye(n)[None] + prob.A[None] * dt[:, None, None]
    tail = np.empty((N + 1, n, n))
    tail[N] = np.eye(n)
    for i in range(N - 1, -1, -1):
        tail[i] = tail[i + 1] @ step[i]
    blocks = tail[1:] @ prob.b * dt[:, None, None]
    return tail[0] @ prob.a, blocks


def _offset(i, n):
    return n * ((1 << i) - 1)


def _assemble(prob):
    """Cost diagonal blocks, constraint matrix over level-``N-1`` nodes and
    the right-hand side."""
    n, N, lat = prob.n, prob.N, prob.lattice
    m = 1 << (N - 1)
    x_free, blocks = _terminal_blocks(prob)
    C = np.zeros((n * m, n * lat.n_decisions))
    q = np.arange(m)
    for i in range(N):
        anc = q >> (N - 1 - i)
        for r in range(n):
            rows = n * q + r
            for c in range(n):
                cols = _offset(i, n) + n * anc + c
                C[rows, cols] = blocks[i, r, c]
    H = [2.0 ** -i * prob.gamma[i] * lat.dt[i] for i in range(N)]
    rhs = (prob.target[::2] - x_free).ravel()
    return H, C, rhs


def _cost_matrix(prob, H):
    n, lat = prob.n, prob.lattice
    K = np.zeros((n * lat.n_decisions, n * lat.n_decisions))
    for i in range(prob.N):
        for k in range(1 << i):
            s = _offset(i, n) + n * k
            K[s:s + n, s:s + n] = H[i]
    return K


def _check_measurable(prob):
    f = prob.target
    jump = np.abs(f[0::2] - f[1::2]).max(initial=0.0)
    scale = max(1.0, np.abs(f).max(initial=0.0))
    if jump > 1e-12 * scale:
        m, full = prob.n << (prob.N - 1), prob.n << prob.N
        raise RankDeficientError(
            f"target differs between sibling leaves (by up to {jump:.3g}); the {full} stacked "
            f"path constraints have rank {m}, so x_N = f cannot hold on every path"
        )


def _split_u(vec, prob):
    n = prob.n
    return [vec[_offset(i, n):_offset(i + 1, n)].reshape(1 << i, n) for i in range(prob.N)]


def solve_constrained_lq(prob):
    """Solve the discrete problem by one dense symmetric KKT solve.

    Raises
    ------
    RankDeficientError
        If the target is not fixed by the level-``N-1`` history, or the
        constraint matrix lacks full row rank.
    """
    _check_measurable(prob)
    H, C, rhs = _assemble(prob)
    K = _cost_matrix(prob, H)
    rank = np.linalg.matrix_rank(C)
    if rank < C.shape[0]:
        raise RankDeficientError(f"constraint matrix has rank {rank} < {C.shape[0]} rows")
    nv, nc = C.shape[1], C.shape[0]
    kkt = np.zeros((nv + nc, nv + nc))
    kkt[:nv, :nv] = 2.0 * K
    kkt[:nv, nv:] = C.T
    kkt[nv:, :nv] = C
    sol = linalg.solve(kkt, np.concatenate([np.zeros(nv), rhs]), assume_a="sym")
    u, lam = sol[:nv], sol[nv:]
    stationarity = np.abs(2.0 * K @ u + C.T @ lam).max(initial=0.0)
    primal = np.abs(C @ u - rhs).max(initial=0.0)
    prob_q = 2.0 ** -(prob.N - 1)
    lam = lam.reshape(-1, prob.n)
    return OracleSolution(
        u=_split_u(u, prob),
        cost=float(u @ K @ u),
        kkt_residual=float(max(stationarity, primal)),
        constraint_residual=float(primal),
        multipliers=lam,
        mu=-lam / (2.0 * prob_q),
    )


def _leaf_state(prob, u_vec):
    """Per-path terminal state for stacked decisions ``u_vec``."""
    x_free, blocks = _terminal_blocks(prob)
    us = _split_u(u_vec, prob)
    paths = np.arange(prob.lattice.n_paths)
    x = np.broadcast_to(x_free, (paths.size, prob.n)).copy()
    for i in range(prob.N):
        x += us[i][prob.lattice.ancestors(paths, i)] @ blocks[i].T
    return x


def solve_soft_penalty(prob, penalty=1e8):
    """Minimise ``cost + penalty * E|x_N - f|^2`` with no hard constraint.

    Works for any per-path target. Solved as a stacked least-squares
    problem. Returns ``(u, cost, mismatch)`` with ``mismatch = E|x_N - f|^2``.
    """
    n, lat = prob.n, prob.lattice
    H, C, _ = _assemble(prob)
    K = _cost_matrix(prob, H)
    x_free, _ = _terminal_blocks(prob)
    # Per-path constraint rows: each leaf uses its parent's row of C.
    paths = np.arange(lat.n_paths)
    rows = (n * (paths >> 1))[:, None] + np.arange(n)[None, :]
    Cp = C[rows.ravel()]
    r = (prob.target - x_free).ravel()
    scale = np.sqrt(penalty / lat.n_paths)
    L = np.linalg.cholesky(K)
    design = np.vstack([L.T, scale * Cp])
    u, *_ = linalg.lstsq(design, np.concatenate([np.zeros(K.shape[0]), scale * r]))
    mismatch = float(np.mean(((_leaf_state(prob, u) - prob.target) ** 2).sum(axis=1)))
    return _split_u(u, prob), float(u @ K @ u), mismatch


def random_feasible_costs(prob, count=20, seed=0, scale=1.0):
    """Costs of ``count`` random feasible controls: a random vector is
    projected onto the constraint set by a least-norm correction."""
    _check_measurable(prob)
    H, C, rhs = _assemble(prob)
    K = _cost_matrix(prob, H)
    rng = np.random.default_rng(seed)
    pinv = np.linalg.pinv(C)
    out = []
    for _ in range(count):
        z = scale * rng.standard_normal(C.shape[1])
        u = z - pinv @ (C @ z - rhs)
        out.append(float(u @ K @ u))
    return np.array(out)


def _proxy_target(payoff, lattice):
    """Level-``N-1`` stand-in for a continuous target: ``w(T)`` is replaced
    by ``w(t_{N-1})``."""
    if isinstance(payoff, Deterministic):
        return np.broadcast_to(payoff.f0, (lattice.n_paths // 2, payoff.n)).copy()
    if isinstance(payoff, LinearWiener):
        if payoff.C.shape[1] != 1:
            raise ValueError("the binomial lattice carries one Wiener component")
        w = lattice.walk(lattice.N - 1)
        return payoff.c0[None, :] + w[:, None] * payoff.C[:, 0][None, :]
    raise ValueError(f"no lattice proxy for {type(payoff).__name__} targets")


def _proxy_kernel(payoff, lattice):
    """Kernel of the proxy target at each step, shape ``(N, n)``."""
    N = lattice.N
    if isinstance(payoff, Deterministic):
        return np.zeros((N, payoff.n))
    k = np.repeat(payoff.C[:, 0][None, :], N, axis=0)
    k[-1] = 0.0
    return k


def formula_control_cost(prob, riccati, payoff, scheme="cell"):
    """Lattice cost of the continuous-time optimal control evaluated at the
    lattice nodes, after the last decision is corrected so that ``x_N = f``
    on every path.

    Returns ``(cost, max_correction)``.
    """
    lat, n = prob.lattice, prob.n
    if riccati.grid.N != lat.N or not np.allclose(riccati.grid.remaining, lat.grid.remaining, rtol=1e-12, atol=0):
        raise ValueError("Riccati cache and lattice use different grids")
    from .replicator import dual_init

    mu_bar = dual_init(riccati, payoff)
    gain = riccati.dual_gain(scheme)
    kern = _proxy_kernel(payoff, lat)
    xi = lat.increments()
    mu = np.broadcast_to(mu_bar, (lat.n_paths, n)).copy()
    sys_A = prob.A
    x = np.broadcast_to(prob.a, (lat.n_paths, n)).copy()
    us = []
    for i in range(lat.N):
        E = mat_exp(sys_A.T, lat.grid.remaining[i])
        gi = np.linalg.inv(prob.gamma[i])
        u_paths = mu @ (gi @ prob.b.T @ E).T
        if i == lat.N - 1:
            # u_{N-1} chosen to land on the target
            step = np.eye(n) + sys_A * lat.dt[i]
            need = prob.target - x @ step.T
            fixed = np.linalg.solve(prob.b * lat.dt[i], need.T).T
            correction = float(np.abs(fixed - u_paths).max(initial=0.0))
            u_paths = fixed
        us.append(u_paths[:: 1 << (lat.N - i)])
        x = x + (x @ sys_A.T + u_paths @ prob.b.T) * lat.dt[i]
        mu = mu + (gain[i] @ kern[i])[None, :] * xi[:, i:i + 1]
    cost = sum(2.0 ** -i * np.einsum("kn,nm,km->", us[i], prob.gamma[i], us[i]) * lat.dt[i]
               for i in range(lat.N))
    return float(cost), correction


def oracle_vs_formula(system, weight, payoff, depth, *, gamma=None, match_gamma=True,
                      quad=None, closed_form=None):
    """Compare the lattice optimum at one depth with the continuous optimum.

    The continuous target ``payoff`` (deterministic or linear in ``w(T)``)
    is replaced on the lattice by its level-``N-1`` proxy. Returns a dict
    with ``depth``, ``oracle_cost``, ``formula_cost``, ``closed_form_J``,
    ``gap`` and ``kkt_residual``.
    """
    from .replicator import min_cost_closed_form, riccati_build

    if system.n != 1 or system.d != 1:
        raise ValueError("oracle comparison runs on scalar scenarios (n = d = 1)")
    if depth > MAX_DEPTH:
        raise ValueError(f"lattice depth {depth} exceeds the cap of {MAX_DEPTH}")
    grid = lattice_grid(depth, system.T, gamma=gamma, weight=None if gamma is not None else weight)
    lat = build_lattice(grid)
    prob = make_problem(system, weight, lat, _proxy_target(payoff, lat), match_gamma=match_gamma)
    sol = solve_constrained_lq(prob)
    ric = riccati_build(system, weight, grid, quad)
    formula, _ = formula_control_cost(prob, ric, payoff)
    J = min_cost_closed_form(ric, payoff) if closed_form is None else closed_form
    return {
        "depth": int(depth),
        "oracle_cost": sol.cost,
        "formula_cost": formula,
        "closed_form_J": float(J),
        "gap": abs(sol.cost - float(J)),
        "kkt_residual": sol.kkt_residual,
    }
