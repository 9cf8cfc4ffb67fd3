"""Time grids, reproducible Wiener ensembles and driftless GBM markets."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import integrate

__all__ = [
    "TimeGrid",
    "build_grid",
    "concat_grids",
    "PathEnsemble",
    "PathBlock",
    "sample_ensemble",
    "Market",
    "simulate_gbm",
    "write_increments_csv",
]


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Nodes ``0 = t_0 < ... < t_N = T`` together with the time remaining
    ``T - t_i``, stored separately so that the last cells of strongly
    graded grids keep their relative precision."""

    nodes: np.ndarray
    remaining: np.ndarray
    gamma: float | None = None

    def __post_init__(self):
        if self.nodes.shape != self.remaining.shape or self.nodes.size < 2:
            raise ValueError("grid needs at least two nodes")
        if np.any(np.diff(self.nodes) <= 0) or np.any(np.diff(self.remaining) >= 0):
            raise ValueError("grid nodes must be strictly increasing")
        if self.remaining[-1] != 0.0:
            raise ValueError("last node must be the terminal time")

    @property
    def N(self):
        return self.nodes.size - 1

    @property
    def T(self):
        return float(self.nodes[-1])

    @cached_property
    def dt(self):
        return self.remaining[:-1] - self.remaining[1:]

    def __len__(self):
        return self.nodes.size


def build_grid(N, T, gamma=None, weight=None):
    """Graded grid ``t_i = T (1 - (1 - i/N)**gamma)``.

    ``gamma`` defaults to ``1 / (1 - weight.alpha)`` when a penalty weight
    is given and to 1 (uniform) otherwise.
    """
    if int(N) != N or N < 2:
        raise ValueError(f"grid needs N >= 2 steps, got {N}")
    N = int(N)
    if not T > 0:
        raise ValueError("T must be positive")
    if gamma is None:
        gamma = 1.0 / (1.0 - weight.alpha) if weight is not None else 1.0
    if gamma < 1:
        raise ValueError(f"grading exponent must be >= 1, got {gamma}")
    frac = (N - np.arange(N + 1)) / N
    remaining = T * frac ** gamma
    nodes = T - remaining
    nodes[-1] = T
    remaining[-1] = 0.0
    if np.any(np.diff(nodes) <= 0):
        raise ValueError(f"N={N} steps with grading {gamma:g} put adjacent nodes closer than double "
                         "precision resolves; lower N or the grading exponent")
    return TimeGrid(nodes=nodes, remaining=remaining, gamma=float(gamma))


def concat_grids(grids):
    """Glue grids end to end: the k-th grid is shifted to start where the
    previous one ended. Time remaining is measured to the final end."""
    nodes, pieces = [np.zeros(1)], []
    offset = 0.0
    for g in grids:
        nodes.append(offset + g.nodes[1:])
        pieces.append(g)
        offset += g.T
    nodes = np.concatenate(nodes)
    # remaining time: tail of each piece exact, plus later pieces' lengths
    rem = []
    after = sum(g.T for g in pieces)
    for g in pieces:
        after -= g.T
        rem.append(g.remaining[:-1] + after)
    rem.append(np.zeros(1))
    nodes[-1] = offset
    return TimeGrid(nodes=nodes, remaining=np.concatenate(rem), gamma=None)


def _path_stream(seed, path_id):
    # Philox counter word 2 carries the path id: streams never overlap.
    return np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, path_id, 0]))


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """``M`` Wiener paths of dimension ``d`` on ``grid``.

    Increments are generated lazily from a counter-based stream keyed by
    ``(seed, path_id)``, so any subset of paths can be produced in any
    order (or in parallel) with identical results.
    """

    grid: TimeGrid
    M: int
    d: int
    seed: int
    step_offset: int = 0  # first step of the parent stream this view exposes

    def path_increments(self, path_id):
        return self.block(path_id, path_id + 1).dw[0]

    def block(self, start, stop):
        if not 0 <= start < stop <= self.M:
            raise IndexError(f"path range [{start}, {stop}) outside [0, {self.M})")
        N, d, j0 = self.grid.N, self.d, self.step_offset
        sd = np.sqrt(self.grid.dt)
        dw = np.empty((stop - start, N, d))
        for k, pid in enumerate(range(start, stop)):
            z = _path_stream(self.seed, pid).standard_normal((j0 + N) * d)
            dw[k] = z[j0 * d:].reshape(N, d)
        dw *= sd[None, :, None]
        return PathBlock(grid=self.grid, dw=dw, first_path=start)

    def blocks(self, block_size):
        for start in range(0, self.M, block_size):
            yield self.block(start, min(start + block_size, self.M))

    def increments(self):
        """All increments, shape ``(M, N, d)``."""
        return self.block(0, self.M).dw

    def window(self, step_start, step_stop, grid):
        """View of steps ``[step_start, step_stop)`` as an ensemble on the
        local ``grid`` (time origin shifted to the window start)."""
        if grid.N != step_stop - step_start:
            raise ValueError("window grid does not match the step range")
        if self.step_offset or step_stop > self.grid.N:
            raise ValueError("windows are taken from a full ensemble")
        full = np.sqrt(self.grid.dt[step_start:step_stop])
        if not np.allclose(full, np.sqrt(grid.dt), rtol=1e-9, atol=0):
            raise ValueError("window grid spacing differs from the parent grid")
        return _WindowEnsemble(grid=grid, M=self.M, d=self.d, seed=self.seed,
                               step_offset=step_start, parent=self)


@dataclass(frozen=True, eq=False)
class _WindowEnsemble(PathEnsemble):
    parent: PathEnsemble = field(default=None, repr=False)

    def block(self, start, stop):
        j0, N = self.step_offset, self.grid.N
        dw = self.parent.block(start, stop).dw[:, j0:j0 + N]
        return PathBlock(grid=self.grid, dw=dw, first_path=start)


def sample_ensemble(grid, M, d=1, seed=0):
    """Seeded ensemble of ``M`` paths; see :class:`PathEnsemble`."""
    if M < 1 or d < 1:
        raise ValueError("need M >= 1 and d >= 1")
    return PathEnsemble(grid=grid, M=int(M), d=int(d), seed=int(seed))


@dataclass(eq=False)
class PathBlock:
    """A contiguous run of paths with their increments and derived state."""

    grid: TimeGrid
    dw: np.ndarray  # (B, N, d)
    first_path: int = 0
    _prices: dict = field(default_factory=dict, repr=False)

    @property
    def size(self):
        return self.dw.shape[0]

    @property
    def path_ids(self):
        return np.arange(self.first_path, self.first_path + self.size)

    @cached_property
    def w(self):
        """Wiener values at the nodes, shape ``(B, N+1, d)``."""
        B, N, d = self.dw.shape
        out = np.zeros((B, N + 1, d))
        np.cumsum(self.dw, axis=1, out=out[:, 1:])
        return out

    def prices(self, market):
        """Market prices at the nodes, cached per market object."""
        key = id(market)
        if key not in self._prices:
            self._prices[key] = (market, market.simulate(self))
        return self._prices[key][1]


@dataclass(frozen=True, eq=False)
class Market:
    """Driftless GBM ``dS = sigma(t) S dw_k`` for Wiener component ``k``.

    ``sigma`` is a positive constant or a vectorised deterministic function
    of time bounded in ``[sigma_floor, sigma_cap]``.
    """

    S0: float
    sigma: float | object = 0.2
    component: int = 0
    sigma_floor: float = 1e-8
    sigma_cap: float = 10.0

    def __post_init__(self):
        if not self.S0 > 0:
            raise ValueError("S0 must be positive")
        if not callable(self.sigma):
            self._check_sigma(np.asarray(self.sigma, dtype=float))

    def _check_sigma(self, values):
        if np.any(~np.isfinite(values)) or np.any(values < self.sigma_floor) or np.any(values > self.sigma_cap):
            raise ValueError(
                f"volatility must stay within [{self.sigma_floor}, {self.sigma_cap}]"
            )

    def sigma_at(self, t):
        t = np.asarray(t, dtype=float)
        if callable(self.sigma):
            out = np.broadcast_to(np.asarray(self.sigma(t), dtype=float), t.shape).copy()
            self._check_sigma(out)
            return out
        return np.full(t.shape, float(self.sigma))

    def variance(self, t0, t1):
        """Integrated variance ``int_{t0}^{t1} sigma^2`` (broadcasts)."""
        t0, t1 = np.broadcast_arrays(np.asarray(t0, dtype=float), np.asarray(t1, dtype=float))
        if not callable(self.sigma):
            return float(self.sigma) ** 2 * (t1 - t0)
        out = np.empty(t0.shape)
        for idx in np.ndindex(t0.shape):
            out[idx] = integrate.quad(lambda s: float(self.sigma_at(s)) ** 2, t0[idx], t1[idx])[0]
        return out

    def simulate(self, block):
        """Log-exact prices ``S(t_i)`` for a :class:`PathBlock`, ``(B, N+1)``."""
        grid = block.grid
        if callable(self.sigma):
            # per-step rms volatility keeps every log step exact in law
            var = self.variance(grid.nodes[:-1], grid.nodes[1:])
            sig = np.sqrt(var / grid.dt)
        else:
            sig = np.full(grid.N, float(self.sigma))
        dw = block.dw[:, :, self.component]
        log_steps = sig[None, :] * dw - 0.5 * (sig ** 2 * grid.dt)[None, :]
        S = np.empty((block.size, grid.N + 1))
        S[:, 0] = 0.0
        np.cumsum(log_steps, axis=1, out=S[:, 1:])
        return self.S0 * np.exp(S)


def simulate_gbm(ensemble, S0, sigma):
    """Prices for every path of ``ensemble``, shape ``(M, N+1)``."""
    market = Market(S0=S0, sigma=sigma)
    return market.simulate(ensemble.block(0, ensemble.M))


def write_increments_csv(ensemble, path, block_size=1024):
    """One row per (path, step): ``path_id, i, t_i, dw_0, ..., dw_{d-1}``."""
    grid = ensemble.grid
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["path_id", "i", "t_i"] + [f"dw_{k}" for k in range(ensemble.d)])
        for blk in ensemble.blocks(block_size):
            for pid, dw in zip(blk.path_ids, blk.dw):
                for i in range(grid.N):
                    out.writerow([pid, i, repr(float(grid.nodes[i]))] + [repr(float(x)) for x in dw[i]])
