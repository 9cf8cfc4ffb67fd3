"""Terminal targets f, their means and martingale-representation kernels.

Every family exposes

* ``mean()`` - E f,
* ``realize(block)`` - pathwise f on a :class:`~lqreplication.sde.PathBlock`,
* ``kernel(block)`` - k_f(t_i) at the nodes i < N, shape ``(B, N, n, d)``,
* ``second_moment(t)`` - E[k_f(t) k_f(t)^T], shape ``(len(t), n, n)``.

Market-driven families are scalar and live on the Wiener component the
market is driven by; under the pricing measure the price itself is a
martingale, so the Black-Scholes formula is used in its zero-drift form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, owens_t

from .sde import Market

__all__ = [
    "BSQuote",
    "bs_price_delta",
    "Payoff",
    "Deterministic",
    "LinearWiener",
    "GBMTerminal",
    "EuropeanCall",
    "AsianAverage",
    "LognormalIncrement",
    "payoff_mean",
    "kernel_eval",
    "validate_kf",
    "regression_check",
]


@dataclass(frozen=True)
class BSQuote:
    price: np.ndarray
    delta: np.ndarray


def _black(x, K, total_sd):
    """Zero-drift call price and delta for total deviation ``sd > 0``."""
    d1 = (np.log(x / K) + 0.5 * total_sd ** 2) / total_sd
    d2 = d1 - total_sd
    return x * ndtr(d1) - K * ndtr(d2), ndtr(d1)


def bs_price_delta(x, K, t, T, sigma_bar):
    """Call price H(x, t) and delta under a martingale price.

    ``sigma_bar`` is the root-mean-square volatility over ``[t, T]``.
    """
    x, K, t, T, sigma_bar = (np.asarray(v, dtype=float) for v in (x, K, t, T, sigma_bar))
    if np.any(x <= 0) or np.any(K <= 0):
        raise ValueError("price and strike must be positive")
    if np.any(t >= T):
        raise ValueError("quote requires t < T")
    if np.any(sigma_bar <= 0):
        raise ValueError("volatility must be positive")
    price, delta = _black(x, K, sigma_bar * np.sqrt(T - t))
    return BSQuote(price=price, delta=delta)


class Payoff:
    """Base class for terminal targets; see the module docstring."""

    n = 1

    def mean(self):
        raise NotImplementedError

    def realize(self, block):
        raise NotImplementedError

    def kernel(self, block):
        raise NotImplementedError

    def kernel_at(self, block, i):
        if not 0 <= i < block.grid.N:
            raise ValueError(f"kernel needs a node before T, got index {i}")
        return self.kernel(block)[:, i]

    def second_moment(self, t):
        raise NotImplementedError(f"{type(self).__name__} has no closed-form kernel moment")

    def validate(self, grid, d):
        """Check compatibility with a grid and noise dimension."""

    def _zeros(self, block):
        B, N, d = block.dw.shape
        return np.zeros((B, N, self.n, d))


@dataclass(frozen=True, eq=False)
class Deterministic(Payoff):
    f0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "f0", np.atleast_1d(np.asarray(self.f0, dtype=float)))

    @property
    def n(self):
        return self.f0.size

    def mean(self):
        return self.f0.copy()

    def realize(self, block):
        return np.broadcast_to(self.f0, (block.size, self.n)).copy()

    def kernel(self, block):
        return self._zeros(block)

    def second_moment(self, t):
        return np.zeros((np.size(t), self.n, self.n))


@dataclass(frozen=True, eq=False)
class LinearWiener(Payoff):
    """f = c0 + C w(T)."""

    c0: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        c0 = np.atleast_1d(np.asarray(self.c0, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if C.shape[0] != c0.size:
            raise ValueError("C must have one row per target component")
        object.__setattr__(self, "c0", c0)
        object.__setattr__(self, "C", C)

    @property
    def n(self):
        return self.c0.size

    def validate(self, grid, d):
        if self.C.shape[1] != d:
            raise ValueError(f"C has {self.C.shape[1]} columns but the noise has dimension {d}")

    def mean(self):
        return self.c0.copy()

    def realize(self, block):
        return self.c0 + block.w[:, -1] @ self.C.T

    def kernel(self, block):
        B, N, _ = block.dw.shape
        return np.broadcast_to(self.C, (B, N) + self.C.shape).copy()

    def second_moment(self, t):
        return np.broadcast_to(self.C @ self.C.T, (np.size(t), self.n, self.n)).copy()


class _MarketPayoff(Payoff):
    def validate(self, grid, d):
        if self.market.component >= d:
            raise ValueError("market component exceeds the noise dimension")
        T = getattr(self, "T", None)
        if T is not None and not np.isclose(T, grid.T, rtol=1e-12, atol=0):
            raise ValueError(f"payoff horizon {T} differs from the grid horizon {grid.T}")

    def _embed(self, block, k):
        """Place the scalar kernel ``k`` (B, N) in the market's column."""
        out = self._zeros(block)
        out[:, :, 0, self.market.component] = k
        return out

    def _moments(self, t):
        """E S(t)^2 and sigma(t)^2 as arrays."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        m = self.market
        return m.S0 ** 2 * np.exp(m.variance(0.0, t)), m.sigma_at(t) ** 2


@dataclass(frozen=True, eq=False)
class GBMTerminal(_MarketPayoff):
    """f = c S(T)."""

    c: float
    market: Market

    def mean(self):
        return np.array([self.c * self.market.S0])

    def realize(self, block):
        return self.c * block.prices(self.market)[:, -1:]

    def kernel(self, block):
        S = block.prices(self.market)[:, :-1]
        sig = self.market.sigma_at(block.grid.nodes[:-1])
        return self._embed(block, self.c * sig * S)

    def second_moment(self, t):
        ES2, sig2 = self._moments(t)
        return (self.c ** 2 * sig2 * ES2)[:, None, None]


@dataclass(frozen=True, eq=False)
class EuropeanCall(_MarketPayoff):
    """f = c max(S(T) - K, 0)."""

    c: float
    K: float
    market: Market
    T: float

    def __post_init__(self):
        if not self.K > 0 or not self.T > 0:
            raise ValueError("strike and horizon must be positive")

    def quote(self, x, t):
        """Price and delta with the volatility averaged over [t, T]."""
        t = np.asarray(t, dtype=float)
        sigma_bar = np.sqrt(self.market.variance(t, self.T) / (self.T - t))
        return bs_price_delta(x, self.K, t, self.T, sigma_bar)

    def mean(self):
        return np.array([self.c * float(self.quote(self.market.S0, 0.0).price)])

    def realize(self, block):
        S_T = block.prices(self.market)[:, -1:]
        return self.c * np.maximum(S_T - self.K, 0.0)

    def kernel(self, block):
        grid = block.grid
        S = block.prices(self.market)[:, :-1]
        total_sd = np.sqrt(self.market.variance(grid.nodes[:-1], self.T))
        _, delta = _black(S, self.K, total_sd[None, :])
        sig = self.market.sigma_at(grid.nodes[:-1])
        return self._embed(block, self.c * delta * sig * S)

    def second_moment(self, t):
        # E[S^2 Phi(d1)^2]: tilt by S^2, then Phi(m + beta Z)^2 has the
        # bivariate-normal mean Phi2(h, h; rho) = Phi(h) - 2 T(h, a).
        t = np.atleast_1d(np.asarray(t, dtype=float))
        m = self.market
        va = m.variance(0.0, t)
        vb = m.variance(t, self.T)
        sb = np.sqrt(vb)
        mid = (np.log(m.S0 / self.K) + 1.5 * va + 0.5 * vb) / sb
        beta2 = va / vb
        h = mid / np.sqrt(1.0 + beta2)
        phi2 = ndtr(h) - 2.0 * owens_t(h, 1.0 / np.sqrt(1.0 + 2.0 * beta2))
        ES2, sig2 = self._moments(t)
        return (self.c ** 2 * sig2 * ES2 * phi2)[:, None, None]


@dataclass(frozen=True, eq=False)
class AsianAverage(_MarketPayoff):
    """f = (c/T) int_0^T S(t) dt; trapezoidal on the path grid.

    From E[S(u) | F_t] = S(t) for u > t the conditional mean is
    (c/T)(int_0^t S + (T - t) S(t)), whose differential gives the kernel
    (c/T)(T - t) sigma(t) S(t).
    """

    c: float
    market: Market
    T: float

    def mean(self):
        return np.array([self.c * self.market.S0])

    def realize(self, block):
        S = block.prices(self.market)
        dt = block.grid.dt
        area = (0.5 * (S[:, 1:] + S[:, :-1]) * dt[None, :]).sum(axis=1)
        return (self.c / self.T) * area[:, None]

    def kernel(self, block):
        grid = block.grid
        S = block.prices(self.market)[:, :-1]
        sig = self.market.sigma_at(grid.nodes[:-1])
        rem = grid.remaining[:-1]
        return self._embed(block, (self.c / self.T) * rem * sig * S)

    def second_moment(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        ES2, sig2 = self._moments(t)
        return ((self.c / self.T) ** 2 * (self.T - t) ** 2 * sig2 * ES2)[:, None, None]


@dataclass(frozen=True, eq=False)
class LognormalIncrement(Payoff):
    """f = exp(theta + eta (w_k(t_end) - w_k(t_start))), always positive.

    E[f | F_t] = exp(theta + eta (w_k(t) - w_k(t_start)) + eta^2 (t_end - t)/2)
    on [t_start, t_end], so the kernel is eta times that conditional mean.
    """

    theta: float
    eta: float
    t_start: float
    t_end: float
    component: int = 0

    def __post_init__(self):
        if not 0 <= self.t_start < self.t_end:
            raise ValueError("need 0 <= t_start < t_end")

    def validate(self, grid, d):
        if self.component >= d:
            raise ValueError("component exceeds the noise dimension")
        if self.t_end > grid.T * (1 + 1e-12):
            raise ValueError("increment ends after the horizon")
        self._index(grid, self.t_start)
        self._index(grid, self.t_end)

    @staticmethod
    def _index(grid, t):
        i = int(np.argmin(np.abs(grid.nodes - t)))
        if not np.isclose(grid.nodes[i], t, rtol=0, atol=1e-12 * max(1.0, grid.T)):
            raise ValueError(f"time {t} is not a grid node")
        return i

    def mean(self):
        return np.array([np.exp(self.theta + 0.5 * self.eta ** 2 * (self.t_end - self.t_start))])

    def realize(self, block):
        w = block.w[:, :, self.component]
        i0, i1 = self._index(block.grid, self.t_start), self._index(block.grid, self.t_end)
        return np.exp(self.theta + self.eta * (w[:, i1] - w[:, i0]))[:, None]

    def kernel(self, block):
        grid = block.grid
        w = block.w[:, :-1, self.component]
        i0 = self._index(grid, self.t_start)
        t = grid.nodes[:-1]
        active = (t >= grid.nodes[i0]) & (t < self.t_end)
        cond = np.exp(self.theta + self.eta * (w - w[:, i0:i0 + 1])
                      + 0.5 * self.eta ** 2 * (self.t_end - t)[None, :])
        out = self._zeros(block)
        out[:, :, 0, self.component] = np.where(active[None, :], self.eta * cond, 0.0)
        return out

    def second_moment(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        e2 = self.eta ** 2
        inside = (t >= self.t_start) & (t < self.t_end)
        val = e2 * np.exp(2 * self.theta + e2 * (self.t_end - t) + 2 * e2 * (t - self.t_start))
        return np.where(inside, val, 0.0)[:, None, None]


def payoff_mean(payoff):
    return payoff.mean()


def kernel_eval(payoff, block, i):
    """k_f(t_i) on every path of ``block``, shape ``(B, n, d)``."""
    return payoff.kernel_at(block, i)


def _node_stats(payoff, ensemble, block_size, fn):
    """Per-node sums and sums of squares of ``fn(block)`` over all paths."""
    total = total_sq = None
    for blk in ensemble.blocks(block_size):
        v = fn(blk)
        s, s2 = v.sum(axis=0), (v ** 2).sum(axis=0)
        total = s if total is None else total + s
        total_sq = s2 if total_sq is None else total_sq + s2
    M = ensemble.M
    mean = total / M
    var = np.maximum(total_sq / M - mean ** 2, 0.0) * M / max(M - 1, 1)
    return mean, np.sqrt(var / M)


def validate_kf(payoff, ensemble, tau, block_size=1024):
    """Monte Carlo check of sup_{t in [tau, T)} E|k_f(t)|^2 < infinity.

    Returns a JSON-ready dict with the per-node estimates, the supremum and
    its standard error, the log-log growth slope of E|k_f|^2 against T - t
    over the window, and a ``divergent`` flag raised when that slope is
    significantly negative (growth faster than any constant).
    """
    grid = ensemble.grid
    if not 0 < tau < grid.T:
        raise ValueError("tau must lie in (0, T)")
    payoff.validate(grid, ensemble.d)
    sel = np.nonzero(grid.nodes[:-1] >= tau)[0]
    mean, se = _node_stats(payoff, ensemble, block_size,
                           lambda b: (payoff.kernel(b)[:, sel] ** 2).sum(axis=(2, 3)))
    k = int(np.argmax(mean))
    rem = grid.remaining[sel]
    slope, slope_se = 0.0, 0.0
    pos = mean > 0
    if pos.sum() >= 3:
        X = np.log(rem[pos])
        Y = np.log(mean[pos])
        Xc = X - X.mean()
        slope = float((Xc * (Y - Y.mean())).sum() / (Xc ** 2).sum())
        resid = Y - Y.mean() - slope * Xc
        slope_se = float(np.sqrt((resid ** 2).sum() / max(pos.sum() - 2, 1) / (Xc ** 2).sum()))
    divergent = slope < -0.1 and slope < -3 * slope_se
    return {
        "tau": float(tau),
        "nodes": grid.nodes[sel].tolist(),
        "second_moment": mean.tolist(),
        "second_moment_se": se.tolist(),
        "sup_estimate": float(mean[k]),
        "sup_se": float(se[k]),
        "sup_at": float(grid.nodes[sel][k]),
        "loglog_slope": slope,
        "loglog_slope_se": slope_se,
        "finite": bool(np.all(np.isfinite(mean))),
        "divergent": bool(divergent),
    }


def regression_check(payoff, ensemble, nodes, block_size=1024, z=3.0):
    """Compare kernel_eval with the model-free regression estimate
    cov(f, dw_i) / dt_i at the given node indices.

    Returns one dict per node with both estimates (their means over paths),
    the standard error of the per-path difference and an ``agree`` flag.
    """
    grid = ensemble.grid
    payoff.validate(grid, ensemble.d)
    nodes = np.asarray(nodes, dtype=int)
    fbar = np.zeros(payoff.n)
    for blk in ensemble.blocks(block_size):
        fbar += payoff.realize(blk).sum(axis=0)
    fbar /= ensemble.M
    dt = grid.dt[nodes]

    def regress(blk):
        fc = payoff.realize(blk) - fbar
        return np.einsum("bn,bkd->bknd", fc, blk.dw[:, nodes]) / dt[None, :, None, None]

    def diff(blk):
        return regress(blk) - payoff.kernel(blk)[:, nodes]

    reg_mean, reg_se = _node_stats(payoff, ensemble, block_size, regress)
    ker_mean, ker_se = _node_stats(payoff, ensemble, block_size, lambda b: payoff.kernel(b)[:, nodes])
    d_mean, d_se = _node_stats(payoff, ensemble, block_size, diff)
    out = []
    for j, i in enumerate(nodes):
        agree = np.all(np.abs(d_mean[j]) <= z * d_se[j] + 1e-12)
        out.append({
            "node": int(i),
            "t": float(grid.nodes[i]),
            "regression": reg_mean[j].tolist(),
            "regression_se": reg_se[j].tolist(),
            "kernel": ker_mean[j].tolist(),
            "kernel_se": ker_se[j].tolist(),
            "difference_se": d_se[j].tolist(),
            "agree": bool(agree),
        })
    return out
