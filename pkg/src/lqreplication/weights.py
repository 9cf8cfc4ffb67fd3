"""Penalty weights Gamma(t) = g(t) G whose scalar part vanishes at the
terminal time like (T - t)**alpha."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["PenaltyWeight", "make_weight"]

KINDS = ("pure-power", "plateau-power")


@dataclass(frozen=True, eq=False)
class PenaltyWeight:
    """Weight ``Gamma(t) = g(t) G`` on ``[0, T)``.

    ``g`` equals 1 before ``T - T1`` and ``(T - t)**alpha`` afterwards;
    the pure-power kind is the case ``T1 = T``. Methods taking ``t`` also
    have ``*_remaining`` twins that take the time to go ``T - t`` instead,
    which is what the quadrature and the graded grids hand around.
    """

    kind: str
    alpha: float
    T: float
    G: np.ndarray
    T1: float
    G_inv: np.ndarray = field(repr=False)
    c: float

    @property
    def n(self):
        return self.G.shape[0]

    @property
    def breakpoints(self):
        """Times in (0, T) where g is discontinuous."""
        return (self.T - self.T1,) if self.T1 < self.T else ()

    def g_remaining(self, tau):
        tau = np.asarray(tau, dtype=float)
        if np.any(tau <= 0) or np.any(tau > self.T):
            raise ValueError("g is defined for T - t in (0, T]")
        return np.where(tau <= self.T1, tau ** self.alpha, 1.0)

    def g_inv_remaining(self, tau):
        tau = np.asarray(tau, dtype=float)
        if np.any(tau <= 0) or np.any(tau > self.T):
            raise ValueError("g is defined for T - t in (0, T]")
        return np.where(tau <= self.T1, tau ** -self.alpha, 1.0)

    def g(self, t):
        return self.g_remaining(self.T - np.asarray(t, dtype=float))

    def g_inv(self, t):
        return self.g_inv_remaining(self.T - np.asarray(t, dtype=float))

    def gamma_remaining(self, tau):
        return self.g_remaining(tau)[..., None, None] * self.G

    def gamma_inv_remaining(self, tau):
        return self.g_inv_remaining(tau)[..., None, None] * self.G_inv

    def gamma(self, t):
        """Gamma(t); stacks along leading axes for array ``t``."""
        return self.gamma_remaining(self.T - np.asarray(t, dtype=float))

    def gamma_inv(self, t):
        """Gamma(t)^{-1} = g(t)^{-1} G^{-1}; raises for ``t >= T``."""
        t = np.asarray(t, dtype=float)
        if np.any(t >= self.T):
            raise ValueError(f"Gamma(t)^-1 is undefined for t >= T={self.T}")
        return self.gamma_inv_remaining(self.T - t)

    def _segment_integrals(self, lo, hi, power):
        lo, hi = np.broadcast_arrays(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
        e = 1.0 + power
        curved = (np.minimum(hi, self.T1) ** e - np.minimum(lo, self.T1) ** e) / e
        flat = np.maximum(hi, self.T1) - np.maximum(lo, self.T1)
        return curved + flat

    def g_integral_remaining(self, lo, hi):
        """``int g`` over times-to-go in ``[lo, hi]`` (closed form)."""
        return self._segment_integrals(lo, hi, self.alpha)

    def g_inv_integral_remaining(self, lo, hi):
        """``int 1/g`` over times-to-go in ``[lo, hi]`` (closed form)."""
        return self._segment_integrals(lo, hi, -self.alpha)

    def g_inv_integral(self, s, t):
        """``int_s^t g(r)^{-1} dr``."""
        return self.g_inv_integral_remaining(self.T - t, self.T - s)


def make_weight(kind, alpha, T, G=1.0, T1=None):
    """Build and validate a penalty weight.

    Parameters
    ----------
    kind : {"pure-power", "plateau-power"}
    alpha : float
        Decay exponent, strictly inside (0.5, 1).
    T : float
        Terminal time.
    G : float or (n, n) array_like
        Constant symmetric positive-definite matrix factor.
    T1 : float, optional
        Length of the power segment, in (0, T]; required for plateau-power.

    The stored constant ``c`` satisfies ``g <= c (T-t)^alpha`` and
    ``1/g <= c (1 + (T-t)^-alpha)`` on [0, T).
    """
    if kind not in KINDS:
        raise ValueError(f"unknown weight kind {kind!r}; expected one of {KINDS}")
    if not 0.5 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0.5, 1), got {alpha}")
    if not T > 0:
        raise ValueError("T must be positive")
    if kind == "pure-power":
        if T1 is not None and T1 != T:
            raise ValueError("pure-power weight has T1 = T")
        T1 = T
    elif T1 is None or not 0 < T1 <= T:
        raise ValueError(f"T1 must lie in (0, T], got {T1}")

    G = np.atleast_2d(np.asarray(G, dtype=float))
    if G.shape[0] != G.shape[1] or not np.all(np.isfinite(G)):
        raise ValueError("G must be a finite square matrix")
    if np.abs(G - G.T).max() > 1e-12 * max(1.0, np.abs(G).max()):
        raise ValueError("G must be symmetric")
    eig = np.linalg.eigvalsh(G)
    if eig[0] <= 0:
        raise ValueError("G must be positive definite")
    G_inv = np.linalg.inv(G)
    G_inv = 0.5 * (G_inv + G_inv.T)

    # On the plateau g = 1 <= c (T-t)^alpha needs c >= T1^-alpha.
    c = max(1.0, T1 ** -alpha) if T1 < T else 1.0
    G.setflags(write=False)
    G_inv.setflags(write=False)
    return PenaltyWeight(kind=kind, alpha=float(alpha), T=float(T), G=G, T1=float(T1), G_inv=G_inv, c=c)
