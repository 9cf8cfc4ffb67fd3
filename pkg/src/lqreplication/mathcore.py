"""Dense linear-algebra kernels: matrix exponentials, SPD solves and
quadrature for integrands with an integrable singularity at the right end.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import linalg

__all__ = [
    "SingularityError",
    "QuadratureError",
    "QuadratureSpec",
    "mat_exp",
    "phi1",
    "solve_spd",
    "integrate_singular",
    "cumulative_singular",
]

_PADE_ORDER = 6
_PADE_COEFFS = np.array([
    factorial(2 * _PADE_ORDER - k) * factorial(_PADE_ORDER)
    / (factorial(2 * _PADE_ORDER) * factorial(k) * factorial(_PADE_ORDER - k))
    for k in range(_PADE_ORDER + 1)
])
_MAX_EXP_NORM = 700.0
_COND_LIMIT = 1e14
_GAUSS_ORDER = 16
_GL_X, _GL_W = leggauss(_GAUSS_ORDER)


class SingularityError(np.linalg.LinAlgError):
    """A matrix that must be invertible is singular or too ill-conditioned."""


class QuadratureError(RuntimeError):
    """Requested tolerance not reached within the panel budget."""


@dataclass(frozen=True)
class QuadratureSpec:
    """Settings for :func:`integrate_singular`.

    ``alpha`` is the decay exponent of the endpoint singularity,
    integrands are assumed bounded by ``C (T - t)**(-alpha)``.
    """

    alpha: float
    rtol: float = 1e-10
    max_panels: int = 4096

    def __post_init__(self):
        if not 0.5 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0.5, 1), got {self.alpha}")
        if not self.rtol > 0:
            raise ValueError("rtol must be positive")
        if self.max_panels < 2:
            raise ValueError("max_panels must be at least 2")


def _expm_pade(X):
    """Batched scaling-and-squaring on a stack X of shape (m, n, n)."""
    m, n, _ = X.shape
    norms = np.abs(X).sum(axis=1).max(axis=1)  # 1-norm per matrix
    if np.any(norms > _MAX_EXP_NORM):
        raise OverflowError("matrix exponential argument too large")
    with np.errstate(divide="ignore"):
        s = np.where(norms > 0.5, np.ceil(np.log2(norms / 0.5)), 0).astype(int)
    Xs = X / (2.0 ** s)[:, None, None]

    eye = np.broadcast_to(np.eye(n), X.shape)
    P = eye.copy()
    num = _PADE_COEFFS[0] * eye
    den = _PADE_COEFFS[0] * eye
    for k in range(1, _PADE_ORDER + 1):
        P = P @ Xs
        num = num + _PADE_COEFFS[k] * P
        den = den + ((-1) ** k * _PADE_COEFFS[k]) * P
    E = np.linalg.solve(den, num)

    for j in range(int(s.max(initial=0))):
        sel = s > j
        E[sel] = E[sel] @ E[sel]
    return E


def mat_exp(A, t=1.0):
    """Return ``exp(A t)``.

    ``t`` may be a scalar (result has the shape of ``A``) or a 1-d array of
    times (result is stacked along a leading axis).
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"mat_exp needs a square matrix, got shape {A.shape}")
    ts = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(ts)):
        raise ValueError("time must be finite")
    flat = np.atleast_1d(ts).ravel()
    E = _expm_pade(A[None, :, :] * flat[:, None, None])
    return E[0] if ts.ndim == 0 else E.reshape(ts.shape + A.shape)


def phi1(A, h):
    """Return ``int_0^h exp(A s) ds`` (scalar or 1-d array ``h``).

    Read off the top-right block of the exponential of ``[[A, I], [0, 0]] h``.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    aug = np.zeros((2 * n, 2 * n))
    aug[:n, :n] = A
    aug[:n, n:] = np.eye(n)
    return mat_exp(aug, h)[..., :n, n:]


def solve_spd(M, B, at=None):
    """Solve ``M X = B`` for symmetric positive-definite ``M``.

    Parameters
    ----------
    M : (n, n) array_like
        Symmetric positive-definite matrix.
    B : (n,) or (n, k) array_like
        Right-hand side.
    at : float, optional
        Evaluation time that produced ``M``; only used in error messages.

    Raises
    ------
    SingularityError
        If ``M`` is not symmetric, not positive definite, or its condition
        number exceeds 1e14.
    """
    M = np.asarray(M, dtype=float)
    B = np.asarray(B, dtype=float)
    where = "" if at is None else f" at s={at!r}"
    scale = max(1.0, float(np.abs(M).max(initial=0.0)))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"solve_spd needs a square matrix, got shape {M.shape}")
    if np.abs(M - M.T).max(initial=0.0) > 1e-12 * scale:
        raise SingularityError(f"matrix is not symmetric{where}")
    if not np.all(np.isfinite(M)):
        raise SingularityError(f"matrix has non-finite entries{where}")
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise SingularityError(f"matrix is singular to working precision{where} (cond={cond:.3g})")
    try:
        factor = linalg.cho_factor(M, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SingularityError(f"matrix is not positive definite{where}") from exc
    return linalg.cho_solve(factor, B, check_finite=False)


def _panels(fn, v_lo, v_hi, power, n_panels):
    """Gauss-Legendre sums over ``n_panels`` equal panels in the substituted
    variable for every interval ``[v_lo[k], v_hi[k]]`` at once."""
    K = v_lo.size
    h = (v_hi - v_lo) / n_panels
    starts = v_lo[:, None] + h[:, None] * np.arange(n_panels)[None, :]
    v = starts[:, :, None] + 0.5 * h[:, None, None] * (_GL_X + 1.0)[None, None, :]
    v = v.reshape(K, -1)
    tau = v ** power
    jac = power * v ** (power - 1.0)
    vals = np.asarray(fn(tau.ravel()), dtype=float)
    vals = vals.reshape((K, v.shape[1]) + vals.shape[1:])
    w = np.tile(_GL_W, n_panels)[None, :] * jac * (0.5 * h)[:, None]
    return np.einsum("kp,kp...->k...", w, vals)


def _integrate_pieces(fn, spec, rem_lo, rem_hi):
    """Integrate ``fn(tau)`` over each ``tau in [rem_lo[k], rem_hi[k]]``."""
    power = 1.0 / (1.0 - spec.alpha)
    v_lo = rem_lo ** (1.0 - spec.alpha)
    v_hi = rem_hi ** (1.0 - spec.alpha)
    coarse = _panels(fn, v_lo, v_hi, power, 1)
    out = np.empty_like(coarse)
    todo = np.arange(rem_lo.size)
    n_panels = 2
    while todo.size:
        fine = _panels(fn, v_lo[todo], v_hi[todo], power, n_panels)
        axes = tuple(range(1, fine.ndim))
        err = np.sqrt((np.abs(fine - coarse) ** 2).sum(axis=axes))
        size = np.sqrt((np.abs(fine) ** 2).sum(axis=axes))
        done = err <= spec.rtol * size
        out[todo[done]] = fine[done]
        todo, coarse = todo[~done], fine[~done]
        n_panels *= 2
        if todo.size and n_panels > spec.max_panels:
            raise QuadratureError(
                f"tolerance {spec.rtol:g} not reached with {spec.max_panels} panels "
                f"for time-to-go in [{rem_lo[todo[0]]!r}, {rem_hi[todo[0]]!r}]"
            )
    return out


def _split(lo, hi, breakpoints):
    """Split intervals at breakpoints; return (lo, hi, owner)."""
    lo_l, hi_l, own = [lo], [hi], [np.arange(lo.size)]
    for bp in sorted(breakpoints):
        lo_c, hi_c, own_c = (np.concatenate(x) for x in (lo_l, hi_l, own))
        cut = (lo_c < bp) & (bp < hi_c)
        lo_l = [lo_c, np.full(cut.sum(), bp)]
        hi_l = [np.where(cut, bp, hi_c), hi_c[cut]]
        own = [own_c, own_c[cut]]
    return tuple(np.concatenate(x) for x in (lo_l, hi_l, own))


def integrate_singular(fn, spec, s, T, breakpoints=()):
    """Integrate ``fn`` over ``[s, T]`` where ``fn`` may blow up like
    ``(T - t)**(-spec.alpha)`` at ``T``.

    The substitution ``v = (T - t)**(1 - alpha)`` turns the integrand into a
    bounded one, which is then summed with 16-point Gauss-Legendre panels,
    doubling the panel count until successive estimates agree to
    ``spec.rtol`` (Frobenius norm, relative).

    ``fn`` is vectorised and is called with the time remaining to the
    singular end, ``tau = T - t`` (a 1-d array), so that values close to
    ``T`` keep full relative precision. It returns an array whose leading
    axis indexes ``tau``. ``breakpoints`` lists interior times ``t`` where
    ``fn`` is discontinuous.
    """
    if not s <= T:
        raise ValueError(f"need s <= T, got s={s}, T={T}")
    if s == T:
        probe = np.asarray(fn(np.array([1.0])), dtype=float)
        return np.zeros(probe.shape[1:])
    return cumulative_singular(fn, spec, np.array([T - s, 0.0]),
                               breaks=[T - bp for bp in breakpoints])[0]


def cumulative_singular(fn, spec, remaining, breaks=(), return_cells=False):
    """Return ``int_0^{remaining[i]} fn(tau) dtau`` for every entry of a
    strictly decreasing array of times-to-go.

    Cells between consecutive entries are integrated separately (split at
    ``breaks``, also in time-to-go) and accumulated from the singular end,
    so results are monotone for non-negative integrands. With
    ``return_cells`` the per-cell integrals are returned as well.
    """
    rem = np.asarray(remaining, dtype=float)
    if np.any(np.diff(rem) >= 0) or rem[-1] < 0:
        raise ValueError("times-to-go must be strictly decreasing and non-negative")
    edges = rem if rem[-1] == 0 else np.append(rem, 0.0)
    lo, hi, owner = _split(edges[1:], edges[:-1], breaks)
    parts = _integrate_pieces(fn, spec, lo, hi)
    cells = np.zeros((edges.size - 1,) + parts.shape[1:])
    np.add.at(cells, owner, parts)
    tail = np.concatenate([np.cumsum(cells[::-1], axis=0)[::-1], np.zeros((1,) + parts.shape[1:])])
    if return_cells:
        return tail[: rem.size], cells
    return tail[: rem.size]
