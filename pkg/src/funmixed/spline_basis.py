"""Cubic smoothing-spline building blocks on a grid of design time points.

The roughness matrix ``G`` satisfies ``f @ G @ f == integral of f''(t)**2``
for the natural cubic spline interpolating ``f`` at the design points. It is
built from the banded factors ``A`` (M x M-2) and ``B`` (M-2 x M-2,
tridiagonal) as ``G = A B^{-1} A^T``.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_triangular, solveh_banded

from .exceptions import GridError, IncidenceError

#: Observation times within this distance (days) of a design point snap to it.
SNAP_ATOL = 1e-9


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing design time points ``tau_1 < ... < tau_M`` (M >= 3)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).ravel()
        if pts.size < 3:
            raise GridError(f"need at least 3 design points, got {pts.size}")
        if not np.all(np.isfinite(pts)):
            raise GridError("design points must be finite")
        if np.any(np.diff(pts) <= 0):
            raise GridError("design points must be strictly increasing")
        object.__setattr__(self, "points", _frozen(pts))

    @property
    def M(self):
        return self.points.size

    @property
    def spacings(self):
        return np.diff(self.points)

    @property
    def span(self):
        return float(self.points[-1] - self.points[0])

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())

    def __repr__(self):
        return f"TimeGrid({self.points.tolist()})"


@dataclass(frozen=True, eq=False)
class RoughnessMatrix:
    """``G = A B^{-1} A^T`` together with its banded factors.

    ``root`` is ``L^{-1} A^T`` for ``B = L L^T``, so ``root.T @ root == G``.
    Its rows are divided second differences, which annihilate linear
    functions up to rounding in each entry rather than in ``G`` as a whole.
    """

    G: np.ndarray
    A: np.ndarray
    B: np.ndarray
    root: np.ndarray


def _as_grid(grid):
    return grid if isinstance(grid, TimeGrid) else TimeGrid(grid)


def build_roughness(grid):
    """Roughness matrix of the natural cubic smoothing spline on ``grid``.

    Parameters
    ----------
    grid : TimeGrid or array-like
        Design points, strictly increasing, at least three.

    Returns
    -------
    RoughnessMatrix
    """
    grid = _as_grid(grid)
    h = grid.spacings
    M = grid.M
    A = np.zeros((M, M - 2))
    r = np.arange(M - 2)
    A[r, r] = 1.0 / h[:-1]
    A[r + 1, r] = -(1.0 / h[:-1] + 1.0 / h[1:])
    A[r + 2, r] = 1.0 / h[1:]

    diag = (h[:-1] + h[1:]) / 3.0
    off = h[1:-1] / 6.0
    B = np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)

    # upper banded storage for the symmetric tridiagonal solve
    ab = np.zeros((2, M - 2))
    ab[0, 1:] = off
    ab[1, :] = diag
    if M == 3:
        # LAPACK's tridiagonal path rejects a 1x1 system
        BinvAt = A.T / diag[0]
    else:
        BinvAt = solveh_banded(ab, A.T)
    G = A @ BinvAt
    G = 0.5 * (G + G.T)
    root = solve_triangular(np.linalg.cholesky(B), A.T, lower=True)
    return RoughnessMatrix(G=_frozen(G), A=_frozen(A), B=_frozen(B), root=_frozen(root))


def design_indices(grid, obs_times, atol=SNAP_ATOL):
    """Index of the design point matching each observation time.

    Raises
    ------
    IncidenceError
        If some time is farther than ``atol`` from every design point.
    """
    grid = _as_grid(grid)
    t = np.atleast_1d(np.asarray(obs_times, dtype=float))
    pts = grid.points
    pos = np.clip(np.searchsorted(pts, t), 1, pts.size - 1)
    left = pts[pos - 1]
    right = pts[pos]
    idx = np.where(np.abs(t - left) <= np.abs(right - t), pos - 1, pos)
    bad = np.abs(pts[idx] - t) > atol
    if np.any(bad) or not np.all(np.isfinite(t)):
        first = t[bad][0] if np.any(bad) else t[~np.isfinite(t)][0]
        raise IncidenceError(f"observation time {first!r} matches no design point of {grid!r}")
    return idx


def build_incidence(grid, obs_times, atol=SNAP_ATOL):
    """0/1 incidence matrix (n_i x M) mapping observations to design points.

    Row ``j`` has its single one in column ``m`` where ``obs_times[j]``
    equals ``tau_m``. Observation order is preserved, so missing design
    points give empty columns and duplicates give repeated rows.
    """
    grid = _as_grid(grid)
    idx = design_indices(grid, obs_times, atol=atol)
    X = np.zeros((idx.size, grid.M))
    X[np.arange(idx.size), idx] = 1.0
    return X


class NaturalCubicSpline:
    """Interpolating cubic spline with zero second derivative at both ends.

    Parameters
    ----------
    knots : TimeGrid or array-like
    values : array-like of length M
    """

    def __init__(self, knots, values):
        self.knots = _as_grid(knots)
        self.values = _frozen(np.asarray(values, dtype=float).ravel())
        if self.values.size != self.knots.M:
            raise ValueError(f"expected {self.knots.M} values, got {self.values.size}")
        self._pp = CubicSpline(self.knots.points, self.values, bc_type="natural")

    @property
    def coefficients(self):
        """Per-interval coefficients, shape (4, M-1), highest power first in ``t - tau_r``."""
        return self._pp.c

    def __call__(self, t, nu=0):
        return self._pp(t, nu)

    def derivative(self, nu=1):
        return self._pp.derivative(nu)

    def integrate_squared(self, derivative_order=0):
        """Exact integral of ``f^(k)(t)**2`` over ``[tau_1, tau_M]``."""
        pp = self._pp if derivative_order == 0 else self._pp.derivative(derivative_order)
        return _integrate_squared_ppoly(pp.c, np.diff(pp.x))


def _integrate_squared_ppoly(c, h):
    # c: (k+1, m) local-power coefficients, highest first; h: interval widths
    total = 0.0
    for j in range(c.shape[1]):
        sq = np.polyint(np.polymul(c[:, j], c[:, j]))
        total += np.polyval(sq, h[j])
    return float(total)


def roughness_functional(spline):
    """Exact ``integral (f'')^2`` of a natural cubic spline by piecewise integration."""
    return spline.integrate_squared(2)


def l2_norm(spline, derivative_order=0):
    """L2 norm of the spline (or of its first derivative) over ``[tau_1, tau_M]``."""
    if derivative_order not in (0, 1):
        raise ValueError("derivative_order must be 0 or 1")
    return float(np.sqrt(max(spline.integrate_squared(derivative_order), 0.0)))


@lru_cache(maxsize=64)
def _l2_gram(grid, derivative_order):
    # Gram matrix of the cardinal splines: entry (j, k) integrates the product
    # of the order-k derivatives of the splines through e_j and e_k
    M = grid.M
    basis = [NaturalCubicSpline(grid, np.eye(M)[j]) for j in range(M)]
    pps = [b._pp if derivative_order == 0 else b._pp.derivative(derivative_order) for b in basis]
    h = grid.spacings
    Q = np.zeros((M, M))
    for j in range(M):
        for k in range(j, M):
            total = 0.0
            for r in range(M - 1):
                prod = np.polyint(np.polymul(pps[j].c[:, r], pps[k].c[:, r]))
                total += np.polyval(prod, h[r])
            Q[j, k] = Q[k, j] = total
    Q.setflags(write=False)
    return Q


def l2_norm_values(grid, values, derivative_order=0):
    """Same as ``l2_norm(NaturalCubicSpline(grid, values), derivative_order)`` via a cached quadratic form."""
    if derivative_order not in (0, 1):
        raise ValueError("derivative_order must be 0 or 1")
    f = np.asarray(values, dtype=float)
    q = float(f @ _l2_gram(_as_grid(grid), derivative_order) @ f)
    return float(np.sqrt(max(q, 0.0)))
