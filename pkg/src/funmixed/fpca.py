"""Functional PCA of fitted mean curves by fine-grid discretization."""

from dataclasses import dataclass

import numpy as np

from .spline_basis import NaturalCubicSpline, TimeGrid

NORMALIZATIONS = ("none", "subtract_first")
DEFAULT_N_GRID = 1000
DEFAULT_VARIANCE_TARGET = 0.999
DEFAULT_MAX_COMPONENTS = 10


@dataclass(eq=False)
class CurveMatrix:
    """Curves sampled on an equally spaced grid, one row per curve."""

    grid: np.ndarray
    values: np.ndarray
    normalization: str = "none"
    labels: tuple = ()

    @property
    def w(self):
        """Grid spacing."""
        return float(self.grid[1] - self.grid[0])

    @property
    def n_curves(self):
        return self.values.shape[0]


@dataclass(eq=False)
class FpcaResult:
    """Discretized component functions with ``w * ||xi_k||^2 = 1``.

    ``eigenvalues`` are the functional eigenvalues ``rho_k = w * lambda_k``
    of the retained components; ``all_eigenvalues`` keeps the full spectrum.
    """

    grid: np.ndarray
    w: float
    components: np.ndarray  # n_grid x K
    eigenvalues: np.ndarray
    explained_fraction: np.ndarray
    mean_curve: np.ndarray
    all_eigenvalues: np.ndarray
    all_explained_fraction: np.ndarray

    @property
    def n_components(self):
        return self.components.shape[1]


def _mean_curve_values(item):
    if hasattr(item, "mu"):
        return item.grid, np.asarray(item.mu, dtype=float)
    grid, mu = item
    return grid, np.asarray(mu, dtype=float)


def discretize(fits, n_grid=DEFAULT_N_GRID, normalization="subtract_first", labels=None):
    """Evaluate each fitted mean curve on ``n_grid`` equally spaced points.

    The points are the midpoints of ``n_grid`` equal cells of
    ``[tau_1, tau_M]``, so ``w * sum(f**2)`` is a midpoint-rule integral
    with O(w**2) error.

    Parameters
    ----------
    fits : sequence of ModelFit, or of ``(grid, mu_values)`` pairs
        All curves must share one design grid.
    n_grid : int
    normalization : {"none", "subtract_first"}
        ``subtract_first`` subtracts each curve's value at ``tau_1``.

    Returns
    -------
    CurveMatrix
    """
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {NORMALIZATIONS}, got {normalization!r}")
    if n_grid < 2:
        raise ValueError("n_grid must be at least 2")
    fits = list(fits)
    if not fits:
        raise ValueError("no curves to discretize")
    grids = [_mean_curve_values(f) for f in fits]
    base = grids[0][0] if isinstance(grids[0][0], TimeGrid) else TimeGrid(grids[0][0])
    for g, _ in grids[1:]:
        g = g if isinstance(g, TimeGrid) else TimeGrid(g)
        if g != base:
            raise ValueError(f"inconsistent design grids: {base!r} vs {g!r}")
    t0, t1 = base.points[0], base.points[-1]
    w = (t1 - t0) / n_grid
    s = t0 + w * (np.arange(n_grid) + 0.5)
    values = np.vstack([NaturalCubicSpline(base, mu)(s) for _, mu in grids])
    if normalization == "subtract_first":
        values = values - np.array([mu[0] for _, mu in grids])[:, None]
    if labels is None:
        labels = tuple(getattr(f, "gene_id", str(k)) for k, f in enumerate(fits))
    return CurveMatrix(grid=s, values=values, normalization=normalization, labels=tuple(labels))


def curve_matrix(grid, values, normalization="none", labels=()):
    """Wrap curves already sampled on an equally spaced grid."""
    grid = np.asarray(grid, dtype=float)
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if values.shape[1] != grid.size:
        raise ValueError("values must have one column per grid point")
    if normalization == "subtract_first":
        values = values - values[:, :1]
    return CurveMatrix(grid, values, normalization, tuple(labels))


def decompose(cm, n_components=None, variance_target=DEFAULT_VARIANCE_TARGET, max_components=DEFAULT_MAX_COMPONENTS):
    """Eigen-decompose the sample covariance of the centered curves.

    Solves ``w V xi = rho xi`` with ``V = X_c' X_c / G``: the matrix
    eigenvalues are scaled by ``w`` and the unit eigenvectors by
    ``1/sqrt(w)`` so that ``w ||xi||^2 = 1``. Each component's sign makes
    its largest-magnitude coordinate positive.

    Parameters
    ----------
    cm : CurveMatrix
    n_components : int, optional
        Fixed number to retain. Otherwise the smallest K whose cumulative
        explained fraction reaches ``variance_target``, capped at
        ``max_components``.

    Raises
    ------
    ValueError
        If fewer than two curves, or ``n_components`` exceeds the rank.
    """
    X = cm.values
    G = X.shape[0]
    if G < 2:
        raise ValueError("need at least 2 curves")
    w = cm.w
    mean = X.mean(axis=0)
    Xc = X - mean
    V = (Xc.T @ Xc) / G
    lam, U = np.linalg.eigh(V)
    lam, U = lam[::-1], U[:, ::-1]
    lam = np.clip(lam, 0.0, None)
    rho = w * lam
    total = rho.sum()
    frac = rho / total if total > 0 else np.zeros_like(rho)
    # relative to the curves' own scale so identical curves give rank 0, not roundoff
    scale = max(lam[0], float(np.mean(X**2)))
    rank = int(np.sum(lam > 1e-12 * scale)) if scale > 0 else 0
    if n_components is None:
        if rank == 0:
            K = 0
        else:
            K = int(np.searchsorted(np.cumsum(frac), variance_target - 1e-15) + 1)
            K = min(K, max_components, rank)
    else:
        K = int(n_components)
        if K > rank:
            raise ValueError(f"requested {K} components but the curves have rank {rank}")
    comps = U[:, :K] / np.sqrt(w)
    for k in range(K):
        j = np.argmax(np.abs(comps[:, k]))
        if comps[j, k] < 0:
            comps[:, k] = -comps[:, k]
    return FpcaResult(
        grid=cm.grid,
        w=w,
        components=comps,
        eigenvalues=rho[:K],
        explained_fraction=frac[:K],
        mean_curve=mean,
        all_eigenvalues=rho,
        all_explained_fraction=frac,
    )


def loadings(cm, result):
    """Least-squares loadings of each centered curve on the retained components.

    With w-orthonormal components this equals ``w * (x_i - mean) @ xi_k``.
    """
    Xc = cm.values - result.mean_curve
    if result.n_components == 0:
        return np.zeros((Xc.shape[0], 0))
    coef, *_ = np.linalg.lstsq(result.components, Xc.T, rcond=None)
    return coef.T
