"""scikit-learn style wrappers around the gene-level model and the fPCA."""

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import age_sign, gender_sign
from .estimation import fit_em
from .fpca import DEFAULT_MAX_COMPONENTS, DEFAULT_VARIANCE_TARGET, curve_matrix, decompose, loadings
from .model import GeneDataset, IndividualSeries, SmoothingParameters
from .selection import select
from .spline_basis import NaturalCubicSpline

DESIGN_COLUMNS = ("subject_id", "gender", "age_group", "day")


def _check_design_frame(X):
    if not isinstance(X, pd.DataFrame):
        raise TypeError("X must be a GeneDataset or a DataFrame with columns " + ", ".join(DESIGN_COLUMNS))
    missing = [c for c in DESIGN_COLUMNS if c not in X.columns]
    if missing:
        raise ValueError(f"X is missing columns {missing}")
    if len(X) == 0:
        raise ValueError("X has no rows")
    return X


def dataset_from_frame(X, y, gene_id="gene"):
    """Build a GeneDataset from a design frame and a response vector."""
    X = _check_design_frame(X)
    y = check_array(np.asarray(y, dtype=float).reshape(-1, 1), ensure_all_finite=True).ravel()
    if y.size != len(X):
        raise ValueError(f"X has {len(X)} rows but y has {y.size}")
    day = X["day"].to_numpy(dtype=float)
    inds = []
    for sid, rows in X.groupby("subject_id", sort=False):
        pos = X.index.get_indexer(rows.index)
        order = pos[np.argsort(day[pos], kind="stable")]
        inds.append(IndividualSeries(sid, rows["gender"].iloc[0], rows["age_group"].iloc[0], day[order], y[order]))
    return GeneDataset(gene_id, tuple(inds))


class FunctionalMixedEffects(RegressorMixin, BaseEstimator):
    """Penalized functional mixed-effects model for one gene.

    Parameters
    ----------
    lam, lam_gamma : float or None
        Smoothing parameters for the fixed-effect and random curves. When
        either is None both are chosen by information-criterion search.
    criterion : {"AIC", "BIC"}
    simplex_budget : int
        Iteration budget of the smoothing-parameter search.
    tol, max_iter : float, int
        EM convergence tolerance and iteration cap.

    Attributes
    ----------
    fit_ : ModelFit
    selection_ : SelectionResult or None
    mu_, alpha_, beta_ : ndarray
        Fixed-effect curves at the design points.
    """

    def __init__(self, lam=None, lam_gamma=None, criterion="BIC", simplex_budget=100, tol=1e-6, max_iter=200):
        self.lam = lam
        self.lam_gamma = lam_gamma
        self.criterion = criterion
        self.simplex_budget = simplex_budget
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y=None):
        """Fit on a GeneDataset, or on a design DataFrame plus responses ``y``."""
        data = X if isinstance(X, GeneDataset) else dataset_from_frame(X, y)
        if self.lam is None or self.lam_gamma is None:
            sel = select(data, kind=self.criterion, max_iter=self.simplex_budget, tol=self.tol, em_max_iter=self.max_iter)
            self.selection_ = sel
            self.fit_ = sel.best_fit
        else:
            self.selection_ = None
            self.fit_ = fit_em(data, SmoothingParameters(self.lam, self.lam_gamma), tol=self.tol, max_iter=self.max_iter)
        self.mu_, self.alpha_, self.beta_ = self.fit_.mu, self.fit_.alpha, self.fit_.beta
        self.grid_ = self.fit_.grid
        self.variance_components_ = self.fit_.vc
        self.smoothing_parameters_ = self.fit_.sp
        self.n_features_in_ = len(DESIGN_COLUMNS)
        return self

    def predict(self, X):
        """Population-level prediction ``mu + s_gender alpha + s_age beta`` at each row's day.

        Days between design points are interpolated with the natural cubic
        spline through the fitted curve values.
        """
        check_is_fitted(self, "fit_")
        if isinstance(X, GeneDataset):
            rows = [(s.gender, s.age_group, t) for s in X.individuals for t in s.obs_times]
            genders, ages, days = zip(*rows)
        else:
            X = _check_design_frame(X)
            genders, ages, days = X["gender"], X["age_group"], X["day"].to_numpy(dtype=float)
        days = np.asarray(days, dtype=float)
        curves = [NaturalCubicSpline(self.grid_, c)(days) for c in (self.mu_, self.alpha_, self.beta_)]
        sg = np.array([gender_sign(g) for g in genders])
        sa = np.array([age_sign(a) for a in ages])
        return curves[0] + sg * curves[1] + sa * curves[2]


class FunctionalPCA(TransformerMixin, BaseEstimator):
    """fPCA of curves sampled on an equally spaced grid.

    Parameters
    ----------
    grid : array-like or None
        Sampling points of the columns of ``X``; defaults to ``0..1``.
    n_components : int or None
        Fixed number of components, or None for the variance-target rule.
    variance_target, max_components
        Retention rule used when ``n_components`` is None.
    normalization : {"none", "subtract_first"}

    Attributes
    ----------
    components_ : ndarray, shape (n_components, n_grid)
        Component functions with ``w * ||xi||^2 = 1``.
    eigenvalues_, explained_variance_ratio_ : ndarray
    mean_ : ndarray
    """

    def __init__(
        self,
        grid=None,
        n_components=None,
        variance_target=DEFAULT_VARIANCE_TARGET,
        max_components=DEFAULT_MAX_COMPONENTS,
        normalization="none",
    ):
        self.grid = grid
        self.n_components = n_components
        self.variance_target = variance_target
        self.max_components = max_components
        self.normalization = normalization

    def _grid_for(self, n_cols):
        grid = np.linspace(0.0, 1.0, n_cols) if self.grid is None else np.asarray(self.grid, dtype=float)
        if grid.size != n_cols:
            raise ValueError(f"grid has {grid.size} points but X has {n_cols} columns")
        if n_cols > 2 and not np.allclose(np.diff(grid), grid[1] - grid[0], rtol=1e-9, atol=0.0):
            raise ValueError("grid must be equally spaced")
        return grid

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=2, ensure_min_features=2)
        cm = curve_matrix(self._grid_for(X.shape[1]), X, self.normalization)
        res = decompose(cm, self.n_components, self.variance_target, self.max_components)
        self.result_ = res
        self.components_ = res.components.T
        self.eigenvalues_ = res.eigenvalues
        self.explained_variance_ratio_ = res.explained_fraction
        self.mean_ = res.mean_curve
        self.n_components_ = res.n_components
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        """Least-squares loadings of each curve on the fitted components."""
        check_is_fitted(self, "result_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns, expected {self.n_features_in_}")
        cm = curve_matrix(self._grid_for(X.shape[1]), X, self.normalization)
        return loadings(cm, self.result_)

    def inverse_transform(self, K):
        check_is_fitted(self, "result_")
        K = np.atleast_2d(np.asarray(K, dtype=float))
        return self.mean_ + K @ self.components_
