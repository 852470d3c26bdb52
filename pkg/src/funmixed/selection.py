"""Smoother matrices, information criteria and smoothing-parameter search."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize

from .estimation import _factor, _normal_equations, degrees_of_freedom, fit_em
from .exceptions import FunMixedError, SelectionError
from .model import AssembledModel, SmoothingParameters

logger = logging.getLogger(__name__)

#: Box bounds for log10 of both smoothing parameters.
LOG10_BOUNDS = (-8.0, 12.0)
CRITERIA = ("AIC", "BIC")
# simplex stopping tolerances: log10 units and criterion units
XATOL = 1e-2
FATOL = 1e-2


@dataclass(eq=False)
class SmootherMatrices:
    """Fixed- and random-effect smoother matrices and their traces."""

    A_eta: np.ndarray
    A_gamma: np.ndarray
    df_fixed: float
    df_random: float

    @property
    def df_total(self):
        return self.df_fixed + self.df_random + 1.0


def smoother_matrices(model, sp=None, materialize=True):
    """Smoother matrices ``A_eta``, ``A_gamma`` with ``(A_eta + A_gamma) y = fitted``.

    ``A_eta = X* H^-1 X*' V^-1`` with ``H = X*' V^-1 X* + lam G*`` and
    ``A_gamma = X~ D~_gamma X~' V^-1 (I - A_eta)``. The traces are always
    computed block-wise; the N x N matrices are built only when
    ``materialize`` is true (otherwise they are ``None``).
    """
    if sp is not None and sp != model.sp:
        model = AssembledModel(model.data, model.vc, sp, design=model.design)
    df_fixed, df_random = degrees_of_freedom(model)
    if not materialize:
        return SmootherMatrices(None, None, df_fixed, df_random)
    S, _ = _normal_equations(model)
    cf = _factor(S, model)
    Xs = model.X_star
    Xt = model.X_tilde
    Vinv = sla.block_diag(*[np.linalg.inv(model.V_i(i)) for i in range(model.n)])
    A_eta = Xs @ cf.solve(Xs.T @ Vinv)
    A_gamma = Xt @ model.D_gamma_tilde @ Xt.T @ Vinv @ (np.eye(model.N) - A_eta)
    return SmootherMatrices(A_eta, A_gamma, df_fixed, df_random)


def information_criterion(loglik, df_total, N, kind="BIC"):
    """``-2 lik + 2 df`` (AIC) or ``-2 lik + log(N) df`` (BIC)."""
    kind = kind.upper()
    if kind == "AIC":
        return -2.0 * loglik + 2.0 * df_total
    if kind == "BIC":
        return -2.0 * loglik + math.log(N) * df_total
    raise ValueError(f"criterion must be AIC or BIC, got {kind!r}")


def score(fit, kind="BIC"):
    """Information criterion of a :class:`~funmixed.estimation.ModelFit`."""
    return information_criterion(fit.loglik, fit.df_total, fit.N, kind)


@dataclass(eq=False)
class SelectionResult:
    """Best smoothing parameters and every evaluation made on the way."""

    best_sp: SmoothingParameters
    criterion_value: float
    criterion_kind: str
    trace: list = field(default_factory=list)  # (SmoothingParameters, value) pairs
    n_failed: int = 0
    best_fit: object = field(default=None, repr=False)


def _sp_from_log(z):
    lo, hi = LOG10_BOUNDS
    z = np.clip(np.asarray(z, dtype=float), lo, hi)
    return SmoothingParameters(float(10.0 ** z[0]), float(10.0 ** z[1]))


def select(data, kind="BIC", max_iter=100, tol=1e-6, em_max_iter=200, start=(0.0, 0.0), step=1.0, warm_start=True):
    """Choose ``(lam, lam_gamma)`` by Nelder-Mead over log10 space.

    Each objective evaluation refits EM (warm-started from the previous
    evaluation's variance components when ``warm_start``) and scores it.
    Proposals are clamped to ``LOG10_BOUNDS``. After the search the best
    pair is refit from the standard EM initialization.

    Parameters
    ----------
    data : GeneDataset
    kind : {"AIC", "BIC"}
    max_iter : int
        Simplex iteration budget; 0 evaluates only the initial simplex.
    start : pair of float
        Initial vertex in log10 units; the other vertices are ``start`` plus
        ``step`` along each axis.

    Returns
    -------
    SelectionResult

    Raises
    ------
    SelectionError
        If every evaluation failed.
    """
    kind = kind.upper()
    if kind not in CRITERIA:
        raise ValueError(f"criterion must be AIC or BIC, got {kind!r}")
    data.design.check_identifiable()
    trace = []
    failures = []
    state = {"vc": None}
    cache = {}

    def objective(z):
        sp = _sp_from_log(z)
        key = (sp.lam, sp.lam_gamma)
        if key in cache:
            return cache[key]
        try:
            fit = fit_em(data, sp, tol=tol, max_iter=em_max_iter, init=state["vc"] if warm_start else None)
            value = score(fit, kind)
            if not np.isfinite(value):
                raise FunMixedError(f"non-finite criterion at {sp}")
            if warm_start:
                state["vc"] = fit.vc
        except (FunMixedError, np.linalg.LinAlgError, ValueError) as exc:
            failures.append(exc)
            value = np.inf
        cache[key] = value
        trace.append((sp, value))
        return value

    x0 = np.array(start, dtype=float)
    simplex = np.vstack([x0, x0 + [step, 0.0], x0 + [0.0, step]])
    simplex = np.clip(simplex, *LOG10_BOUNDS)
    if max_iter <= 0:
        for v in simplex:
            objective(v)
    else:
        minimize(
            objective,
            x0,
            method="Nelder-Mead",
            bounds=[LOG10_BOUNDS, LOG10_BOUNDS],
            options={"initial_simplex": simplex, "maxiter": int(max_iter), "xatol": XATOL, "fatol": FATOL},
        )
    finite = [(sp, v) for sp, v in trace if np.isfinite(v)]
    if not finite:
        first = failures[0] if failures else None
        raise SelectionError(f"all {len(trace)} smoothing-parameter evaluations failed for gene {data.gene_id}", first)
    best_sp, best_val = min(finite, key=lambda t: t[1])
    final = fit_em(data, best_sp, tol=tol, max_iter=em_max_iter)
    return SelectionResult(
        best_sp=best_sp,
        criterion_value=best_val,
        criterion_kind=kind,
        trace=trace,
        n_failed=len(failures),
        best_fit=final,
    )
