"""Penalized BLUE/BLUP of the effect curves and EM for the variance components."""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .model import LOG_2PI, AssembledModel, SmoothingParameters, VarianceComponents, assemble
from .exceptions import SingularSystemError

logger = logging.getLogger(__name__)

SIGMA2_FLOOR = 1e-12
# relative pivot below which the penalized normal equations count as singular
_PIVOT_RTOL = 1e-13


@dataclass(eq=False)
class _Solution:
    eta: np.ndarray
    gamma: np.ndarray  # n x M
    fitted: np.ndarray
    residuals: np.ndarray
    Egg_sum: np.ndarray
    Eee: float
    loglik: float
    H_factor: "_PenalizedSystem"
    S: np.ndarray  # X*^T V^-1 X*


class _PenalizedSystem:
    """Cholesky factor of ``H = S + lam G*`` in the rotated penalty basis.

    Each curve block is rotated so its leading columns span the linear
    functions, on which the penalty is exactly zero. A heavy ``lam`` then
    cannot round away the data information in those directions.
    """

    def __init__(self, S, design, lam):
        Q = design.rotation
        M = Q.shape[0]
        St = (Q.T @ S.reshape(3, M, 3, M).transpose(0, 2, 1, 3) @ Q).transpose(0, 2, 1, 3).reshape(3 * M, 3 * M)
        H = St + lam * np.kron(np.eye(3), design.G_rotated)
        try:
            cf = sla.cho_factor(H, lower=True, check_finite=False)
        except sla.LinAlgError as exc:
            raise SingularSystemError(f"penalized normal equations not positive definite: {exc}") from exc
        d = np.diag(cf[0])
        # a pivot that lost nearly all of its diagonal entry marks a dependent direction
        if not np.all(np.isfinite(d)) or np.any(d * d <= _PIVOT_RTOL * np.diag(H)):
            raise SingularSystemError("penalized normal equations are rank deficient")
        self._Q = Q
        self._cf = cf

    def _rotate(self, B, forward):
        M = self._Q.shape[0]
        R = self._Q.T if forward else self._Q
        shp = B.shape
        return (R @ B.reshape(3, M, -1)).reshape(shp)

    def solve(self, B):
        """``H^-1 B`` for a vector or a matrix with ``3M`` rows."""
        X = sla.cho_solve(self._cf, self._rotate(np.asarray(B, dtype=float), True), check_finite=False)
        return self._rotate(X, False)


def _factor(S, model):
    return _PenalizedSystem(S, model.design, model.sp.lam)


def _kron(a, b):
    # np.kron for 2-D inputs without its generic-shape overhead
    return (a[:, None, :, None] * b[None, :, None, :]).reshape(a.shape[0] * b.shape[0], a.shape[1] * b.shape[1])


def _normal_equations(model):
    M = model.M
    S = np.zeros((3 * M, 3 * M))
    b = np.zeros((3, M))
    for p, pc in zip(model.design.patterns, model.cov):
        S += _kron(p.CC, pc.P)
        b += p.C.T @ (p.Y @ pc.Q)
    return S, b.ravel()


def _solve(model, eta=None):
    """BLUE/BLUP plus E-step sums and marginal log-likelihood in one pass.

    If ``eta`` is given it replaces the penalized GLS estimate.
    """
    S, b = _normal_equations(model)
    cf = None
    if eta is None:
        cf = _factor(S, model)
        eta = cf.solve(b)
    eta = np.asarray(eta, dtype=float).ravel()
    E = eta.reshape(3, model.M)
    Dg = model.D_gamma
    s2 = model.vc.sigma2
    design = model.design
    M = model.M
    gamma = np.zeros((design.n, M))
    fitted = np.zeros(design.N)
    Egg_sum = np.zeros((M, M))
    Eee = 0.0
    loglik = 0.0
    for p, pc in zip(design.patterns, model.cov):
        m, n_p = p.Y.shape
        F = (p.C @ E)[:, p.idx]
        R = p.Y - F
        RV = R @ pc.Vinv
        Gam = (RV @ p.X) @ Dg
        Xg = Gam[:, p.idx]
        eps = R - Xg
        gamma[p.members] = Gam
        pos = design.offsets[p.members][:, None] + np.arange(n_p)
        fitted[pos] = F + Xg
        Egg_sum += Gam.T @ Gam + m * (Dg - Dg @ pc.P @ Dg)
        Eee += float(np.sum(eps * eps)) + m * s2 * (n_p - s2 * np.trace(pc.Vinv))
        loglik -= 0.5 * (m * (n_p * LOG_2PI + pc.logdet) + float(np.sum(RV * R)))
    return _Solution(
        eta=eta,
        gamma=gamma,
        fitted=fitted,
        residuals=design.y - fitted,
        Egg_sum=Egg_sum,
        Eee=Eee,
        loglik=loglik,
        H_factor=cf,
        S=S,
    )


def blue_blup(model, sp=None):
    """Penalized fixed-effect estimate and random-curve predictions.

    ``eta = (X*' V^-1 X* + lam G*)^-1 X*' V^-1 y`` and
    ``gamma_i = D_gamma X_i' V_i^-1 (y_i - X*_i eta)``.

    Parameters
    ----------
    model : AssembledModel
    sp : SmoothingParameters, optional
        Defaults to ``model.sp``. If different, the model is re-assembled.

    Returns
    -------
    eta : ndarray, shape (3M,)
        ``[mu, alpha, beta]`` at the design points.
    gamma : ndarray, shape (n*M,)
        Stacked random curves at the design points.
    """
    if sp is not None and sp != model.sp:
        model = AssembledModel(model.data, model.vc, sp, design=model.design)
    sol = _solve(model)
    return sol.eta, sol.gamma.ravel()


def e_step(model, eta):
    """Conditional expectations of the sufficient statistics given ``y`` and ``eta``.

    Returns
    -------
    Egg : ndarray, shape (n, M, M)
        ``E[gamma_i gamma_i' | y]`` for each individual.
    Eee : float
        ``E[eps' eps | y]``.
    """
    sol = _solve(model, eta=eta)
    Dg = model.D_gamma
    Egg = np.empty((model.n, model.M, model.M))
    for p, pc in zip(model.design.patterns, model.cov):
        post = Dg - Dg @ pc.P @ Dg
        for i in p.members:
            g = sol.gamma[i]
            Egg[i] = np.outer(g, g) + post
    return Egg, sol.Eee


def m_step(Egg, Eee, n, N):
    """Maximum-likelihood update ``D = mean_i Egg_i``, ``sigma2 = Eee / N``.

    ``Egg`` may be the (n, M, M) stack or its sum over individuals. A
    non-positive ``sigma2`` is floored at ``SIGMA2_FLOOR``.
    """
    Egg = np.asarray(Egg, dtype=float)
    total = Egg.sum(axis=0) if Egg.ndim == 3 else Egg
    D = total / n
    D = 0.5 * (D + D.T)
    w, U = np.linalg.eigh(D)
    if w[0] < 0:
        D = (U * np.clip(w, 0.0, None)) @ U.T
        D = 0.5 * (D + D.T)
    sigma2 = Eee / N
    if not sigma2 > SIGMA2_FLOOR:
        sigma2 = SIGMA2_FLOOR
    return VarianceComponents.trusted(D, sigma2)


def initial_variance_components(data):
    """Scale-aware starting values for EM.

    ``sigma2`` is half the variance of within-individual first differences
    (in time order); ``D`` is the variance of per-individual means times I.
    """
    y = data.y
    scale = float(np.var(y)) if y.size > 1 else 1.0
    floor = max(1e-8 * scale, SIGMA2_FLOOR)
    diffs = [np.diff(s.values[np.argsort(s.obs_times, kind="stable")]) for s in data.individuals if s.n_obs > 1]
    diffs = np.concatenate(diffs) if diffs else np.empty(0)
    sigma2 = float(np.var(diffs)) / 2.0 if diffs.size > 1 else scale / 2.0
    means = np.array([s.values.mean() for s in data.individuals])
    s2 = float(np.var(means))
    return VarianceComponents(max(s2, floor) * np.eye(data.grid.M), max(sigma2, floor))


@dataclass(eq=False)
class ModelFit:
    """Result of :func:`fit_em` for one gene."""

    gene_id: str
    grid: object
    mu: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    vc: VarianceComponents
    sp: SmoothingParameters
    df_fixed: float
    df_random: float
    loglik: float
    fitted: np.ndarray
    residuals: np.ndarray
    em_iterations: int
    converged: bool
    sigma2_floored: bool = False
    d_near_singular: bool = False
    loglik_trace: list = field(default_factory=list)
    data: object = field(default=None, repr=False)

    @property
    def eta(self):
        return np.concatenate([self.mu, self.alpha, self.beta])

    @property
    def df_total(self):
        return self.df_fixed + self.df_random + 1.0

    @property
    def N(self):
        return self.fitted.size

    @property
    def standardized_residuals(self):
        return self.residuals / np.sqrt(self.vc.sigma2)


def degrees_of_freedom(model, sol=None):
    """Traces of the fixed- and random-effect smoother matrices.

    Uses ``tr(A_eta) = tr(H^-1 S)`` and
    ``tr(A_gamma) = sum_i tr(D_gamma P_i) - tr(H^-1 sum_i c_i c_i' (x) P_i D_gamma P_i)``
    with ``P_i = X_i' V_i^-1 X_i``, so no N x N matrix is formed.
    """
    if sol is None or sol.H_factor is None:
        S, _ = _normal_equations(model)
        cf = _factor(S, model)
    else:
        S, cf = sol.S, sol.H_factor
    Dg = model.D_gamma
    T = np.zeros_like(S)
    tr_random = 0.0
    for p, pc in zip(model.design.patterns, model.cov):
        PD = pc.P @ Dg
        T += _kron(p.CC, PD @ pc.P)
        tr_random += p.members.size * np.trace(PD)
    HinvS = cf.solve(S)
    HinvT = cf.solve(T)
    return float(np.trace(HinvS)), float(tr_random - np.trace(HinvT))


def _param_vector(vc):
    return np.concatenate([[vc.sigma2], vc.D.ravel()])


def fit_em(data, sp, tol=1e-6, max_iter=200, init=None, engine="compiled", with_df=True):
    """Fit the penalized functional mixed model by EM at fixed smoothing parameters.

    Iterates assemble -> BLUE/BLUP -> E-step -> M-step until the largest
    change in ``(sigma2, vec D)``, relative to the largest current
    magnitude, drops below ``tol``.

    Parameters
    ----------
    data : GeneDataset
    sp : SmoothingParameters
    tol : float
    max_iter : int
    init : VarianceComponents, optional
        Warm start; defaults to :func:`initial_variance_components`.
    engine : {"compiled", "numpy"}
        ``compiled`` runs the iterations in a numba loop; ``numpy`` uses the
        reference implementation. Both finish with the same numpy evaluation
        at the returned variance components.
    with_df : bool
        Compute the smoother-matrix degrees of freedom (NaN otherwise).

    Returns
    -------
    ModelFit
        On non-convergence the iterate with the highest marginal
        log-likelihood is returned with ``converged=False``.
    """
    data.design.check_identifiable()
    vc = init if init is not None else initial_variance_components(data)
    if engine == "compiled":
        return _fit_em_compiled(data, sp, tol, max_iter, vc, with_df)
    if engine != "numpy":
        raise ValueError(f"engine must be 'compiled' or 'numpy', got {engine!r}")
    n, N = data.n, data.N
    trace = []
    converged = False
    best = None
    floored = False
    it = 0
    for it in range(1, max_iter + 1):
        model = AssembledModel(data, vc, sp)
        sol = _solve(model)
        trace.append(sol.loglik)
        if best is None or sol.loglik >= best[2].loglik:
            best = (vc, model, sol)
        new = m_step(sol.Egg_sum, sol.Eee, n, N)
        floored = new.sigma2 <= SIGMA2_FLOOR
        old_p, new_p = _param_vector(vc), _param_vector(new)
        scale = max(float(np.max(np.abs(old_p))), 1e-300)
        delta = float(np.max(np.abs(new_p - old_p))) / scale
        vc = new
        if delta < tol:
            converged = True
            break
    if converged:
        model = AssembledModel(data, vc, sp)
        sol = _solve(model)
        trace.append(sol.loglik)
    else:
        logger.debug("EM for gene %s did not converge in %d iterations", data.gene_id, max_iter)
        vc, model, sol = best
    return _make_fit(data, model, sol, it, converged, floored, trace, with_df)


def _fit_em_compiled(data, sp, tol, max_iter, vc, with_df):
    from . import _em_kernel as K

    design = data.design
    D, s2, it, status, floored, trace = K.em_loop(
        *design.packed,
        design.rotation,
        design.G_rotated,
        design.G_root,
        float(sp.lam),
        float(sp.lam_gamma),
        np.array(vc.D, dtype=float),
        float(vc.sigma2),
        float(tol),
        int(max_iter),
        design.n,
        design.N,
        SIGMA2_FLOOR,
        _PIVOT_RTOL,
    )
    if status == K.V_NOT_PD:
        raise SingularSystemError("V_i not positive definite")
    if status == K.H_SINGULAR:
        raise SingularSystemError("penalized normal equations are rank deficient")
    converged = status == K.OK
    if not converged:
        logger.debug("EM for gene %s did not converge in %d iterations", data.gene_id, max_iter)
    model = AssembledModel(data, VarianceComponents.trusted(D, s2), sp, design=design)
    sol = _solve(model)
    trace = list(trace)
    if converged:
        trace.append(sol.loglik)
    return _make_fit(data, model, sol, int(it), converged, bool(floored), trace, with_df)


def _make_fit(data, model, sol, iterations, converged, floored, trace, with_df=True):
    df_fixed, df_random = degrees_of_freedom(model, sol) if with_df else (np.nan, np.nan)
    M = model.M
    return ModelFit(
        gene_id=data.gene_id,
        grid=data.grid,
        mu=sol.eta[:M].copy(),
        alpha=sol.eta[M : 2 * M].copy(),
        beta=sol.eta[2 * M :].copy(),
        gamma=sol.gamma,
        vc=model.vc,
        sp=model.sp,
        df_fixed=df_fixed,
        df_random=df_random,
        loglik=sol.loglik,
        fitted=sol.fitted,
        residuals=sol.residuals,
        em_iterations=iterations,
        converged=converged,
        sigma2_floored=floored,
        d_near_singular=model.ridged,
        loglik_trace=trace,
        data=data,
    )


def fit_fixed(data, vc, sp):
    """Single BLUE/BLUP evaluation at known variance components (no EM)."""
    model = assemble(data, vc, sp)
    sol = _solve(model)
    return _make_fit(data, model, sol, 0, True, False, [sol.loglik])
