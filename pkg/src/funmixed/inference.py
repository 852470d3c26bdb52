"""Confidence bands for the fixed-effect curves and permutation tests with FDR control."""

import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from ._validation import check_positive_int, check_probability
from .estimation import ModelFit, _factor, _normal_equations, fit_em
from .exceptions import FunMixedError, ResamplingError
from .model import AssembledModel, SmoothingParameters
from .spline_basis import l2_norm_values

logger = logging.getLogger(__name__)

CURVES = ("mu", "alpha", "beta")
EFFECTS = ("gender", "age", "temporal")
TEMPORAL_SCHEMES = ("global", "per_individual")
LABEL_SCHEMES = ("stratified", "free")
_EFFECT_CODE = {"gender": 1, "age": 2, "temporal": 3}

#: Bootstrap aborts if more than this fraction of refits fail.
BOOTSTRAP_MAX_FAIL = 0.05
#: Null-pool construction aborts if more than this fraction of refits fail.
PERMUTATION_MAX_FAIL = 0.10


@dataclass(eq=False)
class ConfidenceBand:
    """Pointwise band for one fixed-effect curve at the design points."""

    curve: str
    level: float
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    method: str

    @property
    def half_width(self):
        return 0.5 * (self.upper - self.lower)


@dataclass(eq=False)
class TestResult:
    """Outcome of one effect test for one gene."""

    __test__ = False  # not a pytest class

    gene_id: str
    effect: str
    statistic: float
    p_value: float
    q_value: float = np.nan
    flagged: bool = False


@dataclass(eq=False)
class NullPool:
    """Permutation statistics pooled across genes for one effect."""

    effect: str
    statistics: np.ndarray  # sorted, failed draws excluded
    permutations_per_gene: int
    seed: int
    n_failed: int = 0
    per_gene: dict = field(default_factory=dict, repr=False)

    @property
    def size(self):
        return self.statistics.size


# -- confidence bands ---------------------------------------------------------


def _model_of(fit_or_model):
    if isinstance(fit_or_model, AssembledModel):
        return fit_or_model
    return AssembledModel(fit_or_model.data, fit_or_model.vc, fit_or_model.sp)


def theoretical_bands(model, sp=None, level=0.95):
    """Pointwise bands from ``cov(eta) = H^-1 X*' V^-1 X* H^-1``.

    Parameters
    ----------
    model : AssembledModel or ModelFit
    sp : SmoothingParameters, optional
        Overrides the penalties carried by ``model``.
    level : float
        Coverage level; ``z`` is the standard normal ``1 - (1 - level)/2`` quantile.

    Returns
    -------
    dict
        ``{"mu": ConfidenceBand, "alpha": ..., "beta": ...}``
    """
    level = check_probability(level, "level")
    model = _model_of(model)
    if sp is not None and sp != model.sp:
        model = AssembledModel(model.data, model.vc, sp, design=model.design)
    S, b = _normal_equations(model)
    cf = _factor(S, model)
    eta = cf.solve(b)
    HinvS = cf.solve(S)
    cov = cf.solve(HinvS.T).T
    var = np.clip(np.diag(cov), 0.0, None)
    z = norm.ppf(1.0 - (1.0 - level) / 2.0)
    half = z * np.sqrt(var)
    M = model.M
    bands = {}
    for k, name in enumerate(CURVES):
        sl = slice(k * M, (k + 1) * M)
        bands[name] = ConfidenceBand(name, level, eta[sl], eta[sl] - half[sl], eta[sl] + half[sl], "theoretical")
    return bands


def _bootstrap_sample(fit, data, rng):
    design = data.design
    E = np.vstack([fit.mu, fit.alpha, fit.beta])
    values = np.empty(design.N)
    pool = fit.residuals
    for i, idx in enumerate(design.obs_idx):
        j = rng.integers(design.n)
        eps = pool[rng.integers(pool.size, size=idx.size)]
        fixed = design.signs[i] @ E
        s = design.offsets[i]
        values[s : s + idx.size] = fixed[idx] + fit.gamma[j, idx] + eps
    return data.with_values(values)


def bootstrap_bands(fit, data=None, B=1000, level=0.95, seed=0, tol=1e-6, max_iter=200):
    """Pointwise percentile bands from resampling random curves and residuals.

    Each synthetic individual keeps its labels and observation times, takes a
    random curve drawn with replacement from the fitted ``gamma_j`` and
    residuals drawn with replacement from the pooled residuals; the model is
    refit at the same smoothing parameters. Bands are widened if needed so
    they always contain the point estimate.

    Raises
    ------
    ResamplingError
        If more than 5% of refits fail.
    """
    data = fit.data if data is None else data
    level = check_probability(level, "level")
    B = check_positive_int(B, "B", minimum=100)
    rng = np.random.default_rng(seed)
    draws = {name: [] for name in CURVES}
    failed = 0
    for _ in range(B):
        boot = _bootstrap_sample(fit, data, rng)
        try:
            f = fit_em(boot, fit.sp, tol=tol, max_iter=max_iter, init=fit.vc)
        except FunMixedError:
            failed += 1
            continue
        for name in CURVES:
            draws[name].append(getattr(f, name))
    if failed > BOOTSTRAP_MAX_FAIL * B:
        raise ResamplingError(f"{failed} of {B} bootstrap refits failed", failed, B)
    lo_q, hi_q = (1.0 - level) / 2.0, (1.0 + level) / 2.0
    bands = {}
    for name in CURVES:
        arr = np.vstack(draws[name])
        est = getattr(fit, name)
        lower = np.minimum(np.quantile(arr, lo_q, axis=0), est)
        upper = np.maximum(np.quantile(arr, hi_q, axis=0), est)
        bands[name] = ConfidenceBand(name, level, est.copy(), lower, upper, "bootstrap")
    return bands


# -- test statistics and permutation nulls --------------------------------------


def effect_statistic(fit, effect):
    """L2 norm of the effect curve: ``||alpha||`` (gender), ``||beta||`` (age), ``||mu'||`` (temporal)."""
    if effect == "gender":
        return l2_norm_values(fit.grid, fit.alpha, 0)
    if effect == "age":
        return l2_norm_values(fit.grid, fit.beta, 0)
    if effect == "temporal":
        return l2_norm_values(fit.grid, fit.mu, 1)
    raise ValueError(f"effect must be one of {EFFECTS}, got {effect!r}")


def gene_rng(seed, gene_id, effect):
    """Generator seeded from the master seed and a stable hash of the gene key."""
    digest = hashlib.sha256(str(gene_id).encode("utf-8")).digest()
    words = [int.from_bytes(digest[k : k + 4], "little") for k in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *words, _EFFECT_CODE[effect]]))


def _non_identity_permutation(rng, labels, strata=None, max_tries=100):
    # with strata, labels are shuffled only among individuals of the same stratum
    labels = np.asarray(labels)
    groups = [np.arange(labels.size)] if strata is None else [np.flatnonzero(strata == v) for v in np.unique(strata)]
    perm = labels
    for _ in range(max_tries):
        perm = labels.copy()
        for idx in groups:
            perm[idx] = rng.permutation(labels[idx])
        if not np.array_equal(perm, labels):
            return perm
    return perm


def permute_dataset(data, effect, rng, temporal_scheme="global", label_scheme="stratified"):
    """One null draw: shuffled labels (gender/age) or relabelled design points (temporal).

    ``label_scheme="stratified"`` shuffles gender labels within age groups
    (and age labels within genders), so every draw keeps the observed
    gender-by-age table and the other effect stays estimated as precisely as
    in the observed design. ``"free"`` shuffles across all individuals,
    preserving only the label counts.

    ``temporal_scheme="global"`` applies one permutation of the design points
    to every individual; ``"per_individual"`` draws one per individual.
    """
    if effect in ("gender", "age"):
        if label_scheme not in LABEL_SCHEMES:
            raise ValueError(f"label_scheme must be one of {LABEL_SCHEMES}, got {label_scheme!r}")
        genders = np.array([s.gender for s in data.individuals])
        ages = np.array([s.age_group for s in data.individuals])
        own, other = (genders, ages) if effect == "gender" else (ages, genders)
        perm = _non_identity_permutation(rng, own, other if label_scheme == "stratified" else None)
        return data.with_labels(genders=perm) if effect == "gender" else data.with_labels(ages=perm)
    if effect == "temporal":
        if temporal_scheme == "global":
            return data.with_permuted_points(_non_identity_permutation(rng, np.arange(data.grid.M)))
        if temporal_scheme == "per_individual":
            M, pts = data.grid.M, data.grid.points
            while True:
                pis = [rng.permutation(M) for _ in range(data.n)]
                if any(np.any(pi != np.arange(M)) for pi in pis):
                    break
            return data.with_times([pts[pi[idx]] for pi, idx in zip(pis, data.design.obs_idx)])
        raise ValueError(f"temporal_scheme must be one of {TEMPORAL_SCHEMES}, got {temporal_scheme!r}")
    raise ValueError(f"effect must be one of {EFFECTS}, got {effect!r}")


def _fit_statistic(data, effect, sp, init, reselect, tol, max_iter, select_kwargs):
    try:
        if reselect:
            from .selection import select

            sp = select(data, tol=tol, em_max_iter=max_iter, **(select_kwargs or {})).best_sp
        fit = fit_em(data, sp, tol=tol, max_iter=max_iter, init=init, with_df=False)
        return effect_statistic(fit, effect)
    except FunMixedError as exc:
        logger.debug("null refit failed for %s: %s", data.gene_id, exc)
        return np.nan


def gene_null_statistics(
    data,
    effect,
    n_perm,
    sp,
    seed,
    init=None,
    reselect=False,
    tol=1e-6,
    max_iter=200,
    select_kwargs=None,
    temporal_scheme="global",
    label_scheme="stratified",
):
    """``n_perm`` permutation statistics for one gene; failed refits are NaN.

    Raises the assembly error (e.g. inestimable effect) if the observed data
    itself cannot be modelled.
    """
    data.design.check_identifiable()
    rng = gene_rng(seed, data.gene_id, effect)
    out = np.empty(n_perm)
    for k in range(n_perm):
        out[k] = _fit_statistic(permute_dataset(data, effect, rng, temporal_scheme, label_scheme), effect, sp, init, reselect, tol, max_iter, select_kwargs)
    return out


def _sp_for(sp_policy, gene_id):
    if isinstance(sp_policy, SmoothingParameters):
        return sp_policy
    if isinstance(sp_policy, ModelFit):
        return sp_policy.sp
    return sp_policy[gene_id]


def _gene_job(args):
    return gene_null_statistics(*args[:-1], **args[-1])


def build_null_pool(
    genes,
    effect,
    permutations_per_gene=32,
    sp_policy=None,
    seed=0,
    inits=None,
    reselect=False,
    tol=1e-6,
    max_iter=200,
    n_jobs=1,
    select_kwargs=None,
    temporal_scheme="global",
    label_scheme="stratified",
):
    """Pool permutation statistics across genes.

    Parameters
    ----------
    genes : sequence of GeneDataset
    effect : {"gender", "age", "temporal"}
    permutations_per_gene : int
    sp_policy : SmoothingParameters or mapping gene_id -> SmoothingParameters
        Penalties used for every null refit (the observed-data selection by
        default in the pipeline). With ``reselect=True`` they are re-selected
        for every permuted dataset instead.
    seed : int
        Master seed; each gene's generator is derived from it and the gene key.
    inits : mapping gene_id -> VarianceComponents, optional
        EM warm starts for the null refits.
    temporal_scheme : {"global", "per_individual"}
        How the temporal test relabels design points; see :func:`permute_dataset`.
    label_scheme : {"stratified", "free"}
        How the gender and age tests shuffle labels; see :func:`permute_dataset`.
    n_jobs : int
        Worker processes; results do not depend on it.

    Raises
    ------
    ResamplingError
        If more than 10% of null refits fail.
    """
    if effect not in EFFECTS:
        raise ValueError(f"effect must be one of {EFFECTS}, got {effect!r}")
    if temporal_scheme not in TEMPORAL_SCHEMES:
        raise ValueError(f"temporal_scheme must be one of {TEMPORAL_SCHEMES}, got {temporal_scheme!r}")
    if label_scheme not in LABEL_SCHEMES:
        raise ValueError(f"label_scheme must be one of {LABEL_SCHEMES}, got {label_scheme!r}")
    genes = list(genes)
    if not genes:
        raise ValueError("need at least one gene")
    n_perm = check_positive_int(permutations_per_gene, "permutations_per_gene")
    sp_policy = SmoothingParameters() if sp_policy is None else sp_policy
    inits = inits or {}
    jobs = [
        (
            g,
            effect,
            n_perm,
            _sp_for(sp_policy, g.gene_id),
            seed,
            {
                "init": inits.get(g.gene_id),
                "reselect": reselect,
                "tol": tol,
                "max_iter": max_iter,
                "select_kwargs": select_kwargs,
                "temporal_scheme": temporal_scheme,
                "label_scheme": label_scheme,
            },
        )
        for g in genes
    ]
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            results = list(ex.map(_gene_job, jobs, chunksize=max(1, len(jobs) // (4 * n_jobs))))
    else:
        results = [_gene_job(j) for j in jobs]
    per_gene = {g.gene_id: r for g, r in zip(genes, results)}
    allstats = np.concatenate(results)
    ok = np.isfinite(allstats)
    n_failed = int(np.sum(~ok))
    if n_failed > PERMUTATION_MAX_FAIL * allstats.size:
        raise ResamplingError(f"{n_failed} of {allstats.size} null refits failed for {effect}", n_failed, allstats.size)
    return NullPool(
        effect=effect,
        statistics=np.sort(allstats[ok]),
        permutations_per_gene=n_perm,
        seed=int(seed),
        n_failed=n_failed,
        per_gene=per_gene,
    )


def empirical_pvalues(observed, pool):
    """``p = (1 + #{null >= observed}) / (1 + K)``; non-finite observations get p = 1.

    Parameters
    ----------
    observed : array-like of float
    pool : NullPool or array-like of null statistics
    """
    null = pool.statistics if isinstance(pool, NullPool) else np.sort(np.asarray(pool, dtype=float))
    null = null[np.isfinite(null)]
    if null.size == 0:
        raise ValueError("null pool is empty")
    obs = np.atleast_1d(np.asarray(observed, dtype=float))
    finite = np.isfinite(obs)
    p = np.ones(obs.shape)
    n_ge = null.size - np.searchsorted(null, obs[finite], side="left")
    p[finite] = (1.0 + n_ge) / (1.0 + null.size)
    return p


def bh_fdr(p_values):
    """Benjamini-Hochberg step-up q-values, ``q_(i) = min_{j >= i} m p_(j) / j``."""
    p = np.asarray(p_values, dtype=float)
    if p.ndim != 1:
        p = p.ravel()
    if np.any((p < 0) | (p > 1)) or np.any(~np.isfinite(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    ranked = p[order] * m / np.arange(1, m + 1)
    ranked = np.minimum.accumulate(ranked[::-1])[::-1]
    q = np.empty(m)
    q[order] = np.minimum(ranked, 1.0)
    return q


def permutation_test(genes, fits, effect, permutations_per_gene=32, seed=0, pooled=True, n_jobs=1, **pool_kwargs):
    """Observed statistics, pooled (or per-gene) permutation p-values and BH q-values.

    Parameters
    ----------
    genes : sequence of GeneDataset
    fits : mapping gene_id -> ModelFit
        Observed-data fits; their smoothing parameters are reused for the null
        refits, which start EM from the same standard initialization as the
        observed fit so both go through an identical procedure. Genes missing
        from ``fits`` get a non-finite statistic (p = 1, flagged).

    Returns
    -------
    results : list of TestResult
    pool : NullPool
    """
    genes = list(genes)
    usable = [g for g in genes if g.gene_id in fits]
    sp_policy = {g.gene_id: fits[g.gene_id].sp for g in usable}
    pool = build_null_pool(usable, effect, permutations_per_gene, sp_policy, seed, n_jobs=n_jobs, **pool_kwargs)
    observed = np.array([effect_statistic(fits[g.gene_id], effect) if g.gene_id in fits else np.nan for g in genes])
    if pooled:
        p = empirical_pvalues(observed, pool)
    else:
        p = np.ones(len(genes))
        for k, g in enumerate(genes):
            if g.gene_id in pool.per_gene and np.isfinite(observed[k]):
                p[k] = empirical_pvalues(observed[k : k + 1], pool.per_gene[g.gene_id])[0]
    q = bh_fdr(p)
    results = [
        TestResult(g.gene_id, effect, float(observed[k]), float(p[k]), float(q[k]), bool(not np.isfinite(observed[k])))
        for k, g in enumerate(genes)
    ]
    return results, pool
