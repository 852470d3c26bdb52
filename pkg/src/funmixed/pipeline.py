"""Batch orchestration: ingestion, per-gene fitting, testing, fPCA and export.

Every output table is written with floats at 17 significant digits so that
identical inputs and configuration give byte-identical files, whatever the
worker count.
"""

import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import norm

from ._validation import age_group_from_age, check_positive_int, check_probability, normalize_age, normalize_gender
from .exceptions import FunMixedError, InestimableEffectError, SchemaError
from .fpca import DEFAULT_MAX_COMPONENTS, DEFAULT_VARIANCE_TARGET, NORMALIZATIONS, decompose, discretize, loadings
from .inference import CURVES, EFFECTS, LABEL_SCHEMES, TEMPORAL_SCHEMES, bootstrap_bands, permutation_test, theoretical_bands
from .model import GeneDataset, IndividualSeries, SmoothingParameters, VarianceComponents
from .selection import CRITERIA, select
from .simulate import simulate_batch
from .spline_basis import TimeGrid

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("gene_id", "subject_id", "gender", "day", "value")
BAND_METHODS = ("theoretical", "bootstrap", "none")

FITS_FILE = "fits.csv"
COVARIANCE_FILE = "random_covariance.csv"
STATUS_FILE = "gene_status.csv"
DIAGNOSTICS_FILE = "diagnostics.csv"
TESTS_FILE = "tests.csv"
FPCA_COMPONENTS_FILE = "fpca_components.csv"
FPCA_EIGENVALUES_FILE = "fpca_eigenvalues.csv"
FPCA_LOADINGS_FILE = "fpca_loadings.csv"
MANIFEST_FILE = "run_manifest.json"
# "per_gene" compares each gene only with its own permutation statistics
NULL_POOLS = ("pooled", "per_gene")


@dataclass
class RunConfig:
    """Settings for one batch run; field names double as CLI flags and config keys."""

    input: str = ""
    output_dir: str = "funmixed_out"
    criterion: str = "BIC"
    permutations: int = 32
    null_pool: str = "pooled"
    temporal_scheme: str = "global"
    label_scheme: str = "stratified"
    fdr: float = 0.10
    level: float = 0.95
    band_method: str = "theoretical"
    bootstrap_samples: int = 1000
    n_grid: int = 1000
    normalization: str = "subtract_first"
    variance_target: float = DEFAULT_VARIANCE_TARGET
    max_components: int = DEFAULT_MAX_COMPONENTS
    simplex_budget: int = 100
    em_tol: float = 1e-6
    em_max_iter: int = 200
    seed: int = 0
    workers: int = 1
    age_cutoff: float = 55.0

    def validate(self):
        """Raise ``ValueError`` if any field is outside its documented range."""
        if self.criterion.upper() not in CRITERIA:
            raise ValueError(f"criterion must be one of {CRITERIA}")
        self.criterion = self.criterion.upper()
        check_positive_int(self.permutations, "permutations")
        if self.null_pool not in NULL_POOLS:
            raise ValueError(f"null_pool must be one of {NULL_POOLS}")
        if self.temporal_scheme not in TEMPORAL_SCHEMES:
            raise ValueError(f"temporal_scheme must be one of {TEMPORAL_SCHEMES}")
        if self.label_scheme not in LABEL_SCHEMES:
            raise ValueError(f"label_scheme must be one of {LABEL_SCHEMES}")
        check_probability(self.fdr, "fdr")
        check_probability(self.level, "level")
        check_probability(self.variance_target, "variance_target", open_interval=False)
        if self.band_method not in BAND_METHODS:
            raise ValueError(f"band_method must be one of {BAND_METHODS}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        check_positive_int(self.bootstrap_samples, "bootstrap_samples")
        check_positive_int(self.n_grid, "n_grid", minimum=2)
        check_positive_int(self.max_components, "max_components")
        check_positive_int(self.simplex_budget, "simplex_budget", minimum=0)
        check_positive_int(self.em_max_iter, "em_max_iter")
        check_positive_int(self.workers, "workers")
        if not self.em_tol > 0:
            raise ValueError("em_tol must be positive")
        if int(self.seed) < 0:
            raise ValueError("seed must be non-negative")
        return self

    @classmethod
    def field_types(cls):
        return {f.name: f.type for f in dataclasses.fields(cls)}

    @classmethod
    def from_file(cls, path, section="run", **overrides):
        """Read ``[run]`` keys from an INI file; non-None ``overrides`` win."""
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise FileNotFoundError(path)
        values = dict(parser[section]) if parser.has_section(section) else {}
        return cls.from_mapping(values, **overrides)

    @classmethod
    def from_mapping(cls, values, **overrides):
        kwargs = {}
        known = cls.field_types()
        for key, raw in {**values, **{k: v for k, v in overrides.items() if v is not None}}.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = known[key](raw) if isinstance(raw, str) else raw
        return cls(**kwargs).validate()


# -- ingestion ----------------------------------------------------------------


@dataclass
class IngestResult:
    """Datasets that passed validation and per-gene rejection messages."""

    genes: list
    rejected: dict = field(default_factory=dict)


def _fail(strict, rejected, gene, message):
    if strict:
        raise SchemaError(f"gene {gene}: {message}")
    rejected[gene] = message


def ingest(path, age_cutoff=55.0, strict=True):
    """Read the long-format observation table into one GeneDataset per gene.

    Columns: ``gene_id, subject_id, gender, age_group, day, value`` and an
    optional ``replicate``. A numeric ``age`` column may replace
    ``age_group``; ages at or below ``age_cutoff`` are young. Genes appear in
    order of first occurrence; each gene's design grid is its distinct days.

    Parameters
    ----------
    strict : bool
        Raise on the first invalid gene. Otherwise invalid genes are skipped
        and reported in ``IngestResult.rejected``.

    Raises
    ------
    SchemaError
        Missing file contents or columns (always), or invalid rows when strict.
    """
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError as exc:
        raise SchemaError(f"{path}: empty file") from exc
    df.columns = [c.strip() for c in df.columns]
    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if "age_group" not in df.columns and "age" not in df.columns:
        missing.append("age_group")
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    if df.empty:
        raise SchemaError(f"{path}: no data rows")
    has_rep = "replicate" in df.columns
    genes, rejected = [], {}
    for gene, rows in df.groupby("gene_id", sort=False):
        try:
            genes.append(_gene_from_rows(gene, rows, has_rep, age_cutoff))
        except (ValueError, FunMixedError) as exc:
            _fail(strict, rejected, gene, str(exc))
    if not genes and not rejected:
        raise SchemaError(f"{path}: no genes")
    return IngestResult(genes, rejected)


def _numeric(col, name):
    out = pd.to_numeric(col, errors="coerce")
    bad = out.isna() | ~np.isfinite(out.to_numpy(dtype=float))
    if bad.any():
        raise SchemaError(f"non-numeric {name} {col[bad].iloc[0]!r}")
    return out.to_numpy(dtype=float)


def _gene_from_rows(gene, rows, has_rep, age_cutoff):
    day = _numeric(rows["day"], "day")
    value = _numeric(rows["value"], "value")
    genders = [normalize_gender(g) for g in rows["gender"]]
    if "age_group" in rows.columns and (rows["age_group"] != "").all():
        ages = [normalize_age(a) for a in rows["age_group"]]
    else:
        ages = [age_group_from_age(a, age_cutoff) for a in _numeric(rows["age"], "age")]
    keys = list(zip(rows["subject_id"], day, rows["replicate"] if has_rep else [""] * len(rows)))
    if len(set(keys)) != len(keys):
        seen = set()
        dup = next(k for k in keys if k in seen or seen.add(k))
        raise SchemaError(f"duplicate observation key (subject, day, replicate) = {dup}")
    by_subject = {}
    for k, sid in enumerate(rows["subject_id"]):
        by_subject.setdefault(sid, []).append(k)
    inds = []
    for sid, ks in by_subject.items():
        gs, as_ = {genders[k] for k in ks}, {ages[k] for k in ks}
        if len(gs) > 1 or len(as_) > 1:
            raise SchemaError(f"subject {sid} has inconsistent labels")
        ks = sorted(ks, key=lambda k: day[k])
        inds.append(IndividualSeries(sid, genders[ks[0]], ages[ks[0]], day[ks], value[ks]))
    return GeneDataset(str(gene), tuple(inds))


# -- table output ---------------------------------------------------------------


def fmt(x):
    """Fixed textual form of a cell: floats at 17 significant digits."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_table(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


# -- fitting --------------------------------------------------------------------


@dataclass(eq=False)
class GeneOutcome:
    """Per-gene result of :func:`fit_gene`; ``fit`` is None on failure."""

    gene_id: str
    status: str
    message: str = ""
    fit: object = None
    selection: object = None
    bands: dict = None


def fit_gene(data, config):
    """Select smoothing parameters, fit and build bands for one gene; never raises."""
    try:
        res = select(
            data,
            kind=config.criterion,
            max_iter=config.simplex_budget,
            tol=config.em_tol,
            em_max_iter=config.em_max_iter,
        )
        fit = res.best_fit
        if config.band_method == "theoretical":
            bands = theoretical_bands(fit, level=config.level)
        elif config.band_method == "bootstrap":
            bands = bootstrap_bands(
                fit,
                B=config.bootstrap_samples,
                level=config.level,
                seed=_gene_key_seed(config.seed, data.gene_id),
                tol=config.em_tol,
                max_iter=config.em_max_iter,
            )
        else:
            bands = None
        status = "ok" if fit.converged else "not_converged"
        return GeneOutcome(data.gene_id, status, "", fit, res, bands)
    except InestimableEffectError as exc:
        return GeneOutcome(data.gene_id, f"inestimable:{exc.factor}", str(exc))
    except (FunMixedError, ValueError, np.linalg.LinAlgError) as exc:
        return GeneOutcome(data.gene_id, "failed", f"{type(exc).__name__}: {exc}")


def _gene_key_seed(seed, gene_id):
    digest = hashlib.sha256(f"{int(seed)}:{gene_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _fit_job(args):
    return fit_gene(*args)


def fit_all(genes, config):
    """Fit every gene, in input order, with ``config.workers`` processes."""
    jobs = [(g, config) for g in genes]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as ex:
            return list(ex.map(_fit_job, jobs, chunksize=max(1, len(jobs) // (4 * config.workers))))
    return [_fit_job(j) for j in jobs]


def _fits_rows(outcomes, config):
    for o in outcomes:
        if o.fit is None:
            continue
        f = o.fit
        pts = f.grid.points
        for j, t in enumerate(pts):
            row = [o.gene_id, j, t]
            for name in CURVES:
                est = getattr(f, name)[j]
                if o.bands is None:
                    row += [est, np.nan, np.nan]
                else:
                    b = o.bands[name]
                    row += [est, b.lower[j], b.upper[j]]
            row += [
                f.vc.D[j, j],
                f.vc.sigma2,
                f.sp.lam,
                f.sp.lam_gamma,
                f.df_fixed,
                f.df_random,
                f.df_total,
                f.loglik,
                o.selection.criterion_value,
                f.em_iterations,
                f.converged,
            ]
            yield row


FITS_HEADER = (
    ["gene_id", "point", "day"]
    + [f"{c}{s}" for c in CURVES for s in ("", "_lower", "_upper")]
    + [
        "D_diag",
        "sigma2",
        "lam",
        "lam_gamma",
        "df_fixed",
        "df_random",
        "df_total",
        "loglik",
        "criterion_value",
        "em_iterations",
        "converged",
    ]
)


def _diagnostic_rows(outcomes):
    for o in outcomes:
        if o.fit is None:
            continue
        f = o.fit
        data = f.data
        std = f.standardized_residuals
        N = std.size
        order = np.argsort(std, kind="stable")
        qq = np.empty(N)
        qq[order] = norm.ppf((np.arange(1, N + 1) - 0.5) / N)
        pos = 0
        for s in data.individuals:
            for t, y in zip(s.obs_times, s.values):
                yield [o.gene_id, s.subject_id, pos + 1, t, y, f.fitted[pos], f.residuals[pos], std[pos], qq[pos]]
                pos += 1


DIAGNOSTICS_HEADER = [
    "gene_id",
    "subject_id",
    "observation",
    "day",
    "value",
    "fitted",
    "residual",
    "std_residual",
    "normal_quantile",
]


def write_fit_outputs(outcomes, config, out_dir):
    out_dir = Path(out_dir)
    write_table(out_dir / FITS_FILE, FITS_HEADER, _fits_rows(outcomes, config))
    cov_rows = (
        [o.gene_id, a, b, o.fit.vc.D[a, b]]
        for o in outcomes
        if o.fit is not None
        for a in range(o.fit.grid.M)
        for b in range(o.fit.grid.M)
    )
    write_table(out_dir / COVARIANCE_FILE, ["gene_id", "row", "col", "D"], cov_rows)
    write_table(out_dir / STATUS_FILE, ["gene_id", "status", "message"], ([o.gene_id, o.status, o.message] for o in outcomes))
    write_table(out_dir / DIAGNOSTICS_FILE, DIAGNOSTICS_HEADER, _diagnostic_rows(outcomes))


@dataclass(eq=False)
class FitRecord:
    """Fitted quantities read back from ``fits.csv``; enough to test and run fPCA."""

    gene_id: str
    grid: TimeGrid
    mu: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    vc: VarianceComponents
    sp: SmoothingParameters


def load_fits(out_dir):
    """Rebuild per-gene :class:`FitRecord` objects from a fit output directory."""
    out_dir = Path(out_dir)
    fits = pd.read_csv(out_dir / FITS_FILE, dtype={"gene_id": str}, float_precision="round_trip")
    cov = pd.read_csv(out_dir / COVARIANCE_FILE, dtype={"gene_id": str}, float_precision="round_trip")
    cov_by_gene = {g: c for g, c in cov.groupby("gene_id", sort=False)}
    records = {}
    for gene, rows in fits.groupby("gene_id", sort=False):
        rows = rows.sort_values("point")
        M = len(rows)
        c = cov_by_gene[gene]
        D = np.zeros((M, M))
        D[c["row"].to_numpy(), c["col"].to_numpy()] = c["D"].to_numpy()
        first = rows.iloc[0]
        records[gene] = FitRecord(
            gene_id=gene,
            grid=TimeGrid(rows["day"].to_numpy()),
            mu=rows["mu"].to_numpy(),
            alpha=rows["alpha"].to_numpy(),
            beta=rows["beta"].to_numpy(),
            vc=VarianceComponents.trusted(D, float(first["sigma2"])),
            sp=SmoothingParameters(float(first["lam"]), float(first["lam_gamma"])),
        )
    return records


# -- testing --------------------------------------------------------------------


TESTS_HEADER = ["gene_id", "effect", "rank", "l2_norm", "p_value", "q_value", "rejected", "flagged"]


def run_tests(genes, fits, config, out_dir=None):
    """Pooled permutation tests for the gender, age and temporal effects.

    Returns the ranked rows of ``tests.csv`` and a mapping of effect to an
    error message for pools that could not be built.
    """
    genes = [g for g in genes if g.gene_id in fits]
    rows, errors = [], {}
    for effect in EFFECTS:
        try:
            results, pool = permutation_test(
                genes,
                fits,
                effect,
                permutations_per_gene=config.permutations,
                seed=config.seed,
                pooled=config.null_pool == "pooled",
                temporal_scheme=config.temporal_scheme,
                label_scheme=config.label_scheme,
                n_jobs=config.workers,
                tol=config.em_tol,
                max_iter=config.em_max_iter,
            )
        except FunMixedError as exc:
            errors[effect] = f"{type(exc).__name__}: {exc}"
            continue
        ranked = sorted(results, key=lambda r: (r.p_value, -r.statistic, r.gene_id))
        for k, r in enumerate(ranked, start=1):
            rows.append([r.gene_id, effect, k, r.statistic, r.p_value, r.q_value, r.q_value <= config.fdr, r.flagged])
    if out_dir is not None:
        write_table(Path(out_dir) / TESTS_FILE, TESTS_HEADER, rows)
    return rows, errors


# -- fPCA -----------------------------------------------------------------------


def run_fpca(fits, config, out_dir=None):
    """Functional PCA of the fitted mean curves sharing the most common design grid.

    Raises
    ------
    ValueError
        If fewer than two genes share a grid.
    """
    fits = list(fits.values()) if isinstance(fits, dict) else list(fits)
    if not fits:
        raise ValueError("fPCA needs at least 2 fitted genes, got 0")
    counts = {}
    for f in fits:
        counts[f.grid] = counts.get(f.grid, 0) + 1
    grid = max(counts, key=lambda g: (counts[g], -g.M))
    usable = [f for f in fits if f.grid == grid]
    if len(usable) < 2:
        raise ValueError(f"fPCA needs at least 2 fitted genes on a common grid, got {len(usable)}")
    cm = discretize(usable, n_grid=config.n_grid, normalization=config.normalization)
    res = decompose(cm, variance_target=config.variance_target, max_components=config.max_components)
    kappa = loadings(cm, res)
    if out_dir is not None:
        out_dir = Path(out_dir)
        K = res.n_components
        names = [f"component_{k + 1}" for k in range(K)]
        write_table(
            out_dir / FPCA_COMPONENTS_FILE,
            ["t", "mean"] + names,
            ([t, m, *row] for t, m, row in zip(res.grid, res.mean_curve, res.components)),
        )
        cum = np.cumsum(res.all_explained_fraction)
        write_table(
            out_dir / FPCA_EIGENVALUES_FILE,
            ["component", "eigenvalue", "explained_fraction", "cumulative_fraction", "retained"],
            (
                [k + 1, res.all_eigenvalues[k], res.all_explained_fraction[k], cum[k], k < K]
                for k in range(min(res.all_eigenvalues.size, max(K, config.max_components)))
            ),
        )
        write_table(out_dir / FPCA_LOADINGS_FILE, ["gene_id"] + names, ([lab, *row] for lab, row in zip(cm.labels, kappa)))
    return res, kappa, cm.labels


# -- manifest and orchestration ---------------------------------------------------


def _versions():
    import numba
    import scipy

    from . import __version__

    return {
        "funmixed": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "numba": numba.__version__,
    }


def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(config, out_dir, stages, summary):
    cfg = dataclasses.asdict(config)
    cfg.pop("workers")  # scheduling only; keeps manifests identical across worker counts
    manifest = {
        "config": cfg,
        "seed": config.seed,
        "input_sha256": _file_digest(config.input) if config.input and Path(config.input).exists() else None,
        "stages": stages,
        "summary": summary,
        "versions": _versions(),
    }
    with open(Path(out_dir) / MANIFEST_FILE, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=fmt)
        fh.write("\n")
    return manifest


class PipelineError(FunMixedError):
    """Aggregate failure of a pipeline stage (for example every gene failed)."""


def _prepare(config):
    config.validate()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ing = ingest(config.input, age_cutoff=config.age_cutoff, strict=False)
    return out, ing


def _fit_stage(config, out, ing):
    outcomes = fit_all(ing.genes, config)
    outcomes += [GeneOutcome(g, "rejected", msg) for g, msg in ing.rejected.items()]
    write_fit_outputs(outcomes, config, out)
    ok = [o for o in outcomes if o.fit is not None]
    if not ok:
        raise PipelineError(f"all {len(outcomes)} genes failed to fit")
    statuses = {}
    for o in outcomes:
        statuses[o.status] = statuses.get(o.status, 0) + 1
    return outcomes, {"genes": len(outcomes), "fitted": len(ok), "status_counts": statuses}


def run(config, stages=("fit", "test", "fpca")):
    """Run the requested stages and write all tables plus the manifest.

    ``test`` and ``fpca`` reuse ``fits.csv`` from the output directory when
    the ``fit`` stage is not requested.
    """
    out, ing = _prepare(config)
    summary = {}
    if "fit" in stages:
        outcomes, summary["fit"] = _fit_stage(config, out, ing)
        fits = {o.gene_id: o.fit for o in outcomes if o.fit is not None}
    else:
        if not (out / FITS_FILE).exists():
            raise PipelineError(f"{out / FITS_FILE} not found; run the fit stage first")
        fits = load_fits(out)
    if "test" in stages:
        rows, errors = run_tests(ing.genes, fits, config, out)
        n_rej = {e: sum(1 for r in rows if r[1] == e and r[6]) for e in EFFECTS}
        summary["test"] = {"rejected": n_rej, "errors": errors}
    if "fpca" in stages:
        try:
            res, _, labels = run_fpca(fits, config, out)
            summary["fpca"] = {
                "genes": len(labels),
                "components": res.n_components,
                "explained_fraction": [float(x) for x in res.explained_fraction],
            }
        except ValueError as exc:
            summary["fpca"] = {"error": str(exc)}
    write_manifest(config, out, list(stages), summary)
    return summary


# -- simulation export ------------------------------------------------------------


def write_simulated_input(path, n_genes, n_planted=0, effect="gender", effect_scale=5.0, seed=0, sigma2_true=0.25):
    """Write a synthetic batch in the ingestion schema; returns the planted gene ids."""
    batch = simulate_batch(n_genes, n_planted, effect, effect_scale, seed, sigma2_true)
    header = ["gene_id", "subject_id", "gender", "age_group", "day", "value"]

    def rows():
        for data, _, _ in batch:
            for s in data.individuals:
                for t, y in zip(s.obs_times, s.values):
                    yield [data.gene_id, s.subject_id, s.gender, s.age_group, t, y]

    write_table(path, header, rows())
    return [data.gene_id for data, _, planted in batch if planted]
