"""Synthetic gene datasets with known generating curves and variance components."""

from dataclasses import dataclass, field

import numpy as np

from ._validation import age_sign, check_square_psd, gender_sign
from .model import GeneDataset, IndividualSeries
from .spline_basis import TimeGrid

#: Design days of the case-study layout.
CASE_STUDY_DAYS = (1.0, 14.0, 28.0, 90.0, 180.0)


def _curve_values(f, points):
    if f is None:
        return np.zeros(points.size)
    if callable(f):
        return np.asarray(f(points), dtype=float) * np.ones(points.size)
    v = np.asarray(f, dtype=float)
    if v.ndim == 0:
        return np.full(points.size, float(v))
    if v.size != points.size:
        raise ValueError(f"curve needs {points.size} values, got {v.size}")
    return v


@dataclass(eq=False)
class SimulationSpec:
    """Generative description of one gene.

    ``mu``, ``alpha`` and ``beta`` are callables of time, constants, or
    arrays of values at the design points; ``alpha`` is the female effect and ``beta`` the old
    effect (males/young receive their negatives). ``missing`` maps an
    individual index to design indices it is not observed at.
    ``replicates`` repeats every observation that many times.
    """

    grid: TimeGrid
    n_individuals: int
    genders: list = None
    age_groups: list = None
    mu: object = None
    alpha: object = None
    beta: object = None
    D_true: np.ndarray = None
    sigma2_true: float = 1.0
    missing: dict = field(default_factory=dict)
    replicates: int = 1
    seed: int = 0
    gene_id: str = "sim"

    def __post_init__(self):
        if not isinstance(self.grid, TimeGrid):
            self.grid = TimeGrid(self.grid)
        n = int(self.n_individuals)
        if n < 2:
            raise ValueError("need at least 2 individuals")
        if self.genders is None:
            self.genders = ["F" if i % 2 == 0 else "M" for i in range(n)]
        if self.age_groups is None:
            self.age_groups = ["young" if (i // 2) % 2 == 0 else "old" for i in range(n)]
        if len(self.genders) != n or len(self.age_groups) != n:
            raise ValueError("one gender and age label per individual required")
        if len({gender_sign(g) for g in self.genders}) < 2 or len({age_sign(a) for a in self.age_groups}) < 2:
            raise ValueError("labels must cover both levels of each factor")
        M = self.grid.M
        self.D_true = np.zeros((M, M)) if self.D_true is None else check_square_psd(self.D_true, M, "D_true")
        if not np.isfinite(self.sigma2_true) or self.sigma2_true < 0:
            raise ValueError("sigma2_true must be non-negative")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")


def generate(spec):
    """Draw one dataset; returns ``(GeneDataset, truth)``.

    ``truth`` holds the curves at the design points (``mu``, ``alpha``,
    ``beta``), the drawn random curves ``gamma`` (n x M) and noise ``eps``.
    Deterministic given ``spec.seed``.
    """
    rng = np.random.default_rng(spec.seed)
    pts = spec.grid.points
    M = pts.size
    n = spec.n_individuals
    mu = _curve_values(spec.mu, pts)
    alpha = _curve_values(spec.alpha, pts)
    beta = _curve_values(spec.beta, pts)
    if np.any(spec.D_true):
        gamma = rng.multivariate_normal(np.zeros(M), spec.D_true, size=n, method="eigh")
    else:
        gamma = np.zeros((n, M))
    individuals, eps_all = [], []
    for i in range(n):
        keep = np.setdiff1d(np.arange(M), np.asarray(spec.missing.get(i, []), dtype=int))
        idx = np.repeat(keep, spec.replicates)
        sg, sa = gender_sign(spec.genders[i]), age_sign(spec.age_groups[i])
        eps = rng.normal(0.0, np.sqrt(spec.sigma2_true), size=idx.size) if spec.sigma2_true > 0 else np.zeros(idx.size)
        y = mu[idx] + sg * alpha[idx] + sa * beta[idx] + gamma[i, idx] + eps
        individuals.append(IndividualSeries(f"S{i:03d}", spec.genders[i], spec.age_groups[i], pts[idx], y))
        eps_all.append(eps)
    data = GeneDataset(spec.gene_id, tuple(individuals), spec.grid)
    truth = {"mu": mu, "alpha": alpha, "beta": beta, "gamma": gamma, "eps": np.concatenate(eps_all)}
    return data, truth


def case_study_labels(n=22, n_female=12):
    """Gender and age labels shaped like the 22-subject case study.

    Ages alternate young/old so both factors vary within each gender.
    """
    genders = ["F"] * n_female + ["M"] * (n - n_female)
    ages = ["young" if i % 2 == 0 else "old" for i in range(n)]
    return genders, ages


def smooth_covariance(grid, scale=1.0, length=None, nugget=1e-3):
    """Squared-exponential covariance at the design points plus a small nugget."""
    pts = grid.points if isinstance(grid, TimeGrid) else np.asarray(grid, dtype=float)
    length = (pts[-1] - pts[0]) / 2.0 if length is None else length
    d = pts[:, None] - pts[None, :]
    return scale * (np.exp(-0.5 * (d / length) ** 2) + nugget * np.eye(pts.size))


def case_study_spec(seed=0, gene_id="sim", mu=None, alpha=None, beta=None, D_true=None, sigma2_true=0.25, n=22):
    """Case-study-shaped spec: 5 design days, 12 F / 10 M, one subject missing day 180."""
    grid = TimeGrid(CASE_STUDY_DAYS)
    genders, ages = case_study_labels(n)
    return SimulationSpec(
        grid=grid,
        n_individuals=n,
        genders=genders,
        age_groups=ages,
        mu=mu,
        alpha=alpha,
        beta=beta,
        D_true=smooth_covariance(grid, 0.25) if D_true is None else D_true,
        sigma2_true=sigma2_true,
        missing={0: [grid.M - 1]},
        seed=seed,
        gene_id=gene_id,
    )


def gene_seed(master_seed, index):
    """Per-gene seed derived from a master seed and the gene's position."""
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1, np.uint64)[0])


def _batch_mean_shapes(grid):
    u = (grid.points - grid.points[0]) / grid.span
    return u, np.sin(np.pi * u)


def simulate_batch(
    n_genes,
    n_planted=0,
    effect="gender",
    effect_scale=5.0,
    seed=0,
    sigma2_true=0.25,
    D_scale=0.25,
    n_individuals=22,
):
    """Case-study-shaped batch of genes, some with a planted effect.

    Every gene's mean curve is a random combination of two fixed shapes, so
    the batch of mean curves has rank two. The first ``n_planted`` genes get
    a constant ``effect`` curve (``"gender"`` or ``"age"``) whose L2 norm is
    ``effect_scale * sigma * sqrt(span)``; all other effect curves are zero.

    Returns
    -------
    list of (GeneDataset, truth dict, planted bool)
    """
    if effect not in ("gender", "age"):
        raise ValueError(f"effect must be 'gender' or 'age', got {effect!r}")
    if not 0 <= n_planted <= n_genes:
        raise ValueError("n_planted must lie in [0, n_genes]")
    grid = TimeGrid(CASE_STUDY_DAYS)
    s1, s2 = _batch_mean_shapes(grid)
    D_true = smooth_covariance(grid, D_scale)
    level = effect_scale * np.sqrt(sigma2_true)
    out = []
    for g in range(n_genes):
        gseed = gene_seed(seed, g)
        a, b = np.random.default_rng([gseed, 1]).normal(size=2)
        planted = g < n_planted
        curve = np.full(grid.M, level) if planted else None
        spec = case_study_spec(
            seed=gseed,
            gene_id=f"G{g:05d}",
            mu=5.0 + a * s1 + b * s2,
            alpha=curve if effect == "gender" else None,
            beta=curve if effect == "age" else None,
            D_true=D_true,
            sigma2_true=sigma2_true,
            n=n_individuals,
        )
        data, truth = generate(spec)
        out.append((data, truth, planted))
    return out
