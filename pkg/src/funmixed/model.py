"""Data containers and stacked mixed-model structures for one gene.

For individual ``i`` with incidence matrix ``X_i`` the fixed-effect design is
``X*_i = [X_i, W_i, Z_i]`` where ``W_i = -X_i`` for males and ``+X_i`` for
females, and ``Z_i = -X_i`` for young and ``+X_i`` for old subjects. Writing
``c_i = (1, s_gender, s_age)`` this is ``X*_i = c_i^T (x) X_i``, which the
block computations below exploit.

Individuals sharing the same observation pattern (same sequence of design
indices) share ``X_i``, hence ``V_i`` and its inverse; all per-individual
work is batched per pattern and the N x N covariance is never formed.
"""

import dataclasses
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
import scipy.linalg as sla

from ._validation import (
    age_sign,
    check_nonnegative_finite,
    check_square_psd,
    gender_sign,
    normalize_age,
    normalize_gender,
)
from .exceptions import InestimableEffectError, SingularSystemError
from .spline_basis import TimeGrid, build_roughness, design_indices

LOG_2PI = float(np.log(2.0 * np.pi))

#: Ridge fallback: trigger when min eig(D) < RIDGE_TRIGGER * tr(D)/M.
RIDGE_TRIGGER = 1e-10
#: Ridge fallback: add RIDGE_SIZE * tr(D)/M to the diagonal.
RIDGE_SIZE = 1e-8


@dataclass(frozen=True, eq=False)
class IndividualSeries:
    """Observations of one subject for one gene."""

    subject_id: str
    gender: str
    age_group: str
    obs_times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.obs_times, dtype=float).ravel()
        y = np.asarray(self.values, dtype=float).ravel()
        if t.size != y.size:
            raise ValueError(f"subject {self.subject_id}: {t.size} times but {y.size} values")
        if t.size < 1:
            raise ValueError(f"subject {self.subject_id}: no observations")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
            raise ValueError(f"subject {self.subject_id}: non-finite time or value")
        object.__setattr__(self, "subject_id", str(self.subject_id))
        object.__setattr__(self, "gender", normalize_gender(self.gender))
        object.__setattr__(self, "age_group", normalize_age(self.age_group))
        object.__setattr__(self, "obs_times", t)
        object.__setattr__(self, "values", y)

    @property
    def n_obs(self):
        return self.values.size

    def _replace(self, **changes):
        # fields are already validated; skips __post_init__
        obj = object.__new__(IndividualSeries)
        for name in ("subject_id", "gender", "age_group", "obs_times", "values"):
            object.__setattr__(obj, name, changes.get(name, getattr(self, name)))
        return obj


@dataclass(frozen=True, eq=False)
class GeneDataset:
    """All individuals' series for one response unit on a shared design grid.

    If ``grid`` is omitted the distinct observation times are used.
    """

    gene_id: str
    individuals: tuple
    grid: TimeGrid = None

    def __post_init__(self):
        inds = tuple(self.individuals)
        if len(inds) < 2:
            raise ValueError(f"gene {self.gene_id}: need at least 2 individuals, got {len(inds)}")
        grid = self.grid
        if grid is None:
            grid = TimeGrid(np.unique(np.concatenate([s.obs_times for s in inds])))
        elif not isinstance(grid, TimeGrid):
            grid = TimeGrid(grid)
        object.__setattr__(self, "gene_id", str(self.gene_id))
        object.__setattr__(self, "individuals", inds)
        object.__setattr__(self, "grid", grid)

    @property
    def n(self):
        return len(self.individuals)

    @property
    def N(self):
        return sum(s.n_obs for s in self.individuals)

    @property
    def y(self):
        return np.concatenate([s.values for s in self.individuals])

    def with_values(self, values):
        """Copy with the stacked observation vector replaced."""
        values = np.asarray(values, dtype=float)
        out, pos = [], 0
        for s in self.individuals:
            out.append(IndividualSeries(s.subject_id, s.gender, s.age_group, s.obs_times, values[pos : pos + s.n_obs]))
            pos += s.n_obs
        return GeneDataset(self.gene_id, tuple(out), self.grid)

    def with_labels(self, genders=None, ages=None):
        """Copy with gender and/or age labels reassigned per individual."""
        genders = [s.gender for s in self.individuals] if genders is None else [normalize_gender(g) for g in genders]
        ages = [s.age_group for s in self.individuals] if ages is None else [normalize_age(a) for a in ages]
        if len(genders) != self.n or len(ages) != self.n:
            raise ValueError(f"need {self.n} labels per factor")
        inds = tuple(s._replace(gender=g, age_group=a) for s, g, a in zip(self.individuals, genders, ages))
        out = GeneDataset(self.gene_id, inds, self.grid)
        if "design" in self.__dict__:
            # observation patterns are unchanged; only the sign rows move
            out.__dict__["design"] = self.design.with_signs(_sign_rows(inds))
        return out

    def with_times(self, times_by_individual):
        inds = tuple(
            IndividualSeries(s.subject_id, s.gender, s.age_group, t, s.values)
            for s, t in zip(self.individuals, times_by_individual)
        )
        return GeneDataset(self.gene_id, inds, self.grid)

    def with_permuted_points(self, pi):
        """Copy where every observation at design point ``m`` moves to design point ``pi[m]``."""
        pi = np.asarray(pi, dtype=int)
        if sorted(pi.tolist()) != list(range(self.grid.M)):
            raise ValueError("pi must be a permutation of the design indices")
        pts = self.grid.points
        design = self.design
        inds = tuple(s._replace(obs_times=pts[pi[idx]]) for s, idx in zip(self.individuals, design.obs_idx))
        out = GeneDataset(self.gene_id, inds, self.grid)
        out.__dict__["design"] = design.with_point_map(pi)
        return out

    @cached_property
    def design(self):
        return _Design.from_dataset(self)


@dataclass(frozen=True, eq=False)
class VarianceComponents:
    """Random-curve covariance ``D`` at the design points and noise variance."""

    D: np.ndarray
    sigma2: float

    def __post_init__(self):
        D = np.asarray(self.D, dtype=float)
        D = check_square_psd(D, D.shape[0] if D.ndim == 2 else -1)
        if not np.isfinite(self.sigma2) or self.sigma2 <= 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2!r}")
        D.setflags(write=False)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @classmethod
    def trusted(cls, D, sigma2):
        """Construct without validation (internal use on already-checked values)."""
        obj = object.__new__(cls)
        D = np.asarray(D, dtype=float)
        D.setflags(write=False)
        object.__setattr__(obj, "D", D)
        object.__setattr__(obj, "sigma2", float(sigma2))
        return obj

    def scaled(self, factor):
        return VarianceComponents(self.D * factor, self.sigma2 * factor)


@dataclass(frozen=True)
class SmoothingParameters:
    """Roughness penalties for the fixed-effect curves and the random curves."""

    lam: float = 1.0
    lam_gamma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "lam", check_nonnegative_finite(self.lam, "lam"))
        object.__setattr__(self, "lam_gamma", check_nonnegative_finite(self.lam_gamma, "lam_gamma"))


@dataclass(eq=False)
class _Pattern:
    idx: np.ndarray  # design index of each observation, length n_p
    members: np.ndarray  # individual indices sharing this pattern
    X: np.ndarray  # n_p x M incidence
    Y: np.ndarray  # n_members x n_p observations
    C: np.ndarray  # n_members x 3 sign rows (1, s_gender, s_age)
    CC: np.ndarray = field(init=False)  # sum_i c_i c_i^T
    eye: np.ndarray = field(init=False)

    def __post_init__(self):
        self.CC = self.C.T @ self.C
        self.eye = np.eye(self.idx.size)


def _sign_rows(individuals):
    return np.array([[1.0, gender_sign(s.gender), age_sign(s.age_group)] for s in individuals])


@lru_cache(maxsize=256)
def _roughness(grid):
    return build_roughness(grid).G


@lru_cache(maxsize=256)
def _roughness_root(grid):
    return build_roughness(grid).root


@lru_cache(maxsize=256)
def _penalty_rotation(grid):
    # orthogonal Q whose first two columns span {1, t}; the rotated penalty
    # Q' G Q is assembled from root Q so its null block is exactly zero
    t = grid.points
    Q, _ = np.linalg.qr(np.column_stack([np.ones_like(t), t - t.mean()]), mode="complete")
    Rc = build_roughness(grid).root @ Q[:, 2:]
    G_rot = np.zeros((grid.M, grid.M))
    G_rot[2:, 2:] = Rc.T @ Rc
    Q.setflags(write=False)
    G_rot.setflags(write=False)
    return Q, G_rot


@lru_cache(maxsize=256)
def _roughness_star(grid):
    Gs = np.kron(np.eye(3), _roughness(grid))
    Gs.setflags(write=False)
    return Gs


@dataclass(eq=False)
class _Design:
    """Variance-independent structure of one gene's model."""

    grid: TimeGrid
    G: np.ndarray
    G_star: np.ndarray
    G_root: np.ndarray
    rotation: np.ndarray  # M x M, leading columns span the penalty null space
    G_rotated: np.ndarray  # rotation' G rotation with that block exactly zero
    n: int
    N: int
    y: np.ndarray
    signs: np.ndarray  # n x 3
    obs_idx: list  # per-individual design indices
    offsets: np.ndarray  # start of each individual's block in y
    patterns: list

    @classmethod
    def from_dataset(cls, data):
        grid = data.grid
        obs_idx = [design_indices(grid, s.obs_times) for s in data.individuals]
        signs = _sign_rows(data.individuals)
        sizes = np.array([s.n_obs for s in data.individuals])
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        groups = {}
        for i, idx in enumerate(obs_idx):
            groups.setdefault(tuple(idx.tolist()), []).append(i)
        G = _roughness(grid)
        rotation, G_rotated = _penalty_rotation(grid)
        patterns = []
        for key, members in groups.items():
            idx = np.array(key, dtype=int)
            X = np.zeros((idx.size, grid.M))
            X[np.arange(idx.size), idx] = 1.0
            members = np.array(members, dtype=int)
            Y = np.vstack([data.individuals[i].values for i in members])
            patterns.append(_Pattern(idx=idx, members=members, X=X, Y=Y, C=signs[members]))
        return cls(
            grid=grid,
            G=G,
            G_star=_roughness_star(grid),
            G_root=_roughness_root(grid),
            rotation=rotation,
            G_rotated=G_rotated,
            n=data.n,
            N=int(sizes.sum()),
            y=data.y,
            signs=signs,
            obs_idx=obs_idx,
            offsets=offsets,
            patterns=patterns,
        )

    def with_signs(self, signs):
        """Same observation structure with new per-individual sign rows."""
        patterns = [
            _Pattern(idx=p.idx, members=p.members, X=p.X, Y=p.Y, C=signs[p.members]) for p in self.patterns
        ]
        return dataclasses.replace(self, signs=signs, patterns=patterns)

    def with_point_map(self, pi):
        """Same individuals and values with design index ``m`` relabelled ``pi[m]``."""
        M = self.grid.M
        patterns = []
        for p in self.patterns:
            idx = pi[p.idx]
            X = np.zeros((idx.size, M))
            X[np.arange(idx.size), idx] = 1.0
            patterns.append(_Pattern(idx=idx, members=p.members, X=X, Y=p.Y, C=p.C))
        return dataclasses.replace(self, obs_idx=[pi[i] for i in self.obs_idx], patterns=patterns)

    @cached_property
    def packed(self):
        """Flattened pattern arrays for the compiled EM loop."""
        from ._em_kernel import flatten_design

        return flatten_design(self)

    def check_identifiable(self):
        for col, factor in ((1, "gender"), (2, "age")):
            if np.all(self.signs[:, col] == self.signs[0, col]):
                raise InestimableEffectError(factor)


def psd_factor(D):
    """A square ``F`` with ``F F^T = D`` for symmetric PSD ``D``.

    Cholesky when it succeeds, otherwise eigenvectors scaled by the square
    roots of the clipped eigenvalues.
    """
    try:
        return np.linalg.cholesky(D)
    except np.linalg.LinAlgError:
        w, U = np.linalg.eigh(D)
        return U * np.sqrt(np.clip(w, 0.0, None))


def regularized_covariance(D, root, lam_gamma):
    """``(D^{-1} + lam_gamma G)^{-1}`` for ``G = root.T @ root``, without inverting ``D``.

    With ``D = F F^T`` and the SVD ``root @ F = U S V^T`` the result is
    ``F V diag(1 / (1 + lam_gamma s^2)) V^T F^T``. This is PSD by
    construction, holds for singular ``D``, and keeps full precision at
    penalties where forming ``I + lam_gamma G D`` would round away the
    identity.

    Parameters
    ----------
    D : (M, M) array
        Symmetric PSD covariance.
    root : (r, M) array
        Square-root factor of the roughness matrix, e.g. ``RoughnessMatrix.root``.
    lam_gamma : float
    """
    if lam_gamma == 0.0:
        return np.array(D, dtype=float)
    M = D.shape[0]
    F = psd_factor(D)
    _, sv, Vt = np.linalg.svd(root @ F)
    s2 = np.zeros(M)
    s2[: sv.size] = sv**2
    W = (F @ Vt.T) / np.sqrt(1.0 + lam_gamma * s2)
    return W @ W.T


def _ridged(D):
    M = D.shape[0]
    scale = np.trace(D) / M
    w = np.linalg.eigvalsh(D)
    if scale <= 0:
        return D + RIDGE_SIZE * np.eye(M), True
    if w[0] < RIDGE_TRIGGER * scale:
        return D + RIDGE_SIZE * scale * np.eye(M), True
    return D, False


@dataclass(eq=False)
class _PatternCov:
    V: np.ndarray
    Vinv: np.ndarray
    logdet: float
    P: np.ndarray  # X^T V^{-1} X
    Q: np.ndarray  # V^{-1} X


class AssembledModel:
    """Mixed-model matrices for one gene at given variance components and penalties.

    Heavy per-pattern quantities are computed once at construction. The
    literal stacked matrices (``X_star``, ``X_tilde``, ``G_star``, ...) are
    available as properties for inspection and testing.
    """

    def __init__(self, data, vc, sp, design=None):
        self.data = data
        self.design = design if design is not None else data.design
        self.vc = vc
        self.sp = sp
        self.grid = self.design.grid
        self.M = self.grid.M
        self.G = self.design.G
        if vc.D.shape != (self.M, self.M):
            raise ValueError(f"D must be {self.M}x{self.M}, got {vc.D.shape}")
        self.D_gamma = regularized_covariance(vc.D, self.design.G_root, sp.lam_gamma)
        self.cov = [self._pattern_cov(p) for p in self.design.patterns]

    @cached_property
    def _ridge(self):
        return _ridged(self.vc.D)

    @property
    def D_inv_basis(self):
        """``D``, or ``D`` plus the ridge when it is near-singular."""
        return self._ridge[0]

    @property
    def ridged(self):
        return self._ridge[1]

    def _pattern_cov(self, p):
        k = p.idx.size
        V = self.D_gamma[p.idx][:, p.idx]
        V.flat[:: k + 1] += self.vc.sigma2
        try:
            L = np.linalg.cholesky(V)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(f"V_i not positive definite: {exc}") from exc
        Linv = sla.solve_triangular(L, p.eye, lower=True, check_finite=False)
        Vinv = Linv.T @ Linv
        logdet = 2.0 * float(np.log(np.diag(L)).sum())
        Q = Vinv @ p.X
        return _PatternCov(V=V, Vinv=Vinv, logdet=logdet, P=p.X.T @ Q, Q=Q)

    @property
    def n(self):
        return self.design.n

    @property
    def N(self):
        return self.design.N

    @property
    def y(self):
        return self.design.y

    # literal per-individual / stacked matrices
    def X_i(self, i):
        X = np.zeros((self.design.obs_idx[i].size, self.M))
        X[np.arange(X.shape[0]), self.design.obs_idx[i]] = 1.0
        return X

    def W_i(self, i):
        return self.design.signs[i, 1] * self.X_i(i)

    def Z_i(self, i):
        return self.design.signs[i, 2] * self.X_i(i)

    def X_star_i(self, i):
        return np.hstack([self.X_i(i), self.W_i(i), self.Z_i(i)])

    def V_i(self, i):
        X = self.X_i(i)
        return X @ self.D_gamma @ X.T + self.vc.sigma2 * np.eye(X.shape[0])

    @property
    def X_star(self):
        return np.vstack([self.X_star_i(i) for i in range(self.n)])

    @property
    def X_tilde(self):
        return sla.block_diag(*[self.X_i(i) for i in range(self.n)])

    @property
    def G_star(self):
        return sla.block_diag(self.G, self.G, self.G)

    @property
    def G_tilde(self):
        return sla.block_diag(*([self.G] * self.n))

    @property
    def D_gamma_tilde(self):
        return sla.block_diag(*([self.D_gamma] * self.n))

    @property
    def V(self):
        return sla.block_diag(*[self.V_i(i) for i in range(self.n)])

    def split_y(self, v):
        """Split a stacked length-N vector into per-individual pieces."""
        ends = np.append(self.design.offsets[1:], self.N)
        return [v[s:e] for s, e in zip(self.design.offsets, ends)]


def assemble(data, vc, sp):
    """Build the :class:`AssembledModel` for ``data`` at ``(vc, sp)``.

    Raises
    ------
    InestimableEffectError
        If all individuals share one gender or one age group.
    """
    data.design.check_identifiable()
    return AssembledModel(data, vc, sp)


def _as_gamma_matrix(gamma, n, M):
    return np.asarray(gamma, dtype=float).reshape(n, M)


def gll(model, eta, gamma):
    """Generalized log-likelihood criterion (to be minimized).

    ``rss / sigma2 + n log|D| + sum_i gamma_i^T D^{-1} gamma_i + N log sigma2``
    using the unregularized ``D`` (ridged if near-singular) and ``R = sigma2 I``.
    """
    eta = np.asarray(eta, dtype=float).ravel()
    Gm = _as_gamma_matrix(gamma, model.n, model.M)
    s2 = model.vc.sigma2
    rss = 0.0
    for i in range(model.n):
        idx = model.design.obs_idx[i]
        fixed = model.design.signs[i] @ eta.reshape(3, model.M)
        yi = model.data.individuals[i].values
        r = yi - fixed[idx] - Gm[i, idx]
        rss += float(r @ r)
    D = model.D_inv_basis
    cf = sla.cho_factor(D, lower=True)
    logdetD = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    quad = float(np.sum(Gm * sla.cho_solve(cf, Gm.T).T))
    return rss / s2 + model.n * logdetD + quad + model.N * np.log(s2)


def pgll(model, eta, gamma, sp=None):
    """Penalized GLL: ``gll + lam_gamma sum gamma_i^T G gamma_i + lam eta^T G* eta``."""
    sp = model.sp if sp is None else sp
    eta = np.asarray(eta, dtype=float).ravel()
    Gm = _as_gamma_matrix(gamma, model.n, model.M)
    E = eta.reshape(3, model.M)
    G = model.G
    pen_fixed = float(np.sum(E * (E @ G)))
    pen_random = float(np.sum(Gm * (Gm @ G)))
    return gll(model, eta, gamma) + sp.lam_gamma * pen_random + sp.lam * pen_fixed
