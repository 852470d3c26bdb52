import numpy as np
import pytest
from hypothesis import settings

from funmixed.model import GeneDataset, IndividualSeries, SmoothingParameters, VarianceComponents
from funmixed.spline_basis import TimeGrid

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

CASE_DAYS = (1.0, 14.0, 28.0, 90.0, 180.0)


def random_grid(rng, M, span=10.0):
    while True:
        pts = np.sort(rng.uniform(0.0, span, M))
        if np.min(np.diff(pts)) > 1e-2 * span / M:
            return TimeGrid(pts)


def random_labels(rng, n):
    """Gender and age labels; with n >= 3 the first three label pairs are distinct so neither factor is confounded."""
    combos = [("M", "young"), ("F", "old"), ("F", "young"), ("M", "old")]
    if n < 3:
        # complementary pair so both levels of each factor appear
        k = 2 * int(rng.integers(0, 2))
        first = [combos[k], combos[k + 1]][:n]
    else:
        first = [combos[k] for k in rng.permutation(4)[:3]]
    rest = [combos[k] for k in rng.integers(0, 4, max(n - 3, 0))]
    pairs = first + rest
    return [g for g, _ in pairs], [a for _, a in pairs]


def random_dataset(rng, n=4, M=5, grid=None, missing=True, duplicates=False, noise=1.0, gene_id="g"):
    """Dataset with random labels, values and (optionally) incomplete or repeated observations."""
    grid = random_grid(rng, M) if grid is None else grid
    M = grid.M
    genders, ages = random_labels(rng, n)
    inds = []
    for i in range(n):
        idx = np.arange(M)
        if missing and i > 2 and rng.random() < 0.5:
            idx = np.sort(rng.choice(M, size=rng.integers(1, M), replace=False))
        if duplicates and rng.random() < 0.5:
            idx = np.sort(np.concatenate([idx, rng.choice(idx, size=1)]))
        y = rng.normal(0.0, noise, idx.size) + np.sin(grid.points[idx])
        inds.append(IndividualSeries(f"s{i}", genders[i], ages[i], grid.points[idx], y))
    return GeneDataset(gene_id, tuple(inds), grid)


def random_vc(rng, M, d_scale=1.0):
    A = rng.normal(size=(M, M))
    D = d_scale * (A @ A.T / M + 0.1 * np.eye(M))
    return VarianceComponents(D, float(rng.uniform(0.2, 1.0)))


def random_sp(rng):
    return SmoothingParameters(float(10 ** rng.uniform(-2, 1)), float(10 ** rng.uniform(-2, 1)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


_ACCEPTANCE = pytest.StashKey[dict]()
N_CRITERIA = 10


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture
def acceptance(request):
    """``report(number, ok, detail)`` records one criterion's outcome and returns ``ok``."""
    lines = request.config.stash[_ACCEPTANCE]

    def report(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[number] = line
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(lines.get(k, f"criterion {k:2d}: FAIL  did not complete"))
