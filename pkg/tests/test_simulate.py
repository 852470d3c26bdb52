import numpy as np
import pytest

from funmixed.simulate import (
    CASE_STUDY_DAYS,
    SimulationSpec,
    case_study_labels,
    case_study_spec,
    gene_seed,
    generate,
    simulate_batch,
    smooth_covariance,
)
from funmixed.spline_basis import NaturalCubicSpline, TimeGrid, l2_norm


def test_generate_is_deterministic_and_decomposes():
    spec = case_study_spec(seed=4, mu=lambda t: t / 100, alpha=np.arange(5.0), beta=0.5)
    a, truth = generate(spec)
    b, _ = generate(case_study_spec(seed=4, mu=lambda t: t / 100, alpha=np.arange(5.0), beta=0.5))
    np.testing.assert_array_equal(a.y, b.y)
    # rebuild y from the returned truth
    parts = []
    for i, s in enumerate(a.individuals):
        idx = a.design.obs_idx[i]
        sg = 1.0 if s.gender == "F" else -1.0
        sa = 1.0 if s.age_group == "old" else -1.0
        parts.append(truth["mu"][idx] + sg * truth["alpha"][idx] + sa * truth["beta"][idx] + truth["gamma"][i, idx])
    np.testing.assert_allclose(np.concatenate(parts) + truth["eps"], a.y, atol=1e-12)


def test_case_study_layout():
    data, _ = generate(case_study_spec())
    assert data.n == 22 and data.grid == TimeGrid(CASE_STUDY_DAYS)
    assert data.N == 22 * 5 - 1
    genders, ages = case_study_labels()
    assert genders.count("F") == 12 and ages.count("old") == 11


def test_replicates_and_missing():
    spec = SimulationSpec(grid=[0.0, 1.0, 2.0, 3.0], n_individuals=4, replicates=2, missing={1: [0, 3]}, sigma2_true=1.0)
    data, truth = generate(spec)
    assert data.individuals[0].n_obs == 8
    assert data.individuals[1].n_obs == 4
    np.testing.assert_array_equal(np.unique(data.individuals[1].obs_times), [1.0, 2.0])
    assert truth["eps"].size == data.N


def test_noise_variance_matches_requested_value():
    spec = SimulationSpec(grid=[0.0, 1.0, 2.0], n_individuals=2000, sigma2_true=0.49, seed=1)
    _, truth = generate(spec)
    assert np.var(truth["eps"]) == pytest.approx(0.49, rel=0.05)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"n_individuals": 1},
        {"n_individuals": 2, "genders": ["F", "F"]},
        {"n_individuals": 3, "sigma2_true": -1.0},
        {"n_individuals": 3, "replicates": 0},
        {"n_individuals": 3, "D_true": -np.eye(3)},
    ],
)
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        SimulationSpec(grid=[0.0, 1.0, 2.0], **kwargs)


def test_smooth_covariance_positive_definite():
    D = smooth_covariance(TimeGrid(CASE_STUDY_DAYS), 0.25)
    assert np.linalg.eigvalsh(D)[0] > 0
    np.testing.assert_allclose(D, D.T)


def test_batch_planted_effect_size_and_rank():
    batch = simulate_batch(30, n_planted=5, seed=3)
    assert [p for _, _, p in batch] == [True] * 5 + [False] * 25
    grid = batch[0][0].grid
    for data, truth, planted in batch:
        norm = l2_norm(NaturalCubicSpline(grid, truth["alpha"]))
        if planted:
            assert norm == pytest.approx(5.0 * 0.5 * np.sqrt(grid.span), rel=1e-12)
        else:
            assert norm == 0.0
    means = np.vstack([t["mu"] for _, t, _ in batch])
    centered = means - means.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    assert sv[2] < 1e-10 * sv[0]
    assert len({d.gene_id for d, _, _ in batch}) == 30


def test_batch_gene_independent_of_batch_size():
    a = simulate_batch(3, seed=9)
    b = simulate_batch(10, seed=9)
    np.testing.assert_array_equal(a[2][0].y, b[2][0].y)
    assert gene_seed(9, 2) != gene_seed(9, 3)
    with pytest.raises(ValueError):
        simulate_batch(3, n_planted=4)
    with pytest.raises(ValueError):
        simulate_batch(3, effect="temporal")
