import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from funmixed.exceptions import GridError, IncidenceError
from funmixed.spline_basis import (
    NaturalCubicSpline,
    TimeGrid,
    build_incidence,
    build_roughness,
    design_indices,
    l2_norm,
    roughness_functional,
)
from oracles import second_derivative_energy

CASE_DAYS = [1, 14, 28, 90, 180]


@st.composite
def grids(draw, min_size=3, max_size=12):
    M = draw(st.integers(min_size, max_size))
    gaps = draw(arrays(float, M - 1, elements=st.floats(0.05, 50.0)))
    start = draw(st.floats(-100.0, 100.0))
    return TimeGrid(start + np.concatenate([[0.0], np.cumsum(gaps)]))


@st.composite
def grid_and_values(draw):
    grid = draw(grids())
    f = draw(arrays(float, grid.M, elements=st.floats(-100.0, 100.0)))
    return grid, f


def test_roughness_three_points_hand_value():
    G = build_roughness([0.0, 1.0, 2.0]).G
    expected = 1.5 * np.outer([1, -2, 1], [1, -2, 1])
    np.testing.assert_allclose(G, expected, atol=1e-14)


def test_roughness_band_matrices_match_definitions():
    grid = TimeGrid([0.0, 1.0, 3.0, 6.0])
    rm = build_roughness(grid)
    h = np.array([1.0, 2.0, 3.0])
    A = np.array([[1 / h[0], 0], [-(1 / h[0] + 1 / h[1]), 1 / h[1]], [1 / h[1], -(1 / h[1] + 1 / h[2])], [0, 1 / h[2]]])
    B = np.array([[(h[0] + h[1]) / 3, h[1] / 6], [h[1] / 6, (h[1] + h[2]) / 3]])
    np.testing.assert_allclose(rm.A, A)
    np.testing.assert_allclose(rm.B, B)
    np.testing.assert_allclose(rm.G, A @ np.linalg.solve(B, A.T), rtol=1e-12)


@pytest.mark.parametrize("points", [[0, 1], [0, 0, 1], [2, 1, 3], [0, np.nan, 1]])
def test_invalid_grid(points):
    with pytest.raises(GridError):
        TimeGrid(points)


@given(grids())
def test_roughness_structure(grid):
    G = build_roughness(grid).G
    lam = np.linalg.eigvalsh(G)
    assert np.max(np.abs(G - G.T)) < 1e-12 * max(1.0, np.abs(G).max())
    assert lam[0] > -1e-10 * lam[-1]
    assert np.sum(lam > 1e-13 * lam[-1]) == grid.M - 2
    scale = np.abs(G).max()
    for v in (np.ones(grid.M), grid.points - grid.points.mean()):
        assert np.max(np.abs(G @ v)) <= 1e-9 * scale * np.abs(v).max() * grid.M


@given(grid_and_values())
def test_roughness_identity_three_routes(gv):
    grid, f = gv
    G = build_roughness(grid).G
    quad = f @ G @ f
    exact = roughness_functional(NaturalCubicSpline(grid, f))
    oracle = second_derivative_energy(grid.points, f)
    tol = 1e-10 * max(abs(oracle), 1e-300) + 1e-12 * (np.abs(G).max() * np.abs(f).max() ** 2)
    assert abs(quad - oracle) <= tol
    assert abs(exact - oracle) <= tol


def test_incidence_partial_series_matches_printed_matrix():
    X = build_incidence(TimeGrid(CASE_DAYS), [1, 14, 28, 90])
    expected = np.hstack([np.eye(4), np.zeros((4, 1))])
    np.testing.assert_array_equal(X, expected)


def test_incidence_complete_series_is_identity():
    np.testing.assert_array_equal(build_incidence(TimeGrid(CASE_DAYS), CASE_DAYS), np.eye(5))


def test_incidence_duplicates_repeat_rows():
    X = build_incidence(TimeGrid(CASE_DAYS), [1, 14, 14])
    e = np.eye(5)
    np.testing.assert_array_equal(X, np.vstack([e[0], e[1], e[1]]))


def test_incidence_snaps_within_tolerance_and_rejects_otherwise():
    grid = TimeGrid(CASE_DAYS)
    np.testing.assert_array_equal(design_indices(grid, [14 + 5e-10, 180 - 1e-10]), [1, 4])
    with pytest.raises(IncidenceError):
        build_incidence(grid, [15.0])


@given(grids(), st.data())
def test_incidence_rows_and_reconstruction(grid, data):
    idx = data.draw(st.lists(st.integers(0, grid.M - 1), min_size=1, max_size=20))
    t = grid.points[idx]
    X = build_incidence(grid, t)
    np.testing.assert_array_equal(X.sum(axis=1), 1.0)
    np.testing.assert_array_equal(X @ grid.points, t)


def test_spline_interpolates_with_natural_ends():
    grid = TimeGrid(CASE_DAYS)
    f = np.array([0.3, -1.0, 2.0, 0.5, 1.5])
    s = NaturalCubicSpline(grid, f)
    np.testing.assert_allclose(s(grid.points), f, atol=1e-12)
    np.testing.assert_allclose(s(grid.points[[0, -1]], 2), 0.0, atol=1e-12)


def test_l2_norm_examples():
    grid = TimeGrid(CASE_DAYS)
    assert l2_norm(NaturalCubicSpline(grid, np.zeros(5))) == 0.0
    assert l2_norm(NaturalCubicSpline(grid, np.full(5, -2.0))) == pytest.approx(2.0 * np.sqrt(179.0), rel=1e-12)
    lin = TimeGrid([0.0, 1.0, 2.0])
    assert l2_norm(NaturalCubicSpline(lin, lin.points), 1) == pytest.approx(np.sqrt(2.0), rel=1e-12)
    with pytest.raises(ValueError):
        l2_norm(NaturalCubicSpline(lin, lin.points), 2)


def test_roughness_of_linear_and_constant_is_zero():
    grid = TimeGrid(CASE_DAYS)
    assert roughness_functional(NaturalCubicSpline(grid, 3.0 + 0.5 * grid.points)) == pytest.approx(0.0, abs=1e-20)
    assert roughness_functional(NaturalCubicSpline(grid, np.full(5, 7.0))) == 0.0


@given(grid_and_values(), st.floats(-10.0, 10.0), st.sampled_from([0, 1]))
def test_l2_norm_homogeneous(gv, c, k):
    grid, f = gv
    base = l2_norm(NaturalCubicSpline(grid, f), k)
    scaled = l2_norm(NaturalCubicSpline(grid, c * f), k)
    assert scaled == pytest.approx(abs(c) * base, rel=1e-9, abs=1e-9 * max(base, 1.0))


def test_l2_norm_matches_quadrature():
    from scipy.integrate import quad

    grid = TimeGrid([0.0, 0.7, 2.0, 2.5, 4.0])
    s = NaturalCubicSpline(grid, [1.0, -0.5, 0.2, 2.0, 0.0])
    for k in (0, 1):
        ref = sum(quad(lambda t: s(t, k) ** 2, a, b, epsabs=1e-13)[0] for a, b in zip(grid.points[:-1], grid.points[1:]))
        assert l2_norm(s, k) == pytest.approx(np.sqrt(ref), rel=1e-10)


def test_grid_is_hashable_and_immutable():
    g = TimeGrid(CASE_DAYS)
    assert hash(g) == hash(TimeGrid(np.array(CASE_DAYS, dtype=float)))
    with pytest.raises(ValueError):
        g.points[0] = 5.0


@given(grid_and_values(), st.sampled_from([0, 1]))
def test_cached_quadratic_form_matches_piecewise_integration(gv, k):
    from funmixed.spline_basis import l2_norm_values

    grid, f = gv
    exact = l2_norm(NaturalCubicSpline(grid, f), k)
    fast = l2_norm_values(grid, f, k)
    assert fast == pytest.approx(exact, rel=1e-8, abs=1e-7 * max(np.abs(f).max(), 1e-300) * np.sqrt(grid.span))
