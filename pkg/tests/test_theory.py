import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pgn import theory
from pgn.theory import (
    GRID,
    DiscreteGame,
    generator_descent,
    ls_loss_decomposition,
    optimal_discriminator,
    pointwise_discriminator_loss,
)
from pgn.train import CROSS_ENTROPY, LEAST_SQUARES

VARIANTS = (LEAST_SQUARES, CROSS_ENTROPY)


@pytest.mark.parametrize("variant", VARIANTS)
def test_optimal_discriminator_at_point_seven(variant):
    analytic, grid = optimal_discriminator(DiscreteGame([0.7]), variant)
    assert analytic[0] == 0.7
    assert abs(grid[0] - 0.7) <= 1e-3


def test_cross_entropy_optimum_is_a_over_a_plus_b():
    # maximiser of a log x + b log(1 - x), found by brute force on a fine grid
    a, b = 0.7, 0.3
    x = np.linspace(1e-4, 1 - 1e-4, 200001)
    assert abs(x[np.argmax(a * np.log(x) + b * np.log(1 - x))] - a / (a + b)) < 1e-4


@pytest.mark.parametrize("variant", VARIANTS)
@given(p=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=20))
def test_grid_oracle_matches_analytic(variant, p):
    analytic, grid = optimal_discriminator(DiscreteGame(p), variant)
    assert np.max(np.abs(analytic - grid)) <= 1e-3


def test_grid_minimiser_is_a_true_minimum():
    # no grid value beats the analytic optimum on the pointwise risk
    for p in (0.0, 0.13, 0.5, 0.92, 1.0):
        for variant in VARIANTS:
            best = pointwise_discriminator_loss(p, p, variant)
            assert np.all(pointwise_discriminator_loss(GRID, p, variant) >= best - 1e-12)


@given(st.integers(0, 2**31 - 1), st.integers(1, 30))
def test_ls_decomposition(seed, atoms):
    r = np.random.default_rng(seed)
    direct, rewritten = ls_loss_decomposition(DiscreteGame(r.random(atoms), r.random(atoms)))
    assert np.allclose(direct, rewritten, atol=1e-12)


def test_game_rejects_out_of_range():
    with pytest.raises(ValueError):
        DiscreteGame([1.2])
    with pytest.raises(ValueError):
        DiscreteGame([0.5], [-0.1])


def test_ls_descent_from_point_two():
    res = generator_descent(0.2, step=0.1, iters=200, variant=LEAST_SQUARES)
    assert np.all(np.diff(res.trajectory[:, 0]) >= 0)
    first = np.argmax(res.trajectory[:, 0] >= 1 - 1e-3)
    assert res.trajectory[first, 0] >= 1 - 1e-3 and first <= 200


@pytest.mark.parametrize("variant", VARIANTS)
def test_descent_reaches_one_from_every_start(variant):
    starts = np.round(np.arange(0.1, 1.0, 0.1), 1)
    res = generator_descent(starts, step=0.1, iters=200, variant=variant)
    assert np.all(res.final > 0.999)
    assert not res.oscillated
    assert np.all(np.diff(res.losses) <= 1e-12)


@pytest.mark.parametrize("variant", VARIANTS)
def test_descent_fixed_point_at_one(variant):
    res = generator_descent(1.0, step=0.1, iters=20, variant=variant)
    assert np.all(res.trajectory == 1.0)


def test_descent_argument_errors():
    with pytest.raises(ValueError):
        generator_descent(0.5, step=0.0)
    with pytest.raises(ValueError):
        generator_descent(0.0)


def test_generator_gradient_never_positive():
    p = np.linspace(0.01, 1.0, 100)
    for variant in VARIANTS:
        assert np.all(theory.generator_gradient(p, variant) <= 0)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("p", [0.25, 0.5, 1.0])
def test_empirical_optimum(variant, p):
    chk = theory.empirical_optimum_check(p, variant)
    assert chk.converged, chk
    assert abs(chk.output - p) <= 0.02


def test_empirical_optimum_rejects_bad_fraction():
    with pytest.raises(ValueError):
        theory.empirical_optimum_check(1.5)


def test_quick_report():
    results = theory.verify_theory(seed=0, games=20, include_training=False)
    assert all(r.passed for r in results)
    report = theory.format_report(results)
    assert report.splitlines()[-1] == f"{len(results)}/{len(results)} checks passed"
    assert all(line.startswith("PASS") for line in report.splitlines()[:-1])
