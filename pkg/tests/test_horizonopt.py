import numpy as np
import pytest

from errors import InvalidArgumentError
from horizonopt import (
    StepSchedule,
    best_constant_schedule,
    chebyshev_minimax_value,
    chebyshev_schedule,
    gradient_descent_on_quadratic,
    worst_case_factor,
)


def test_empty_schedule_has_unit_factor():
    assert worst_case_factor(StepSchedule(steps=(), mu=1.0, l=10.0)) == 1.0


def test_one_step_optimum_on_one_to_three():
    schedule = StepSchedule(steps=(0.5,), mu=1.0, l=3.0)
    assert worst_case_factor(schedule) == pytest.approx(0.5, abs=1e-12)
    assert worst_case_factor(best_constant_schedule(1, 1.0, 3.0)) == pytest.approx(0.5, abs=1e-12)
    assert worst_case_factor(chebyshev_schedule(1, 1.0, 3.0)) == pytest.approx(0.5, abs=1e-12)


def test_chebyshev_matches_closed_form():
    factor = worst_case_factor(chebyshev_schedule(8, 1.0, 10.0))
    rho = 11.0 / 9.0
    closed_form = 1.0 / abs(np.polynomial.chebyshev.chebval(rho, [0] * 8 + [1]))
    assert factor == pytest.approx(closed_form, abs=1e-9)
    assert factor == pytest.approx(chebyshev_minimax_value(8, 1.0, 10.0), abs=1e-9)
    assert factor < (9.0 / 11.0) ** 8


def test_chebyshev_beats_best_constant():
    for t in range(2, 12):
        assert worst_case_factor(chebyshev_schedule(t, 1.0, 10.0)) < worst_case_factor(best_constant_schedule(t, 1.0, 10.0))


def test_constant_schedule_factor():
    for t in (1, 3, 6):
        assert worst_case_factor(best_constant_schedule(t, 1.0, 10.0)) == pytest.approx((9.0 / 11.0) ** t, rel=1e-12)


def test_chebyshev_steps_are_reciprocal_nodes():
    schedule = chebyshev_schedule(4, 2.0, 6.0)
    nodes = sorted(1.0 / np.asarray(schedule.steps))
    expected = sorted(4.0 + 2.0 * np.cos((2 * np.arange(1, 5) - 1) * np.pi / 8))
    assert nodes == pytest.approx(expected, rel=1e-12)


def test_degenerate_interval():
    schedule = chebyshev_schedule(3, 2.0, 2.0)
    assert worst_case_factor(schedule) == pytest.approx(0.0, abs=1e-15)


def test_gradient_descent_respects_worst_case(rng):
    schedule = chebyshev_schedule(6, 1.0, 10.0)
    bound = worst_case_factor(schedule)
    gen = rng.generator()
    for _ in range(20):
        eigenvalues = gen.uniform(1.0, 10.0, size=12)
        x0 = gen.standard_normal(12)
        assert gradient_descent_on_quadratic(schedule, eigenvalues, x0) <= bound + 1e-12


def test_validation():
    with pytest.raises(InvalidArgumentError):
        StepSchedule(steps=(0.1,), mu=2.0, l=1.0)
    with pytest.raises(InvalidArgumentError):
        StepSchedule(steps=(-0.1,), mu=1.0, l=2.0)
    with pytest.raises(InvalidArgumentError):
        chebyshev_schedule(0, 1.0, 2.0)
    with pytest.raises(InvalidArgumentError):
        gradient_descent_on_quadratic(chebyshev_schedule(2, 1.0, 2.0), [1.0, 2.0], [0.0, 0.0])


def test_step_order_does_not_change_factor(rng):
    steps = rng.generator().uniform(0.1, 1.0, size=6)
    base = worst_case_factor(StepSchedule(steps=tuple(steps), mu=1.0, l=10.0))
    for i in range(5):
        shuffled = rng.spawn(i).generator().permutation(steps)
        assert worst_case_factor(StepSchedule(steps=tuple(shuffled), mu=1.0, l=10.0)) == pytest.approx(
            base, rel=1e-12, abs=1e-15)


@pytest.mark.slow
def test_chebyshev_beats_random_schedules(rng):
    """100 random schedules per horizon, steps drawn from [1/l, 1/mu]"""
    mu, l = 1.0, 10.0
    for t in range(1, 13):
        best = worst_case_factor(chebyshev_schedule(t, mu, l))
        draws = rng.spawn(t).generator().uniform(1 / l, 1 / mu, size=(100, t))
        for steps in draws:
            assert best <= worst_case_factor(StepSchedule(steps=tuple(steps), mu=mu, l=l)) + 1e-9


def test_chebyshev_factor_non_increasing_in_horizon():
    factors = [worst_case_factor(chebyshev_schedule(t, 1.0, 10.0)) for t in range(1, 17)]
    assert all(b <= a + 1e-12 for a, b in zip(factors, factors[1:]))
