import numpy as np
import pytest

from cellfree import (
    ChannelRealization,
    PrecoderSet,
    Scenario,
    draw_channel,
    draw_channels,
    sinr_and_se,
    station_powers,
)
from errors import InvalidArgumentError
from numkernel import RngStream, sample_complex_gaussian
from precoding import (
    TrainerConfig,
    UnfoldedSchedule,
    compare_schedules,
    ensemble_objective,
    layer_trajectory,
    matched_filter_init,
    mrt,
    pgd_iterate,
    pgd_run,
    smoothed_min_rate,
    smoothed_min_rate_gradient,
    softmin,
    train_unfolded,
    wmmse_sum_se,
    zero_forcing,
)


def _cosine(a, b):
    return abs(np.vdot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b))


def _objective(h, w, scenario, tau=0.05):
    return smoothed_min_rate(h, PrecoderSet(w=w), scenario, tau)


# --- baselines ---------------------------------------------------------------

def test_mrt_single_user_closed_form():
    scenario = Scenario(num_stations=1, antennas_per_station=2, num_users=1, noise_power=1.0,
                        power_budget_per_station=4.0)
    h = ChannelRealization(h=np.array([[1.0, 0.0]], dtype=complex), scenario=scenario)
    w = mrt(h, scenario).w
    assert np.allclose(w, [[2.0], [0.0]], atol=1e-12)


def test_mrt_is_feasible_and_matched(case1, rng):
    for i in range(10):
        h = draw_channel(case1, rng.spawn(i))
        w = mrt(h, case1).w
        assert np.all(station_powers(PrecoderSet(w=w), case1) <= case1.power_budget_per_station + 1e-12)
        assert station_powers(PrecoderSet(w=w), case1).max() == pytest.approx(1.0, abs=1e-12)
        for k in range(case1.num_users):
            assert _cosine(w[:, k], h.h[k]) == pytest.approx(1.0, abs=1e-12)


def test_unicast_baselines_reject_multicast(case2, rng):
    h = draw_channel(case2, rng)
    for baseline in (mrt, zero_forcing):
        with pytest.raises(InvalidArgumentError):
            baseline(h, case2)
    with pytest.raises(InvalidArgumentError):
        wmmse_sum_se(h, case2)


def test_baselines_follow_permuted_unicast_labels(rng):
    """User k's precoder sits in column groups[k], whatever the labelling."""
    plain = Scenario(num_stations=2, antennas_per_station=2, num_users=3, noise_power=0.5,
                     power_budget_per_station=1.0)
    permuted = plain.model_copy(update={"group_assignment": [2, 0, 1]})
    groups = permuted.groups
    h = draw_channel(plain, rng).h
    h_plain = ChannelRealization(h=h, scenario=plain)
    h_permuted = ChannelRealization(h=h, scenario=permuted)

    for baseline in (mrt, zero_forcing, lambda c, s: wmmse_sum_se(c, s, max_iters=50)[0]):
        w_plain = baseline(h_plain, plain).w
        w_permuted = baseline(h_permuted, permuted).w
        assert np.allclose(w_permuted[:, groups], w_plain, atol=1e-10)
        assert sinr_and_se(h_permuted, PrecoderSet(w=w_permuted), permuted).total_se == pytest.approx(
            sinr_and_se(h_plain, PrecoderSet(w=w_plain), plain).total_se, rel=1e-10)

    w = mrt(h_permuted, permuted).w
    for k in range(permuted.num_users):
        assert _cosine(w[:, groups[k]], h[k]) == pytest.approx(1.0, abs=1e-12)


def test_zero_forcing_nulls_interference(case1, rng):
    h = draw_channel(case1, rng)
    w = zero_forcing(h, case1)
    amp = np.conj(h.h) @ w.w
    off_diagonal = amp - np.diag(np.diag(amp))
    assert np.max(np.abs(off_diagonal)) < 1e-10 * np.max(np.abs(amp))
    assert np.all(station_powers(w, case1) <= 1.0 + 1e-12)


def test_wmmse_single_user_recovers_mrt(rng):
    scenario = Scenario(num_stations=3, antennas_per_station=2, num_users=1, noise_power=1.0,
                        power_budget_per_station=1.0)
    h = draw_channel(scenario, rng)
    w, trace = wmmse_sum_se(h, scenario, max_iters=200)
    assert _cosine(w.w[:, 0], h.h[0]) >= 1 - 1e-6
    assert np.sum(np.abs(w.w) ** 2) == pytest.approx(3.0, abs=1e-6)
    assert trace.iterations >= 1


@pytest.mark.slow
def test_wmmse_monotone_and_beats_mrt(case1, rng):
    """100 seeded Case 1 channels at sigma^2 = 1"""
    wmmse_totals, mrt_totals = [], []
    for i in range(100):
        h = draw_channel(case1, rng.spawn(i))
        w, trace = wmmse_sum_se(h, case1)
        objective = [trace.initial_objective] + trace.objective
        assert np.all(np.diff(objective) >= -1e-9)
        assert trace.objective[-1] >= trace.initial_objective - 1e-9
        assert np.sum(np.abs(w.w) ** 2) <= case1.num_stations * case1.power_budget_per_station * (1 + 1e-9)
        wmmse_totals.append(sinr_and_se(h, w, case1).total_se)
        mrt_totals.append(sinr_and_se(h, mrt(h, case1), case1).total_se)
    assert np.mean(wmmse_totals) >= np.mean(mrt_totals)


def test_wmmse_rejects_bad_weights(case1, rng):
    h = draw_channel(case1, rng)
    with pytest.raises(InvalidArgumentError):
        wmmse_sum_se(h, case1, user_weights=[1.0, -1.0, 1.0, 1.0])


# --- smoothed objective and gradient ---------------------------------------

def test_softmin_closed_forms():
    assert softmin(np.array([1.0, 1.0]), 0.1) == pytest.approx(1 - 0.1 * np.log(2), abs=1e-12)
    assert softmin(np.array([1.0, 5.0]), 0.01) == pytest.approx(1.0, abs=1e-12)


def test_smoothed_min_rate_sandwich(small_multicast, rng):
    for i in range(20):
        h = draw_channel(small_multicast, rng.spawn(i))
        w = sample_complex_gaussian(4, 2, rng.spawn(100 + i))
        true_min = sinr_and_se(h, PrecoderSet(w=w), small_multicast).min_se
        value = _objective(h, w, small_multicast)
        assert true_min - 0.05 * np.log(small_multicast.num_users) - 1e-12 <= value <= true_min + 1e-12


def test_gradient_zero_at_origin(small_multicast, rng):
    h = draw_channel(small_multicast, rng)
    grad = smoothed_min_rate_gradient(h, PrecoderSet(w=np.zeros((4, 2), dtype=complex)), small_multicast)
    assert np.all(grad == 0)


def test_gradient_matches_finite_differences(small_multicast, rng):
    """Wirtinger convention: df/dconj(w) = (df/dRe + i df/dIm) / 2"""
    step = 1e-6
    for i in range(50):
        h = draw_channel(small_multicast, rng.spawn(i))
        w = 0.7 * sample_complex_gaussian(4, 2, rng.spawn(1000 + i))
        grad = smoothed_min_rate_gradient(h, PrecoderSet(w=w), small_multicast)
        numeric = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            e = np.zeros_like(w)
            e[idx] = step
            d_re = (_objective(h, w + e, small_multicast) - _objective(h, w - e, small_multicast)) / (2 * step)
            d_im = (_objective(h, w + 1j * e, small_multicast) - _objective(h, w - 1j * e, small_multicast)) / (2 * step)
            numeric[idx] = (d_re + 1j * d_im) / 2
        assert np.linalg.norm(grad - numeric) <= 1e-5 * np.linalg.norm(grad)


def test_single_user_gradient_parallel_to_channel(rng):
    scenario = Scenario(num_stations=2, antennas_per_station=2, num_users=1, noise_power=1.0,
                        power_budget_per_station=1.0)
    h = draw_channel(scenario, rng)
    w = PrecoderSet(w=0.3 * h.h.T.copy())
    grad = smoothed_min_rate_gradient(h, w, scenario)
    assert _cosine(grad[:, 0], h.h[0]) >= 1 - 1e-8


# --- projected gradient ascent ---------------------------------------------

def test_zero_steps_leave_start_point(case2, rng):
    h = draw_channel(case2, rng)
    w0 = matched_filter_init(h, case2)
    w, trace = pgd_iterate(h, case2, [0.0, 0.0, 0.0], w0)
    assert np.allclose(w.w, w0.w, atol=1e-12)
    assert trace.iterations == 3


def test_small_steps_ascend_and_stay_feasible(case2, rng):
    schedule = UnfoldedSchedule.constant(1e-4, 50)
    for i in range(20):
        h = draw_channel(case2, rng.spawn(i))
        w, trace = pgd_run(h, case2, schedule, matched_filter_init(h, case2))
        objective = [trace.initial_objective] + trace.objective
        assert np.all(np.diff(objective) >= -1e-12)
        assert np.all(station_powers(w, case2) <= case2.power_budget_per_station + 1e-9)
        assert np.all(np.asarray(trace.power) <= case2.num_stations * case2.power_budget_per_station + 1e-9)


def test_pgd_rejects_infeasible_start(case2, rng):
    h = draw_channel(case2, rng)
    w0 = PrecoderSet(w=10.0 * matched_filter_init(h, case2).w)
    with pytest.raises(InvalidArgumentError):
        pgd_run(h, case2, UnfoldedSchedule.constant(0.1, 3), w0)


def test_schedule_validation():
    with pytest.raises(ValueError):
        UnfoldedSchedule(layer_steps=[0.1, 0.0])
    with pytest.raises(ValueError):
        UnfoldedSchedule(layer_steps=[])


def test_layer_trajectory_starts_at_matched_filter(case2, rng):
    channels = draw_channels(case2, 5, rng)
    schedule = UnfoldedSchedule.constant(0.1, 4)
    curve = layer_trajectory(case2, schedule, channels)
    assert len(curve) == 5
    assert curve[-1] == pytest.approx(ensemble_objective(case2, schedule.layer_steps, channels), abs=1e-12)
    assert curve[0] == pytest.approx(ensemble_objective(case2, [], channels), abs=1e-12)


# --- training and evaluation ------------------------------------------------

def test_training_is_deterministic_and_dominates_grid(case2):
    config = TrainerConfig(max_evaluations=60)
    first = train_unfolded(case2, 3, 20, RngStream(seed=11), config)
    second = train_unfolded(case2, 3, 20, RngStream(seed=11), config)
    assert first.layer_steps == second.layer_steps
    assert first.training_objective == second.training_objective
    assert first.training_seed == 11
    assert first.training_objective == max(first.candidate_objectives)
    grid_values = first.candidate_objectives[:config.grid_points]
    assert first.training_objective >= max(grid_values) - 1e-9


def test_single_layer_training_matches_dense_grid(case2):
    rng = RngStream(seed=5)
    trained = train_unfolded(case2, 1, 20, rng)
    channels = draw_channels(case2, 20, rng)
    dense = max(ensemble_objective(case2, [10.0 ** e], channels) for e in np.linspace(-3.0, 0.0, 301))
    assert trained.training_objective >= dense - 1e-6


def test_compare_schedules_common_random_numbers(case2, rng):
    schedule = UnfoldedSchedule.constant(0.05, 3)
    rows = compare_schedules(case2, [("a", schedule), ("b", schedule)], 8, [0.0, 0.2], rng)
    assert [(r.scheme, r.tau_csi) for r in rows] == [("a", 0.0), ("a", 0.2), ("b", 0.0), ("b", 0.2)]
    for left, right in zip(rows[:2], rows[2:]):
        assert left.mean_min_se == right.mean_min_se
        assert left.mean_total_se == right.mean_total_se

    # tau_csi = 0 row is the plain evaluation on the true channels.
    channels = draw_channels(case2, 8, rng.spawn(0))
    min_se = []
    for h in channels:
        realization = ChannelRealization(h=h, scenario=case2)
        w, _ = pgd_iterate(realization, case2, schedule.layer_steps, matched_filter_init(realization, case2))
        min_se.append(sinr_and_se(realization, w, case2).min_se)
    assert rows[0].mean_min_se == pytest.approx(np.mean(min_se), rel=1e-10)
    assert rows[0].num_channels == 8


@pytest.mark.slow
def test_unfolded_schedule_dominates_and_is_robust(case2):
    """Case 2: L = 10, 200 training and 200 held-out channels"""
    rng = RngStream(seed=2)
    config = TrainerConfig()
    trained = train_unfolded(case2, 10, 200, rng.spawn(0), config)
    best_index = int(np.argmax(trained.candidate_objectives[:config.grid_points]))
    best_constant = UnfoldedSchedule.constant(10.0 ** config.grid()[best_index], 10)
    fixed = UnfoldedSchedule.constant(0.1, 10)
    rows = compare_schedules(case2, [("unfolded", trained), ("best_constant", best_constant), ("fixed", fixed)],
                             200, [0.0, 0.1, 0.2], rng.spawn(1))
    by_key = {(r.scheme, r.tau_csi): r for r in rows}

    unfolded = by_key[("unfolded", 0.0)].mean_objective
    assert unfolded >= by_key[("best_constant", 0.0)].mean_objective - 1e-6
    assert unfolded > by_key[("fixed", 0.0)].mean_objective

    curve = [by_key[("unfolded", tau)].mean_min_se for tau in (0.0, 0.1, 0.2)]
    assert curve[0] >= curve[1] >= curve[2]
    assert curve[2] >= 0.6 * curve[0]
