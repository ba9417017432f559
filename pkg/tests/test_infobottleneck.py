import numpy as np
import pytest

from errors import InvalidArgumentError, NumericDomainError, ResourceLimitError
from infobottleneck import (
    DiscreteJoint,
    IBEncoder,
    best_deterministic_encoder,
    encoder_information,
    entropy,
    ib_solve,
    ib_sweep,
    mutual_information,
    perturbed_uniform_encoder,
    random_joint,
)
from numkernel import RngStream

SYMMETRIC = DiscreteJoint(np.array([[0.4, 0.1], [0.1, 0.4]]))


def _binary_entropy(p):
    return -p * np.log2(p) - (1 - p) * np.log2(1 - p)


def test_entropy_and_mutual_information_closed_forms():
    assert entropy(np.array([0.5, 0.5])) == pytest.approx(1.0)
    assert entropy(np.array([1.0, 0.0])) == 0.0
    assert mutual_information(SYMMETRIC) == pytest.approx(1 - _binary_entropy(0.2), abs=1e-12)
    independent = DiscreteJoint(np.outer([0.3, 0.7], [0.6, 0.4]))
    assert mutual_information(independent) == pytest.approx(0.0, abs=1e-12)
    assert mutual_information(DiscreteJoint(np.eye(2) / 2)) == pytest.approx(1.0, abs=1e-12)


def test_uniform_identity_joint_has_two_bits():
    assert mutual_information(DiscreteJoint(np.eye(4) / 4)) == pytest.approx(2.0, abs=1e-12)


def test_mutual_information_matches_entropy_decomposition(rng):
    joint = random_joint(3, 3, rng)
    expected = entropy(joint.p.sum(axis=1)) + entropy(joint.p.sum(axis=0)) - entropy(joint.p)
    assert mutual_information(joint) == pytest.approx(expected, abs=1e-12)


def test_joint_validation():
    with pytest.raises(NumericDomainError):
        DiscreteJoint(np.array([[0.5, 0.6], [0.0, 0.0]]))
    with pytest.raises(NumericDomainError):
        DiscreteJoint(np.array([[0.5, -0.1], [0.3, 0.3]]))
    with pytest.raises(NumericDomainError):
        DiscreteJoint(np.array([[0.5, 0.5], [0.0, 0.0]]))


def test_encoder_validation(rng):
    with pytest.raises(InvalidArgumentError):
        IBEncoder(np.array([[0.5, 0.6]]))
    q = perturbed_uniform_encoder(3, 4, rng)
    assert q.q.shape == (3, 4)
    assert np.allclose(q.q.sum(axis=1), 1.0)
    assert np.all(np.abs(q.q - 0.25) < 0.01)


def test_objective_monotone_on_random_joints(rng):
    for i in range(20):
        trial = rng.spawn(i)
        joint = random_joint(4, 3, trial.spawn(0))
        init = perturbed_uniform_encoder(4, 4, trial.spawn(1))
        result = ib_solve(joint, 2.0 + i % 5, 4, init)
        trace = np.asarray(result.objective_trace)
        assert np.all(np.diff(trace) <= 1e-10)
        assert len(trace) == result.iterations


def test_solved_encoder_rows_stay_on_simplex(rng):
    for i in range(5):
        trial = rng.spawn(i)
        joint = random_joint(4, 3, trial.spawn(0))
        result = ib_solve(joint, 0.5 + 3 * i, 3, perturbed_uniform_encoder(4, 3, trial.spawn(1)))
        q = result.encoder.q
        assert np.all(q >= 0)
        assert np.max(np.abs(q.sum(axis=1) - 1.0)) <= 1e-12


def test_relabelling_z_keeps_information_pair(rng):
    joint = random_joint(4, 3, rng.spawn(0))
    init = perturbed_uniform_encoder(4, 3, rng.spawn(1))
    perm = [2, 0, 1]
    q = init.q
    assert encoder_information(joint, q[:, perm]) == pytest.approx(encoder_information(joint, q), abs=1e-12)

    plain = ib_solve(joint, 4.0, 3, init)
    relabelled = ib_solve(joint, 4.0, 3, IBEncoder(q[:, perm]))
    assert relabelled.i_xz == pytest.approx(plain.i_xz, abs=1e-9)
    assert relabelled.i_zy == pytest.approx(plain.i_zy, abs=1e-9)


def test_single_symbol_bottleneck_carries_nothing(rng):
    joint = random_joint(4, 3, rng.spawn(0))
    points = ib_sweep(joint, [0.5, 5.0, 50.0], 1, 2, rng.spawn(1))
    for point in points:
        assert point.i_xz == pytest.approx(0.0, abs=1e-12)
        assert point.i_zy == pytest.approx(0.0, abs=1e-12)


def test_beta_zero_compresses_everything(rng):
    joint = random_joint(4, 3, rng)
    result = ib_solve(joint, 0.0, 4, perturbed_uniform_encoder(4, 4, rng.spawn(1)))
    assert result.i_xz <= 1e-9
    assert result.converged


def test_large_beta_keeps_relevant_information(rng):
    init = perturbed_uniform_encoder(2, 2, rng)
    result = ib_solve(SYMMETRIC, 100.0, 2, init)
    assert result.i_zy >= 0.99 * mutual_information(SYMMETRIC)


def test_solver_rejects_bad_inputs(rng):
    init = perturbed_uniform_encoder(2, 2, rng)
    with pytest.raises(InvalidArgumentError):
        ib_solve(SYMMETRIC, -1.0, 2, init)
    with pytest.raises(InvalidArgumentError):
        ib_solve(SYMMETRIC, 1.0, 3, init)


def test_encoder_information_bounds(rng):
    joint = random_joint(3, 4, rng)
    q = np.eye(3)
    i_xz, i_zy = encoder_information(joint, q)
    assert i_xz == pytest.approx(entropy(joint.p_x), abs=1e-12)
    assert i_zy == pytest.approx(mutual_information(joint), abs=1e-12)


def test_sweep_respects_data_processing(rng):
    joint = random_joint(4, 3, rng.spawn(0))
    betas = [0.5, 1.0, 2.0, 5.0, 10.0, 50.0]
    points = ib_sweep(joint, betas, 4, 3, rng.spawn(1), max_iters=500)
    i_xy = mutual_information(joint)
    assert [p.beta for p in points] == betas
    for point in points:
        assert point.i_zy <= min(i_xy, point.i_xz) + 1e-9
    i_zy = [p.i_zy for p in points]
    assert all(b >= a - 1e-12 for a, b in zip(i_zy, i_zy[1:]))


def test_sweep_is_deterministic():
    joint = SYMMETRIC
    first = ib_sweep(joint, [1.0, 10.0], 2, 2, RngStream(seed=4))
    second = ib_sweep(joint, [1.0, 10.0], 2, 2, RngStream(seed=4))
    assert first == second


def test_best_hard_map_on_symmetric_channel():
    q, value = best_deterministic_encoder(SYMMETRIC, 100.0, 2)
    assert value == pytest.approx(1.0 - 100.0 * mutual_information(SYMMETRIC), abs=1e-12)
    assert np.array_equal(q, np.eye(2))


def test_sweep_at_large_beta_is_no_worse_than_hard_maps(rng):
    points = ib_sweep(SYMMETRIC, [100.0], 2, 4, rng)
    _, hard = best_deterministic_encoder(SYMMETRIC, 100.0, 2)
    assert points[0].objective <= hard + 1e-6
    assert points[0].objective <= 0.0


def test_deterministic_search_limit():
    joint = DiscreteJoint(np.full((12, 2), 1 / 24))
    with pytest.raises(ResourceLimitError):
        best_deterministic_encoder(joint, 1.0, 4)
