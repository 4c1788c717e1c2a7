import numpy as np
import pytest

from secest.attack import (
    Attacker,
    AttackerState,
    AttackSpec,
    advance_schedule,
    corrupt_observation,
    draw_weighted_subset,
    sensor_weights,
    stealth_transform,
    transform_innovation,
)
from secest.kalman import riccati_fixed_point
from secest.process_model import SystemModel


def scalar_pair():
    return SystemModel(A=[[0.5]], Q=[[1.0]], C=[[1.0], [1.0]], R=np.eye(2), N=2, k=1, n0=1)


def test_no_attack_is_identity(five_sensor_model):
    y = np.arange(10.0)
    assert corrupt_observation(y, np.ones(2), five_sensor_model, AttackSpec()) is not None
    np.testing.assert_array_equal(corrupt_observation(y, np.ones(2), five_sensor_model, AttackSpec()), y)


def test_zero_innovation_is_fixed():
    m = scalar_pair()
    x_ref = np.array([3.0])
    y = m.C @ (m.A @ x_ref)
    out = corrupt_observation(y, x_ref, m, AttackSpec("static", (0,)))
    np.testing.assert_array_equal(out, y)


def test_scalar_sign_flip_hand_value():
    m = scalar_pair()
    out = corrupt_observation(np.array([1.5, 7.0]), np.array([2.0]), m, AttackSpec("static", (0,)))
    # y + 2 C A x_ref - 2 y = 1.5 + 2 - 3
    assert out[0] == pytest.approx(0.5, abs=1e-15)
    assert out[0] - 1.0 == pytest.approx(-(1.5 - 1.0))
    assert out[1] == 7.0


def test_benign_rows_untouched(five_sensor_model):
    rng = np.random.default_rng(0)
    spec = AttackSpec("static", (1, 3))
    for _ in range(20):
        y = rng.normal(size=10)
        out = corrupt_observation(y, rng.normal(size=2), five_sensor_model, spec)
        benign = five_sensor_model.sensor_rows([0, 2, 4])
        assert np.array_equal(out[benign], y[benign])


def test_matches_sign_flip_formula(five_sensor_model):
    # y~ = y + 2 C_a A x_ref - 2 y_a, with C_a and y_a zero outside the attacked rows
    m = five_sensor_model
    rng = np.random.default_rng(1)
    y, x_ref = rng.normal(size=10), rng.normal(size=2)
    mask = m.row_mask([0, 2])
    C_a = m.C * mask[:, None]
    expected = y + 2 * C_a @ m.A @ x_ref - 2 * y * mask
    np.testing.assert_allclose(corrupt_observation(y, x_ref, m, AttackSpec("static", (0, 2))), expected, atol=1e-14)


def test_oversized_set_rejected(five_sensor_model):
    with pytest.raises(ValueError):
        corrupt_observation(np.zeros(10), np.zeros(2), five_sensor_model, AttackSpec("static", (0,)), attacked_set=(0, 1, 2))
    with pytest.raises(ValueError):
        Attacker(AttackSpec("static", (0, 1, 2)), five_sensor_model)


def test_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec("bogus")
    with pytest.raises(ValueError):
        AttackSpec("static")
    with pytest.raises(ValueError):
        AttackSpec("switching", T_switch=0)
    with pytest.raises(ValueError):
        AttackSpec("static", (0,), Sigma_b=-np.eye(2))


def test_spec_round_trip():
    spec = AttackSpec("static", (2, 0), knowledge="NK", Tmat=-np.eye(4), Sigma_b=0.1 * np.eye(4))
    again = AttackSpec.from_dict(spec.to_dict())
    assert again.attacked_set == (0, 2) and again.knowledge == "NK"
    assert np.array_equal(again.Tmat, spec.Tmat) and np.array_equal(again.Sigma_b, spec.Sigma_b)


def test_identity_and_negation_transforms():
    z = np.array([0.3, -1.2, 2.0])
    np.testing.assert_array_equal(transform_innovation(z, AttackSpec(Tmat=np.eye(3))), z)
    np.testing.assert_array_equal(transform_innovation(z, AttackSpec()), -z)
    Sigma = np.array([[2.0, 0.5, 0.1], [0.5, 1.0, 0.2], [0.1, 0.2, 3.0]])
    T = -np.eye(3)
    np.testing.assert_array_equal(T @ Sigma @ T.T, Sigma)


def test_pure_noise_transform_matches_covariance(five_sensor_model):
    Sigma = riccati_fixed_point(five_sensor_model).Sigma_z
    spec = AttackSpec(Tmat=np.zeros((10, 10)), Sigma_b=Sigma)
    rng = np.random.default_rng(3)
    Z = np.array([transform_innovation(np.zeros(10), spec, rng) for _ in range(100_000)])
    emp = Z.T @ Z / len(Z)
    d = np.sqrt(np.diag(Sigma))
    # relative to the scale of each entry's standard deviations
    assert np.max(np.abs(emp - Sigma) / np.outer(d, d)) < 0.05


def test_noise_needs_generator():
    with pytest.raises(ValueError):
        transform_innovation(np.zeros(2), AttackSpec(Sigma_b=np.eye(2)))


def test_stealth_transform_preserves_covariance(five_sensor_model):
    Sigma = riccati_fixed_point(five_sensor_model).Sigma_z
    rows = five_sensor_model.sensor_rows([0, 1])
    T = stealth_transform(Sigma, rows)
    np.testing.assert_allclose(T @ Sigma @ T.T, Sigma, atol=1e-12)
    benign = five_sensor_model.sensor_rows([2, 3, 4])
    np.testing.assert_array_equal(T[benign], np.eye(10)[benign])
    np.testing.assert_array_equal(stealth_transform(Sigma, np.arange(10)), -np.eye(10))


def test_first_draw_probability():
    w = sensor_weights(5)
    assert sum(1 / i**2 for i in range(1, 6)) == pytest.approx(1.46361, abs=1e-5)
    assert w[0] == pytest.approx(0.6832, abs=1e-4)
    assert w.sum() == pytest.approx(1.0)


def test_weighted_draw_frequencies():
    rng = np.random.default_rng(0)
    first = np.array([draw_weighted_subset(5, 1, rng)[0] for _ in range(20_000)])
    freq = np.bincount(first, minlength=5) / len(first)
    np.testing.assert_allclose(freq, sensor_weights(5), atol=0.01)
    for _ in range(100):
        S = draw_weighted_subset(5, 2, rng)
        assert len(set(S)) == 2 and list(S) == sorted(S)


def test_switching_draw_slots(five_sensor_model):
    spec = AttackSpec("switching", T_switch=20)
    state = AttackerState(rng=np.random.default_rng(0))
    for t in range(1, 101):
        before = state.current_set
        S = advance_schedule(state, t, spec, five_sensor_model)
        if (t - 1) % 20:
            assert S == before
        assert len(S) == five_sensor_model.n0
    assert [t for t, _ in state.draws] == [1, 21, 41, 61, 81]


def test_static_schedule_constant(five_sensor_model):
    spec = AttackSpec("static", (0, 4))
    state = AttackerState()
    assert all(advance_schedule(state, t, spec, five_sensor_model) == (0, 4) for t in range(1, 50))


def test_nk_attacker_runs_proxy_on_received(five_sensor_model):
    spec = AttackSpec("static", (0, 1), knowledge="NK")
    att = Attacker(spec, five_sensor_model, seed=0)
    assert att.state.proxy_filter is not None
    rng = np.random.default_rng(0)
    from secest.kalman import FilterState, kf_step

    oracle = FilterState(np.zeros(2), np.zeros((2, 2)))
    for _ in range(5):
        att.begin_slot()
        y = rng.normal(size=10)
        y_rx = att.corrupt(y)
        np.testing.assert_array_equal(y_rx, corrupt_observation(y, oracle.x_hat, five_sensor_model, spec))
        oracle, _ = kf_step(oracle, five_sensor_model, y_rx)
        np.testing.assert_allclose(att.state.proxy_filter.x_hat, oracle.x_hat, atol=1e-15)


def test_k_attacker_needs_reference(five_sensor_model):
    att = Attacker(AttackSpec("static", (0,)), five_sensor_model)
    assert att.state.proxy_filter is None
    att.begin_slot()
    with pytest.raises(ValueError):
        att.corrupt(np.zeros(10))
